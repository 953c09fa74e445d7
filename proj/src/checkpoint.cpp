#include "ssmax/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <vector>

namespace ssx {

namespace {

constexpr char kMagic[8] = {'S', 'S', 'X', 'C', 'K', 'P', 'T', '\0'};

nlohmann::json config_to_json(const ModelConfig& cfg) {
    return {{"num_layers", cfg.num_layers}, {"num_heads", cfg.num_heads},
            {"hidden", cfg.hidden},         {"ffn", cfg.ffn},
            {"vocab", cfg.vocab},           {"rope_theta", cfg.rope_theta},
            {"mode", score_mode_name(cfg.mode)}, {"seq_len", cfg.seq_len}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.num_layers = j.at("num_layers").get<int>();
    cfg.num_heads = j.at("num_heads").get<int>();
    cfg.hidden = j.at("hidden").get<int>();
    cfg.ffn = j.at("ffn").get<int>();
    cfg.vocab = j.at("vocab").get<int>();
    cfg.rope_theta = j.at("rope_theta").get<double>();
    cfg.mode = parse_score_mode(j.at("mode").get<std::string>());
    cfg.seq_len = j.at("seq_len").get<int>();
    cfg.validate();
    return cfg;
}

void write_all(std::ofstream& f, const void* data, size_t n) {
    f.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

void read_all(std::ifstream& f, void* data, size_t n) {
    f.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(f.gcount()) != n)
        throw std::runtime_error("checkpoint: truncated file");
}

}  // namespace

void save_checkpoint(const std::string& path, const Model<float>& model,
                     const AdamState<float>* opt, long step) {
    auto views = collect_params(model.config, const_cast<ParamSet<float>&>(model.params));

    nlohmann::json header;
    header["config"] = config_to_json(model.config);
    header["step"] = step;
    header["has_optimizer"] = opt != nullptr;
    auto& tensors = header["tensors"] = nlohmann::json::array();
    for (const auto& pv : views)
        tensors.push_back({{"name", pv.name}, {"len", pv.len}, {"rank", pv.rank}});
    const std::string hs = header.dump();

    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("checkpoint: cannot open " + tmp);
        write_all(f, kMagic, 8);
        const uint32_t ver = kCheckpointVersion;
        write_all(f, &ver, 4);
        const uint64_t hlen = hs.size();
        write_all(f, &hlen, 8);
        write_all(f, hs.data(), hs.size());
        for (const auto& pv : views) write_all(f, pv.data, pv.len * sizeof(float));
        if (opt) {
            if (opt->m.size() != views.size())
                throw std::runtime_error("checkpoint: optimizer state layout mismatch");
            for (size_t i = 0; i < views.size(); ++i)
                write_all(f, opt->m[i].data(), opt->m[i].size() * sizeof(float));
            for (size_t i = 0; i < views.size(); ++i)
                write_all(f, opt->v[i].data(), opt->v[i].size() * sizeof(float));
        }
        if (!f) throw std::runtime_error("checkpoint: write failed for " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw std::runtime_error("checkpoint: rename failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[8];
    read_all(f, magic, 8);
    if (std::memcmp(magic, kMagic, 8) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    uint32_t ver = 0;
    read_all(f, &ver, 4);
    if (ver != kCheckpointVersion)
        throw std::runtime_error("checkpoint: version " + std::to_string(ver) +
                                 " needs migration; this build reads version " +
                                 std::to_string(kCheckpointVersion));
    uint64_t hlen = 0;
    read_all(f, &hlen, 8);
    std::string hs(hlen, '\0');
    read_all(f, hs.data(), hlen);
    const auto header = nlohmann::json::parse(hs);

    Checkpoint ck;
    ck.model.config = config_from_json(header.at("config"));
    ck.step = header.at("step").get<long>();
    alloc_params(ck.model.config, ck.model.params);
    auto views = collect_params(ck.model.config, ck.model.params);

    const auto& tensors = header.at("tensors");
    if (tensors.size() != views.size())
        throw std::runtime_error("checkpoint: tensor list mismatch");
    for (size_t i = 0; i < views.size(); ++i) {
        const auto& tj = tensors[i];
        if (tj.at("name").get<std::string>() != views[i].name ||
            tj.at("len").get<size_t>() != views[i].len)
            throw std::runtime_error("checkpoint: tensor layout mismatch at " + views[i].name);
        read_all(f, views[i].data, views[i].len * sizeof(float));
    }
    if (header.at("has_optimizer").get<bool>()) {
        AdamState<float> st;
        st.init(ck.model.config, ck.model.params);
        st.step = ck.step;
        for (size_t i = 0; i < views.size(); ++i)
            read_all(f, st.m[i].data(), st.m[i].size() * sizeof(float));
        for (size_t i = 0; i < views.size(); ++i)
            read_all(f, st.v[i].data(), st.v[i].size() * sizeof(float));
        ck.opt = std::move(st);
    }
    return ck;
}

uint64_t param_hash(const Model<float>& model) {
    uint64_t h = 1469598103934665603ULL;
    auto mix = [&](const void* data, size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 1099511628211ULL;
        }
    };
    auto views = collect_params(model.config, const_cast<ParamSet<float>&>(model.params));
    for (const auto& pv : views) mix(pv.data, pv.len * sizeof(float));
    return h;
}

}  // namespace ssx
