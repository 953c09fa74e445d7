#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "ssmax/checkpoint.hpp"
#include "ssmax/cli.hpp"

using namespace ssx;
namespace fs = std::filesystem;

namespace {

int run(std::initializer_list<const char*> args) {
    std::vector<const char*> argv = {"ssmax"};
    argv.insert(argv.end(), args.begin(), args.end());
    return run_cli(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::path("cli_scratch") / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str(const std::string& sub = "") const { return (path / sub).string(); }
};

void write_micro_config(const std::string& path, int seq_len = 32) {
    std::ofstream f(path);
    f << "model.layers = 1\nmodel.heads = 2\nmodel.hidden = 16\nmodel.ffn = 32\n";
    f << "model.seq_len = " << seq_len << "\n";
    f << "train.steps = 2\ntrain.batch = 2\ntrain.warmup = 1\n";
}

}  // namespace

TEST_CASE("missing required flags exit with usage code 2") {
    CHECK(run({"fading-curve", "--out", "x.csv"}) == 2);  // no --sizes
    CHECK(run({"train", "--out", "x"}) == 2);             // no --variant
    CHECK(run({"nonsense"}) == 2);
}

TEST_CASE("fig1 rows carry the closed-form values") {
    TempDir dir("fig1");
    const auto out = dir.str("fading.csv");
    CHECK(run({"fading-curve", "--pattern", "fig1", "--sizes", "10,1000", "--out",
               out.c_str()}) == 0);
    const auto text = slurp(out);
    CHECK(text.find("n,softmax_max,ssmax_max") == 0);
    CHECK(text.find("10,0.942825") != std::string::npos);
    CHECK(text.find("1000,0.129345") != std::string::npos);
    CHECK(text.find("0.999645") != std::string::npos);
    CHECK(fs::exists(out + ".manifest.json"));
}

TEST_CASE("unknown pattern and unknown variant are usage errors") {
    TempDir dir("bad");
    CHECK(run({"fading-curve", "--pattern", "fig9", "--sizes", "10", "--out",
               dir.str("x.csv").c_str()}) == 2);
    write_micro_config(dir.str("cfg.kv"));
    CHECK(run({"train", "--config", dir.str("cfg.kv").c_str(), "--variant", "z", "--out",
               dir.str("t").c_str()}) == 2);
}

TEST_CASE("a zero-step run emits the initialization checkpoint") {
    TempDir dir("zerostep");
    write_micro_config(dir.str("cfg.kv"));
    CHECK(run({"train", "--config", dir.str("cfg.kv").c_str(), "--variant", "b", "--out",
               dir.str("run").c_str(), "--steps", "0"}) == 0);
    const auto ck = load_checkpoint(dir.str("run/checkpoint.bin"));
    CHECK(ck.step == 0);
    const auto fresh = init_model<float>(ck.model.config, 1);  // train.seed default 1
    CHECK(param_hash(ck.model) == param_hash(fresh));
}

TEST_CASE("equal seeds reproduce the loss CSV bitwise") {
    TempDir dir("repro");
    write_micro_config(dir.str("cfg.kv"));
    for (const char* sub : {"r1", "r2"})
        CHECK(run({"train", "--config", dir.str("cfg.kv").c_str(), "--variant", "b", "--out",
                   dir.str(sub).c_str(), "--seed", "7"}) == 0);
    CHECK(slurp(dir.str("r1/loss.csv")) == slurp(dir.str("r2/loss.csv")));
    CHECK(param_hash(load_checkpoint(dir.str("r1/checkpoint.bin")).model) ==
          param_hash(load_checkpoint(dir.str("r2/checkpoint.bin")).model));
}

TEST_CASE("variant f manifest records the switch point and warmup") {
    TempDir dir("varf");
    {
        std::ofstream f(dir.str("cfg.kv"));
        f << "model.layers = 1\nmodel.heads = 2\nmodel.hidden = 16\nmodel.ffn = 32\n";
        f << "model.seq_len = 32\ntrain.steps = 200\ntrain.batch = 1\ntrain.warmup = 5\n";
        f << "train.lr = 1e-4\n";
    }
    CHECK(run({"train", "--config", dir.str("cfg.kv").c_str(), "--variant", "f", "--out",
               dir.str("run").c_str()}) == 0);
    const auto man = nlohmann::json::parse(slurp(dir.str("run/manifest.json")));
    CHECK(man.at("switch_step").get<long>() == 175);          // 7/8 of 200
    CHECK(man.at("post_switch_warmup").get<long>() == 1);     // (200-175)/25
    const auto ck = load_checkpoint(dir.str("run/checkpoint.bin"));
    CHECK(ck.model.config.mode == ScoreMode::ssmax);
}

TEST_CASE("posloss on a uniform-logit checkpoint is flat at ln(vocab)") {
    TempDir dir("posloss");
    ModelConfig cfg;
    cfg.num_layers = 1;
    cfg.num_heads = 2;
    cfg.hidden = 16;
    cfg.ffn = 32;
    cfg.seq_len = 32;
    auto m = init_model<float>(cfg, 3);
    m.params.unembed.zero();
    save_checkpoint(dir.str("uniform.bin"), m);
    CHECK(run({"eval", "--checkpoint", dir.str("uniform.bin").c_str(), "--protocol", "posloss",
               "--theta-mult", "1", "--max-len", "16", "--num-seq", "2", "--out",
               dir.str("out").c_str()}) == 0);
    std::ifstream f(dir.str("out/posloss.csv"));
    std::string line;
    std::getline(f, line);
    CHECK(line == "position,loss");
    int rows = 0;
    while (std::getline(f, line)) {
        const auto comma = line.find(',');
        const double v = std::stod(line.substr(comma + 1));
        CHECK(v == doctest::Approx(std::log(256.0)).epsilon(1e-4));
        ++rows;
    }
    CHECK(rows == 16);
}

TEST_CASE("fitpn rejects checkpoints that are not pn_probe") {
    TempDir dir("fitpn");
    ModelConfig cfg;
    cfg.num_layers = 1;
    cfg.num_heads = 2;
    cfg.hidden = 16;
    cfg.ffn = 32;
    cfg.seq_len = 32;
    auto m = init_model<float>(cfg, 4);
    save_checkpoint(dir.str("a.bin"), m);
    CHECK(run({"eval", "--checkpoint", dir.str("a.bin").c_str(), "--protocol", "fitpn", "--out",
               dir.str("out").c_str()}) == 3);

    cfg.mode = ScoreMode::pn_probe;
    auto mp = init_model<float>(cfg, 4);
    for (size_t i = 0; i < mp.params.pn.size(); ++i)
        mp.params.pn[i] = static_cast<float>(2.0 * std::log(double(i + 1)) + 0.5);
    save_checkpoint(dir.str("p.bin"), mp);
    CHECK(run({"eval", "--checkpoint", dir.str("p.bin").c_str(), "--protocol", "fitpn", "--out",
               dir.str("out2").c_str()}) == 0);
    const auto text = slurp(dir.str("out2/fitpn.csv"));
    CHECK(text.find("a1,a2,r2") == 0);
    const auto summary = nlohmann::json::parse(slurp(dir.str("out2/summary.json")));
    CHECK(summary.at("r2").get<double>() > 0.999);
}

TEST_CASE("stale checkpoint versions give an explicit migration error") {
    TempDir dir("stale");
    ModelConfig cfg;
    cfg.num_layers = 1;
    cfg.num_heads = 2;
    cfg.hidden = 16;
    cfg.ffn = 32;
    cfg.seq_len = 32;
    auto m = init_model<float>(cfg, 5);
    save_checkpoint(dir.str("v.bin"), m);
    {
        std::fstream f(dir.str("v.bin"), std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(8);
        const uint32_t bad = 3;
        f.write(reinterpret_cast<const char*>(&bad), 4);
    }
    CHECK(run({"eval", "--checkpoint", dir.str("v.bin").c_str(), "--protocol", "posloss",
               "--out", dir.str("out").c_str()}) == 3);
}

TEST_CASE("unknown config keys are rejected as data errors") {
    TempDir dir("badkey");
    {
        std::ofstream f(dir.str("cfg.kv"));
        f << "model.hiden = 16\n";  // typo
    }
    CHECK(run({"train", "--config", dir.str("cfg.kv").c_str(), "--variant", "a", "--out",
               dir.str("run").c_str()}) == 3);
}
