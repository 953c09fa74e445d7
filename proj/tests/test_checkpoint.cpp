#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "ssmax/checkpoint.hpp"

using namespace ssx;

namespace {

ModelConfig small_cfg(ScoreMode mode) {
    ModelConfig cfg;
    cfg.num_layers = 2;
    cfg.num_heads = 2;
    cfg.hidden = 8;
    cfg.ffn = 12;
    cfg.vocab = 19;
    cfg.seq_len = 5;
    cfg.mode = mode;
    return cfg;
}

std::string tmp_path(const char* name) { return std::string("ckpt_test_") + name + ".bin"; }

}  // namespace

TEST_CASE("checkpoint round trip is byte exact") {
    for (auto mode : {ScoreMode::softmax, ScoreMode::ssmax_bias, ScoreMode::pn_probe}) {
        auto cfg = small_cfg(mode);
        auto m = init_model<float>(cfg, 123);
        AdamState<float> st;
        st.init(cfg, m.params);
        for (auto& t : st.m)
            for (auto& v : t) v = 0.125f;
        st.step = 42;

        const auto path = tmp_path(score_mode_name(mode));
        save_checkpoint(path, m, &st, 42);
        const auto ck = load_checkpoint(path);

        CHECK(ck.step == 42);
        CHECK(ck.model.config.mode == mode);
        CHECK(ck.model.config.rope_theta == cfg.rope_theta);
        CHECK(param_hash(ck.model) == param_hash(m));
        REQUIRE(ck.opt.has_value());
        CHECK(ck.opt->m == st.m);
        CHECK(ck.opt->v == st.v);

        // saving the loaded model again reproduces the same file bytes
        const auto path2 = tmp_path("again");
        save_checkpoint(path2, ck.model, &*ck.opt, ck.step);
        std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
        std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
        std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
        CHECK(b1 == b2);
        std::remove(path.c_str());
        std::remove(path2.c_str());
    }
}

TEST_CASE("checkpoint without optimizer state") {
    auto cfg = small_cfg(ScoreMode::ssmax);
    auto m = init_model<float>(cfg, 7);
    const auto path = tmp_path("noopt");
    save_checkpoint(path, m, nullptr, 0);
    const auto ck = load_checkpoint(path);
    CHECK(!ck.opt.has_value());
    CHECK(param_hash(ck.model) == param_hash(m));
    std::remove(path.c_str());
}

TEST_CASE("unknown version is rejected with a migration error") {
    auto cfg = small_cfg(ScoreMode::softmax);
    auto m = init_model<float>(cfg, 9);
    const auto path = tmp_path("ver");
    save_checkpoint(path, m);
    {
        std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(8);
        const uint32_t bad = 99;
        f.write(reinterpret_cast<const char*>(&bad), 4);
    }
    CHECK_THROWS_WITH_AS(load_checkpoint(path),
                         doctest::Contains("migration"), std::runtime_error);
    std::remove(path.c_str());
}

TEST_CASE("param hash tracks content") {
    auto cfg = small_cfg(ScoreMode::softmax);
    auto m = init_model<float>(cfg, 10);
    const auto h0 = param_hash(m);
    m.params.embed.v[3] += 1.f;
    CHECK(param_hash(m) != h0);
}
