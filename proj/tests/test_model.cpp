#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "ssmax/model.hpp"
#include "ssmax/rng.hpp"

using namespace ssx;

namespace {

ModelConfig tiny_cfg(ScoreMode mode) {
    ModelConfig cfg;
    cfg.num_layers = 2;
    cfg.num_heads = 2;
    cfg.hidden = 16;
    cfg.ffn = 24;
    cfg.vocab = 17;
    cfg.seq_len = 6;
    cfg.mode = mode;
    return cfg;
}

std::vector<int> tiny_tokens(const ModelConfig& cfg, int BT, uint64_t seed) {
    Rng rng(seed);
    std::vector<int> t(static_cast<size_t>(BT));
    for (auto& v : t) v = static_cast<int>(rng.below(static_cast<uint64_t>(cfg.vocab)));
    return t;
}

double model_loss(Model<double>& m, const std::vector<int>& tokens,
                  const std::vector<int>& targets, int B, int T, Workspace<double>& ws) {
    forward(m, std::span<const int>(tokens), B, T, ws);
    return cross_entropy(ws.logits, std::span<const int>(targets), B, T,
                         LossReduction::mean_tokens, nullptr)
        .value;
}

}  // namespace

TEST_CASE("zeroed output projections reduce to the embedding path") {
    auto cfg = tiny_cfg(ScoreMode::softmax);
    auto m = init_model<float>(cfg, 21);
    for (auto& L : m.params.layers) {
        L.wo.zero();
        L.w_down.zero();
    }
    std::vector<int> tokens = {1, 5, 9, 2, 0, 16};
    Workspace<float> ws;
    forward(m, std::span<const int>(tokens), 1, 6, ws);

    for (int t = 0; t < 6; ++t) {
        // residual branches vanish, so x_final is the raw embedding row
        std::vector<float> x(m.params.embed.row(tokens[t]),
                             m.params.embed.row(tokens[t]) + cfg.hidden);
        float ss = 0.f;
        for (float v : x) ss += v * v;
        const float inv = 1.f / std::sqrt(ss / cfg.hidden + static_cast<float>(kRmsEps));
        for (int c = 0; c < cfg.hidden; ++c) x[c] *= inv * m.params.norm_final[c];
        for (int vtok = 0; vtok < cfg.vocab; ++vtok) {
            float acc = 0.f;
            for (int c = 0; c < cfg.hidden; ++c) acc += x[c] * m.params.unembed.at(c, vtok);
            CHECK(ws.logits.at(t, vtok) == doctest::Approx(acc).epsilon(1e-4));
        }
    }
}

TEST_CASE("rmsnorm is scale invariant for positive scaling") {
    Rng rng(22);
    const int C = 32;
    std::vector<double> x(C), gain(C, 1.0), y1(C), y2(C), inv(1);
    for (auto& v : x) v = rng.gauss(0, 1);
    rmsnorm_rows(x.data(), gain.data(), y1.data(), inv.data(), 1, C);
    std::vector<double> xs(C);
    for (int c = 0; c < C; ++c) xs[c] = 3.7 * x[c];
    rmsnorm_rows(xs.data(), gain.data(), y2.data(), inv.data(), 1, C);
    for (int c = 0; c < C; ++c) CHECK(y1[c] == doctest::Approx(y2[c]).epsilon(1e-6));
}

TEST_CASE("uniform logits give ln(vocab) loss at every position") {
    Mat<float> logits(8, 256);  // all zeros -> uniform distribution
    std::vector<int> targets(8, 3);
    const auto out = cross_entropy(logits, std::span<const int>(targets), 2, 4,
                                   LossReduction::mean_tokens, nullptr);
    CHECK(out.value == doctest::Approx(std::log(256.0)).epsilon(1e-6));
    CHECK(out.value == doctest::Approx(5.545177).epsilon(1e-6));
    for (double p : out.per_position) CHECK(p == doctest::Approx(std::log(256.0)).epsilon(1e-6));
}

TEST_CASE("one-hot logits with growing margin drive the loss to zero") {
    double prev = 1e9;
    for (double margin : {2.0, 5.0, 10.0, 20.0}) {
        Mat<float> logits(1, 16);
        logits.at(0, 7) = static_cast<float>(margin);
        std::vector<int> targets = {7};
        const auto out = cross_entropy(logits, std::span<const int>(targets), 1, 1,
                                       LossReduction::mean_tokens, nullptr);
        CHECK(out.value < prev);
        prev = out.value;
    }
    CHECK(prev < 1e-6);
}

TEST_CASE("cross entropy equals a direct log-sum-exp reference") {
    Rng rng(23);
    const int B = 2, T = 3, V = 11;
    Mat<double> logits(B * T, V);
    for (auto& v : logits.v) v = rng.gauss(0, 2);
    std::vector<int> targets(B * T);
    for (auto& t : targets) t = static_cast<int>(rng.below(V));

    const auto out = cross_entropy(logits, std::span<const int>(targets), B, T,
                                   LossReduction::mean_tokens, nullptr);

    double expect = 0.0;
    for (int r = 0; r < B * T; ++r) {
        double sum = 0.0;
        for (int c = 0; c < V; ++c) sum += std::exp(logits.at(r, c));
        expect += std::log(sum) - logits.at(r, targets[r]);
    }
    expect /= B * T;
    CHECK(out.value == doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("loss rejects mismatched lengths") {
    Mat<float> logits(4, 8);
    std::vector<int> targets(3, 0);
    CHECK_THROWS_AS((void)cross_entropy(logits, std::span<const int>(targets), 1, 4,
                                        LossReduction::mean_tokens, nullptr),
                    std::domain_error);
}

TEST_CASE("forward rejects out-of-range tokens") {
    auto cfg = tiny_cfg(ScoreMode::softmax);
    auto m = init_model<float>(cfg, 1);
    Workspace<float> ws;
    std::vector<int> bad = {0, 1, 17, 2, 3, 4};
    CHECK_THROWS_AS(forward(m, std::span<const int>(bad), 1, 6, ws), std::domain_error);
}

TEST_CASE("full-model gradients match finite differences in every mode") {
    for (auto mode : {ScoreMode::softmax, ScoreMode::ssmax, ScoreMode::ssmax_bias,
                      ScoreMode::pn_probe}) {
        CAPTURE(score_mode_name(mode));
        auto cfg = tiny_cfg(mode);
        auto m = init_model<double>(cfg, 31);
        // move the learnable scalars off their init so their grads are generic
        for (auto& L : m.params.layers) {
            for (auto& v : L.head_s) v = 0.8;
            for (auto& v : L.head_b) v = 0.15;
        }
        for (size_t i = 0; i < m.params.pn.size(); ++i)
            m.params.pn[i] = 1.0 + 0.05 * static_cast<double>(i);

        const int B = 2, T = cfg.seq_len;
        const auto tokens = tiny_tokens(cfg, B * T, 71);
        auto targets = tokens;
        std::rotate(targets.begin(), targets.begin() + 1, targets.end());

        Workspace<double> ws;
        forward(m, std::span<const int>(tokens), B, T, ws);
        (void)cross_entropy(ws.logits, std::span<const int>(targets), B, T,
                            LossReduction::mean_tokens, &ws.dlogits);
        ParamSet<double> grads;
        alloc_params(cfg, grads);
        zero_params(cfg, grads);
        backward(m, std::span<const int>(tokens), B, T, ws, grads);

        // central differences over a pseudo-random subset of parameters
        Rng pick(97);
        Workspace<double> ws2;
        visit_params(cfg, m.params, [&](const char* name, double* data, size_t len, int) {
            double* gdata = nullptr;
            visit_params(cfg, grads, [&](const char* gname, double* gd, size_t, int) {
                if (std::string(gname) == name) gdata = gd;
            });
            REQUIRE(gdata != nullptr);
            const size_t stride = len <= 8 ? 1 : len / 8;
            for (size_t i = pick.below(stride); i < len; i += stride) {
                const double h = 1e-5;
                const double orig = data[i];
                data[i] = orig + h;
                const double lp = model_loss(m, tokens, targets, B, T, ws2);
                data[i] = orig - h;
                const double lm = model_loss(m, tokens, targets, B, T, ws2);
                data[i] = orig;
                const double fd = (lp - lm) / (2 * h);
                const double denom = std::max({std::abs(fd), std::abs(gdata[i]), 1e-3});
                CAPTURE(name);
                CAPTURE(i);
                CHECK(std::abs(fd - gdata[i]) / denom < 1e-4);
            }
        });
    }
}

TEST_CASE("set_rope_theta changes only the config") {
    auto cfg = tiny_cfg(ScoreMode::ssmax);
    auto m = init_model<float>(cfg, 41);
    std::vector<int> tokens = {1, 2, 3, 4, 5, 6};
    Workspace<float> ws;

    forward(m, std::span<const int>(tokens), 1, 6, ws);
    const auto base = ws.logits;

    set_rope_theta(m, cfg.rope_theta);
    forward(m, std::span<const int>(tokens), 1, 6, ws);
    for (size_t i = 0; i < base.v.size(); ++i) CHECK(ws.logits.v[i] == base.v[i]);

    set_rope_theta(m, 50.0 * cfg.rope_theta);
    forward(m, std::span<const int>(tokens), 1, 6, ws);
    // position 0 has zero angle regardless of theta
    for (int c = 0; c < cfg.vocab; ++c) CHECK(ws.logits.at(0, c) == base.at(0, c));
    // later positions must actually feel the change
    bool changed = false;
    for (int c = 0; c < cfg.vocab; ++c)
        if (ws.logits.at(3, c) != base.at(3, c)) changed = true;
    CHECK(changed);

    CHECK_THROWS_AS(set_rope_theta(m, 0.0), std::invalid_argument);
}

TEST_CASE("replace_softmax_with_ssmax initializes s to N over sum of log n") {
    auto cfg = tiny_cfg(ScoreMode::softmax);
    {
        auto m = init_model<double>(cfg, 51);
        replace_softmax_with_ssmax(m, 1024);
        CHECK(m.config.mode == ScoreMode::ssmax);
        for (auto& L : m.params.layers)
            for (double s : L.head_s) CHECK(s == doctest::Approx(0.168).epsilon(0.005));
    }
    {
        auto m = init_model<double>(cfg, 51);
        replace_softmax_with_ssmax(m, 2);
        for (double s : m.params.layers[0].head_s)
            CHECK(s == doctest::Approx(2.885390).epsilon(1e-6));
    }
    {
        auto m = init_model<double>(cfg, 51);
        CHECK_THROWS_AS(replace_softmax_with_ssmax(m, 1), std::invalid_argument);
        auto m2 = init_model<double>(ModelConfig{tiny_cfg(ScoreMode::ssmax)}, 51);
        CHECK_THROWS_AS(replace_softmax_with_ssmax(m2, 64), std::invalid_argument);
    }
}

TEST_CASE("replacement preserves all other weights bitwise") {
    auto cfg = tiny_cfg(ScoreMode::softmax);
    auto m = init_model<float>(cfg, 61);
    auto before = m;
    replace_softmax_with_ssmax(m, 64);

    CHECK(m.params.embed.v == before.params.embed.v);
    CHECK(m.params.unembed.v == before.params.unembed.v);
    for (int l = 0; l < cfg.num_layers; ++l) {
        CHECK(m.params.layers[l].wq.v == before.params.layers[l].wq.v);
        CHECK(m.params.layers[l].wo.v == before.params.layers[l].wo.v);
        CHECK(m.params.layers[l].w_down.v == before.params.layers[l].w_down.v);
        CHECK(m.params.layers[l].norm_attn == before.params.layers[l].norm_attn);
    }
}

TEST_CASE("unit-scale hook reproduces the softmax model bitwise after replacement") {
    auto cfg = tiny_cfg(ScoreMode::softmax);
    auto m = init_model<float>(cfg, 62);
    std::vector<int> tokens = {3, 1, 4, 1, 5, 9};
    Workspace<float> ws;
    forward(m, std::span<const int>(tokens), 1, 6, ws);
    const auto base = ws.logits;

    replace_softmax_with_ssmax(m, 64);
    m.config.force_unit_scale = true;
    Workspace<float> ws2;
    forward(m, std::span<const int>(tokens), 1, 6, ws2);
    for (size_t i = 0; i < base.v.size(); ++i) CHECK(ws2.logits.v[i] == base.v[i]);
}

TEST_CASE("parameter accounting across modes") {
    auto cfg_a = tiny_cfg(ScoreMode::softmax);
    auto cfg_b = tiny_cfg(ScoreMode::ssmax);
    auto cfg_d = tiny_cfg(ScoreMode::ssmax_bias);
    auto cfg_p = tiny_cfg(ScoreMode::pn_probe);
    const size_t base = count_params<float>(cfg_a);
    const size_t lh = static_cast<size_t>(cfg_a.num_layers) * cfg_a.num_heads;
    CHECK(count_params<float>(cfg_b) == base + lh);
    CHECK(count_params<float>(cfg_d) == base + 2 * lh);
    CHECK(count_params<float>(cfg_p) == base + 2 * lh + static_cast<size_t>(cfg_p.seq_len));
}

TEST_CASE("no-scale mode equals ssmax with s frozen at 1, bitwise") {
    auto cfg_c = tiny_cfg(ScoreMode::ssmax_no_scale);
    auto cfg_b = tiny_cfg(ScoreMode::ssmax);
    auto mc = init_model<float>(cfg_c, 63);
    auto mb = init_model<float>(cfg_b, 63);  // same seed: shared weights identical

    std::vector<int> tokens = {2, 7, 1, 8, 2, 8};
    Workspace<float> wsc, wsb;
    forward(mc, std::span<const int>(tokens), 1, 6, wsc);
    forward(mb, std::span<const int>(tokens), 1, 6, wsb);
    for (size_t i = 0; i < wsc.logits.v.size(); ++i) CHECK(wsc.logits.v[i] == wsb.logits.v[i]);
}

TEST_CASE("cached forward matches the batched training forward") {
    for (auto mode : {ScoreMode::softmax, ScoreMode::ssmax}) {
        auto cfg = tiny_cfg(mode);
        auto m = init_model<float>(cfg, 64);
        std::vector<int> tokens = {5, 3, 11, 0, 16, 7};
        Workspace<float> ws;
        forward(m, std::span<const int>(tokens), 1, 6, ws);

        KVCache<float> cache;
        cache.init(cfg, 8);
        // prefill 4, then decode 2 one at a time
        const auto l1 = forward_cached(m, cache, std::span<const int>(tokens.data(), 4));
        const auto l2 = forward_cached(m, cache, std::span<const int>(tokens.data() + 4, 1));
        const auto l3 = forward_cached(m, cache, std::span<const int>(tokens.data() + 5, 1));

        for (int t = 0; t < 4; ++t)
            for (int c = 0; c < cfg.vocab; ++c)
                CHECK(l1.at(t, c) == doctest::Approx(ws.logits.at(t, c)).epsilon(2e-4));
        for (int c = 0; c < cfg.vocab; ++c) {
            CHECK(l2.at(0, c) == doctest::Approx(ws.logits.at(4, c)).epsilon(2e-4));
            CHECK(l3.at(0, c) == doctest::Approx(ws.logits.at(5, c)).epsilon(2e-4));
        }
    }
}

TEST_CASE("init is deterministic and mode-independent for shared weights") {
    auto cfg_a = tiny_cfg(ScoreMode::softmax);
    auto cfg_b = tiny_cfg(ScoreMode::ssmax_bias);
    auto m1 = init_model<float>(cfg_a, 99);
    auto m2 = init_model<float>(cfg_a, 99);
    auto m3 = init_model<float>(cfg_b, 99);
    CHECK(m1.params.embed.v == m2.params.embed.v);
    CHECK(m1.params.unembed.v == m2.params.unembed.v);
    CHECK(m1.params.embed.v == m3.params.embed.v);
    CHECK(m1.params.layers[1].w_gate.v == m3.params.layers[1].w_gate.v);
    for (float s : m3.params.layers[0].head_s) CHECK(s == 1.0f);
    for (float b : m3.params.layers[0].head_b) CHECK(b == 0.0f);
}

TEST_CASE("pn mode rejects rows beyond the table length") {
    auto cfg = tiny_cfg(ScoreMode::pn_probe);
    cfg.seq_len = 4;  // table shorter than the sequence below
    auto m = init_model<float>(cfg, 65);
    std::vector<int> tokens = {1, 2, 3, 4, 5, 6};
    Workspace<float> ws;
    CHECK_THROWS_AS(forward(m, std::span<const int>(tokens), 1, 6, ws), std::out_of_range);
}
