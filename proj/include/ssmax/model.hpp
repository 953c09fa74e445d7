#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <type_traits>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssmax/attention.hpp"
#include "ssmax/kernels.hpp"
#include "ssmax/rng.hpp"
#include "ssmax/rope.hpp"
#include "ssmax/tensor.hpp"

namespace ssx {

inline constexpr double kRmsEps = 1e-6;
inline constexpr double kInitStd = 0.02;

// Decoder-only transformer: pre-norm residual blocks with RoPE attention and
// a SwiGLU feed-forward, RMSNorm, no projection biases, untied embeddings.
struct ModelConfig {
    int num_layers = 4;
    int num_heads = 4;
    int hidden = 128;
    int ffn = 384;
    int vocab = 256;
    double rope_theta = 10000.0;
    ScoreMode mode = ScoreMode::softmax;
    int seq_len = 256;  // training sequence length N

    // Test hook: forces the per-row logit scale to 1 in every mode, which
    // collapses every variant onto plain softmax.
    bool force_unit_scale = false;

    int head_dim() const { return hidden / num_heads; }

    void validate() const {
        if (num_layers < 1 || num_heads < 1 || hidden < 1 || ffn < 1 || vocab < 2 || seq_len < 1)
            throw std::invalid_argument("ModelConfig: all sizes must be positive");
        if (hidden % num_heads != 0)
            throw std::invalid_argument("ModelConfig: hidden must be divisible by num_heads");
        if (head_dim() % 2 != 0)
            throw std::invalid_argument("ModelConfig: head dimension must be even for RoPE");
        if (!(rope_theta > 0)) throw std::invalid_argument("ModelConfig: rope_theta must be > 0");
    }
};

template <class T>
struct LayerParams {
    Mat<T> wq, wk, wv, wo;        // [C, C]
    Mat<T> w_gate, w_up, w_down;  // [C, F], [C, F], [F, C]
    std::vector<T> norm_attn, norm_ffn;  // [C]
    std::vector<T> head_s, head_b;       // [H]; present per mode
};

template <class T>
struct ParamSet {
    Mat<T> embed;    // [V, C]
    std::vector<LayerParams<T>> layers;
    std::vector<T> norm_final;  // [C]
    Mat<T> unembed;  // [C, V]
    std::vector<T> pn;  // [N]; pn_probe mode only
};

template <class T>
struct Model {
    ModelConfig config;
    ParamSet<T> params;
};

// Fixed enumeration of every named tensor: fn(name, data, len, rank).
// The order defines the checkpoint layout and the optimizer state layout.
template <class T, class Fn>
void visit_params(const ModelConfig& cfg, ParamSet<T>& p, Fn&& fn) {
    fn("embed", p.embed.v.data(), p.embed.v.size(), 2);
    for (int l = 0; l < cfg.num_layers; ++l) {
        auto& L = p.layers[static_cast<size_t>(l)];
        const std::string pre = "layers." + std::to_string(l) + ".";
        fn((pre + "wq").c_str(), L.wq.v.data(), L.wq.v.size(), 2);
        fn((pre + "wk").c_str(), L.wk.v.data(), L.wk.v.size(), 2);
        fn((pre + "wv").c_str(), L.wv.v.data(), L.wv.v.size(), 2);
        fn((pre + "wo").c_str(), L.wo.v.data(), L.wo.v.size(), 2);
        fn((pre + "norm_attn").c_str(), L.norm_attn.data(), L.norm_attn.size(), 1);
        fn((pre + "w_gate").c_str(), L.w_gate.v.data(), L.w_gate.v.size(), 2);
        fn((pre + "w_up").c_str(), L.w_up.v.data(), L.w_up.v.size(), 2);
        fn((pre + "w_down").c_str(), L.w_down.v.data(), L.w_down.v.size(), 2);
        fn((pre + "norm_ffn").c_str(), L.norm_ffn.data(), L.norm_ffn.size(), 1);
        if (!L.head_s.empty()) fn((pre + "head_s").c_str(), L.head_s.data(), L.head_s.size(), 1);
        if (!L.head_b.empty()) fn((pre + "head_b").c_str(), L.head_b.data(), L.head_b.size(), 1);
    }
    fn("norm_final", p.norm_final.data(), p.norm_final.size(), 1);
    fn("unembed", p.unembed.v.data(), p.unembed.v.size(), 2);
    if (!p.pn.empty()) fn("pn", p.pn.data(), p.pn.size(), 1);
}

template <class T>
void alloc_params(const ModelConfig& cfg, ParamSet<T>& p) {
    const int C = cfg.hidden, F = cfg.ffn, V = cfg.vocab, H = cfg.num_heads;
    p.embed.resize(V, C);
    p.layers.assign(static_cast<size_t>(cfg.num_layers), {});
    for (auto& L : p.layers) {
        L.wq.resize(C, C);
        L.wk.resize(C, C);
        L.wv.resize(C, C);
        L.wo.resize(C, C);
        L.w_gate.resize(C, F);
        L.w_up.resize(C, F);
        L.w_down.resize(F, C);
        L.norm_attn.assign(static_cast<size_t>(C), T(0));
        L.norm_ffn.assign(static_cast<size_t>(C), T(0));
        if (mode_has_scale(cfg.mode)) L.head_s.assign(static_cast<size_t>(H), T(0));
        if (mode_has_bias(cfg.mode)) L.head_b.assign(static_cast<size_t>(H), T(0));
    }
    p.norm_final.assign(static_cast<size_t>(C), T(0));
    p.unembed.resize(C, V);
    if (cfg.mode == ScoreMode::pn_probe) p.pn.assign(static_cast<size_t>(cfg.seq_len), T(0));
}

template <class T>
void zero_params(const ModelConfig& cfg, ParamSet<T>& p) {
    visit_params(cfg, p, [](const char*, T* d, size_t n, int) { std::fill(d, d + n, T(0)); });
}

template <class T>
size_t count_params(const ModelConfig& cfg) {
    ParamSet<T> p;
    alloc_params(cfg, p);
    size_t total = 0;
    visit_params(cfg, p, [&](const char*, T*, size_t n, int) { total += n; });
    return total;
}

// Shared weights are drawn from one stream in a fixed order, so two models
// with the same seed and different score modes start from identical shared
// weights; the mode-specific scalars use constant initial values (s = 1,
// b = 0, p_n = 1).
template <class T>
Model<T> init_model(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Model<T> m;
    m.config = cfg;
    alloc_params(cfg, m.params);
    Rng rng(mix_seed(seed, 0x1715));
    auto draw = [&](Mat<T>& w) {
        for (auto& v : w.v) v = static_cast<T>(rng.gauss(0.0, kInitStd));
    };
    draw(m.params.embed);
    for (auto& L : m.params.layers) {
        draw(L.wq);
        draw(L.wk);
        draw(L.wv);
        draw(L.wo);
        draw(L.w_gate);
        draw(L.w_up);
        draw(L.w_down);
        std::fill(L.norm_attn.begin(), L.norm_attn.end(), T(1));
        std::fill(L.norm_ffn.begin(), L.norm_ffn.end(), T(1));
        std::fill(L.head_s.begin(), L.head_s.end(), T(1));
        std::fill(L.head_b.begin(), L.head_b.end(), T(0));
    }
    std::fill(m.params.norm_final.begin(), m.params.norm_final.end(), T(1));
    draw(m.params.unembed);
    std::fill(m.params.pn.begin(), m.params.pn.end(), T(1));
    return m;
}

// Pure config change; no weights are touched.
template <class T>
void set_rope_theta(Model<T>& m, double theta_new) {
    if (!(theta_new > 0)) throw std::invalid_argument("set_rope_theta: theta must be > 0");
    m.config.rope_theta = theta_new;
}

// Switches a softmax model to ssmax, initializing every head's s to the
// reciprocal of the average log n over n = 1..N. All other weights are
// preserved bitwise.
template <class T>
void replace_softmax_with_ssmax(Model<T>& m, int N) {
    if (m.config.mode != ScoreMode::softmax)
        throw std::invalid_argument("replace_softmax_with_ssmax: model is not in softmax mode");
    if (N < 2) throw std::invalid_argument("replace_softmax_with_ssmax: need N >= 2");
    double sum_log = 0.0;
    for (int n = 1; n <= N; ++n) sum_log += std::log(static_cast<double>(n));
    const T s0 = static_cast<T>(static_cast<double>(N) / sum_log);
    m.config.mode = ScoreMode::ssmax;
    for (auto& L : m.params.layers) L.head_s.assign(static_cast<size_t>(m.config.num_heads), s0);
}

// ---------------------------------------------------------------------------
// shared numeric pieces
// ---------------------------------------------------------------------------

template <class T>
void rmsnorm_rows(const T* x, const T* gain, T* y, T* inv_rms, int rows, int C) {
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
        const T* xr = x + static_cast<size_t>(r) * C;
        T* yr = y + static_cast<size_t>(r) * C;
        T ss = T(0);
#pragma omp simd reduction(+ : ss)
        for (int c = 0; c < C; ++c) ss += xr[c] * xr[c];
        const T inv = T(1) / std::sqrt(ss / T(C) + T(kRmsEps));
        inv_rms[r] = inv;
#pragma omp simd
        for (int c = 0; c < C; ++c) yr[c] = xr[c] * inv * gain[c];
    }
}

// dx (assigned), dgain (accumulated; fixed reduction order over rows).
template <class T>
void rmsnorm_backward_rows(const T* x, const T* gain, const T* inv_rms, const T* dy, T* dx,
                           T* dgain, int rows, int C) {
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
        const T* xr = x + static_cast<size_t>(r) * C;
        const T* dyr = dy + static_cast<size_t>(r) * C;
        T* dxr = dx + static_cast<size_t>(r) * C;
        const T inv = inv_rms[r];
        T dot_dyx = T(0);
#pragma omp simd reduction(+ : dot_dyx)
        for (int c = 0; c < C; ++c) dot_dyx += dyr[c] * gain[c] * xr[c];
        const T k = dot_dyx * inv * inv * inv / T(C);
#pragma omp simd
        for (int c = 0; c < C; ++c) dxr[c] = dyr[c] * gain[c] * inv - xr[c] * k;
    }
    // column reduction for dgain, deterministic for any thread count
    constexpr int kChunk = 64;
    const int n_chunks = (C + kChunk - 1) / kChunk;
#pragma omp parallel for schedule(static)
    for (int ci = 0; ci < n_chunks; ++ci) {
        const int c0 = ci * kChunk;
        const int c1 = std::min(C, c0 + kChunk);
        for (int r = 0; r < rows; ++r) {
            const T* xr = x + static_cast<size_t>(r) * C;
            const T* dyr = dy + static_cast<size_t>(r) * C;
            const T inv = inv_rms[r];
            for (int c = c0; c < c1; ++c) dgain[c] += dyr[c] * xr[c] * inv;
        }
    }
}

template <class T>
T silu(T g) {
    const T sig = T(1) / (T(1) + fast_exp(-g));
    return g * sig;
}

template <class T>
T silu_grad(T g) {
    const T sig = T(1) / (T(1) + fast_exp(-g));
    return sig * (T(1) + g * (T(1) - sig));
}

// Per-row logit scale for an attention row of width n in head h.
template <class T>
T row_scale(const ModelConfig& cfg, const LayerParams<T>& L, const std::vector<T>& pn, int h,
            int n) {
    if (cfg.force_unit_scale) return T(1);
    const T s = L.head_s.empty() ? T(1) : L.head_s[static_cast<size_t>(h)];
    const T b = L.head_b.empty() ? T(0) : L.head_b[static_cast<size_t>(h)];
    return logit_scale(cfg.mode, n, s, b, pn.data(), static_cast<int>(pn.size()));
}

// Head packing between the [B*T, C] activation layout and per-head [T, dh]
// or transposed [dh, T] blocks; the transposed form keeps the long axis
// innermost in the attention products.
template <class T>
void pack_head_rows(const Mat<T>& src, int b, int Tn, int h, int dh, Mat<T>& dst) {
    for (int t = 0; t < Tn; ++t) {
        const T* s = src.row(b * Tn + t) + static_cast<size_t>(h) * dh;
        std::copy(s, s + dh, dst.row(t));
    }
}

template <class T>
void pack_head_cols(const Mat<T>& src, int b, int Tn, int h, int dh, Mat<T>& dstT) {
    for (int t = 0; t < Tn; ++t) {
        const T* s = src.row(b * Tn + t) + static_cast<size_t>(h) * dh;
        for (int c = 0; c < dh; ++c) dstT.at(c, t) = s[c];
    }
}

template <class T>
void scatter_head_cols(const Mat<T>& srcT, int b, int Tn, int h, int dh, Mat<T>& dst) {
    for (int t = 0; t < Tn; ++t) {
        T* d = dst.row(b * Tn + t) + static_cast<size_t>(h) * dh;
        for (int c = 0; c < dh; ++c) d[c] = srcT.at(c, t);
    }
}

// Causal multi-head attention block over one sequence of already-normalized
// hidden states x [T, C]: project q/k/v, rotate by position, normalize each
// row's scores at that row's own visible count, mix values, output-project.
// When trace is non-null, the probability rows of the query at absolute
// position trace->step are recorded per head into rows[head] (single layer).
template <class T>
Mat<T> multi_head_attention(const ModelConfig& cfg, const LayerParams<T>& L,
                            const std::vector<T>& pn, const Mat<T>& x, int position_offset = 0,
                            AttentionTrace* trace = nullptr) {
    const int C = cfg.hidden, H = cfg.num_heads, dh = cfg.head_dim();
    const int Tn = x.rows;
    if (x.cols != C) throw std::invalid_argument("multi_head_attention: hidden size mismatch");

    Mat<T> q(Tn, C), k(Tn, C), v(Tn, C);
    matmul(q.v.data(), x.v.data(), L.wq.v.data(), Tn, C, C);
    matmul(k.v.data(), x.v.data(), L.wk.v.data(), Tn, C, C);
    matmul(v.v.data(), x.v.data(), L.wv.v.data(), Tn, C, C);
    for (int t = 0; t < Tn; ++t) {
        std::vector<T> cs(static_cast<size_t>(dh) / 2), sn(static_cast<size_t>(dh) / 2);
        rope_angles(dh, static_cast<T>(cfg.rope_theta), position_offset + t, cs.data(), sn.data());
        for (int h = 0; h < H; ++h) {
            rope_rotate(q.row(t) + static_cast<size_t>(h) * dh, cs.data(), sn.data(), dh / 2);
            rope_rotate(k.row(t) + static_cast<size_t>(h) * dh, cs.data(), sn.data(), dh / 2);
        }
    }
    if (trace) {
        trace->layers = 1;
        trace->heads = H;
        trace->visible = trace->step - position_offset + 1;
        trace->rows.assign(static_cast<size_t>(H), {});
    }

    Mat<T> mix(Tn, C);
    std::vector<T> kh(static_cast<size_t>(Tn) * dh), qh(static_cast<size_t>(dh));
#pragma omp parallel for schedule(static) firstprivate(kh, qh)
    for (int h = 0; h < H; ++h) {
        for (int t = 0; t < Tn; ++t)
            std::copy(k.row(t) + static_cast<size_t>(h) * dh,
                      k.row(t) + static_cast<size_t>(h) * dh + dh, kh.begin() + static_cast<size_t>(t) * dh);
        for (int i = 0; i < Tn; ++i) {
            std::copy(q.row(i) + static_cast<size_t>(h) * dh,
                      q.row(i) + static_cast<size_t>(h) * dh + dh, qh.begin());
            const T s = L.head_s.empty() ? T(1) : L.head_s[static_cast<size_t>(h)];
            const T b = L.head_b.empty() ? T(0) : L.head_b[static_cast<size_t>(h)];
            std::vector<T> probs;
            if (cfg.force_unit_scale) {
                probs = attention_logits(std::span<const T>(qh.data(), static_cast<size_t>(dh)),
                                         kh.data(), i + 1, dh);
                scaled_softmax(probs.data(), probs.data(), i + 1, T(1));
            } else {
                probs = attention_scores(std::span<const T>(qh.data(), static_cast<size_t>(dh)),
                                         kh.data(), i + 1, dh, cfg.mode, s, b, pn.data(),
                                         static_cast<int>(pn.size()));
            }
            if (trace && position_offset + i == trace->step) {
                auto& dst = trace->rows[static_cast<size_t>(h)];
                dst.assign(probs.begin(), probs.end());
            }
            T* out = mix.row(i) + static_cast<size_t>(h) * dh;
            std::fill(out, out + dh, T(0));
            for (int j = 0; j <= i; ++j) {
                const T* vj = v.row(j) + static_cast<size_t>(h) * dh;
                const T p = probs[static_cast<size_t>(j)];
                for (int c = 0; c < dh; ++c) out[c] += p * vj[c];
            }
        }
    }

    Mat<T> out(Tn, C);
    matmul(out.v.data(), mix.v.data(), L.wo.v.data(), Tn, C, C);
    return out;
}

// ---------------------------------------------------------------------------
// training-path forward/backward on a [B, T] batch with stored activations
// ---------------------------------------------------------------------------

template <class T>
struct Workspace {
    int B = 0, Tn = 0;
    struct LayerActs {
        Mat<T> x_in, normed1, q, k, v, att_mix, x_mid, normed2;  // [BT, C]
        Mat<T> gate_pre, up, act;                                // [BT, F]
        std::vector<T> inv_rms1, inv_rms2;                       // [BT]
        Mat<T> probs;  // [(B*H)*T, T], row (bh, i) over columns 0..i
    };
    std::vector<LayerActs> layers;
    Mat<T> x_final, normed_final;  // [BT, C]
    std::vector<T> inv_rms_final;
    Mat<T> logits;   // [BT, V]
    Mat<T> dlogits;  // [BT, V]

    // backward scratch
    Mat<T> dx, dmid, dnormed, dq, dk, dv, datt_mix;  // [BT, C]
    Mat<T> dgate, dup, dact;                         // [BT, F]

    void ensure(const ModelConfig& cfg, int B_, int T_) {
        if (B == B_ && Tn == T_ && !layers.empty()) return;
        B = B_;
        Tn = T_;
        const int BT = B * Tn, C = cfg.hidden, F = cfg.ffn, H = cfg.num_heads;
        layers.assign(static_cast<size_t>(cfg.num_layers), {});
        for (auto& L : layers) {
            L.x_in.resize(BT, C);
            L.normed1.resize(BT, C);
            L.q.resize(BT, C);
            L.k.resize(BT, C);
            L.v.resize(BT, C);
            L.att_mix.resize(BT, C);
            L.x_mid.resize(BT, C);
            L.normed2.resize(BT, C);
            L.gate_pre.resize(BT, F);
            L.up.resize(BT, F);
            L.act.resize(BT, F);
            L.inv_rms1.assign(static_cast<size_t>(BT), T(0));
            L.inv_rms2.assign(static_cast<size_t>(BT), T(0));
            L.probs.resize(B * H * Tn, Tn);
        }
        x_final.resize(BT, C);
        normed_final.resize(BT, C);
        inv_rms_final.assign(static_cast<size_t>(BT), T(0));
        logits.resize(BT, cfg.vocab);
        dlogits.resize(BT, cfg.vocab);
        dx.resize(BT, C);
        dmid.resize(BT, C);
        dnormed.resize(BT, C);
        dq.resize(BT, C);
        dk.resize(BT, C);
        dv.resize(BT, C);
        datt_mix.resize(BT, C);
        dgate.resize(BT, F);
        dup.resize(BT, F);
        dact.resize(BT, F);
    }
};

template <class T>
void apply_rope_rows(Mat<T>& qk, int B, int Tn, int H, int dh, double theta, int pos_offset) {
#pragma omp parallel for schedule(static)
    for (int r = 0; r < B * Tn; ++r) {
        const int t = r % Tn;
        std::vector<T> c(static_cast<size_t>(dh) / 2), s(static_cast<size_t>(dh) / 2);
        rope_angles(dh, static_cast<T>(theta), pos_offset + t, c.data(), s.data());
        for (int h = 0; h < H; ++h)
            rope_rotate(qk.row(r) + static_cast<size_t>(h) * dh, c.data(), s.data(), dh / 2);
    }
}

// Forward over a flattened [B, T] token batch; fills ws.logits and stores
// every activation needed by backward().
template <class T>
void forward(const Model<T>& m, std::span<const int> tokens, int B, int Tn, Workspace<T>& ws) {
    const ModelConfig& cfg = m.config;
    const int C = cfg.hidden, F = cfg.ffn, H = cfg.num_heads, dh = cfg.head_dim();
    const int BT = B * Tn;
    if (static_cast<int>(tokens.size()) != BT) throw std::domain_error("forward: token count");
    for (const int t : tokens)
        if (t < 0 || t >= cfg.vocab) throw std::domain_error("forward: token id out of range");
    if (cfg.mode == ScoreMode::pn_probe && !cfg.force_unit_scale &&
        Tn > static_cast<int>(m.params.pn.size()))
        throw std::out_of_range("forward: sequence longer than the pn table");
    ws.ensure(cfg, B, Tn);

    // embedding lookup
    {
        Mat<T>& x0 = ws.layers[0].x_in;
#pragma omp parallel for schedule(static)
        for (int r = 0; r < BT; ++r) {
            const T* src = m.params.embed.row(tokens[static_cast<size_t>(r)]);
            std::copy(src, src + C, x0.row(r));
        }
    }

    for (int l = 0; l < cfg.num_layers; ++l) {
        auto& L = m.params.layers[static_cast<size_t>(l)];
        auto& A = ws.layers[static_cast<size_t>(l)];

        rmsnorm_rows(A.x_in.v.data(), L.norm_attn.data(), A.normed1.v.data(), A.inv_rms1.data(),
                     BT, C);
        matmul(A.q.v.data(), A.normed1.v.data(), L.wq.v.data(), BT, C, C);
        matmul(A.k.v.data(), A.normed1.v.data(), L.wk.v.data(), BT, C, C);
        matmul(A.v.v.data(), A.normed1.v.data(), L.wv.v.data(), BT, C, C);
        apply_rope_rows(A.q, B, Tn, H, dh, cfg.rope_theta, 0);
        apply_rope_rows(A.k, B, Tn, H, dh, cfg.rope_theta, 0);

        const T inv_sqrt_d = T(1) / std::sqrt(T(dh));
#pragma omp parallel for schedule(static) collapse(2)
        for (int b = 0; b < B; ++b) {
            for (int h = 0; h < H; ++h) {
                Mat<T> qh(Tn, dh), khT(dh, Tn), vhT(dh, Tn), mixT(dh, Tn);
                pack_head_rows(A.q, b, Tn, h, dh, qh);
                pack_head_cols(A.k, b, Tn, h, dh, khT);
                pack_head_cols(A.v, b, Tn, h, dh, vhT);

                // raw scores, full square; rows are normalized over their
                // causal prefix and the strict upper triangle is zeroed so
                // the mixing product below stays causal
                T* pbase = A.probs.row((b * H + h) * Tn);
                matmul(pbase, qh.v.data(), khT.v.data(), Tn, dh, Tn);
                for (int i = 0; i < Tn; ++i) {
                    T* prow = pbase + static_cast<size_t>(i) * Tn;
                    const T cscale = row_scale(cfg, L, m.params.pn, h, i + 1);
                    scaled_softmax(prow, prow, i + 1, cscale * inv_sqrt_d);
                    for (int j = i + 1; j < Tn; ++j) prow[j] = T(0);
                }
                // mixT[c, i] = sum_j P[i, j] v[j, c]
                matmul_nt(mixT.v.data(), vhT.v.data(), pbase, dh, Tn, Tn);
                scatter_head_cols(mixT, b, Tn, h, dh, A.att_mix);
            }
        }

        // attention output projection + residual
        matmul(A.x_mid.v.data(), A.att_mix.v.data(), L.wo.v.data(), BT, C, C);
#pragma omp parallel for schedule(static)
        for (int r = 0; r < BT; ++r) {
            T* xm = A.x_mid.row(r);
            const T* xi = A.x_in.row(r);
#pragma omp simd
            for (int c = 0; c < C; ++c) xm[c] += xi[c];
        }

        rmsnorm_rows(A.x_mid.v.data(), L.norm_ffn.data(), A.normed2.v.data(), A.inv_rms2.data(),
                     BT, C);
        matmul(A.gate_pre.v.data(), A.normed2.v.data(), L.w_gate.v.data(), BT, C, F);
        matmul(A.up.v.data(), A.normed2.v.data(), L.w_up.v.data(), BT, C, F);
#pragma omp parallel for schedule(static)
        for (int r = 0; r < BT; ++r) {
            const T* g = A.gate_pre.row(r);
            const T* u = A.up.row(r);
            T* a = A.act.row(r);
            for (int f = 0; f < F; ++f) a[f] = silu(g[f]) * u[f];
        }

        Mat<T>& x_out = (l + 1 < cfg.num_layers) ? ws.layers[static_cast<size_t>(l) + 1].x_in
                                                 : ws.x_final;
        matmul(x_out.v.data(), A.act.v.data(), L.w_down.v.data(), BT, F, C);
#pragma omp parallel for schedule(static)
        for (int r = 0; r < BT; ++r) {
            T* xo = x_out.row(r);
            const T* xm = A.x_mid.row(r);
#pragma omp simd
            for (int c = 0; c < C; ++c) xo[c] += xm[c];
        }
    }

    rmsnorm_rows(ws.x_final.v.data(), m.params.norm_final.data(), ws.normed_final.v.data(),
                 ws.inv_rms_final.data(), BT, C);
    matmul(ws.logits.v.data(), ws.normed_final.v.data(), m.params.unembed.v.data(), BT, C,
           cfg.vocab);
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

enum class LossReduction {
    mean_tokens,     // mean over all unmasked positions (pretraining)
    sum_mean_batch,  // per-row sum over unmasked positions, averaged over rows
};

struct LossOut {
    double value = 0.0;
    std::vector<double> per_position;  // mean loss at each position over the batch
};

// targets[r] < 0 masks position r out of the loss. When dlogits is non-null
// it receives the gradient of `value` w.r.t. the logits.
template <class T>
LossOut cross_entropy(const Mat<T>& logits, std::span<const int> targets, int B, int Tn,
                      LossReduction red, std::type_identity_t<Mat<T>>* dlogits = nullptr) {
    const int BT = B * Tn, V = logits.cols;
    if (static_cast<int>(targets.size()) != BT || logits.rows != BT)
        throw std::domain_error("cross_entropy: length mismatch");

    std::vector<double> pos_loss(static_cast<size_t>(BT), 0.0);
    std::vector<int> pos_valid(static_cast<size_t>(BT), 0);

#pragma omp parallel for schedule(static)
    for (int r = 0; r < BT; ++r) {
        const int tgt = targets[static_cast<size_t>(r)];
        if (tgt < 0) {
            if (dlogits) std::fill(dlogits->row(r), dlogits->row(r) + V, T(0));
            continue;
        }
        if (tgt >= V) throw std::domain_error("cross_entropy: target out of range");
        const T* lr = logits.row(r);
        T mx = lr[0];
        for (int c = 1; c < V; ++c) mx = std::max(mx, lr[c]);
        double sum = 0.0;
        for (int c = 0; c < V; ++c) sum += std::exp(static_cast<double>(lr[c] - mx));
        const double lse = static_cast<double>(mx) + std::log(sum);
        pos_loss[static_cast<size_t>(r)] = lse - static_cast<double>(lr[tgt]);
        pos_valid[static_cast<size_t>(r)] = 1;
        if (dlogits) {
            T* dr = dlogits->row(r);
            const double inv = 1.0 / sum;
            for (int c = 0; c < V; ++c)
                dr[c] = static_cast<T>(std::exp(static_cast<double>(lr[c] - mx)) * inv);
            dr[tgt] -= T(1);
        }
    }

    long total_valid = 0;
    double total = 0.0;
    for (int r = 0; r < BT; ++r) {
        total += pos_loss[static_cast<size_t>(r)];
        total_valid += pos_valid[static_cast<size_t>(r)];
    }

    LossOut out;
    double grad_scale = 0.0;
    if (red == LossReduction::mean_tokens) {
        out.value = total_valid > 0 ? total / static_cast<double>(total_valid) : 0.0;
        grad_scale = total_valid > 0 ? 1.0 / static_cast<double>(total_valid) : 0.0;
    } else {
        out.value = total / static_cast<double>(B);
        grad_scale = 1.0 / static_cast<double>(B);
    }

    out.per_position.assign(static_cast<size_t>(Tn), 0.0);
    for (int t = 0; t < Tn; ++t) {
        double acc = 0.0;
        int cnt = 0;
        for (int b = 0; b < B; ++b) {
            const int r = b * Tn + t;
            acc += pos_loss[static_cast<size_t>(r)];
            cnt += pos_valid[static_cast<size_t>(r)];
        }
        out.per_position[static_cast<size_t>(t)] = cnt > 0 ? acc / cnt : 0.0;
    }

    if (dlogits) {
        const T gs = static_cast<T>(grad_scale);
#pragma omp parallel for schedule(static)
        for (int r = 0; r < BT; ++r) {
            T* dr = dlogits->row(r);
#pragma omp simd
            for (int c = 0; c < V; ++c) dr[c] *= gs;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// backward: consumes ws.dlogits, accumulates into grads
// ---------------------------------------------------------------------------

template <class T>
void backward(const Model<T>& m, std::span<const int> tokens, int B, int Tn, Workspace<T>& ws,
              ParamSet<T>& grads) {
    const ModelConfig& cfg = m.config;
    const int C = cfg.hidden, F = cfg.ffn, H = cfg.num_heads, dh = cfg.head_dim();
    const int BT = B * Tn;
    const T inv_sqrt_d = T(1) / std::sqrt(T(dh));

    // unembed and final norm
    matmul_tn(grads.unembed.v.data(), ws.normed_final.v.data(), ws.dlogits.v.data(), BT, C,
              cfg.vocab, /*accumulate=*/true);
    matmul_nt(ws.dnormed.v.data(), ws.dlogits.v.data(), m.params.unembed.v.data(), BT, cfg.vocab,
              C);
    rmsnorm_backward_rows(ws.x_final.v.data(), m.params.norm_final.data(), ws.inv_rms_final.data(),
                          ws.dnormed.v.data(), ws.dx.v.data(), grads.norm_final.data(), BT, C);

    for (int l = cfg.num_layers - 1; l >= 0; --l) {
        auto& L = m.params.layers[static_cast<size_t>(l)];
        auto& G = grads.layers[static_cast<size_t>(l)];
        auto& A = ws.layers[static_cast<size_t>(l)];

        // ---- feed-forward ----
        matmul_tn(G.w_down.v.data(), A.act.v.data(), ws.dx.v.data(), BT, F, C, true);
        matmul_nt(ws.dact.v.data(), ws.dx.v.data(), L.w_down.v.data(), BT, C, F);
#pragma omp parallel for schedule(static)
        for (int r = 0; r < BT; ++r) {
            const T* g = A.gate_pre.row(r);
            const T* u = A.up.row(r);
            const T* da = ws.dact.row(r);
            T* dg = ws.dgate.row(r);
            T* du = ws.dup.row(r);
            for (int f = 0; f < F; ++f) {
                dg[f] = da[f] * u[f] * silu_grad(g[f]);
                du[f] = da[f] * silu(g[f]);
            }
        }
        matmul_tn(G.w_gate.v.data(), A.normed2.v.data(), ws.dgate.v.data(), BT, C, F, true);
        matmul_tn(G.w_up.v.data(), A.normed2.v.data(), ws.dup.v.data(), BT, C, F, true);
        matmul_nt(ws.dnormed.v.data(), ws.dgate.v.data(), L.w_gate.v.data(), BT, F, C);
        matmul_nt(ws.dnormed.v.data(), ws.dup.v.data(), L.w_up.v.data(), BT, F, C,
                  /*accumulate=*/true);
        rmsnorm_backward_rows(A.x_mid.v.data(), L.norm_ffn.data(), A.inv_rms2.data(),
                              ws.dnormed.v.data(), ws.dmid.v.data(), G.norm_ffn.data(), BT, C);
#pragma omp parallel for schedule(static)
        for (int r = 0; r < BT; ++r) {
            T* dm = ws.dmid.row(r);
            const T* dxr = ws.dx.row(r);
#pragma omp simd
            for (int c = 0; c < C; ++c) dm[c] += dxr[c];  // residual
        }

        // ---- attention ----
        matmul_tn(G.wo.v.data(), A.att_mix.v.data(), ws.dmid.v.data(), BT, C, C, true);
        matmul_nt(ws.datt_mix.v.data(), ws.dmid.v.data(), L.wo.v.data(), BT, C, C);

        // per-(batch, head) scalar-gradient slots, reduced in fixed order below
        std::vector<double> gs(static_cast<size_t>(B) * H, 0.0);
        std::vector<double> gb(static_cast<size_t>(B) * H, 0.0);
        std::vector<double> gpn;
        if (cfg.mode == ScoreMode::pn_probe)
            gpn.assign(static_cast<size_t>(B) * H * cfg.seq_len, 0.0);

#pragma omp parallel for schedule(static) collapse(2)
        for (int b = 0; b < B; ++b) {
            for (int h = 0; h < H; ++h) {
                const bool wants_scale_grad =
                    !cfg.force_unit_scale &&
                    (cfg.mode == ScoreMode::ssmax || cfg.mode == ScoreMode::ssmax_bias ||
                     cfg.mode == ScoreMode::pn_probe);

                Mat<T> qhT(dh, Tn), khT(dh, Tn), vhT(dh, Tn), dyh(Tn, dh), dyhT(dh, Tn);
                pack_head_cols(A.q, b, Tn, h, dh, qhT);
                pack_head_cols(A.k, b, Tn, h, dh, khT);
                pack_head_cols(A.v, b, Tn, h, dh, vhT);
                pack_head_rows(ws.datt_mix, b, Tn, h, dh, dyh);
                pack_head_cols(ws.datt_mix, b, Tn, h, dh, dyhT);
                const T* pbase = A.probs.row((b * H + h) * Tn);

                // dV^T = dY^T P (upper triangle of P is zero, so this is causal)
                Mat<T> dvhT(dh, Tn);
                matmul(dvhT.v.data(), dyhT.v.data(), pbase, dh, Tn, Tn);

                // dP = dY V^T; rows are reduced to d(raw logits) in place
                Mat<T> dp(Tn, Tn);
                matmul(dp.v.data(), dyh.v.data(), vhT.v.data(), Tn, dh, Tn);
                Mat<T> raw, qh;
                if (wants_scale_grad) {
                    raw.resize(Tn, Tn);
                    qh.resize(Tn, dh);
                    pack_head_rows(A.q, b, Tn, h, dh, qh);
                    matmul(raw.v.data(), qh.v.data(), khT.v.data(), Tn, dh, Tn);
                }

                for (int i = 0; i < Tn; ++i) {
                    const T* prow = pbase + static_cast<size_t>(i) * Tn;
                    T* dprow = dp.row(i);
                    T yu = T(0);
#pragma omp simd reduction(+ : yu)
                    for (int j = 0; j <= i; ++j) yu += prow[j] * dprow[j];
                    const T cscale = row_scale(cfg, L, m.params.pn, h, i + 1);
                    const T factor = cscale * inv_sqrt_d;
                    double grad_c = 0.0;
                    if (wants_scale_grad) {
                        const T* rrow = raw.row(i);
                        T acc = T(0);
#pragma omp simd reduction(+ : acc)
                        for (int j = 0; j <= i; ++j)
                            acc += prow[j] * (dprow[j] - yu) * rrow[j];
                        grad_c = static_cast<double>(acc) * static_cast<double>(inv_sqrt_d);
                    }
#pragma omp simd
                    for (int j = 0; j <= i; ++j) dprow[j] = factor * (prow[j] * (dprow[j] - yu));
                    for (int j = i + 1; j < Tn; ++j) dprow[j] = T(0);

                    if (wants_scale_grad) {
                        const int n = i + 1;
                        const double logn = std::log(static_cast<double>(n));
                        if (cfg.mode == ScoreMode::ssmax) {
                            gs[static_cast<size_t>(b) * H + h] += logn * grad_c;
                        } else if (cfg.mode == ScoreMode::ssmax_bias) {
                            gs[static_cast<size_t>(b) * H + h] += logn * grad_c;
                            gb[static_cast<size_t>(b) * H + h] += grad_c;
                        } else {  // pn_probe
                            const double sh =
                                static_cast<double>(L.head_s[static_cast<size_t>(h)]);
                            const double pn_n =
                                static_cast<double>(m.params.pn[static_cast<size_t>(n - 1)]);
                            gs[static_cast<size_t>(b) * H + h] += pn_n * grad_c;
                            gb[static_cast<size_t>(b) * H + h] += grad_c;
                            gpn[(static_cast<size_t>(b) * H + h) * cfg.seq_len + (n - 1)] +=
                                sh * grad_c;
                        }
                    }
                }

                // dQ^T = K^T dRaw^T and dK^T = Q^T dRaw
                Mat<T> dqhT(dh, Tn), dkhT(dh, Tn);
                matmul_nt(dqhT.v.data(), khT.v.data(), dp.v.data(), dh, Tn, Tn);
                matmul(dkhT.v.data(), qhT.v.data(), dp.v.data(), dh, Tn, Tn);
                scatter_head_cols(dqhT, b, Tn, h, dh, ws.dq);
                scatter_head_cols(dkhT, b, Tn, h, dh, ws.dk);
                scatter_head_cols(dvhT, b, Tn, h, dh, ws.dv);
            }
        }
        // ordered reduction of the per-(b,h) slots
        if (!G.head_s.empty())
            for (int h = 0; h < H; ++h) {
                double acc = 0.0;
                for (int b = 0; b < B; ++b) acc += gs[static_cast<size_t>(b) * H + h];
                G.head_s[static_cast<size_t>(h)] += static_cast<T>(acc);
            }
        if (!G.head_b.empty())
            for (int h = 0; h < H; ++h) {
                double acc = 0.0;
                for (int b = 0; b < B; ++b) acc += gb[static_cast<size_t>(b) * H + h];
                G.head_b[static_cast<size_t>(h)] += static_cast<T>(acc);
            }
        if (!gpn.empty())
            for (int n = 0; n < cfg.seq_len; ++n) {
                double acc = 0.0;
                for (int bh = 0; bh < B * H; ++bh)
                    acc += gpn[static_cast<size_t>(bh) * cfg.seq_len + n];
                grads.pn[static_cast<size_t>(n)] += static_cast<T>(acc);
            }

        // rope backward: rotate gradients by the negative angle
#pragma omp parallel for schedule(static)
        for (int r = 0; r < BT; ++r) {
            const int t = r % Tn;
            std::vector<T> c(static_cast<size_t>(dh) / 2), s(static_cast<size_t>(dh) / 2);
            rope_angles(dh, static_cast<T>(cfg.rope_theta), t, c.data(), s.data());
            for (int h = 0; h < H; ++h) {
                rope_rotate_back(ws.dq.row(r) + static_cast<size_t>(h) * dh, c.data(), s.data(),
                                 dh / 2);
                rope_rotate_back(ws.dk.row(r) + static_cast<size_t>(h) * dh, c.data(), s.data(),
                                 dh / 2);
            }
        }

        matmul_tn(G.wq.v.data(), A.normed1.v.data(), ws.dq.v.data(), BT, C, C, true);
        matmul_tn(G.wk.v.data(), A.normed1.v.data(), ws.dk.v.data(), BT, C, C, true);
        matmul_tn(G.wv.v.data(), A.normed1.v.data(), ws.dv.v.data(), BT, C, C, true);
        matmul_nt(ws.dnormed.v.data(), ws.dq.v.data(), L.wq.v.data(), BT, C, C);
        matmul_nt(ws.dnormed.v.data(), ws.dk.v.data(), L.wk.v.data(), BT, C, C, true);
        matmul_nt(ws.dnormed.v.data(), ws.dv.v.data(), L.wv.v.data(), BT, C, C, true);

        rmsnorm_backward_rows(A.x_in.v.data(), L.norm_attn.data(), A.inv_rms1.data(),
                              ws.dnormed.v.data(), ws.dx.v.data(), G.norm_attn.data(), BT, C);
#pragma omp parallel for schedule(static)
        for (int r = 0; r < BT; ++r) {
            T* dxr = ws.dx.row(r);
            const T* dm = ws.dmid.row(r);
#pragma omp simd
            for (int c = 0; c < C; ++c) dxr[c] += dm[c];  // residual into previous layer
        }
    }

    // embedding gradient; serial scatter keeps accumulation order fixed
    for (int r = 0; r < BT; ++r) {
        T* ge = grads.embed.row(tokens[static_cast<size_t>(r)]);
        const T* dxr = ws.dx.row(r);
        for (int c = 0; c < C; ++c) ge[c] += dxr[c];
    }
}

// ---------------------------------------------------------------------------
// incremental inference with a KV cache
// ---------------------------------------------------------------------------

template <class T>
struct KVCache {
    int capacity = 0, len = 0;
    std::vector<Mat<T>> k, v;  // per layer, [capacity, C]

    void init(const ModelConfig& cfg, int cap) {
        capacity = cap;
        len = 0;
        k.assign(static_cast<size_t>(cfg.num_layers), {});
        v.assign(static_cast<size_t>(cfg.num_layers), {});
        for (int l = 0; l < cfg.num_layers; ++l) {
            k[static_cast<size_t>(l)].resize(cap, cfg.hidden);
            v[static_cast<size_t>(l)].resize(cap, cfg.hidden);
        }
    }
};

// Appends m tokens to the cache and returns their logits, [m, vocab]. When
// `trace` is non-null, the attention rows of the query at absolute position
// trace->step are recorded for every layer and head.
template <class T>
Mat<T> forward_cached(const Model<T>& m_, KVCache<T>& cache, std::span<const int> tokens,
                      AttentionTrace* trace = nullptr) {
    const ModelConfig& cfg = m_.config;
    const int C = cfg.hidden, F = cfg.ffn, H = cfg.num_heads, dh = cfg.head_dim();
    const int M = static_cast<int>(tokens.size());
    const int len0 = cache.len;
    if (len0 + M > cache.capacity) throw std::out_of_range("forward_cached: cache capacity");
    for (const int t : tokens)
        if (t < 0 || t >= cfg.vocab) throw std::domain_error("forward_cached: token id");
    if (cfg.mode == ScoreMode::pn_probe && !cfg.force_unit_scale &&
        len0 + M > static_cast<int>(m_.params.pn.size()))
        throw std::out_of_range("forward_cached: context longer than the pn table");

    if (trace) {
        trace->layers = cfg.num_layers;
        trace->heads = H;
        trace->visible = trace->step + 1;
        trace->rows.assign(static_cast<size_t>(cfg.num_layers) * H, {});
    }

    Mat<T> x(M, C), normed(M, C), q(M, C), att_mix(M, C), gate(M, F), up(M, F);
    std::vector<T> inv_rms(static_cast<size_t>(M));
    for (int r = 0; r < M; ++r) {
        const T* src = m_.params.embed.row(tokens[static_cast<size_t>(r)]);
        std::copy(src, src + C, x.row(r));
    }

    for (int l = 0; l < cfg.num_layers; ++l) {
        auto& L = m_.params.layers[static_cast<size_t>(l)];
        Mat<T>& ck = cache.k[static_cast<size_t>(l)];
        Mat<T>& cv = cache.v[static_cast<size_t>(l)];

        rmsnorm_rows(x.v.data(), L.norm_attn.data(), normed.v.data(), inv_rms.data(), M, C);
        matmul(q.v.data(), normed.v.data(), L.wq.v.data(), M, C, C);
        matmul(ck.row(len0), normed.v.data(), L.wk.v.data(), M, C, C);
        matmul(cv.row(len0), normed.v.data(), L.wv.v.data(), M, C, C);

        // rope at absolute positions
#pragma omp parallel for schedule(static)
        for (int r = 0; r < M; ++r) {
            std::vector<T> c(static_cast<size_t>(dh) / 2), s(static_cast<size_t>(dh) / 2);
            rope_angles(dh, static_cast<T>(cfg.rope_theta), len0 + r, c.data(), s.data());
            for (int h = 0; h < H; ++h) {
                rope_rotate(q.row(r) + static_cast<size_t>(h) * dh, c.data(), s.data(), dh / 2);
                rope_rotate(ck.row(len0 + r) + static_cast<size_t>(h) * dh, c.data(), s.data(),
                            dh / 2);
            }
        }

        const T inv_sqrt_d = T(1) / std::sqrt(T(dh));
#pragma omp parallel for schedule(static) collapse(2)
        for (int r = 0; r < M; ++r) {
            for (int h = 0; h < H; ++h) {
                const int n = len0 + r + 1;  // visible tokens for this row
                const T* qi = q.row(r) + static_cast<size_t>(h) * dh;
                std::vector<T> row(static_cast<size_t>(n));
                for (int j = 0; j < n; ++j) {
                    const T* kj = ck.row(j) + static_cast<size_t>(h) * dh;
                    T acc = T(0);
#pragma omp simd reduction(+ : acc)
                    for (int c = 0; c < dh; ++c) acc += qi[c] * kj[c];
                    row[static_cast<size_t>(j)] = acc * inv_sqrt_d;
                }
                const T cscale = row_scale(cfg, L, m_.params.pn, h, n);
                scaled_softmax(row.data(), row.data(), n, cscale);
                if (trace && len0 + r == trace->step) {
                    auto& dst = trace->rows[static_cast<size_t>(l) * H + h];
                    dst.assign(row.begin(), row.end());
                }
                T* out = att_mix.row(r) + static_cast<size_t>(h) * dh;
                std::fill(out, out + dh, T(0));
                for (int j = 0; j < n; ++j) {
                    const T* vj = cv.row(j) + static_cast<size_t>(h) * dh;
                    const T p = row[static_cast<size_t>(j)];
#pragma omp simd
                    for (int c = 0; c < dh; ++c) out[c] += p * vj[c];
                }
            }
        }

        Mat<T> attn_out(M, C);
        matmul(attn_out.v.data(), att_mix.v.data(), L.wo.v.data(), M, C, C);
        for (int r = 0; r < M; ++r) {
            T* xr = x.row(r);
            const T* ar = attn_out.row(r);
            for (int c = 0; c < C; ++c) xr[c] += ar[c];
        }

        rmsnorm_rows(x.v.data(), L.norm_ffn.data(), normed.v.data(), inv_rms.data(), M, C);
        matmul(gate.v.data(), normed.v.data(), L.w_gate.v.data(), M, C, F);
        matmul(up.v.data(), normed.v.data(), L.w_up.v.data(), M, C, F);
        for (int r = 0; r < M; ++r) {
            T* g = gate.row(r);
            const T* u = up.row(r);
            for (int f = 0; f < F; ++f) g[f] = silu(g[f]) * u[f];
        }
        Mat<T> ffn_out(M, C);
        matmul(ffn_out.v.data(), gate.v.data(), L.w_down.v.data(), M, F, C);
        for (int r = 0; r < M; ++r) {
            T* xr = x.row(r);
            const T* fr = ffn_out.row(r);
            for (int c = 0; c < C; ++c) xr[c] += fr[c];
        }
    }

    cache.len = len0 + M;
    rmsnorm_rows(x.v.data(), m_.params.norm_final.data(), normed.v.data(), inv_rms.data(), M, C);
    Mat<T> logits(M, cfg.vocab);
    matmul(logits.v.data(), normed.v.data(), m_.params.unembed.v.data(), M, C, cfg.vocab);
    return logits;
}

}  // namespace ssx
