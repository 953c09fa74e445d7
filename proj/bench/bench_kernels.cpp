// Benchmark comparing the OpenMP kernels against the serial reference
// implementations, with a max-abs-diff agreement check per kernel.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <vector>

#include <omp.h>

#include "ssmax/kernels.hpp"
#include "ssmax/model.hpp"
#include "ssmax/ref.hpp"
#include "ssmax/rng.hpp"
#include "ssmax/tensor.hpp"

using namespace ssx;
using Clock = std::chrono::steady_clock;

namespace {

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

void report(const char* name, double serial_ms, double parallel_ms, double max_diff) {
    std::printf("%-28s serial %9.2f ms   parallel %9.2f ms   speedup %5.2fx   max|diff| %.3e\n",
                name, serial_ms, parallel_ms, serial_ms / parallel_ms, max_diff);
}

void serial_matmul(const float* A, const float* B, float* C, int M, int K, int N) {
    for (int m = 0; m < M; ++m) {
        float* c = C + static_cast<size_t>(m) * N;
        for (int n = 0; n < N; ++n) c[n] = 0.f;
        for (int k = 0; k < K; ++k) {
            const float a = A[static_cast<size_t>(m) * K + k];
            const float* b = B + static_cast<size_t>(k) * N;
            for (int n = 0; n < N; ++n) c[n] += a * b[n];
        }
    }
}

void bench_softmax_rows() {
    const int rows = 8192, cols = 1024;
    Rng rng(1);
    std::vector<float> in(static_cast<size_t>(rows) * cols), a(in.size()), b(in.size());
    for (auto& v : in) v = static_cast<float>(rng.gauss(0, 2));

    auto t0 = Clock::now();
    for (int it = 0; it < 5; ++it) ref::softmax_rows_serial(in.data(), a.data(), rows, cols);
    const double serial = ms_since(t0) / 5;

    t0 = Clock::now();
    for (int it = 0; it < 5; ++it) {
#pragma omp parallel for schedule(static)
        for (int r = 0; r < rows; ++r)
            scaled_softmax(b.data() + static_cast<size_t>(r) * cols,
                           in.data() + static_cast<size_t>(r) * cols, cols, 1.f);
    }
    const double parallel = ms_since(t0) / 5;

    double md = 0;
    for (size_t i = 0; i < a.size(); ++i) md = std::max(md, std::abs(double(a[i]) - b[i]));
    report("softmax rows 8192x1024", serial, parallel, md);
}

void bench_matmul() {
    const int M = 4096, K = 128, N = 384;
    Rng rng(2);
    std::vector<float> A(static_cast<size_t>(M) * K), B(static_cast<size_t>(K) * N);
    std::vector<float> Cs(static_cast<size_t>(M) * N), Cp(Cs.size());
    for (auto& v : A) v = static_cast<float>(rng.gauss(0, 1));
    for (auto& v : B) v = static_cast<float>(rng.gauss(0, 1));

    auto t0 = Clock::now();
    for (int it = 0; it < 3; ++it) serial_matmul(A.data(), B.data(), Cs.data(), M, K, N);
    const double serial = ms_since(t0) / 3;

    t0 = Clock::now();
    for (int it = 0; it < 3; ++it) matmul(Cp.data(), A.data(), B.data(), M, K, N);
    const double parallel = ms_since(t0) / 3;

    double md = 0;
    for (size_t i = 0; i < Cs.size(); ++i) md = std::max(md, std::abs(double(Cs[i]) - Cp[i]));
    const double gflops = 2.0 * M * K * N / (parallel * 1e6);
    report("matmul 4096x128x384", serial, parallel, md);
    std::printf("%-28s parallel throughput %.1f GFLOP/s\n", "", gflops);
}

void bench_attention() {
    ModelConfig cfg;
    cfg.num_layers = 1;
    cfg.num_heads = 4;
    cfg.hidden = 128;
    cfg.ffn = 256;
    cfg.vocab = 256;
    cfg.seq_len = 512;
    cfg.mode = ScoreMode::ssmax;
    auto model = init_model<double>(cfg, 3);
    auto& L = model.params.layers[0];
    const int T = 512, C = cfg.hidden, H = cfg.num_heads, dh = cfg.head_dim();

    Rng rng(4);
    Mat<double> x(T, C);
    for (auto& v : x.v) v = rng.gauss(0, 1);

    // reference path: project + rotate, then the serial full-matrix per head
    auto t0 = Clock::now();
    Mat<double> q(T, C), k(T, C), v(T, C), mix(T, C), expect(T, C);
    matmul(q.v.data(), x.v.data(), L.wq.v.data(), T, C, C);
    matmul(k.v.data(), x.v.data(), L.wk.v.data(), T, C, C);
    matmul(v.v.data(), x.v.data(), L.wv.v.data(), T, C, C);
    for (int t = 0; t < T; ++t) {
        std::vector<double> cs(static_cast<size_t>(dh) / 2), sn(static_cast<size_t>(dh) / 2);
        rope_angles(dh, cfg.rope_theta, t, cs.data(), sn.data());
        for (int h = 0; h < H; ++h) {
            rope_rotate(q.row(t) + static_cast<size_t>(h) * dh, cs.data(), sn.data(), dh / 2);
            rope_rotate(k.row(t) + static_cast<size_t>(h) * dh, cs.data(), sn.data(), dh / 2);
        }
    }
    for (int h = 0; h < H; ++h) {
        std::vector<double> qh(static_cast<size_t>(T) * dh), kh(qh.size()), vh(qh.size());
        for (int t = 0; t < T; ++t)
            for (int c = 0; c < dh; ++c) {
                qh[static_cast<size_t>(t) * dh + c] = q.at(t, h * dh + c);
                kh[static_cast<size_t>(t) * dh + c] = k.at(t, h * dh + c);
                vh[static_cast<size_t>(t) * dh + c] = v.at(t, h * dh + c);
            }
        const auto oh =
            ref::attention_full(std::span<const double>(qh), std::span<const double>(kh),
                                std::span<const double>(vh), T, dh, cfg.mode, 0.7, 0.0);
        for (int t = 0; t < T; ++t)
            for (int c = 0; c < dh; ++c) mix.at(t, h * dh + c) = oh[static_cast<size_t>(t) * dh + c];
    }
    matmul(expect.v.data(), mix.v.data(), L.wo.v.data(), T, C, C);
    const double serial = ms_since(t0);

    for (auto& s : L.head_s) s = 0.7;
    t0 = Clock::now();
    const auto fast = multi_head_attention(cfg, L, model.params.pn, x);
    const double parallel = ms_since(t0);

    double md = 0;
    for (size_t i = 0; i < fast.v.size(); ++i)
        md = std::max(md, std::abs(fast.v[i] - expect.v[i]));
    report("attention block T=512", serial, parallel, md);
}

}  // namespace

int main() {
    std::printf("threads: %d\n", omp_get_max_threads());
    bench_matmul();
    bench_softmax_rows();
    bench_attention();
    return 0;
}
