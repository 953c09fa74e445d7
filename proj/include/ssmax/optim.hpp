#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssmax/model.hpp"

namespace ssx {

// Raised when training hits non-finite values; the CLI maps it to exit 4.
struct numeric_abort : std::runtime_error {
    using std::runtime_error::runtime_error;
};

template <class T>
struct ParamView {
    std::string name;
    T* data = nullptr;
    size_t len = 0;
    int rank = 0;
};

template <class T>
std::vector<ParamView<T>> collect_params(const ModelConfig& cfg, ParamSet<T>& p) {
    std::vector<ParamView<T>> out;
    visit_params(cfg, p, [&](const char* name, T* data, size_t len, int rank) {
        out.push_back({name, data, len, rank});
    });
    return out;
}

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;  // applied only to rank >= 2 tensors
    double grad_clip = 1.0;     // global-norm threshold; <= 0 disables
};

template <class T>
struct AdamState {
    std::vector<std::vector<T>> m, v;
    long step = 0;

    template <class U>
    void init(const ModelConfig& cfg, ParamSet<U>& params) {
        auto views = collect_params(cfg, params);
        m.clear();
        v.clear();
        for (const auto& pv : views) {
            m.emplace_back(pv.len, T(0));
            v.emplace_back(pv.len, T(0));
        }
        step = 0;
    }
};

// One AdamW step with decoupled weight decay and global-norm clipping.
// Returns the pre-clip gradient norm. Throws numeric_abort when the
// gradients are not finite, leaving parameters and state untouched.
template <class T>
double adamw_step(const ModelConfig& cfg, ParamSet<T>& params, ParamSet<T>& grads,
                  AdamState<T>& state, const AdamWConfig& opt, double lr) {
    auto pv = collect_params(cfg, params);
    auto gv = collect_params(cfg, grads);
    if (pv.size() != gv.size() || pv.size() != state.m.size())
        throw std::domain_error("adamw_step: parameter/state layout mismatch");

    double norm_sq = 0.0;
    for (size_t ti = 0; ti < gv.size(); ++ti) {
        const T* g = gv[ti].data;
        double acc = 0.0;
#pragma omp simd reduction(+ : acc)
        for (size_t i = 0; i < gv[ti].len; ++i)
            acc += static_cast<double>(g[i]) * static_cast<double>(g[i]);
        norm_sq += acc;
    }
    if (!std::isfinite(norm_sq))
        throw numeric_abort("adamw_step: non-finite gradients at step " +
                            std::to_string(state.step + 1));
    const double norm = std::sqrt(norm_sq);
    const double clip_scale =
        (opt.grad_clip > 0.0 && norm > opt.grad_clip) ? opt.grad_clip / norm : 1.0;

    state.step += 1;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));

    for (size_t ti = 0; ti < pv.size(); ++ti) {
        T* p = pv[ti].data;
        const T* g = gv[ti].data;
        T* m = state.m[ti].data();
        T* v = state.v[ti].data();
        const bool decay = pv[ti].rank >= 2 && opt.weight_decay != 0.0;
        const T b1 = static_cast<T>(opt.beta1), b2 = static_cast<T>(opt.beta2);
        const T cs = static_cast<T>(clip_scale);
        const T lrT = static_cast<T>(lr);
        const T wd = static_cast<T>(opt.weight_decay);
        const T inv_bc1 = static_cast<T>(1.0 / bc1), inv_bc2 = static_cast<T>(1.0 / bc2);
        const T eps = static_cast<T>(opt.eps);
        const size_t len = pv[ti].len;
#pragma omp parallel for schedule(static)
        for (long i = 0; i < static_cast<long>(len); ++i) {
            const T gi = g[i] * cs;
            m[i] = b1 * m[i] + (T(1) - b1) * gi;
            v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
            const T mhat = m[i] * inv_bc1;
            const T vhat = v[i] * inv_bc2;
            T upd = lrT * mhat / (std::sqrt(vhat) + eps);
            if (decay) upd += lrT * wd * p[i];
            p[i] -= upd;
        }
    }
    return norm;
}

enum class LrSchedule { constant_warmup, cosine_warmup };

inline LrSchedule parse_schedule(const std::string& s) {
    if (s == "constant") return LrSchedule::constant_warmup;
    if (s == "cosine") return LrSchedule::cosine_warmup;
    throw std::invalid_argument("unknown lr schedule: " + s);
}

// Linear warmup 0 -> lr over `warmup` steps, then constant, or cosine decay
// to 0 at `total`. step is 1-based.
inline double lr_at(long step, double base_lr, LrSchedule sched, long warmup, long total) {
    if (step < 1) throw std::invalid_argument("lr_at: step must be >= 1");
    if (warmup > 0 && step <= warmup)
        return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
    if (sched == LrSchedule::constant_warmup) return base_lr;
    if (step >= total) return 0.0;
    const double t =
        static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
    return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

}  // namespace ssx
