#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ssx {

// Score-normalization variants for attention rows. All of them reduce to a
// stable softmax of c * z for a per-row factor c that may depend on the row
// width n and on learnable scalars:
//   softmax         c = 1
//   ssmax           c = s * ln n          (Scalable-Softmax)
//   ssmax_no_scale  c = ln n              (scaling parameter fixed at 1)
//   ssmax_bias      c = s * ln n + b
//   pn_probe        c = s * p[n] + b      (learnable per-size table p)
enum class ScoreMode { softmax, ssmax, ssmax_no_scale, ssmax_bias, pn_probe };

inline const char* score_mode_name(ScoreMode m) {
    switch (m) {
        case ScoreMode::softmax: return "softmax";
        case ScoreMode::ssmax: return "ssmax";
        case ScoreMode::ssmax_no_scale: return "ssmax_no_scale";
        case ScoreMode::ssmax_bias: return "ssmax_bias";
        case ScoreMode::pn_probe: return "pn_probe";
    }
    return "?";
}

inline ScoreMode parse_score_mode(const std::string& s) {
    if (s == "softmax") return ScoreMode::softmax;
    if (s == "ssmax") return ScoreMode::ssmax;
    if (s == "ssmax_no_scale") return ScoreMode::ssmax_no_scale;
    if (s == "ssmax_bias") return ScoreMode::ssmax_bias;
    if (s == "pn_probe") return ScoreMode::pn_probe;
    throw std::invalid_argument("unknown score mode: " + s);
}

inline bool mode_has_scale(ScoreMode m) {
    return m == ScoreMode::ssmax || m == ScoreMode::ssmax_bias || m == ScoreMode::pn_probe;
}
inline bool mode_has_bias(ScoreMode m) {
    return m == ScoreMode::ssmax_bias || m == ScoreMode::pn_probe;
}

// Per-head learnable scalars. b participates only in the bias variants.
struct HeadScaleParams {
    double s = 1.0;
    double b = 0.0;
};

// Learnable per-size parameters p[n], n = 1..N (1-based; p.size() == N).
struct PnTable {
    std::vector<double> p;
};

// Factor multiplying the raw logits for a row of width n. pn may be null for
// the modes that do not use it. Throws std::out_of_range when n exceeds the
// table length in pn_probe mode.
template <class T>
T logit_scale(ScoreMode mode, int n, T s, T b, const T* pn = nullptr, int pn_len = 0) {
    switch (mode) {
        case ScoreMode::softmax: return T(1);
        case ScoreMode::ssmax: return s * std::log(T(n));
        case ScoreMode::ssmax_no_scale: return std::log(T(n));
        case ScoreMode::ssmax_bias: return s * std::log(T(n)) + b;
        case ScoreMode::pn_probe:
            if (n < 1 || n > pn_len)
                throw std::out_of_range("pn table has " + std::to_string(pn_len) +
                                        " entries, row width " + std::to_string(n));
            return s * pn[n - 1] + b;
    }
    return T(1);
}

// Branch-free single-precision exp (Cephes-style polynomial, |rel err|
// < 3e-7). The double overload stays on std::exp, so every double-precision
// contract is unaffected; the float model path trades the last bit of the
// mantissa for vectorizable row kernels.
inline float fast_exp(float x) {
    x = std::min(88.3762626647949f, std::max(-87.3365478515625f, x));
    const float n = std::floor(x * 1.44269504088896341f + 0.5f);
    float r = x - n * 0.693359375f;
    r -= n * -2.12194440e-4f;
    float p = 1.9875691500e-4f;
    p = p * r + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    p = p * r * r + r + 1.0f;
    const int bits = (static_cast<int>(n) + 127) << 23;
    float pow2n;
    __builtin_memcpy(&pow2n, &bits, sizeof(float));
    return p * pow2n;
}

inline double fast_exp(double x) { return std::exp(x); }

// y := softmax(scale * z) with max subtraction. The stabilization is exact
// shift invariance of the exponential form and changes nothing mathematically.
template <class T>
void scaled_softmax(T* y, const T* z, int n, T scale) {
#pragma omp simd
    for (int i = 0; i < n; ++i) y[i] = scale * z[i];
    T mx = y[0];
#pragma omp simd reduction(max : mx)
    for (int i = 0; i < n; ++i) mx = std::max(mx, y[i]);
    T sum = T(0);
#pragma omp simd reduction(+ : sum)
    for (int i = 0; i < n; ++i) {
        const T e = fast_exp(y[i] - mx);
        y[i] = e;
        sum += e;
    }
    const T inv = T(1) / sum;
#pragma omp simd
    for (int i = 0; i < n; ++i) y[i] *= inv;
}

namespace detail {
template <class T>
void require_finite(std::span<const T> z, const char* what) {
    if (z.empty()) throw std::domain_error(std::string(what) + ": empty input vector");
    for (const T v : z)
        if (!std::isfinite(v)) throw std::domain_error(std::string(what) + ": non-finite input");
}
template <class T>
void require_finite_scalar(T v, const char* what) {
    if (!std::isfinite(v)) throw std::domain_error(std::string(what) + ": non-finite parameter");
}
}  // namespace detail

template <class T>
std::vector<T> softmax(std::span<const T> z) {
    detail::require_finite(z, "softmax");
    std::vector<T> y(z.size());
    scaled_softmax(y.data(), z.data(), static_cast<int>(z.size()), T(1));
    return y;
}

// SSMax: z_i -> n^(s z_i) / sum_j n^(s z_j), computed as softmax((s ln n) z).
// At n = 1 the scale is s * ln 1 = 0 and the output is [1.0].
template <class T>
std::vector<T> ssmax(std::span<const T> z, T s) {
    detail::require_finite(z, "ssmax");
    detail::require_finite_scalar(s, "ssmax");
    const int n = static_cast<int>(z.size());
    std::vector<T> y(z.size());
    scaled_softmax(y.data(), z.data(), n, s * std::log(T(n)));
    return y;
}

template <class T>
std::vector<T> ssmax_bias(std::span<const T> z, T s, T b) {
    detail::require_finite(z, "ssmax_bias");
    detail::require_finite_scalar(s, "ssmax_bias");
    detail::require_finite_scalar(b, "ssmax_bias");
    const int n = static_cast<int>(z.size());
    std::vector<T> y(z.size());
    scaled_softmax(y.data(), z.data(), n, s * std::log(T(n)) + b);
    return y;
}

template <class T>
std::vector<T> softmax_pn(std::span<const T> z, T s, T b, std::span<const T> pn) {
    detail::require_finite(z, "softmax_pn");
    detail::require_finite_scalar(s, "softmax_pn");
    detail::require_finite_scalar(b, "softmax_pn");
    const int n = static_cast<int>(z.size());
    const T scale =
        logit_scale(ScoreMode::pn_probe, n, s, b, pn.data(), static_cast<int>(pn.size()));
    std::vector<T> y(z.size());
    scaled_softmax(y.data(), z.data(), n, scale);
    return y;
}

// Gradients of sum_i upstream_i * y_i for y = variant(z). grad_s / grad_b /
// grad_pn are populated only for the variants that own those parameters.
struct KernelGrads {
    std::vector<double> grad_z;
    double grad_s = 0.0;
    double grad_b = 0.0;
    std::vector<double> grad_pn;
    bool has_s = false;
    bool has_b = false;
    bool has_pn = false;
};

// Backward through y = softmax(c(z-independent) * z):
//   g_t     = y .* (u - <y, u>)        (gradient w.r.t. t = c * z)
//   grad_z  = c * g_t
//   grad_c  = <g_t, z>, chained into s / b / p[n] per variant.
KernelGrads kernel_backward(std::span<const double> z, std::span<const double> upstream,
                            ScoreMode mode, double s = 1.0, double b = 0.0,
                            std::span<const double> pn = {});

// Analytic bounds on the transformed maximum element, assuming a strict
// maximum (z_max > z_2nd) and s > 0:
//   softmax_upper = 1 / ((n-1)/e^(z_max - z_min) + 1)
//   ssmax_upper   = 1 / ((n-1)/n^(s (z_max - z_min)) + 1)
//   ssmax_lower   = 1 / ((n-1)/n^(s (z_max - z_2nd)) + 1)
struct MaxOutputBounds {
    double softmax_upper = 0.0;
    double ssmax_lower = 0.0;
    double ssmax_upper = 0.0;
};

MaxOutputBounds max_output_bounds(std::span<const double> z, double s);

// Fading curve over the spike pattern: n entries of -2 with the last set to
// +3. Returns the transformed value of the spike under Softmax and under
// SSMax with the given s, per requested size.
struct SpikeCurvePoint {
    long n = 0;
    double softmax_max = 0.0;
    double ssmax_max = 0.0;
};
std::vector<SpikeCurvePoint> spike_fading_curve(std::span<const long> sizes, double s);

// Focus sweep: input of size n made of the n-1 grid points {k/(n-2), k =
// 0..n-2} plus one free element z_max. Reports the transformed value of the
// free element as z_max sweeps [z_lo, z_hi] in `steps` points, under Softmax
// and under SSMax with scaling s. Requires n >= 3.
struct FocusCurvePoint {
    long n = 0;
    double s = 0.0;
    double z_max = 0.0;
    double softmax_value = 0.0;
    double ssmax_value = 0.0;
};
std::vector<FocusCurvePoint> focus_sweep_curve(std::span<const long> sizes,
                                               std::span<const double> s_values, double z_lo,
                                               double z_hi, int steps);

}  // namespace ssx
