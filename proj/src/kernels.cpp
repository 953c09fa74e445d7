#include "ssmax/kernels.hpp"

#include <algorithm>
#include <limits>

namespace ssx {

KernelGrads kernel_backward(std::span<const double> z, std::span<const double> upstream,
                            ScoreMode mode, double s, double b, std::span<const double> pn) {
    detail::require_finite(z, "kernel_backward");
    if (upstream.size() != z.size())
        throw std::domain_error("kernel_backward: upstream length mismatch");
    detail::require_finite(upstream, "kernel_backward");
    detail::require_finite_scalar(s, "kernel_backward");
    detail::require_finite_scalar(b, "kernel_backward");

    const int n = static_cast<int>(z.size());
    const double c = logit_scale(mode, n, s, b, pn.data(), static_cast<int>(pn.size()));

    std::vector<double> y(z.size());
    scaled_softmax(y.data(), z.data(), n, c);

    double yu = 0.0;
    for (int i = 0; i < n; ++i) yu += y[i] * upstream[i];

    KernelGrads out;
    out.grad_z.resize(z.size());
    double grad_c = 0.0;
    for (int i = 0; i < n; ++i) {
        const double gt = y[i] * (upstream[i] - yu);  // grad w.r.t. t = c*z
        out.grad_z[i] = c * gt;
        grad_c += gt * z[i];
    }

    const double logn = std::log(static_cast<double>(n));
    switch (mode) {
        case ScoreMode::softmax:
        case ScoreMode::ssmax_no_scale:
            break;
        case ScoreMode::ssmax:
            out.has_s = true;
            out.grad_s = logn * grad_c;
            break;
        case ScoreMode::ssmax_bias:
            out.has_s = true;
            out.has_b = true;
            out.grad_s = logn * grad_c;
            out.grad_b = grad_c;
            break;
        case ScoreMode::pn_probe:
            out.has_s = true;
            out.has_b = true;
            out.has_pn = true;
            out.grad_s = pn[n - 1] * grad_c;
            out.grad_b = grad_c;
            out.grad_pn.assign(pn.size(), 0.0);
            out.grad_pn[n - 1] = s * grad_c;
            break;
    }
    return out;
}

MaxOutputBounds max_output_bounds(std::span<const double> z, double s) {
    detail::require_finite(z, "max_output_bounds");
    const int n = static_cast<int>(z.size());
    if (n < 2) throw std::invalid_argument("max_output_bounds: need n >= 2");
    if (!(s > 0.0)) throw std::invalid_argument("max_output_bounds: need s > 0");

    double zmax = -std::numeric_limits<double>::infinity();
    double z2nd = -std::numeric_limits<double>::infinity();
    double zmin = std::numeric_limits<double>::infinity();
    for (const double v : z) {
        if (v > zmax) {
            z2nd = zmax;
            zmax = v;
        } else if (v > z2nd) {
            z2nd = v;
        }
        zmin = std::min(zmin, v);
    }
    if (!(zmax > z2nd))
        throw std::invalid_argument("max_output_bounds: maximum must be strict (z_max > z_2nd)");

    const double logn = std::log(static_cast<double>(n));
    MaxOutputBounds out;
    out.softmax_upper = 1.0 / (static_cast<double>(n - 1) / std::exp(zmax - zmin) + 1.0);
    out.ssmax_upper = 1.0 / (static_cast<double>(n - 1) / std::exp(s * logn * (zmax - zmin)) + 1.0);
    out.ssmax_lower = 1.0 / (static_cast<double>(n - 1) / std::exp(s * logn * (zmax - z2nd)) + 1.0);
    return out;
}

std::vector<SpikeCurvePoint> spike_fading_curve(std::span<const long> sizes, double s) {
    std::vector<SpikeCurvePoint> out;
    out.reserve(sizes.size());
    for (const long n : sizes) {
        if (n < 1) throw std::out_of_range("spike_fading_curve: need n >= 1");
        std::vector<double> z(static_cast<size_t>(n), -2.0);
        z.back() = 3.0;
        const auto sm = softmax(std::span<const double>(z));
        const auto ss = ssmax(std::span<const double>(z), s);
        out.push_back({n, sm.back(), ss.back()});
    }
    return out;
}

std::vector<FocusCurvePoint> focus_sweep_curve(std::span<const long> sizes,
                                               std::span<const double> s_values, double z_lo,
                                               double z_hi, int steps) {
    if (steps < 1) throw std::out_of_range("focus_sweep_curve: need steps >= 1");
    std::vector<FocusCurvePoint> out;
    for (const long n : sizes) {
        if (n < 3) throw std::out_of_range("focus_sweep_curve: pattern needs n >= 3");
        std::vector<double> z(static_cast<size_t>(n));
        for (long k = 0; k + 1 < n; ++k)
            z[static_cast<size_t>(k)] = static_cast<double>(k) / static_cast<double>(n - 2);
        for (const double s : s_values) {
            for (int t = 0; t < steps; ++t) {
                const double zm =
                    steps == 1 ? z_lo : z_lo + (z_hi - z_lo) * static_cast<double>(t) / (steps - 1);
                z.back() = zm;
                const auto sm = softmax(std::span<const double>(z));
                const auto ss = ssmax(std::span<const double>(z), s);
                out.push_back({n, s, zm, sm.back(), ss.back()});
            }
        }
    }
    return out;
}

}  // namespace ssx
