#include "ssmax/ref.hpp"

#include <cmath>

namespace ssx::ref {

std::vector<double> softmax_direct(std::span<const double> z) {
    std::vector<double> y(z.size());
    double sum = 0.0;
    for (size_t i = 0; i < z.size(); ++i) {
        y[i] = std::exp(z[i]);
        sum += y[i];
    }
    for (auto& v : y) v /= sum;
    return y;
}

std::vector<double> ssmax_direct(std::span<const double> z, double s) {
    const double n = static_cast<double>(z.size());
    std::vector<double> y(z.size());
    double sum = 0.0;
    for (size_t i = 0; i < z.size(); ++i) {
        y[i] = std::pow(n, s * z[i]);
        sum += y[i];
    }
    for (auto& v : y) v /= sum;
    return y;
}

std::vector<double> ssmax_bias_direct(std::span<const double> z, double s, double b) {
    const double n = static_cast<double>(z.size());
    std::vector<double> y(z.size());
    double sum = 0.0;
    for (size_t i = 0; i < z.size(); ++i) {
        y[i] = std::pow(n, s * z[i]) * std::exp(b * z[i]);
        sum += y[i];
    }
    for (auto& v : y) v /= sum;
    return y;
}

std::vector<double> attention_full(std::span<const double> q, std::span<const double> k,
                                   std::span<const double> v, int T, int d, ScoreMode mode,
                                   double s, double b, std::span<const double> pn) {
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<double> out(static_cast<size_t>(T) * d, 0.0);
    std::vector<double> row;
    for (int i = 0; i < T; ++i) {
        const int n = i + 1;
        row.assign(static_cast<size_t>(n), 0.0);
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int c = 0; c < d; ++c)
                acc += q[static_cast<size_t>(i) * d + c] * k[static_cast<size_t>(j) * d + c];
            row[static_cast<size_t>(j)] = acc * inv_sqrt_d;
        }
        std::vector<double> probs;
        switch (mode) {
            case ScoreMode::softmax: probs = softmax_direct(row); break;
            case ScoreMode::ssmax: probs = ssmax_direct(row, s); break;
            case ScoreMode::ssmax_no_scale: probs = ssmax_direct(row, 1.0); break;
            case ScoreMode::ssmax_bias: probs = ssmax_bias_direct(row, s, b); break;
            case ScoreMode::pn_probe: {
                // direct evaluation of the probe factor
                const double c = s * pn[static_cast<size_t>(n - 1)] + b;
                std::vector<double> scaled(row.size());
                for (size_t j = 0; j < row.size(); ++j) scaled[j] = c * row[j];
                probs = softmax_direct(scaled);
                break;
            }
        }
        for (int j = 0; j < n; ++j)
            for (int c = 0; c < d; ++c)
                out[static_cast<size_t>(i) * d + c] +=
                    probs[static_cast<size_t>(j)] * v[static_cast<size_t>(j) * d + c];
    }
    return out;
}

void softmax_rows_serial(const float* in, float* out, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        const float* z = in + static_cast<size_t>(r) * cols;
        float* y = out + static_cast<size_t>(r) * cols;
        float mx = z[0];
        for (int i = 1; i < cols; ++i)
            if (z[i] > mx) mx = z[i];
        float sum = 0.f;
        for (int i = 0; i < cols; ++i) {
            y[i] = std::exp(z[i] - mx);
            sum += y[i];
        }
        const float inv = 1.f / sum;
        for (int i = 0; i < cols; ++i) y[i] *= inv;
    }
}

}  // namespace ssx::ref
