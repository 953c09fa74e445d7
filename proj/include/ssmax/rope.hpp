#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

namespace ssx {

// Rotary position embedding: adjacent dimension pairs (2k, 2k+1) rotated by
// position * theta^(-2k/d). Norm-preserving; position 0 is the identity.

template <class T>
void rope_angles(int d, T theta, int position, T* cos_out, T* sin_out) {
    const int half = d / 2;
    for (int k = 0; k < half; ++k) {
        const T freq = std::pow(theta, T(-2 * k) / T(d));
        const T a = T(position) * freq;
        cos_out[k] = std::cos(a);
        sin_out[k] = std::sin(a);
    }
}

template <class T>
void rope_rotate(T* x, const T* cos_row, const T* sin_row, int half) {
    for (int k = 0; k < half; ++k) {
        const T a = x[2 * k], b = x[2 * k + 1];
        x[2 * k] = a * cos_row[k] - b * sin_row[k];
        x[2 * k + 1] = a * sin_row[k] + b * cos_row[k];
    }
}

// Inverse rotation; the map is orthogonal, so this is also the backward pass
// for gradients.
template <class T>
void rope_rotate_back(T* x, const T* cos_row, const T* sin_row, int half) {
    for (int k = 0; k < half; ++k) {
        const T a = x[2 * k], b = x[2 * k + 1];
        x[2 * k] = a * cos_row[k] + b * sin_row[k];
        x[2 * k + 1] = -a * sin_row[k] + b * cos_row[k];
    }
}

template <class T>
std::vector<T> rope_apply(std::span<const T> x, int position, T theta) {
    const int d = static_cast<int>(x.size());
    if (d % 2 != 0) throw std::invalid_argument("rope_apply: dimension must be even");
    if (position < 0) throw std::invalid_argument("rope_apply: position must be >= 0");
    if (!(theta > 0)) throw std::invalid_argument("rope_apply: theta must be positive");
    std::vector<T> out(x.begin(), x.end());
    std::vector<T> c(d / 2), s(d / 2);
    rope_angles(d, theta, position, c.data(), s.data());
    rope_rotate(out.data(), c.data(), s.data(), d / 2);
    return out;
}

}  // namespace ssx
