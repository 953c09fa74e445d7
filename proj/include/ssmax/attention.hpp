#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "ssmax/kernels.hpp"

namespace ssx {

// Attention probabilities captured at one decoding step: one row per
// (layer, head) over the visible prefix. Rows are stored in layer-major
// order, rows[layer * heads + head].
struct AttentionTrace {
    int step = -1;     // absolute position of the captured query row
    int visible = 0;   // row length (= step + 1)
    int layers = 0;
    int heads = 0;
    std::vector<std::vector<double>> rows;
};

// Raw attention logits for one query row: logits[j] = <q, k_j> / sqrt(d).
template <class T>
std::vector<T> attention_logits(std::span<const T> q, const T* k_prefix, int n, int d) {
    if (n < 1) throw std::domain_error("attention_logits: need n >= 1");
    if (static_cast<int>(q.size()) != d)
        throw std::domain_error("attention_logits: query dimension mismatch");
    const T inv_sqrt_d = T(1) / std::sqrt(T(d));
    std::vector<T> logits(static_cast<size_t>(n));
    for (int j = 0; j < n; ++j) {
        T acc = T(0);
        const T* k = k_prefix + static_cast<size_t>(j) * d;
        for (int c = 0; c < d; ++c) acc += q[static_cast<size_t>(c)] * k[c];
        logits[static_cast<size_t>(j)] = acc * inv_sqrt_d;
    }
    return logits;
}

// Normalized attention scores for one query over the first n keys. The row
// width n is the count of visible tokens, so the scale factor for the ssmax
// modes is evaluated at this row's own n.
template <class T>
std::vector<T> attention_scores(std::span<const T> q, const T* k_prefix, int n, int d,
                                ScoreMode mode, T s = T(1), T b = T(0), const T* pn = nullptr,
                                int pn_len = 0) {
    std::vector<T> row = attention_logits(q, k_prefix, n, d);
    const T c = logit_scale(mode, n, s, b, pn, pn_len);
    scaled_softmax(row.data(), row.data(), n, c);
    return row;
}

}  // namespace ssx
