#pragma once

// Serial reference implementations, kept deliberately naive and independent
// of the fast paths: direct exponential forms, no max subtraction, no
// query-scaling rewrite, no OpenMP. Tests use them as oracles; the benchmark
// target compares the parallel kernels against them.

#include <span>
#include <vector>

#include "ssmax/kernels.hpp"

namespace ssx::ref {

std::vector<double> softmax_direct(std::span<const double> z);

// n^(s z_i) / sum_j n^(s z_j), evaluated literally via pow.
std::vector<double> ssmax_direct(std::span<const double> z, double s);

std::vector<double> ssmax_bias_direct(std::span<const double> z, double s, double b);

// Single-head causal attention over one sequence, materializing the full
// score matrix. q, k: [T, d] (already position-encoded), v: [T, d].
// Row i is normalized over columns 0..i with the row width n = i + 1.
// Returns the mixed values, [T, d].
std::vector<double> attention_full(std::span<const double> q, std::span<const double> k,
                                   std::span<const double> v, int T, int d, ScoreMode mode,
                                   double s, double b, std::span<const double> pn = {});

// Serial row-batched softmax used by the benchmark comparison.
void softmax_rows_serial(const float* in, float* out, int rows, int cols);

}  // namespace ssx::ref
