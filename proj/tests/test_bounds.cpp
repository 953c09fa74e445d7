#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "ssmax/kernels.hpp"
#include "ssmax/rng.hpp"

using namespace ssx;

namespace {
std::span<const double> sp(const std::vector<double>& v) { return {v.data(), v.size()}; }
}  // namespace

TEST_CASE("two-valued input makes the ssmax bounds coincide with the value") {
    // 99 entries of -2, one +3, s = 0.43: z_min == z_2nd, so lower == upper
    std::vector<double> z(100, -2.0);
    z.back() = 3.0;
    const auto b = max_output_bounds(sp(z), 0.43);
    const double expect = 1.0 / (1.0 + 99.0 * std::pow(100.0, -2.15));
    CHECK(expect == doctest::Approx(0.995063).epsilon(1e-5));
    CHECK(b.ssmax_lower == doctest::Approx(expect).epsilon(1e-12));
    CHECK(b.ssmax_upper == doctest::Approx(expect).epsilon(1e-12));

    const auto y = ssmax(sp(z), 0.43);
    const double mx = *std::max_element(y.begin(), y.end());
    CHECK(mx == doctest::Approx(b.ssmax_lower).epsilon(1e-12));
}

TEST_CASE("two-valued input saturates the softmax upper bound") {
    std::vector<double> z(100, -2.0);
    z.back() = 3.0;
    const auto b = max_output_bounds(sp(z), 0.43);
    CHECK(b.softmax_upper == doctest::Approx(0.599862).epsilon(1e-5));
    const auto y = softmax(sp(z));
    const double mx = *std::max_element(y.begin(), y.end());
    CHECK(mx == doctest::Approx(b.softmax_upper).epsilon(1e-12));
}

TEST_CASE("bounds sandwich random inputs") {
    Rng rng(77);
    for (int trial = 0; trial < 300; ++trial) {
        const int n = 3 + static_cast<int>(rng.below(62));
        const double s = (trial % 3 == 0) ? 0.1 : (trial % 3 == 1) ? 1.0 : 3.0;
        std::vector<double> z(n);
        for (auto& v : z) v = rng.gauss(0, 1);
        // distinct entries with overwhelming probability; enforce strict max
        std::sort(z.begin(), z.end());
        if (!(z[n - 1] > z[n - 2])) continue;

        const auto b = max_output_bounds(sp(z), s);
        const auto ys = ssmax(sp(z), s);
        const double mx = *std::max_element(ys.begin(), ys.end());
        CHECK(b.ssmax_lower <= mx + 1e-12);
        CHECK(mx <= b.ssmax_upper + 1e-12);

        const auto ysm = softmax(sp(z));
        const double mxsm = *std::max_element(ysm.begin(), ysm.end());
        CHECK(mxsm <= b.softmax_upper + 1e-12);
    }
}

TEST_CASE("ties at the maximum and bad s are rejected") {
    std::vector<double> tie = {1.0, 2.0, 2.0};
    CHECK_THROWS_AS((void)max_output_bounds(sp(tie), 0.5), std::invalid_argument);
    std::vector<double> ok = {1.0, 2.0};
    CHECK_THROWS_AS((void)max_output_bounds(sp(ok), 0.0), std::invalid_argument);
    CHECK_THROWS_AS((void)max_output_bounds(sp(ok), -1.0), std::invalid_argument);
    std::vector<double> one = {1.0};
    CHECK_THROWS_AS((void)max_output_bounds(sp(one), 0.5), std::invalid_argument);
}

TEST_CASE("spike fading curve endpoints") {
    const std::vector<long> sizes = {10, 1000};
    const auto pts = spike_fading_curve(sizes, 0.43);
    REQUIRE(pts.size() == 2);
    CHECK(pts[0].softmax_max == doctest::Approx(0.942825).epsilon(1e-5));
    CHECK(pts[0].ssmax_max == doctest::Approx(0.940100).epsilon(1e-5));
    CHECK(pts[1].softmax_max == doctest::Approx(0.129346).epsilon(1e-5));
    CHECK(pts[1].ssmax_max == doctest::Approx(0.999646).epsilon(1e-5));
}

TEST_CASE("focus sweep keeps the ssmax threshold stable across sizes") {
    // at z_max = 1 + 1/s the transformed value for n and 4n agree within 0.05
    for (double s : {0.2, 0.43, 1.0}) {
        const double zm = 1.0 + 1.0 / s;
        for (long n : {64L, 128L, 256L}) {
            const std::vector<long> sizes = {n, 4 * n};
            const std::vector<double> ss = {s};
            const auto pts = focus_sweep_curve(sizes, ss, zm, zm, 1);
            REQUIRE(pts.size() == 2);
            CHECK(std::abs(pts[0].ssmax_value - pts[1].ssmax_value) < 0.05);
        }
    }
}

TEST_CASE("focus sweep softmax threshold grows with n") {
    // the z_max needed to reach 0.5 under softmax increases with n
    const std::vector<double> ss = {0.43};
    auto needed = [&](long n) {
        const std::vector<long> sizes = {n};
        const auto pts = focus_sweep_curve(sizes, ss, 0.0, 20.0, 401);
        for (const auto& p : pts)
            if (p.softmax_value >= 0.5) return p.z_max;
        return 1e9;
    };
    CHECK(needed(64) < needed(256));
    CHECK(needed(256) < needed(1024));
}

TEST_CASE("focus sweep rejects sizes below 3") {
    const std::vector<long> sizes = {2};
    const std::vector<double> ss = {1.0};
    CHECK_THROWS_AS((void)focus_sweep_curve(sizes, ss, 0.0, 1.0, 2), std::out_of_range);
}
