#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "stp/rng.hpp"
#include "stp/theory.hpp"

using namespace stp;

namespace {

// Independent p-value oracle: fixed-grid composite Simpson (2^17 panels) on
// the compactified tail integral, x = x0 + u / (1 - u), u in [0, 1 - 1e-9].
double t_upper_tail_oracle(double x0, int df) {
  auto integrand = [df](double x0_, double u) {
    double om = 1.0 - u;
    double x = x0_ + u / om;
    return std::pow(1.0 + x * x / df, -0.5 * (df + 1)) / (om * om);
  };
  auto tail = [&](double from) {
    const int n = 1 << 17;
    const double b = 1.0 - 1e-9;
    double h = b / n;
    double acc = integrand(from, 0.0) + integrand(from, b);
    for (int i = 1; i < n; ++i) acc += integrand(from, i * h) * (i % 2 ? 4.0 : 2.0);
    return acc * h / 3.0;
  };
  return tail(x0) / (2.0 * tail(0.0));
}

}  // namespace

TEST_CASE("conditional entropy lower bound arithmetic") {
  CHECK(conditional_entropy_lower_bound(4, 2, 1) == 2.0);
  CHECK(conditional_entropy_lower_bound(4, 7, 0) == 4.0);
  CHECK(conditional_entropy_lower_bound(4, 1000, 1) == 0.0);
  CHECK_THROWS_AS(conditional_entropy_lower_bound(-1, 1, 1), std::invalid_argument);
}

TEST_CASE("gaussian capacity values") {
  CHECK(gaussian_capacity(0) == 0.0);
  CHECK(gaussian_capacity(3) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(gaussian_capacity(15) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK_THROWS_AS(gaussian_capacity(-0.5), std::invalid_argument);
}

TEST_CASE("min_samples values and algebraic inverse") {
  CHECK(min_samples(4, 0, 3) == doctest::Approx(4.0).epsilon(1e-15));
  CHECK(min_samples(4, 0, 15) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(min_samples(4, 0, 0) == std::numeric_limits<double>::infinity());
  CHECK(min_samples(4, 4, 3) == 0.0);
  CHECK_THROWS_AS(min_samples(1, 2, 3), std::invalid_argument);

  // min_samples * capacity == H - eps exactly for snr > 0.
  for (double snr : {0.5, 1.0, 3.0, 15.0, 255.0}) {
    double product = min_samples(4.0, 0.5, snr) * gaussian_capacity(snr);
    CHECK(product == doctest::Approx(3.5).epsilon(1e-12));
  }
}

TEST_CASE("fano error lower bound") {
  CHECK(fano_error_lower_bound(4, 2, 3, 17) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(fano_error_lower_bound(4, 1000, 3, 17) == 0.0);
  // snr = 0: H / log2(|V|-1) regardless of m.
  CHECK(fano_error_lower_bound(std::log2(16.0), 55, 0, 17) == doctest::Approx(1.0));
  CHECK(fano_error_lower_bound(2, 7, 0, 17) == doctest::Approx(0.5));
  // The flag switches the denominator to log2(|V|).
  CHECK(fano_error_lower_bound(4, 2, 3, 17, true) ==
        doctest::Approx(2.0 / std::log2(17.0)).epsilon(1e-12));
  CHECK_THROWS_AS(fano_error_lower_bound(4, 2, 3, 2), std::invalid_argument);
}

TEST_CASE("fano bound is non-increasing in m and snr") {
  double previous = 1.0;
  for (int i = 0; i < 20; ++i) {
    double value = fano_error_lower_bound(6, 0.4 * i, 3, 33);
    CHECK(value <= previous + 1e-15);
    previous = value;
  }
  previous = 1.0;
  for (int i = 0; i < 20; ++i) {
    double value = fano_error_lower_bound(6, 2, 0.8 * i, 33);
    CHECK(value <= previous + 1e-15);
    previous = value;
  }
}

TEST_CASE("brownian growth follows sqrt(t)") {
  BrownianSeries series = brownian_growth_sim(16, 1.0, 256, 400, 82);
  CHECK_FALSE(series.degenerate);
  CHECK(series.exponent > 0.45);
  CHECK(series.exponent < 0.55);

  // Doubling sigma doubles the mean norm at every recorded t (same seed
  // stream, scale factored out of the increments).
  BrownianSeries doubled = brownian_growth_sim(16, 2.0, 256, 400, 82);
  for (size_t i = 0; i < series.mean_norm.size(); ++i)
    CHECK(doubled.mean_norm[i] == doctest::Approx(2.0 * series.mean_norm[i]).epsilon(1e-12));

  BrownianSeries zero = brownian_growth_sim(4, 0.0, 64, 100, 7);
  CHECK(zero.degenerate);
  for (double v : zero.mean_norm) CHECK(v == 0.0);

  CHECK_THROWS_AS(brownian_growth_sim(0, 1.0, 64, 100, 1), std::invalid_argument);
  CHECK_THROWS_AS(brownian_growth_sim(4, 1.0, 64, 50, 1), std::invalid_argument);
}

TEST_CASE("brownian exponent estimate tightens with more trials") {
  double loose = std::fabs(brownian_growth_sim(8, 1.0, 128, 100, 11).exponent - 0.5);
  double spread_small = 0.0, spread_large = 0.0;
  for (uint64_t s = 0; s < 4; ++s) {
    spread_small +=
        std::fabs(brownian_growth_sim(8, 1.0, 128, 100, 100 + s * 1000).exponent - 0.5);
    spread_large +=
        std::fabs(brownian_growth_sim(8, 1.0, 128, 1600, 100 + s * 1000).exponent - 0.5);
  }
  CHECK(spread_large <= spread_small + 0.02);
  CHECK(loose < 0.2);
}

TEST_CASE("lift identity holds exactly") {
  Rng rng(13);
  // Hand case: d=1, T=3, x=[1,2,3], t=1 -> difference is [0,0,3].
  Tensor x = Tensor::from({3, 1}, {1, 2, 3});
  CHECK(lift_identity_check(x, 1));

  for (int trial = 0; trial < 100; ++trial) {
    Tensor e = Tensor::zeros({8, 4});
    for (double& v : e.values()) v = rng.normal();
    for (int t = 0; t + 1 < 8; ++t) CHECK(lift_identity_check(e, t));
  }
  CHECK_THROWS_AS(lift_identity_check(x, 2), std::invalid_argument);
}

TEST_CASE("paired t-test matches the frozen oracle values") {
  TTestResult r = paired_t_test_one_tailed({2, 3, 4}, {1, 1, 1});  // d = [1,2,3]
  CHECK(r.df == 2);
  CHECK(r.t_stat == doctest::Approx(3.4641016).epsilon(1e-6));
  CHECK(std::fabs(r.p - 0.0371) < 1e-3);
  CHECK(std::fabs(r.p - t_upper_tail_oracle(r.t_stat, r.df)) < 1e-9);

  // d = [1,1,1,1,2]: positive shift, sd > 0, significant at 0.05.
  TTestResult shifted = paired_t_test_one_tailed({2, 2, 2, 2, 3}, {1, 1, 1, 1, 1});
  CHECK(shifted.df == 4);
  CHECK(shifted.t_stat == doctest::Approx(1.2 / (std::sqrt(0.2) / std::sqrt(5.0))).epsilon(1e-9));
  CHECK(shifted.p < 0.05);
  CHECK(std::fabs(shifted.p - t_upper_tail_oracle(shifted.t_stat, shifted.df)) < 1e-9);

  // Symmetric differences: t = 0, p = 0.5.
  TTestResult symmetric = paired_t_test_one_tailed({-1, 1}, {0, 0});
  CHECK(symmetric.t_stat == 0.0);
  CHECK(symmetric.p == doctest::Approx(0.5).epsilon(1e-10));

  CHECK_THROWS_AS(paired_t_test_one_tailed({1, 2}, {1}), std::invalid_argument);
  CHECK_THROWS_AS(paired_t_test_one_tailed({1}, {0}), std::invalid_argument);
  CHECK_THROWS_AS(paired_t_test_one_tailed({2, 2, 2}, {1, 1, 1}), std::invalid_argument);
}

TEST_CASE("upper tail agrees with the oracle across df and x") {
  for (int df : {1, 2, 4, 9}) {
    for (double x : {-2.0, 0.0, 0.5, 1.7, 3.46, 6.0}) {
      CHECK(std::fabs(student_t_upper_tail(x, df) - t_upper_tail_oracle(x, df)) < 1e-8);
    }
  }
}
