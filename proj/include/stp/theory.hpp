#pragma once

// Exact calculators for the information-theoretic bounds, the Brownian
// sqrt(t) growth simulation, the prefix-lifting identity check, and the
// paired one-tailed t-test. All entropies are in bits.

#include <cstdint>
#include <vector>

#include "stp/tensor.hpp"

namespace stp {

struct TheoryQuery {
  double H_Y = 4.0;      // bits
  double epsilon = 0.0;  // bits
  double snr = 1.0;
  double m = 1.0;        // sample count
  int vocab_size = 17;
};

// max(0, H(Y) - m * I) in bits.
double conditional_entropy_lower_bound(double H_Y, double m, double I_bits);

// 0.5 * log2(1 + snr).
double gaussian_capacity(double snr);

// (H(Y) - epsilon) / capacity; +infinity when capacity is zero.
double min_samples(double H_Y, double epsilon, double snr);

// Simplified Fano bound, clamped to [0, 1]. The denominator uses
// log2(vocab - 1); use_full_vocab_log switches to log2(vocab).
double fano_error_lower_bound(double H_Y, double m, double snr, int vocab_size,
                              bool use_full_vocab_log = false);

struct BrownianSeries {
  std::vector<double> t;
  std::vector<double> mean_norm;  // mean over trials of |sum of increments|
  double exponent = 0.0;          // power-law fit; meaningless when degenerate
  bool degenerate = false;        // sigma == 0 (all norms zero)
};

// Accumulates i.i.d. N(0, sigma^2 I) increments over T steps, trials times.
// Trials run in fixed-size shards seeded (seed + shard_index) and are summed
// in shard order, so the result does not depend on how shards are scheduled.
BrownianSeries brownian_growth_sim(int dim, double sigma, int T, int trials, uint64_t seed);

// Builds the zero-padded prefix embeddings x_{<=t} and x_{<=t+1} and verifies
// their matrix difference is exactly the single-row lift of x_{t+1}.
bool lift_identity_check(const Tensor& embeddings, int t);

struct TTestResult {
  double t_stat = 0.0;
  int df = 0;
  double p = 0.0;  // upper tail
};

// Paired one-tailed t-test of mean(a) > mean(b). The p-value integrates the
// Student-t density numerically (adaptive Simpson, abs tol 1e-10); no
// special-function library involved.
TTestResult paired_t_test_one_tailed(const std::vector<double>& a, const std::vector<double>& b);

// Upper-tail probability P(T_df >= x), exposed for oracle use in tests.
double student_t_upper_tail(double x, int df);

}  // namespace stp
