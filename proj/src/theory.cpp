#include "stp/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "stp/geometry.hpp"
#include "stp/rng.hpp"

namespace stp {

namespace {

// Adaptive Simpson on [a, b].
double adaptive_simpson(const std::function<double(double)>& f, double a, double b, double fa,
                        double fm, double fb, double whole, double tol, int depth) {
  double m = 0.5 * (a + b);
  double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  double flm = f(lm), frm = f(rm);
  double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  if (depth <= 0 || std::fabs(left + right - whole) <= 15.0 * tol)
    return left + right + (left + right - whole) / 15.0;
  return adaptive_simpson(f, a, m, fa, flm, fm, left, tol * 0.5, depth - 1) +
         adaptive_simpson(f, m, b, fm, frm, fb, right, tol * 0.5, depth - 1);
}

double integrate(const std::function<double(double)>& f, double a, double b, double tol) {
  double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
  double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
  return adaptive_simpson(f, a, b, fa, fm, fb, whole, tol, 48);
}

// Unnormalized Student-t density.
double t_density_unnormalized(double x, int df) {
  return std::pow(1.0 + x * x / df, -0.5 * (df + 1));
}

// Integral of the unnormalized density over [x0, +inf), mapped onto u in
// [0, 1) via x = x0 + u / (1 - u).
double t_tail_integral_unnormalized(double x0, int df) {
  auto g = [x0, df](double u) {
    if (u >= 1.0) return 0.0;
    double one_minus = 1.0 - u;
    double x = x0 + u / one_minus;
    return t_density_unnormalized(x, df) / (one_minus * one_minus);
  };
  return integrate(g, 0.0, 1.0 - 1e-12, 1e-12);
}

}  // namespace

double conditional_entropy_lower_bound(double H_Y, double m, double I_bits) {
  if (H_Y < 0.0 || m < 0.0 || I_bits < 0.0)
    throw std::invalid_argument("conditional_entropy_lower_bound: arguments must be >= 0");
  return std::max(0.0, H_Y - m * I_bits);
}

double gaussian_capacity(double snr) {
  if (snr < 0.0) throw std::invalid_argument("gaussian_capacity: snr must be >= 0");
  return 0.5 * std::log2(1.0 + snr);
}

double min_samples(double H_Y, double epsilon, double snr) {
  if (H_Y < epsilon || epsilon < 0.0)
    throw std::invalid_argument("min_samples: need H_Y >= epsilon >= 0");
  double capacity = gaussian_capacity(snr);
  if (capacity == 0.0) return std::numeric_limits<double>::infinity();
  return (H_Y - epsilon) / capacity;
}

double fano_error_lower_bound(double H_Y, double m, double snr, int vocab_size,
                              bool use_full_vocab_log) {
  if (vocab_size < 3)
    throw std::invalid_argument("fano_error_lower_bound: vocab_size must be >= 3");
  double denom = std::log2(static_cast<double>(use_full_vocab_log ? vocab_size : vocab_size - 1));
  double bound = (H_Y - m * gaussian_capacity(snr)) / denom;
  return std::clamp(bound, 0.0, 1.0);
}

BrownianSeries brownian_growth_sim(int dim, double sigma, int T, int trials, uint64_t seed) {
  if (dim < 1) throw std::invalid_argument("brownian_growth_sim: dim must be >= 1");
  if (trials < 100) throw std::invalid_argument("brownian_growth_sim: trials must be >= 100");
  if (T < 3) throw std::invalid_argument("brownian_growth_sim: T must be >= 3");

  constexpr int kShardSize = 128;
  BrownianSeries series;
  series.t.resize(T);
  series.mean_norm.assign(T, 0.0);
  for (int step = 0; step < T; ++step) series.t[step] = step + 1;

  std::vector<double> position(dim);
  int done = 0, shard = 0;
  while (done < trials) {
    int count = std::min(kShardSize, trials - done);
    Rng rng(seed + static_cast<uint64_t>(shard));
    for (int trial = 0; trial < count; ++trial) {
      std::fill(position.begin(), position.end(), 0.0);
      for (int step = 0; step < T; ++step) {
        double acc = 0.0;
        for (int j = 0; j < dim; ++j) {
          position[j] += sigma * rng.normal();
          acc += position[j] * position[j];
        }
        series.mean_norm[step] += std::sqrt(acc);
      }
    }
    done += count;
    ++shard;
  }
  for (double& v : series.mean_norm) v /= trials;

  if (sigma == 0.0) {
    series.degenerate = true;
    series.exponent = std::numeric_limits<double>::quiet_NaN();
    return series;
  }
  std::vector<std::pair<double, double>> points;
  for (int step = 0; step < T; ++step) points.emplace_back(series.t[step], series.mean_norm[step]);
  series.exponent = fit_power_law(points);
  return series;
}

bool lift_identity_check(const Tensor& embeddings, int t) {
  if (embeddings.ndim() != 2)
    throw std::invalid_argument("lift_identity_check: embeddings must be T x d");
  int T = embeddings.shape()[0], d = embeddings.shape()[1];
  if (t < 0 || t + 1 >= T)
    throw std::invalid_argument("lift_identity_check: need 0 <= t and t+1 < T");

  // x_{<=k}: rows 0..k of the embeddings, zero padded to T rows. Rows here are
  // 0-indexed, so prefix length t means rows [0, t).
  auto prefix = [&](int upto) {
    Tensor p = Tensor::zeros({T, d});
    for (int i = 0; i < upto; ++i)
      for (int j = 0; j < d; ++j) p.at(i, j) = embeddings.at(i, j);
    return p;
  };
  Tensor shorter = prefix(t + 1);
  Tensor longer = prefix(t + 2);
  for (int i = 0; i < T; ++i)
    for (int j = 0; j < d; ++j) {
      double difference = longer.at(i, j) - shorter.at(i, j);
      double lifted = (i == t + 1) ? embeddings.at(t + 1, j) : 0.0;
      if (difference != lifted) return false;  // identity must be exact
    }
  return true;
}

double student_t_upper_tail(double x, int df) {
  if (df < 1) throw std::invalid_argument("student_t_upper_tail: df must be >= 1");
  double upper = t_tail_integral_unnormalized(x, df);
  // Normalizer: full-line integral = 2 * tail integral from 0 by symmetry.
  double half = t_tail_integral_unnormalized(0.0, df);
  return upper / (2.0 * half);
}

TTestResult paired_t_test_one_tailed(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size())
    throw std::invalid_argument("paired_t_test: series lengths differ");
  size_t n = a.size();
  if (n < 2) throw std::invalid_argument("paired_t_test: need at least 2 pairs");

  std::vector<double> d(n);
  double mean = 0.0;
  for (size_t i = 0; i < n; ++i) {
    d[i] = a[i] - b[i];
    mean += d[i];
  }
  mean /= static_cast<double>(n);
  double variance = 0.0;
  for (double v : d) variance += (v - mean) * (v - mean);
  variance /= static_cast<double>(n - 1);
  if (variance == 0.0)
    throw std::invalid_argument("paired_t_test: zero-variance differences are degenerate");

  TTestResult result;
  result.df = static_cast<int>(n) - 1;
  result.t_stat = mean / std::sqrt(variance / static_cast<double>(n));
  result.p = student_t_upper_tail(result.t_stat, result.df);
  return result;
}

}  // namespace stp
