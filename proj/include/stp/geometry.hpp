#pragma once

// Trajectory diagnostics: signal/noise decomposition, windowed local-linearity
// measurement, the straightening bound check, singular value spectra, and
// rollout divergence. Pure read-only functions over hidden trajectories.

#include <vector>

#include "stp/tensor.hpp"
#include "stp/transformer.hpp"

namespace stp {

struct Decomposition {
  std::vector<double> parallel;       // component of h_r - h_s along h_t - h_s
  std::vector<double> perpendicular;  // residual
};

// Orthogonal projection of (h_r - h_s) onto the axis (h_t - h_s).
// Throws when the axis is degenerate (|h_t - h_s| below the norm guard).
Decomposition decompose(const std::vector<double>& h_s, const std::vector<double>& h_r,
                        const std::vector<double>& h_t);

struct LinearityReport {
  int tau = 0;
  double epsilon_hat = 0.0;  // max perpendicular deviation over all windowed triples
  int worst_s = -1, worst_r = -1, worst_t = -1;
};

// Exhaustive max over all s < r < t with t - s <= tau of the perpendicular
// norm of (h_r - h_s) against the chord (h_t - h_s).
LinearityReport linearity_epsilon(const Tensor& traj_states, int tau);

struct StraighteningResult {
  bool holds = false;
  double lhs = 0.0;  // perpendicular norm
  double rhs = 0.0;  // sqrt(2 eps) * |h_r - h_s| * slack
};

// Checks the straightening bound on a configuration whose cosine deficit is
// at most eps and whose endpoints coincide with the starred endpoints. The
// bound is asymptotic, operationalized with a 1.1 slack factor.
StraighteningResult straightening_check(const std::vector<double>& h_s,
                                        const std::vector<double>& h_r,
                                        const std::vector<double>& h_t,
                                        const std::vector<double>& hstar_s,
                                        const std::vector<double>& hstar_t, double eps);

// Full singular value list (descending) of a matrix of difference vectors via
// one-sided Jacobi; convergence tolerance 1e-10, at most 60 sweeps. With
// normalize, rows are scaled to unit norm first (zero rows dropped).
std::vector<double> svd_spectrum(const Tensor& rows, bool normalize);

// Per continuation position, the L2 distance between the free-running greedy
// trajectory and the teacher-forced ground-truth trajectory. The
// teacher-forced states stand in for the error-free trajectory, which is not
// observable on trained models.
std::vector<double> rollout_divergence(const ModelParams& params, const std::vector<int>& prompt,
                                       const std::vector<int>& ground_truth_continuation);

// Least-squares slope of log y against log t.
double fit_power_law(const std::vector<std::pair<double, double>>& points);

}  // namespace stp
