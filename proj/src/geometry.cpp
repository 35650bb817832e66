#include "stp/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace stp {

namespace {

double norm2(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

std::vector<double> diff(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> out(a.size());
  for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

// Perpendicular norm of (row r - row s) against the chord (row t - row s),
// reading rows straight out of a seq x d matrix. A degenerate chord leaves
// the whole displacement as deviation.
double perp_norm_rows(const Tensor& traj, int s, int r, int t) {
  int d = traj.cols();
  const double* ps = traj.values().data() + static_cast<size_t>(s) * d;
  const double* pr = traj.values().data() + static_cast<size_t>(r) * d;
  const double* pt = traj.values().data() + static_cast<size_t>(t) * d;
  double axis_sq = 0.0, proj = 0.0;
  for (int j = 0; j < d; ++j) {
    double axis = pt[j] - ps[j];
    axis_sq += axis * axis;
    proj += (pr[j] - ps[j]) * axis;
  }
  double acc = 0.0;
  if (axis_sq < kNormGuard * kNormGuard) {
    for (int j = 0; j < d; ++j) {
      double u = pr[j] - ps[j];
      acc += u * u;
    }
  } else {
    double scale = proj / axis_sq;
    for (int j = 0; j < d; ++j) {
      double perp = (pr[j] - ps[j]) - scale * (pt[j] - ps[j]);
      acc += perp * perp;
    }
  }
  return std::sqrt(acc);
}

}  // namespace

Decomposition decompose(const std::vector<double>& h_s, const std::vector<double>& h_r,
                        const std::vector<double>& h_t) {
  if (h_s.size() != h_r.size() || h_s.size() != h_t.size())
    throw std::invalid_argument("decompose: dimension mismatch");
  std::vector<double> axis = diff(h_t, h_s);
  double axis_norm = norm2(axis);
  if (axis_norm <= kNormGuard)
    throw std::invalid_argument("decompose: degenerate axis (h_t == h_s)");
  std::vector<double> u = diff(h_r, h_s);
  double proj = 0.0;
  for (size_t i = 0; i < u.size(); ++i) proj += u[i] * axis[i];
  double scale = proj / (axis_norm * axis_norm);
  Decomposition result;
  result.parallel.resize(u.size());
  result.perpendicular.resize(u.size());
  for (size_t i = 0; i < u.size(); ++i) {
    result.parallel[i] = scale * axis[i];
    result.perpendicular[i] = u[i] - result.parallel[i];
  }
  return result;
}

LinearityReport linearity_epsilon(const Tensor& traj_states, int tau) {
  int len = traj_states.rows();
  if (len < 3) throw std::invalid_argument("linearity_epsilon: trajectory too short");
  if (tau < 2) throw std::invalid_argument("linearity_epsilon: tau must be >= 2");
  LinearityReport report;
  report.tau = tau;
  for (int s = 0; s + 2 < len; ++s) {
    int t_max = std::min(len - 1, s + tau);
    for (int t = s + 2; t <= t_max; ++t) {
      for (int r = s + 1; r < t; ++r) {
        double dev = perp_norm_rows(traj_states, s, r, t);
        if (dev > report.epsilon_hat) {
          report.epsilon_hat = dev;
          report.worst_s = s;
          report.worst_r = r;
          report.worst_t = t;
        }
      }
    }
  }
  return report;
}

StraighteningResult straightening_check(const std::vector<double>& h_s,
                                        const std::vector<double>& h_r,
                                        const std::vector<double>& h_t,
                                        const std::vector<double>& hstar_s,
                                        const std::vector<double>& hstar_t, double eps) {
  constexpr double kEndpointTol = 1e-12;
  for (size_t i = 0; i < h_s.size(); ++i)
    if (std::fabs(h_s[i] - hstar_s[i]) > kEndpointTol ||
        std::fabs(h_t[i] - hstar_t[i]) > kEndpointTol)
      throw std::invalid_argument("straightening_check: endpoints must coincide with starred ones");

  // Hypothesis: the configuration's own cosine deficit is within eps.
  std::vector<double> u = diff(h_t, h_r);
  std::vector<double> v = diff(h_r, h_s);
  double nu = std::sqrt(norm2(u) * norm2(u) + kNormGuard * kNormGuard);
  double nv = std::sqrt(norm2(v) * norm2(v) + kNormGuard * kNormGuard);
  double cosine = 0.0;
  for (size_t i = 0; i < u.size(); ++i) cosine += u[i] * v[i];
  cosine /= nu * nv;
  double deficit = 1.0 - cosine;
  if (deficit > eps)
    throw std::invalid_argument("straightening_check: cosine deficit exceeds eps");

  constexpr double kSlack = 1.1;
  Decomposition dec = decompose(hstar_s, h_r, hstar_t);
  StraighteningResult result;
  result.lhs = norm2(dec.perpendicular);
  result.rhs = std::sqrt(2.0 * eps) * norm2(v) * kSlack;
  result.holds = result.lhs <= result.rhs;
  return result;
}

std::vector<double> svd_spectrum(const Tensor& rows, bool normalize) {
  if (rows.numel() == 0) throw std::invalid_argument("svd_spectrum: empty matrix");
  int m = rows.rows(), n = rows.cols();

  std::vector<std::vector<double>> work;
  for (int i = 0; i < m; ++i) {
    std::vector<double> row(n);
    for (int j = 0; j < n; ++j) row[j] = rows.at(i, j);
    if (normalize) {
      double nr = norm2(row);
      if (nr < 1e-12) continue;  // zero rows dropped
      for (double& x : row) x /= nr;
    }
    work.push_back(std::move(row));
  }
  if (work.empty()) throw std::invalid_argument("svd_spectrum: all rows were zero");
  m = static_cast<int>(work.size());

  // One-sided Jacobi orthogonalizes the columns of A; singular values are the
  // final column norms. Work on the taller orientation so columns are long.
  int rdim = m, cdim = n;
  bool transposed = false;
  if (rdim < cdim) {
    std::swap(rdim, cdim);
    transposed = true;
  }
  std::vector<double> a(static_cast<size_t>(rdim) * cdim);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      if (transposed)
        a[static_cast<size_t>(j) * cdim + i] = work[i][j];
      else
        a[static_cast<size_t>(i) * cdim + j] = work[i][j];
    }

  constexpr double kTol = 1e-10;
  constexpr int kMaxSweeps = 60;
  bool converged = false;
  for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
    converged = true;
    for (int p = 0; p < cdim - 1; ++p) {
      for (int q = p + 1; q < cdim; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (int i = 0; i < rdim; ++i) {
          double ap = a[static_cast<size_t>(i) * cdim + p];
          double aq = a[static_cast<size_t>(i) * cdim + q];
          alpha += ap * ap;
          beta += aq * aq;
          gamma += ap * aq;
        }
        if (std::fabs(gamma) <= kTol * std::sqrt(alpha * beta)) continue;
        converged = false;
        double zeta = (beta - alpha) / (2.0 * gamma);
        double t_rot = (zeta >= 0.0 ? 1.0 : -1.0) /
                       (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
        double c = 1.0 / std::sqrt(1.0 + t_rot * t_rot);
        double s = c * t_rot;
        for (int i = 0; i < rdim; ++i) {
          double ap = a[static_cast<size_t>(i) * cdim + p];
          double aq = a[static_cast<size_t>(i) * cdim + q];
          a[static_cast<size_t>(i) * cdim + p] = c * ap - s * aq;
          a[static_cast<size_t>(i) * cdim + q] = s * ap + c * aq;
        }
      }
    }
  }
  if (!converged)
    throw std::runtime_error("svd_spectrum: Jacobi sweep limit reached without convergence");

  std::vector<double> singular(cdim);
  for (int j = 0; j < cdim; ++j) {
    double acc = 0.0;
    for (int i = 0; i < rdim; ++i) {
      double v = a[static_cast<size_t>(i) * cdim + j];
      acc += v * v;
    }
    singular[j] = std::sqrt(acc);
  }
  std::sort(singular.begin(), singular.end(), std::greater<double>());
  return singular;
}

std::vector<double> rollout_divergence(const ModelParams& params, const std::vector<int>& prompt,
                                       const std::vector<int>& ground_truth_continuation) {
  int total = static_cast<int>(prompt.size() + ground_truth_continuation.size());
  if (total > params.config.max_seq_len)
    throw std::invalid_argument("rollout_divergence: sequence exceeds max_seq_len");

  NoGradGuard no_grad;
  std::vector<int> reference = prompt;
  reference.insert(reference.end(), ground_truth_continuation.begin(),
                   ground_truth_continuation.end());
  ForwardResult truth = forward(params, reference);

  std::vector<int> generated =
      greedy_decode(params, prompt, static_cast<int>(ground_truth_continuation.size()));
  ForwardResult rollout = forward(params, generated);

  int prompt_len = static_cast<int>(prompt.size());
  int compare = std::min(static_cast<int>(generated.size()), total) - prompt_len;
  int d = params.config.d_model;
  std::vector<double> series;
  for (int i = 0; i < compare; ++i) {
    int pos = prompt_len + i;
    double acc = 0.0;
    for (int j = 0; j < d; ++j) {
      double delta = rollout.trajectory.states.at(pos, j) - truth.trajectory.states.at(pos, j);
      acc += delta * delta;
    }
    series.push_back(std::sqrt(acc));
  }
  return series;
}

double fit_power_law(const std::vector<std::pair<double, double>>& points) {
  if (points.size() < 3) throw std::invalid_argument("fit_power_law: need at least 3 points");
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  for (const auto& [t, y] : points) {
    if (t <= 0.0 || y <= 0.0)
      throw std::invalid_argument("fit_power_law: nonpositive data");
    double lx = std::log(t), ly = std::log(y);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  double n = static_cast<double>(points.size());
  double denom = n * sxx - sx * sx;
  if (std::fabs(denom) < 1e-300)
    throw std::invalid_argument("fit_power_law: degenerate abscissae");
  return (n * sxy - sx * sy) / denom;
}

}  // namespace stp
