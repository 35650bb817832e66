#include "stp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace stp {

namespace {

thread_local Tape* g_active_tape = nullptr;
thread_local bool g_no_grad = false;

size_t shape_numel(const std::vector<int>& shape) {
  size_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw std::invalid_argument("tensor: nonpositive extent in shape");
    n *= static_cast<size_t>(e);
  }
  if (shape.empty()) throw std::invalid_argument("tensor: empty shape");
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::string s = "{";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "}";
}

[[noreturn]] void shape_error(const char* kind, const std::string& detail) {
  throw std::invalid_argument(std::string(kind) + ": " + detail);
}

void ensure_grad_buffer(const std::shared_ptr<TensorData>& d) {
  if (d->grad.empty()) d->grad.assign(d->values.size(), 0.0);
}

// Treats a 1-D tensor {n} as a single row when a matrix is expected.
void as_matrix(const Tensor& t, int& r, int& c) {
  if (t.ndim() == 2) {
    r = t.shape()[0];
    c = t.shape()[1];
  } else {
    r = 1;
    c = static_cast<int>(t.numel());
  }
}

// C += A * B, A m x k, B k x n. ikj order keeps both streams contiguous.
void mm_nn_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C += A * B^T, A m x k, B n x k.
void mm_nt_acc(const double* a, const double* b, double* c, int m, int n, int k) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* brow = b + static_cast<size_t>(j) * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C += A^T * B, A k x m, B k x n.
void mm_tn_acc(const double* a, const double* b, double* c, int m, int n, int k) {
  for (int p = 0; p < k; ++p) {
    const double* arow = a + static_cast<size_t>(p) * m;
    const double* brow = b + static_cast<size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

bool want_record(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::recording()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

void record(Tensor& out, std::function<void()> pull) {
  out.set_requires_grad(true);
  Tape::active()->record(out.data(), std::move(pull));
}

}  // namespace

// ---- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(const std::vector<int>& shape, bool requires_grad) {
  Tensor t;
  t.d_->shape = shape;
  t.d_->values.assign(shape_numel(shape), 0.0);
  t.d_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::full(const std::vector<int>& shape, double value) {
  Tensor t = zeros(shape);
  std::fill(t.d_->values.begin(), t.d_->values.end(), value);
  return t;
}

Tensor Tensor::from(const std::vector<int>& shape, std::vector<double> values,
                    bool requires_grad) {
  if (shape_numel(shape) != values.size())
    throw std::invalid_argument("tensor: shape " + shape_str(shape) +
                                " does not match value count " + std::to_string(values.size()));
  Tensor t;
  t.d_->shape = shape;
  t.d_->values = std::move(values);
  t.d_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

Tensor Tensor::row(std::vector<double> v) {
  int n = static_cast<int>(v.size());
  return from({n}, std::move(v));
}

int Tensor::rows() const {
  int r, c;
  as_matrix(*this, r, c);
  return r;
}

int Tensor::cols() const {
  int r, c;
  as_matrix(*this, r, c);
  return c;
}

double Tensor::item() const {
  if (!is_scalar()) throw std::invalid_argument("tensor: item() on non-scalar " + shape_str(shape()));
  return d_->values[0];
}

double Tensor::at(int i, int j) const {
  return d_->values[static_cast<size_t>(i) * cols() + j];
}

double& Tensor::at(int i, int j) {
  return d_->values[static_cast<size_t>(i) * cols() + j];
}

std::vector<double>& Tensor::grad() {
  ensure_grad_buffer(d_);
  return d_->grad;
}

const std::vector<double>& Tensor::grad() const {
  if (d_->grad.empty()) throw std::runtime_error("tensor: gradient not populated");
  return d_->grad;
}

void Tensor::zero_grad() {
  if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
}

// ---- Tape -------------------------------------------------------------------

NoGradGuard::NoGradGuard() : previous_(g_no_grad) { g_no_grad = true; }
NoGradGuard::~NoGradGuard() { g_no_grad = previous_; }

Tape::Tape() {
  if (g_active_tape != nullptr)
    throw std::runtime_error("tape: another tape is already active on this thread");
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = nullptr; }

Tape* Tape::active() { return g_active_tape; }

bool Tape::recording() { return g_active_tape != nullptr && !g_no_grad; }

void Tape::record(const std::shared_ptr<TensorData>& out, std::function<void()> pull) {
  out->tape = this;
  out->node_id = static_cast<int>(nodes_.size());
  nodes_.push_back({out, std::move(pull)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.is_scalar())
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_str(loss.shape()));
  if (loss.data()->tape != this || loss.data()->node_id < 0)
    throw std::invalid_argument("backward: loss is detached from this tape");
  if (ran_backward_)
    throw std::runtime_error("backward: tape already consumed; build a fresh tape");
  ran_backward_ = true;

  ensure_grad_buffer(loss.data());
  loss.data()->grad[0] = 1.0;
  // Nodes whose output never received gradient are off the loss path (for
  // example the logits of an auxiliary forward pass); their pulls would all
  // add zero, so they are skipped.
  for (size_t i = nodes_.size(); i-- > 0;)
    if (!nodes_[i].out->grad.empty()) nodes_[i].pull();
}

// ---- primitives --------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2)
    shape_error("matmul", "expects matrices, got " + shape_str(a.shape()) + " and " +
                              shape_str(b.shape()));
  int m = a.shape()[0], k = a.shape()[1];
  int k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2)
    shape_error("matmul", "inner extents differ (" + shape_str(a.shape()) + " vs " +
                              shape_str(b.shape()) + ")");
  Tensor out = Tensor::zeros({m, n});
  mm_nn_acc(a.values().data(), b.values().data(), out.values().data(), m, k, n);

  if (want_record({&a, &b})) {
    auto ad = a.data(), bd = b.data(), od = out.data();
    // dA += G B^T ; dB += A^T G
    record(out, [ad, bd, od, m, k, n]() {
      if (ad->requires_grad) {
        ensure_grad_buffer(ad);
        mm_nt_acc(od->grad.data(), bd->values.data(), ad->grad.data(), m, k, n);
      }
      if (bd->requires_grad) {
        ensure_grad_buffer(bd);
        mm_tn_acc(ad->values.data(), od->grad.data(), bd->grad.data(), k, n, m);
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  bool bias_broadcast = a.ndim() == 2 && b.ndim() == 1 && a.shape()[1] == static_cast<int>(b.numel());
  if (!bias_broadcast && a.shape() != b.shape())
    shape_error("add", "shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                           " do not conform");
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  if (bias_broadcast) {
    int n = a.shape()[0], d = a.shape()[1];
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) ov[static_cast<size_t>(i) * d + j] = av[static_cast<size_t>(i) * d + j] + bv[j];
  } else {
    for (size_t i = 0; i < av.size(); ++i) ov[i] = av[i] + bv[i];
  }

  if (want_record({&a, &b})) {
    auto ad = a.data(), bd = b.data(), od = out.data();
    // dA += G ; dB += G (column-summed when b is a broadcast bias)
    record(out, [ad, bd, od, bias_broadcast]() {
      if (ad->requires_grad) {
        ensure_grad_buffer(ad);
        for (size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i];
      }
      if (bd->requires_grad) {
        ensure_grad_buffer(bd);
        if (bias_broadcast) {
          size_t d = bd->values.size();
          for (size_t i = 0; i < od->grad.size(); ++i) bd->grad[i % d] += od->grad[i];
        } else {
          for (size_t i = 0; i < od->grad.size(); ++i) bd->grad[i] += od->grad[i];
        }
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    shape_error("sub", "shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                           " differ");
  Tensor out = Tensor::zeros(a.shape());
  for (size_t i = 0; i < out.numel(); ++i) out.values()[i] = a.values()[i] - b.values()[i];

  if (want_record({&a, &b})) {
    auto ad = a.data(), bd = b.data(), od = out.data();
    record(out, [ad, bd, od]() {
      if (ad->requires_grad) {
        ensure_grad_buffer(ad);
        for (size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i];
      }
      if (bd->requires_grad) {
        ensure_grad_buffer(bd);
        for (size_t i = 0; i < od->grad.size(); ++i) bd->grad[i] -= od->grad[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    shape_error("mul", "shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                           " differ");
  Tensor out = Tensor::zeros(a.shape());
  for (size_t i = 0; i < out.numel(); ++i) out.values()[i] = a.values()[i] * b.values()[i];

  if (want_record({&a, &b})) {
    auto ad = a.data(), bd = b.data(), od = out.data();
    // dA += G o B ; dB += G o A
    record(out, [ad, bd, od]() {
      if (ad->requires_grad) {
        ensure_grad_buffer(ad);
        for (size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i] * bd->values[i];
      }
      if (bd->requires_grad) {
        ensure_grad_buffer(bd);
        for (size_t i = 0; i < od->grad.size(); ++i) bd->grad[i] += od->grad[i] * ad->values[i];
      }
    });
  }
  return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    shape_error("div", "shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                           " differ");
  Tensor out = Tensor::zeros(a.shape());
  // Denominators below 1e-30 in magnitude are lifted to +-1e-30 so the
  // forward value stays finite on finite inputs.
  auto guard = [](double x) {
    double ax = std::fabs(x);
    if (ax >= 1e-30) return x;
    return x < 0.0 ? -1e-30 : 1e-30;
  };
  for (size_t i = 0; i < out.numel(); ++i) out.values()[i] = a.values()[i] / guard(b.values()[i]);

  if (want_record({&a, &b})) {
    auto ad = a.data(), bd = b.data(), od = out.data();
    // dA += G / b ; dB -= G a / b^2  (guarded b)
    record(out, [ad, bd, od, guard]() {
      for (size_t i = 0; i < od->grad.size(); ++i) {
        double bg = guard(bd->values[i]);
        if (ad->requires_grad) {
          ensure_grad_buffer(ad);
          ad->grad[i] += od->grad[i] / bg;
        }
        if (bd->requires_grad) {
          ensure_grad_buffer(bd);
          bd->grad[i] -= od->grad[i] * ad->values[i] / (bg * bg);
        }
      }
    });
  }
  return out;
}

Tensor scalar_mul(const Tensor& a, double c) {
  Tensor out = Tensor::zeros(a.shape());
  for (size_t i = 0; i < out.numel(); ++i) out.values()[i] = a.values()[i] * c;

  if (want_record({&a})) {
    auto ad = a.data(), od = out.data();
    record(out, [ad, od, c]() {
      ensure_grad_buffer(ad);
      for (size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i] * c;
    });
  }
  return out;
}

Tensor row_softmax(const Tensor& a) {
  int n, d;
  as_matrix(a, n, d);
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  for (int i = 0; i < n; ++i) {
    const double* x = av.data() + static_cast<size_t>(i) * d;
    double* y = ov.data() + static_cast<size_t>(i) * d;
    double mx = x[0];
    for (int j = 1; j < d; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < d; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (int j = 0; j < d; ++j) y[j] /= z;
  }

  if (want_record({&a})) {
    auto ad = a.data(), od = out.data();
    // Softmax Jacobian-vector product per row: dx = y o (g - <g, y>).
    record(out, [ad, od, n, d]() {
      ensure_grad_buffer(ad);
      for (int i = 0; i < n; ++i) {
        const double* y = od->values.data() + static_cast<size_t>(i) * d;
        const double* g = od->grad.data() + static_cast<size_t>(i) * d;
        double* dx = ad->grad.data() + static_cast<size_t>(i) * d;
        double gy = 0.0;
        for (int j = 0; j < d; ++j) gy += g[j] * y[j];
        for (int j = 0; j < d; ++j) dx[j] += y[j] * (g[j] - gy);
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  int n, d;
  as_matrix(x, n, d);
  if (static_cast<int>(gain.numel()) != d || static_cast<int>(bias.numel()) != d)
    shape_error("layer_norm", "gain/bias length must equal row width " + std::to_string(d) +
                                  ", got " + shape_str(gain.shape()) + " and " +
                                  shape_str(bias.shape()));
  Tensor out = Tensor::zeros(x.shape());
  // Saved per row for backward: sigma and the normalized row y.
  auto sigma = std::make_shared<std::vector<double>>(n);
  auto norm = std::make_shared<std::vector<double>>(static_cast<size_t>(n) * d);
  for (int i = 0; i < n; ++i) {
    const double* row = x.values().data() + static_cast<size_t>(i) * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += row[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= d;
    double sg = std::sqrt(var + kLayerNormEps);
    (*sigma)[i] = sg;
    double* y = norm->data() + static_cast<size_t>(i) * d;
    double* o = out.values().data() + static_cast<size_t>(i) * d;
    for (int j = 0; j < d; ++j) {
      y[j] = (row[j] - mu) / sg;
      o[j] = gain.values()[j] * y[j] + bias.values()[j];
    }
  }

  if (want_record({&x, &gain, &bias})) {
    auto xd = x.data(), gd = gain.data(), bd = bias.data(), od = out.data();
    // Full layer-norm gradient:
    //   dgain_j += sum_i G_ij y_ij ; dbias_j += sum_i G_ij
    //   dx = (gy - mean(gy) - y mean(gy o y)) / sigma, gy = G o gain
    record(out, [xd, gd, bd, od, sigma, norm, n, d]() {
      for (int i = 0; i < n; ++i) {
        const double* g = od->grad.data() + static_cast<size_t>(i) * d;
        const double* y = norm->data() + static_cast<size_t>(i) * d;
        if (gd->requires_grad) {
          ensure_grad_buffer(gd);
          for (int j = 0; j < d; ++j) gd->grad[j] += g[j] * y[j];
        }
        if (bd->requires_grad) {
          ensure_grad_buffer(bd);
          for (int j = 0; j < d; ++j) bd->grad[j] += g[j];
        }
        if (xd->requires_grad) {
          ensure_grad_buffer(xd);
          double m1 = 0.0, m2 = 0.0;
          for (int j = 0; j < d; ++j) {
            double gy = g[j] * gd->values[j];
            m1 += gy;
            m2 += gy * y[j];
          }
          m1 /= d;
          m2 /= d;
          double* dx = xd->grad.data() + static_cast<size_t>(i) * d;
          for (int j = 0; j < d; ++j) {
            double gy = g[j] * gd->values[j];
            dx[j] += (gy - m1 - y[j] * m2) / (*sigma)[i];
          }
        }
      }
    });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  for (size_t i = 0; i < out.numel(); ++i) {
    double v = x.values()[i];
    out.values()[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  }

  if (want_record({&x})) {
    auto xd = x.data(), od = out.data();
    // dx += G o (Phi(x) + x phi(x))
    record(out, [xd, od]() {
      ensure_grad_buffer(xd);
      constexpr double is2 = 0.70710678118654752440;
      constexpr double inv_sqrt2pi = 0.39894228040143267794;
      for (size_t i = 0; i < od->grad.size(); ++i) {
        double v = xd->values[i];
        double cdf = 0.5 * (1.0 + std::erf(v * is2));
        double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
        xd->grad[i] += od->grad[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

Tensor embed_lookup(const Tensor& table, const std::vector<int>& ids) {
  if (table.ndim() != 2)
    shape_error("embed_lookup", "table must be 2-D, got " + shape_str(table.shape()));
  int v = table.shape()[0], d = table.shape()[1];
  int n = static_cast<int>(ids.size());
  if (n == 0) shape_error("embed_lookup", "empty id list");
  for (int id : ids)
    if (id < 0 || id >= v)
      shape_error("embed_lookup", "id " + std::to_string(id) + " outside table rows " +
                                      std::to_string(v));
  Tensor out = Tensor::zeros({n, d});
  for (int i = 0; i < n; ++i)
    std::copy_n(table.values().data() + static_cast<size_t>(ids[i]) * d, d,
                out.values().data() + static_cast<size_t>(i) * d);

  if (want_record({&table})) {
    auto td = table.data(), od = out.data();
    auto saved_ids = ids;
    // Scatter-add rows: dTable[id_i] += G_i.
    record(out, [td, od, saved_ids, d]() {
      ensure_grad_buffer(td);
      for (size_t i = 0; i < saved_ids.size(); ++i) {
        const double* g = od->grad.data() + i * d;
        double* dst = td->grad.data() + static_cast<size_t>(saved_ids[i]) * d;
        for (int j = 0; j < d; ++j) dst[j] += g[j];
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& x) {
  int n, d;
  as_matrix(x, n, d);
  Tensor out = Tensor::zeros({d, n});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      out.values()[static_cast<size_t>(j) * n + i] = x.values()[static_cast<size_t>(i) * d + j];

  if (want_record({&x})) {
    auto xd = x.data(), od = out.data();
    record(out, [xd, od, n, d]() {
      ensure_grad_buffer(xd);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
          xd->grad[static_cast<size_t>(i) * d + j] += od->grad[static_cast<size_t>(j) * n + i];
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  Tensor out = Tensor::scalar(acc);

  if (want_record({&x})) {
    auto xd = x.data(), od = out.data();
    record(out, [xd, od]() {
      ensure_grad_buffer(xd);
      for (size_t i = 0; i < xd->grad.size(); ++i) xd->grad[i] += od->grad[0];
    });
  }
  return out;
}

Tensor mean(const Tensor& x) {
  if (x.ndim() != 2) shape_error("mean", "expects a matrix, got " + shape_str(x.shape()));
  int n = x.shape()[0], d = x.shape()[1];
  Tensor out = Tensor::zeros({d});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out.values()[j] += x.values()[static_cast<size_t>(i) * d + j];
  for (int j = 0; j < d; ++j) out.values()[j] /= n;

  if (want_record({&x})) {
    auto xd = x.data(), od = out.data();
    record(out, [xd, od, n, d]() {
      ensure_grad_buffer(xd);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
          xd->grad[static_cast<size_t>(i) * d + j] += od->grad[j] / n;
    });
  }
  return out;
}

Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() && a.numel() != b.numel())
    shape_error("dot", "shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                           " differ");
  double acc = 0.0;
  for (size_t i = 0; i < a.numel(); ++i) acc += a.values()[i] * b.values()[i];
  Tensor out = Tensor::scalar(acc);

  if (want_record({&a, &b})) {
    auto ad = a.data(), bd = b.data(), od = out.data();
    record(out, [ad, bd, od]() {
      double g = od->grad[0];
      if (ad->requires_grad) {
        ensure_grad_buffer(ad);
        for (size_t i = 0; i < ad->grad.size(); ++i) ad->grad[i] += g * bd->values[i];
      }
      if (bd->requires_grad) {
        ensure_grad_buffer(bd);
        for (size_t i = 0; i < bd->grad.size(); ++i) bd->grad[i] += g * ad->values[i];
      }
    });
  }
  return out;
}

Tensor l2_norm(const Tensor& x) {
  double acc = kNormGuard * kNormGuard;
  for (double v : x.values()) acc += v * v;
  Tensor out = Tensor::scalar(std::sqrt(acc));

  if (want_record({&x})) {
    auto xd = x.data(), od = out.data();
    // dx += g x / out; out >= kNormGuard so this is always finite.
    record(out, [xd, od]() {
      ensure_grad_buffer(xd);
      double g = od->grad[0] / od->values[0];
      for (size_t i = 0; i < xd->grad.size(); ++i) xd->grad[i] += g * xd->values[i];
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) shape_error("concat_rows", "empty part list");
  int d = parts[0].cols();
  int total = 0;
  for (const Tensor& p : parts) {
    if (p.cols() != d)
      shape_error("concat_rows", "row widths differ (" + std::to_string(d) + " vs " +
                                     std::to_string(p.cols()) + ")");
    total += p.rows();
  }
  Tensor out = Tensor::zeros({total, d});
  size_t offset = 0;
  for (const Tensor& p : parts) {
    std::copy(p.values().begin(), p.values().end(), out.values().begin() + offset);
    offset += p.numel();
  }

  bool any = false;
  for (const Tensor& p : parts) any = any || p.requires_grad();
  if (Tape::recording() && any) {
    std::vector<std::shared_ptr<TensorData>> pds;
    for (const Tensor& p : parts) pds.push_back(p.data());
    auto od = out.data();
    record(out, [pds, od]() {
      size_t off = 0;
      for (const auto& pd : pds) {
        if (pd->requires_grad) {
          ensure_grad_buffer(pd);
          for (size_t i = 0; i < pd->values.size(); ++i) pd->grad[i] += od->grad[off + i];
        }
        off += pd->values.size();
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& x, int begin, int end) {
  int n, d;
  as_matrix(x, n, d);
  if (begin < 0 || end > n || begin >= end)
    shape_error("slice_rows", "range [" + std::to_string(begin) + "," + std::to_string(end) +
                                  ") invalid for " + std::to_string(n) + " rows");
  Tensor out = Tensor::zeros({end - begin, d});
  std::copy_n(x.values().data() + static_cast<size_t>(begin) * d,
              static_cast<size_t>(end - begin) * d, out.values().data());

  if (want_record({&x})) {
    auto xd = x.data(), od = out.data();
    record(out, [xd, od, begin, d]() {
      ensure_grad_buffer(xd);
      double* dst = xd->grad.data() + static_cast<size_t>(begin) * d;
      for (size_t i = 0; i < od->grad.size(); ++i) dst[i] += od->grad[i];
    });
  }
  return out;
}

Tensor arccos(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const double lim = 1.0 - kAcosClamp;
  for (size_t i = 0; i < out.numel(); ++i) {
    double v = std::clamp(x.values()[i], -lim, lim);
    out.values()[i] = std::acos(v);
  }

  if (want_record({&x})) {
    auto xd = x.data(), od = out.data();
    // dx += -G / sqrt(1 - x^2) inside the clamp; zero slope outside.
    record(out, [xd, od, lim]() {
      ensure_grad_buffer(xd);
      for (size_t i = 0; i < od->grad.size(); ++i) {
        double v = xd->values[i];
        if (v <= -lim || v >= lim) continue;
        xd->grad[i] -= od->grad[i] / std::sqrt(1.0 - v * v);
      }
    });
  }
  return out;
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets,
                          const std::vector<uint8_t>& mask) {
  if (logits.ndim() != 2)
    shape_error("cross_entropy_rows", "logits must be 2-D, got " + shape_str(logits.shape()));
  int n = logits.shape()[0], v = logits.shape()[1];
  if (static_cast<int>(targets.size()) != n || static_cast<int>(mask.size()) != n)
    shape_error("cross_entropy_rows",
                "targets/mask length must equal logits rows " + std::to_string(n));
  int active = 0;
  for (uint8_t m : mask) active += m ? 1 : 0;
  if (active == 0) throw std::invalid_argument("cross_entropy_rows: all positions masked");
  for (int i = 0; i < n; ++i)
    if (mask[i] && (targets[i] < 0 || targets[i] >= v))
      throw std::invalid_argument("cross_entropy_rows: target " + std::to_string(targets[i]) +
                                  " outside vocab " + std::to_string(v));

  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    const double* row = logits.values().data() + static_cast<size_t>(i) * v;
    double mx = row[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    total += std::log(z) + mx - row[targets[i]];
  }
  Tensor out = Tensor::scalar(total / active);

  if (want_record({&logits})) {
    auto ld = logits.data(), od = out.data();
    auto saved_targets = targets;
    auto saved_mask = mask;
    // dLogits_row += (softmax(row) - onehot(target)) * g / n_unmasked.
    record(out, [ld, od, saved_targets, saved_mask, n, v, active]() {
      ensure_grad_buffer(ld);
      double g = od->grad[0] / active;
      for (int i = 0; i < n; ++i) {
        if (!saved_mask[i]) continue;
        const double* row = ld->values.data() + static_cast<size_t>(i) * v;
        double* dst = ld->grad.data() + static_cast<size_t>(i) * v;
        double mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < v; ++j) z += std::exp(row[j] - mx);
        for (int j = 0; j < v; ++j) dst[j] += g * (std::exp(row[j] - mx) / z);
        dst[saved_targets[i]] -= g;
      }
    });
  }
  return out;
}

// ---- dispatch ----------------------------------------------------------------

namespace {
struct KindName {
  PrimitiveKind kind;
  const char* name;
};
constexpr KindName kKindNames[] = {
    {PrimitiveKind::kMatmul, "matmul"},
    {PrimitiveKind::kAdd, "add"},
    {PrimitiveKind::kSub, "sub"},
    {PrimitiveKind::kScalarMul, "scalar_mul"},
    {PrimitiveKind::kRowSoftmax, "row_softmax"},
    {PrimitiveKind::kLayerNorm, "layer_norm"},
    {PrimitiveKind::kGelu, "gelu"},
    {PrimitiveKind::kEmbedLookup, "embed_lookup"},
    {PrimitiveKind::kTranspose, "transpose"},
    {PrimitiveKind::kSum, "sum"},
    {PrimitiveKind::kMean, "mean"},
    {PrimitiveKind::kDot, "dot"},
    {PrimitiveKind::kL2Norm, "l2_norm"},
    {PrimitiveKind::kConcatRows, "concat_rows"},
    {PrimitiveKind::kSliceRows, "slice_rows"},
    {PrimitiveKind::kMul, "mul"},
    {PrimitiveKind::kDiv, "div"},
    {PrimitiveKind::kArccos, "arccos"},
    {PrimitiveKind::kCrossEntropyRows, "cross_entropy_rows"},
};

void need_inputs(PrimitiveKind kind, const std::vector<Tensor>& inputs, size_t n) {
  if (inputs.size() != n)
    throw std::invalid_argument(std::string(primitive_name(kind)) + ": expects " +
                                std::to_string(n) + " inputs, got " +
                                std::to_string(inputs.size()));
}
}  // namespace

const char* primitive_name(PrimitiveKind kind) {
  for (const auto& kn : kKindNames)
    if (kn.kind == kind) return kn.name;
  return "?";
}

PrimitiveKind primitive_from_name(const std::string& name) {
  for (const auto& kn : kKindNames)
    if (name == kn.name) return kn.kind;
  throw std::invalid_argument("apply_primitive: unknown kind '" + name + "'");
}

Tensor apply_primitive(PrimitiveKind kind, const std::vector<Tensor>& inputs,
                       const PrimitiveAttrs& attrs) {
  switch (kind) {
    case PrimitiveKind::kMatmul:
      need_inputs(kind, inputs, 2);
      return matmul(inputs[0], inputs[1]);
    case PrimitiveKind::kAdd:
      need_inputs(kind, inputs, 2);
      return add(inputs[0], inputs[1]);
    case PrimitiveKind::kSub:
      need_inputs(kind, inputs, 2);
      return sub(inputs[0], inputs[1]);
    case PrimitiveKind::kScalarMul:
      need_inputs(kind, inputs, 1);
      return scalar_mul(inputs[0], attrs.scalar);
    case PrimitiveKind::kRowSoftmax:
      need_inputs(kind, inputs, 1);
      return row_softmax(inputs[0]);
    case PrimitiveKind::kLayerNorm:
      need_inputs(kind, inputs, 3);
      return layer_norm(inputs[0], inputs[1], inputs[2]);
    case PrimitiveKind::kGelu:
      need_inputs(kind, inputs, 1);
      return gelu(inputs[0]);
    case PrimitiveKind::kEmbedLookup:
      need_inputs(kind, inputs, 1);
      return embed_lookup(inputs[0], attrs.ints);
    case PrimitiveKind::kTranspose:
      need_inputs(kind, inputs, 1);
      return transpose(inputs[0]);
    case PrimitiveKind::kSum:
      need_inputs(kind, inputs, 1);
      return sum(inputs[0]);
    case PrimitiveKind::kMean:
      need_inputs(kind, inputs, 1);
      return mean(inputs[0]);
    case PrimitiveKind::kDot:
      need_inputs(kind, inputs, 2);
      return dot(inputs[0], inputs[1]);
    case PrimitiveKind::kL2Norm:
      need_inputs(kind, inputs, 1);
      return l2_norm(inputs[0]);
    case PrimitiveKind::kConcatRows:
      return concat_rows(inputs);
    case PrimitiveKind::kSliceRows:
      need_inputs(kind, inputs, 1);
      if (attrs.ints.size() != 2)
        throw std::invalid_argument("slice_rows: attrs.ints must be {begin,end}");
      return slice_rows(inputs[0], attrs.ints[0], attrs.ints[1]);
    case PrimitiveKind::kMul:
      need_inputs(kind, inputs, 2);
      return mul(inputs[0], inputs[1]);
    case PrimitiveKind::kDiv:
      need_inputs(kind, inputs, 2);
      return div(inputs[0], inputs[1]);
    case PrimitiveKind::kArccos:
      need_inputs(kind, inputs, 1);
      return arccos(inputs[0]);
    case PrimitiveKind::kCrossEntropyRows:
      need_inputs(kind, inputs, 1);
      return cross_entropy_rows(inputs[0], attrs.ints, attrs.mask);
  }
  throw std::invalid_argument("apply_primitive: unknown kind tag " +
                              std::to_string(static_cast<int>(kind)));
}

// ---- finite differences --------------------------------------------------------

double finite_difference_check(const std::function<Tensor()>& f,
                               const std::vector<Tensor>& params, double step) {
  if (step <= 0.0) throw std::invalid_argument("finite_difference_check: step must be > 0");
  for (const Tensor& p : params)
    if (!p.requires_grad())
      throw std::invalid_argument("finite_difference_check: all params must require grad");

  std::vector<std::vector<double>> analytic;
  {
    for (const Tensor& p : params) const_cast<Tensor&>(p).zero_grad();
    Tape tape;
    Tensor loss = f();
    if (!std::isfinite(loss.item()))
      throw std::runtime_error("finite_difference_check: non-finite loss");
    tape.backward(loss);
    for (const Tensor& p : params) analytic.push_back(const_cast<Tensor&>(p).grad());
  }

  double worst = 0.0;
  NoGradGuard no_grad;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    for (size_t i = 0; i < p.numel(); ++i) {
      double saved = p.values()[i];
      p.values()[i] = saved + step;
      double fp = f().item();
      p.values()[i] = saved - step;
      double fm = f().item();
      p.values()[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw std::runtime_error("finite_difference_check: non-finite f evaluation");
      double fd = (fp - fm) / (2.0 * step);
      double g = analytic[pi][i];
      double rel = std::fabs(g - fd) / std::max(1.0, std::fabs(g));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace stp
