#pragma once

// Dense f64 tensors (1-D / 2-D) with define-by-run reverse-mode autodiff.
// A Tape records one forward pass; backward() replays the recorded nodes in
// strict reverse append order, which is a valid topological order because
// every node's inputs were created before it. One tape per thread at a time;
// parameters are plain leaf tensors whose grad buffers accumulate across
// tapes until zero_grad().

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace stp {

class Tape;

// Guard added inside norms/denominators so degenerate inputs stay finite.
inline constexpr double kNormGuard = 1e-8;
inline constexpr double kLayerNormEps = 1e-8;
inline constexpr double kAcosClamp = 1e-6;

struct TensorData {
  std::vector<int> shape;
  std::vector<double> values;
  std::vector<double> grad;  // lazily allocated, same length as values
  bool requires_grad = false;
  Tape* tape = nullptr;  // tape that recorded the producing node
  int node_id = -1;      // position on that tape; -1 for leaves
};

class Tensor {
 public:
  Tensor() : d_(std::make_shared<TensorData>()) {}

  static Tensor zeros(const std::vector<int>& shape, bool requires_grad = false);
  static Tensor full(const std::vector<int>& shape, double value);
  static Tensor from(const std::vector<int>& shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double v);
  static Tensor row(std::vector<double> v);  // shape {n}

  const std::vector<int>& shape() const { return d_->shape; }
  int ndim() const { return static_cast<int>(d_->shape.size()); }
  int rows() const;
  int cols() const;
  size_t numel() const { return d_->values.size(); }
  bool is_scalar() const { return numel() == 1; }
  double item() const;

  double at(int i) const { return d_->values[static_cast<size_t>(i)]; }
  double& at(int i) { return d_->values[static_cast<size_t>(i)]; }
  double at(int i, int j) const;
  double& at(int i, int j);

  std::vector<double>& values() { return d_->values; }
  const std::vector<double>& values() const { return d_->values; }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool on) { d_->requires_grad = on; }
  bool has_grad() const { return !d_->grad.empty(); }
  std::vector<double>& grad();  // allocates zeros on first access
  const std::vector<double>& grad() const;
  void zero_grad();

  const std::shared_ptr<TensorData>& data() const { return d_; }

 private:
  std::shared_ptr<TensorData> d_;
};

// RAII guard: while alive, primitives do not record onto any tape.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tape {
 public:
  Tape();  // becomes the active tape for this thread
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();
  // True when a tape is active and no NoGradGuard is in scope.
  static bool recording();

  // Populates grad for every requires_grad leaf reachable from loss.
  // loss must be a scalar recorded on this tape; a second call without a
  // fresh tape is an error.
  void backward(const Tensor& loss);

  int size() const { return static_cast<int>(nodes_.size()); }

  // Used by primitives: attaches out to this tape and appends its pull rule.
  void record(const std::shared_ptr<TensorData>& out, std::function<void()> pull);

 private:
  struct Node {
    std::shared_ptr<TensorData> out;
    std::function<void()> pull;
  };
  std::vector<Node> nodes_;
  bool ran_backward_ = false;
};

// ---- primitive kernels -----------------------------------------------------
//
// Each primitive computes its forward result and, when recording, appends the
// exact backward rule for that kind. Per-kind gradients are documented at the
// definition site.

Tensor matmul(const Tensor& a, const Tensor& b);       // {m,k}x{k,n} -> {m,n}
Tensor add(const Tensor& a, const Tensor& b);          // same shape, or {n,d}+{d}
Tensor sub(const Tensor& a, const Tensor& b);          // same shape
Tensor mul(const Tensor& a, const Tensor& b);          // elementwise, same shape
Tensor div(const Tensor& a, const Tensor& b);          // elementwise, guarded denominator
Tensor scalar_mul(const Tensor& a, double c);
Tensor row_softmax(const Tensor& a);                   // {n,d}, per-row max subtraction
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
Tensor gelu(const Tensor& x);                          // exact erf form
Tensor embed_lookup(const Tensor& table, const std::vector<int>& ids);
Tensor transpose(const Tensor& x);
Tensor sum(const Tensor& x);                           // all elements -> scalar
Tensor mean(const Tensor& x);                          // {n,d} -> {d} column means
Tensor dot(const Tensor& a, const Tensor& b);          // same shape -> scalar
Tensor l2_norm(const Tensor& x);                       // sqrt(sum sq + kNormGuard^2)
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, int begin, int end);
Tensor arccos(const Tensor& x);                        // inputs clamped to |x| <= 1 - kAcosClamp
// Mean over unmasked rows of -log softmax(logits_row)[target]; fused so the
// backward rule is the exact (softmax - onehot) / n_unmasked form.
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets,
                          const std::vector<uint8_t>& mask);

// ---- generic dispatch -------------------------------------------------------

enum class PrimitiveKind {
  kMatmul, kAdd, kSub, kScalarMul, kRowSoftmax, kLayerNorm, kGelu,
  kEmbedLookup, kTranspose, kSum, kMean, kDot, kL2Norm, kConcatRows,
  kSliceRows, kMul, kDiv, kArccos, kCrossEntropyRows,
};

const char* primitive_name(PrimitiveKind kind);
PrimitiveKind primitive_from_name(const std::string& name);  // throws on unknown kind

struct PrimitiveAttrs {
  double scalar = 0.0;        // scalar_mul
  std::vector<int> ints;      // embed_lookup ids; slice_rows {begin,end}; cross_entropy targets
  std::vector<uint8_t> mask;  // cross_entropy loss mask
};

Tensor apply_primitive(PrimitiveKind kind, const std::vector<Tensor>& inputs,
                       const PrimitiveAttrs& attrs = {});

// ---- gradient checking ------------------------------------------------------

// Runs f once under a fresh tape to collect analytic gradients, then central
// differences over every coordinate of every param. Returns
// max |analytic - fd| / max(1, |analytic|). f must rebuild the scalar loss
// from the params' current values on each call and be deterministic.
double finite_difference_check(const std::function<Tensor()>& f,
                               const std::vector<Tensor>& params, double step);

}  // namespace stp
