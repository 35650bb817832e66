#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "stp/rng.hpp"
#include "stp/tensor.hpp"

using namespace stp;

namespace {

Tensor random_tensor(Rng& rng, const std::vector<int>& shape, bool requires_grad,
                     double scale = 1.0) {
  Tensor t = Tensor::zeros(shape, requires_grad);
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

// Fixed random linear functional, so every gradcheck sees generic upstream
// gradients rather than all-ones.
Tensor reduce(const Tensor& x, Rng& rng) {
  Tensor c = Tensor::zeros(x.shape());
  for (double& v : c.values()) v = rng.normal();
  return dot(x, c);
}

}  // namespace

TEST_CASE("matmul identity and shape errors") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor out = matmul(a, eye);
  for (int i = 0; i < 4; ++i) CHECK(out.values()[i] == a.values()[i]);

  Tensor bad = Tensor::zeros({3, 2});
  CHECK_THROWS_WITH_AS(matmul(a, bad), doctest::Contains("matmul"), std::invalid_argument);
}

TEST_CASE("row_softmax uniform on constant rows") {
  Tensor x = Tensor::from({4}, {0, 0, 0, 0});
  Tensor y = row_softmax(x);
  for (double v : y.values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("row_softmax rows sum to one and stay positive") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor(rng, {5, 7}, false, 10.0);
    Tensor y = row_softmax(x);
    for (int i = 0; i < 5; ++i) {
      double total = 0.0;
      for (int j = 0; j < 7; ++j) {
        CHECK(y.at(i, j) > 0.0);
        total += y.at(i, j);
      }
      CHECK(std::fabs(total - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("layer_norm matches a straight-line scalar oracle") {
  Rng rng(5);
  Tensor x = random_tensor(rng, {3, 8}, false, 2.0);
  Tensor gain = random_tensor(rng, {8}, false);
  Tensor bias = random_tensor(rng, {8}, false);
  Tensor out = layer_norm(x, gain, bias);

  for (int i = 0; i < 3; ++i) {
    double mu = 0.0;
    for (int j = 0; j < 8; ++j) mu += x.at(i, j);
    mu /= 8.0;
    double var = 0.0;
    for (int j = 0; j < 8; ++j) var += (x.at(i, j) - mu) * (x.at(i, j) - mu);
    var /= 8.0;
    double sd = std::sqrt(var + kLayerNormEps);
    for (int j = 0; j < 8; ++j) {
      double expect = gain.at(j) * (x.at(i, j) - mu) / sd + bias.at(j);
      CHECK(std::fabs(out.at(i, j) - expect) < 1e-12);
    }
  }
}

TEST_CASE("backward of sum gives all-ones gradient") {
  Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Tape tape;
  Tensor loss = sum(x);
  tape.backward(loss);
  for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward of dot(x, x) gives 2x") {
  Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  Tape tape;
  Tensor loss = dot(x, x);
  tape.backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(4.0));
  CHECK(x.grad()[2] == doctest::Approx(6.0));
}

TEST_CASE("backward rejects non-scalar, detached, and repeated calls") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  {
    Tape tape;
    Tensor y = scalar_mul(x, 2.0);
    CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);  // non-scalar
    Tensor loss = sum(y);
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), std::runtime_error);  // repeated
  }
  {
    Tape tape;
    Tensor detached = Tensor::scalar(1.0);
    CHECK_THROWS_AS(tape.backward(detached), std::invalid_argument);
  }
}

TEST_CASE("gradient accumulation is linear across losses") {
  Rng rng(17);
  Tensor x = random_tensor(rng, {4}, true);

  auto loss_a = [&]() { return dot(x, x); };
  auto loss_b = [&]() { return sum(gelu(x)); };

  x.zero_grad();
  {
    Tape tape;
    Tensor loss = add(loss_a(), loss_b());
    tape.backward(loss);
  }
  std::vector<double> combined = x.grad();

  x.zero_grad();
  {
    Tape tape;
    Tensor loss = loss_a();
    tape.backward(loss);
  }
  std::vector<double> ga = x.grad();
  x.zero_grad();
  {
    Tape tape;
    Tensor loss = loss_b();
    tape.backward(loss);
  }
  std::vector<double> gb = x.grad();

  for (size_t i = 0; i < combined.size(); ++i)
    CHECK(std::fabs(combined[i] - (ga[i] + gb[i])) < 1e-12);
}

TEST_CASE("finite_difference_check on quadratic and cosine") {
  Tensor x = Tensor::from({1}, {3.0}, true);
  double err = finite_difference_check([&]() { return mul(x, x); }, {x}, 1e-5);
  CHECK(err < 1e-8);

  // Cosine loss of three random 2-D points.
  Rng rng(23);
  Tensor pts = random_tensor(rng, {3, 2}, true);
  auto cosine_loss = [&]() {
    Tensor u = sub(slice_rows(pts, 2, 3), slice_rows(pts, 1, 2));
    Tensor v = sub(slice_rows(pts, 1, 2), slice_rows(pts, 0, 1));
    Tensor c = div(dot(u, v), mul(l2_norm(u), l2_norm(v)));
    return sub(Tensor::scalar(1.0), c);
  };
  err = finite_difference_check(cosine_loss, {pts}, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("every primitive passes finite differences over 10 seeds") {
  for (uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed * 977);

    {  // matmul
      Tensor a = random_tensor(rng, {3, 4}, true);
      Tensor b = random_tensor(rng, {4, 2}, true);
      Tensor c = random_tensor(rng, {3, 2}, false);
      double err =
          finite_difference_check([&]() { return dot(matmul(a, b), c); }, {a, b}, 1e-5);
      CHECK(err < 1e-4);
    }
    {  // add, both same-shape and bias broadcast
      Tensor a = random_tensor(rng, {3, 4}, true);
      Tensor b = random_tensor(rng, {3, 4}, true);
      Tensor bias = random_tensor(rng, {4}, true);
      Tensor c = random_tensor(rng, {3, 4}, false);
      double err = finite_difference_check(
          [&]() { return dot(add(add(a, b), bias), c); }, {a, b, bias}, 1e-5);
      CHECK(err < 1e-4);
    }
    {  // sub, mul
      Tensor a = random_tensor(rng, {2, 5}, true);
      Tensor b = random_tensor(rng, {2, 5}, true);
      Tensor c = random_tensor(rng, {2, 5}, false);
      double err = finite_difference_check(
          [&]() { return dot(mul(sub(a, b), a), c); }, {a, b}, 1e-5);
      CHECK(err < 1e-4);
    }
    {  // div, with denominators bounded away from zero
      Tensor a = random_tensor(rng, {6}, true);
      Tensor b = Tensor::zeros({6}, true);
      for (double& v : b.values()) v = 0.7 + 0.5 * rng.uniform01();
      Tensor c = random_tensor(rng, {6}, false);
      double err =
          finite_difference_check([&]() { return dot(div(a, b), c); }, {a, b}, 1e-5);
      CHECK(err < 1e-4);
    }
    {  // scalar_mul
      Tensor a = random_tensor(rng, {7}, true);
      Tensor c = random_tensor(rng, {7}, false);
      double err = finite_difference_check(
          [&]() { return dot(scalar_mul(a, 1.7), c); }, {a}, 1e-5);
      CHECK(err < 1e-4);
    }
    {  // row_softmax
      Tensor a = random_tensor(rng, {4, 5}, true);
      Tensor c = random_tensor(rng, {4, 5}, false);
      double err =
          finite_difference_check([&]() { return dot(row_softmax(a), c); }, {a}, 1e-5);
      CHECK(err < 1e-4);
    }
    {  // layer_norm
      Tensor x = random_tensor(rng, {4, 6}, true);
      Tensor gain = random_tensor(rng, {6}, true);
      Tensor bias = random_tensor(rng, {6}, true);
      Tensor c = random_tensor(rng, {4, 6}, false);
      double err = finite_difference_check(
          [&]() { return dot(layer_norm(x, gain, bias), c); }, {x, gain, bias}, 1e-5);
      CHECK(err < 1e-4);
    }
    {  // gelu
      Tensor x = random_tensor(rng, {3, 4}, true);
      Tensor c = random_tensor(rng, {3, 4}, false);
      double err = finite_difference_check([&]() { return dot(gelu(x), c); }, {x}, 1e-5);
      CHECK(err < 1e-4);
    }
    {  // embed_lookup
      Tensor table = random_tensor(rng, {7, 4}, true);
      std::vector<int> ids = {0, 3, 3, 6, 1};
      Tensor c = random_tensor(rng, {5, 4}, false);
      double err = finite_difference_check(
          [&]() { return dot(embed_lookup(table, ids), c); }, {table}, 1e-5);
      CHECK(err < 1e-4);
    }
    {  // transpose
      Tensor x = random_tensor(rng, {3, 4}, true);
      Tensor c = random_tensor(rng, {4, 3}, false);
      double err =
          finite_difference_check([&]() { return dot(transpose(x), c); }, {x}, 1e-5);
      CHECK(err < 1e-4);
    }
    {  // sum
      Tensor x = random_tensor(rng, {3, 4}, true);
      double err = finite_difference_check([&]() { return sum(x); }, {x}, 1e-5);
      CHECK(err < 1e-4);
    }
    {  // mean
      Tensor x = random_tensor(rng, {4, 3}, true);
      Tensor c = random_tensor(rng, {3}, false);
      double err = finite_difference_check([&]() { return dot(mean(x), c); }, {x}, 1e-5);
      CHECK(err < 1e-4);
    }
    {  // dot
      Tensor a = random_tensor(rng, {5}, true);
      Tensor b = random_tensor(rng, {5}, true);
      double err = finite_difference_check([&]() { return dot(a, b); }, {a, b}, 1e-5);
      CHECK(err < 1e-4);
    }
    {  // l2_norm
      Tensor x = random_tensor(rng, {6}, true);
      double err = finite_difference_check([&]() { return l2_norm(x); }, {x}, 1e-5);
      CHECK(err < 1e-4);
    }
    {  // concat_rows + slice_rows
      Tensor a = random_tensor(rng, {2, 3}, true);
      Tensor b = random_tensor(rng, {1, 3}, true);
      Tensor c = random_tensor(rng, {2, 3}, false);
      double err = finite_difference_check(
          [&]() { return dot(slice_rows(concat_rows({a, b}), 1, 3), c); }, {a, b}, 1e-5);
      CHECK(err < 1e-4);
    }
    {  // arccos, inputs inside the clamp
      Tensor x = Tensor::zeros({5}, true);
      for (double& v : x.values()) v = 1.6 * rng.uniform01() - 0.8;
      Tensor c = random_tensor(rng, {5}, false);
      double err = finite_difference_check([&]() { return dot(arccos(x), c); }, {x}, 1e-5);
      CHECK(err < 1e-4);
    }
    {  // cross_entropy_rows
      Tensor logits = random_tensor(rng, {5, 7}, true, 2.0);
      std::vector<int> targets(5);
      for (int& t : targets) t = rng.below_int(7);
      std::vector<uint8_t> mask = {1, 0, 1, 1, 0};
      double err = finite_difference_check(
          [&]() { return cross_entropy_rows(logits, targets, mask); }, {logits}, 1e-5);
      CHECK(err < 1e-4);
    }
  }
}

TEST_CASE("apply_primitive dispatches and rejects unknown kinds") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor out = apply_primitive(PrimitiveKind::kMatmul, {a, b});
  CHECK(out.at(1, 0) == 3.0);

  PrimitiveAttrs attrs;
  attrs.scalar = 3.0;
  CHECK(apply_primitive(PrimitiveKind::kScalarMul, {a}, attrs).at(0, 1) == 6.0);

  attrs.ints = {0, 1};
  CHECK(apply_primitive(PrimitiveKind::kSliceRows, {a}, attrs).numel() == 2);

  CHECK_THROWS_WITH_AS(primitive_from_name("conv2d"), doctest::Contains("unknown kind"),
                       std::invalid_argument);
  CHECK(primitive_from_name("layer_norm") == PrimitiveKind::kLayerNorm);
}

TEST_CASE("forward primitives stay finite on degenerate inputs") {
  Tensor zeros = Tensor::zeros({4});
  CHECK(std::isfinite(l2_norm(zeros).item()));
  CHECK(l2_norm(zeros).item() == doctest::Approx(kNormGuard));

  Tensor num = Tensor::from({2}, {1.0, -1.0});
  Tensor den = Tensor::zeros({2});
  for (double v : div(num, den).values()) CHECK(std::isfinite(v));

  Tensor ends = Tensor::from({2}, {1.0, -1.0});
  for (double v : arccos(ends).values()) CHECK(std::isfinite(v));

  Tensor gain = Tensor::full({4}, 1.0);
  Tensor bias = Tensor::zeros({4});
  for (double v : layer_norm(zeros, gain, bias).values()) CHECK(std::isfinite(v));

  // Mask-style softmax rows: -1e30 entries underflow to exactly zero weight.
  Tensor masked = Tensor::from({1, 3}, {0.5, -1e30, -1e30});
  Tensor probs = row_softmax(masked);
  CHECK(probs.at(0, 0) == 1.0);
  CHECK(probs.at(0, 1) == 0.0);
}

TEST_CASE("tensor invariants: shape/value agreement, grad shape") {
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), std::invalid_argument);
  Tensor x = Tensor::zeros({3, 2}, true);
  CHECK(x.numel() == 6);
  CHECK_FALSE(x.has_grad());
  x.grad();  // lazily allocated
  CHECK(x.grad().size() == x.numel());
}
