#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <vector>

#include "stp/losses.hpp"
#include "stp/rng.hpp"

using namespace stp;

namespace {

Tensor traj_from(const std::vector<std::vector<double>>& rows, bool requires_grad = false) {
  int n = static_cast<int>(rows.size());
  int d = static_cast<int>(rows[0].size());
  Tensor t = Tensor::zeros({n, d}, requires_grad);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) t.at(i, j) = rows[i][j];
  return t;
}

Tensor random_traj(Rng& rng, int n, int d, bool requires_grad) {
  Tensor t = Tensor::zeros({n, d}, requires_grad);
  for (double& v : t.values()) v = rng.normal();
  return t;
}

}  // namespace

TEST_CASE("ntp_loss on uniform and peaked logits") {
  Tensor uniform = Tensor::zeros({1, 4});
  Tensor loss = ntp_loss(uniform, {2}, {1});
  CHECK(loss.item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  Tensor peaked = Tensor::zeros({1, 4});
  peaked.at(0, 1) = 100.0;
  CHECK(ntp_loss(peaked, {1}, {1}).item() < 1e-40);

  CHECK_THROWS_AS(ntp_loss(uniform, {2}, {0}), std::invalid_argument);  // all masked
}

TEST_CASE("ntp_loss matches a scalar-loop oracle on hand-set logits") {
  Tensor logits = Tensor::from({2, 3}, {0.3, -1.2, 2.0, 1.0, 0.5, -0.5});
  std::vector<int> targets = {2, 0};
  std::vector<uint8_t> mask = {1, 1};

  double expect = 0.0;
  for (int i = 0; i < 2; ++i) {
    double z = 0.0;
    for (int j = 0; j < 3; ++j) z += std::exp(logits.at(i, j));
    expect += -std::log(std::exp(logits.at(i, targets[i])) / z);
  }
  expect /= 2.0;
  CHECK(std::fabs(ntp_loss(logits, targets, mask).item() - expect) < 1e-12);
}

TEST_CASE("stp_loss geometric identities") {
  IndexTriple triple{0, 1, 2, std::nullopt};
  CHECK(stp_loss(traj_from({{0, 0}, {1, 1}, {2, 2}}), triple).item() ==
        doctest::Approx(0.0).epsilon(1e-9));
  CHECK(stp_loss(traj_from({{0, 0}, {1, 0}, {1, 1}}), triple).item() ==
        doctest::Approx(1.0).epsilon(1e-9));
  // Oracle by plain dot-product arithmetic: u=(1,1), v=(1,0) -> 1 - 1/sqrt(2).
  CHECK(stp_loss(traj_from({{0, 0}, {1, 0}, {2, 1}}), triple).item() ==
        doctest::Approx(1.0 - 1.0 / std::sqrt(2.0)).epsilon(1e-9));
  // Anti-parallel.
  CHECK(stp_loss(traj_from({{0, 0}, {1, 0}, {0, 0.0000001}}), triple).item() ==
        doctest::Approx(2.0).epsilon(1e-4));
}

TEST_CASE("stp_loss honors the skip index") {
  // h_t - h_{r'} instead of h_t - h_r.
  Tensor traj = traj_from({{0, 0}, {1, 0}, {5, 5}, {6, 5}, {7, 6}});
  IndexTriple plain{0, 1, 4, std::nullopt};
  IndexTriple skip{0, 1, 4, 3};
  double loss_plain = stp_loss(traj, plain).item();   // cos((6,6),(1,0))
  double loss_skip = stp_loss(traj, skip).item();     // cos((1,1),(1,0))
  CHECK(loss_plain == doctest::Approx(1.0 - 6.0 / (std::sqrt(72.0))).epsilon(1e-9));
  CHECK(loss_skip == doctest::Approx(1.0 - 1.0 / std::sqrt(2.0)).epsilon(1e-9));

  IndexTriple bad{0, 1, 4, 4};  // r' must be <= t-1
  CHECK_THROWS_AS(stp_loss(traj, bad), std::invalid_argument);
}

TEST_CASE("stp_loss range, translation and scale invariance") {
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor traj = random_traj(rng, 6, 5, false);
    IndexTriple triple = sample_triple(rng, 6, TripleStrategy::kRandom);
    double base = stp_loss(traj, triple).item();
    CHECK(base >= 0.0);
    CHECK(base <= 2.0 + 1e-6);

    Tensor shifted = traj;
    double offset = 3.7 * rng.normal();
    Tensor moved = Tensor::zeros({6, 5});
    for (size_t i = 0; i < moved.numel(); ++i) moved.values()[i] = shifted.values()[i] + offset;
    CHECK(std::fabs(stp_loss(moved, triple).item() - base) < 1e-10);

    double scale = 0.5 + 2.0 * rng.uniform01();
    Tensor scaled = Tensor::zeros({6, 5});
    for (size_t i = 0; i < scaled.numel(); ++i) scaled.values()[i] = traj.values()[i] * scale;
    CHECK(std::fabs(stp_loss(scaled, triple).item() - base) < 1e-10);
  }
}

TEST_CASE("sample_triple forced cases and preconditions") {
  Rng rng(1);
  IndexTriple forced = sample_triple(rng, 3, TripleStrategy::kRandom);
  CHECK(forced.s == 0);
  CHECK(forced.r == 1);
  CHECK(forced.t == 2);

  SpanMarks marks{0, 4, 9};
  IndexTriple two_view = sample_triple(rng, 10, TripleStrategy::kTwoView, marks);
  CHECK(two_view.s == 0);
  CHECK(two_view.r == 4);
  CHECK(two_view.t == 9);

  IndexTriple zero = sample_triple(rng, 12, TripleStrategy::kZero);
  CHECK(zero.s == 0);
  CHECK(zero.r > 0);
  CHECK(zero.t > zero.r);

  CHECK_THROWS_AS(sample_triple(rng, 2, TripleStrategy::kRandom), std::invalid_argument);
  CHECK_THROWS_AS(sample_triple(rng, 10, TripleStrategy::kTwoView, std::nullopt),
                  std::invalid_argument);
}

TEST_CASE("sample_triple is uniform over valid triples") {
  // Oracle: enumerate all C(10,3) = 120 valid triples; 1e5 draws should put
  // every count within 3 sigma of the uniform expectation.
  Rng rng(82);
  const int seq_len = 10, draws = 100000;
  std::map<std::tuple<int, int, int>, int> counts;
  for (int i = 0; i < draws; ++i) {
    IndexTriple t = sample_triple(rng, seq_len, TripleStrategy::kRandom);
    counts[{t.s, t.r, t.t}]++;
  }
  int n_triples = 0;
  for (int s = 0; s < seq_len; ++s)
    for (int r = s + 1; r < seq_len; ++r)
      for (int t = r + 1; t < seq_len; ++t) ++n_triples;
  CHECK(n_triples == 120);
  CHECK(counts.size() == 120);

  double p = 1.0 / n_triples;
  double expected = draws * p;
  double sigma = std::sqrt(draws * p * (1.0 - p));
  for (const auto& [key, count] : counts)
    CHECK(std::fabs(count - expected) <= 3.0 * sigma + 1e-9);
}

TEST_CASE("aux_loss variant formulas") {
  IndexTriple triple{0, 1, 2, std::nullopt};

  SUBCASE("curvature vanishes on a straight equally spaced line") {
    AuxLossSpec spec;
    spec.variant = AuxVariant::kCurvature;
    Tensor line = traj_from({{0, 0}, {1, 1}, {2, 2}, {3, 3}});
    // The arccos clamp floors each angle at acos(1 - 1e-6) ~ 1.41e-3.
    CHECK(aux_loss(spec, line, triple).item() <= std::acos(1.0 - kAcosClamp) + 1e-12);
  }
  SUBCASE("curvature pi/2 on a right-angle zigzag") {
    AuxLossSpec spec;
    spec.variant = AuxVariant::kCurvatureSigned;  // identical by construction
    Tensor zig = traj_from({{0, 0}, {1, 0}, {1, 1}, {2, 1}, {2, 2}});
    CHECK(aux_loss(spec, zig, triple).item() == doctest::Approx(M_PI / 2).epsilon(1e-6));
  }
  SUBCASE("pred with identity projector reduces to the plain cosine form") {
    Rng rng(7);
    Tensor traj = random_traj(rng, 5, 4, false);
    AuxLossSpec spec;
    spec.variant = AuxVariant::kStpPred;
    spec.projector = Tensor::from({4, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
    IndexTriple t2{1, 2, 4, std::nullopt};
    double pred = aux_loss(spec, traj, t2).item();
    // 1 - cos(h_r - h_s, h_t - h_r): operands swapped relative to stp_loss,
    // equal by cosine symmetry.
    double plain = stp_loss(traj, t2).item();
    CHECK(pred == doctest::Approx(plain).epsilon(1e-12));
  }
  SUBCASE("two-view mean uses inclusive span means") {
    Tensor traj = traj_from({{1, 0}, {3, 0}, {0, 2}, {0, 4}});
    AuxLossSpec spec;
    spec.variant = AuxVariant::kTwoViewMean;
    IndexTriple t2{0, 1, 3, std::nullopt};
    // left = mean(rows 0..1) = (2,0); right = mean(rows 1..3) = (1,2).
    double expect = 1.0 - 2.0 / (2.0 * std::sqrt(5.0));
    CHECK(aux_loss(spec, traj, t2).item() == doctest::Approx(expect).epsilon(1e-9));
  }
  SUBCASE("mask variants require the masked trajectory") {
    AuxLossSpec spec;
    spec.variant = AuxVariant::kMask;
    Tensor traj = traj_from({{0, 0}, {1, 0}, {1, 1}});
    CHECK_THROWS_AS(aux_loss(spec, traj, triple), std::invalid_argument);
    Tensor masked = traj_from({{0, 0}, {0.5, 0}, {1, 0}});
    // 1 - cos(h_r - h_s, g_t) = 1 - cos((1,0),(1,0)) = 0.
    CHECK(aux_loss(spec, traj, triple, &masked).item() == doctest::Approx(0.0).epsilon(1e-9));
    spec.variant = AuxVariant::kMaskFull;
    // 1 - cos(h_t, g_t) = 1 - cos((1,1),(1,0)).
    CHECK(aux_loss(spec, traj, triple, &masked).item() ==
          doctest::Approx(1.0 - 1.0 / std::sqrt(2.0)).epsilon(1e-9));
  }
  SUBCASE("pred variants demand a projector") {
    AuxLossSpec spec;
    spec.variant = AuxVariant::kStpPred;
    Tensor traj = traj_from({{0, 0}, {1, 0}, {1, 1}});
    CHECK_THROWS_AS(aux_loss(spec, traj, triple), std::invalid_argument);
  }
}

TEST_CASE("every loss variant passes finite differences on random trajectories") {
  Rng rng(907);
  std::vector<AuxVariant> variants = {
      AuxVariant::kStp, AuxVariant::kStpZero, AuxVariant::kStpPred,
      AuxVariant::kTwoView, AuxVariant::kTwoViewWarmup, AuxVariant::kTwoViewPred,
      AuxVariant::kTwoViewMean, AuxVariant::kMask, AuxVariant::kMaskFull,
      AuxVariant::kMaskPred, AuxVariant::kCurvature, AuxVariant::kCurvatureSigned};

  for (uint64_t seed = 1; seed <= 10; ++seed) {
    for (AuxVariant variant : variants) {
      AuxLossSpec spec;
      spec.variant = variant;
      spec.lambda = 1.0;
      Tensor traj = random_traj(rng, 8, 8, true);
      Tensor masked = random_traj(rng, 8, 8, true);
      if (spec.needs_projector()) {
        spec.projector = Tensor::zeros({8, 8}, true);
        for (double& v : spec.projector.values()) v = 0.5 * rng.normal();
      }
      SpanMarks marks{1, 3, 7};
      IndexTriple triple = spec.strategy() == TripleStrategy::kTwoView
                               ? sample_triple(rng, 8, TripleStrategy::kTwoView, marks)
                               : sample_triple(rng, 8, spec.strategy());
      if (spec.needs_mask_pass()) triple.t = 7;

      std::vector<Tensor> params = {traj};
      if (spec.needs_mask_pass()) params.push_back(masked);
      if (spec.needs_projector()) params.push_back(spec.projector);
      auto f = [&]() {
        return aux_loss(spec, traj, triple, spec.needs_mask_pass() ? &masked : nullptr);
      };
      double err = finite_difference_check(f, params, 1e-5);
      CAPTURE(variant_name(variant));
      CHECK(err < 1e-4);
    }
  }
}

TEST_CASE("lambda_at schedules") {
  AuxLossSpec constant;
  constant.variant = AuxVariant::kStp;
  constant.lambda = 0.05;
  CHECK(lambda_at(constant, 17, 100) == 0.05);

  AuxLossSpec warm;
  warm.variant = AuxVariant::kTwoViewWarmup;
  warm.lambda = 0.08;
  CHECK(lambda_at(warm, 0, 400) == 0.0);
  CHECK(lambda_at(warm, 400, 400) == doctest::Approx(0.08));
  CHECK(lambda_at(warm, 100, 400) == doctest::Approx(0.02));
  CHECK_THROWS_AS(lambda_at(warm, 401, 400), std::invalid_argument);
}

TEST_CASE("combined_loss arithmetic and exact lambda-zero identity") {
  Tensor ntp = Tensor::scalar(1.0);
  Tensor aux = Tensor::scalar(0.5);
  CHECK(combined_loss(ntp, aux, 0.02).item() == doctest::Approx(1.01).epsilon(1e-15));
  CHECK(combined_loss(ntp, Tensor::scalar(0.0), 0.3).item() == 1.0);
  // lambda = 0: the returned tensor IS the ntp tensor, not a copy.
  Tensor same = combined_loss(ntp, aux, 0.0);
  CHECK(same.data() == ntp.data());
}

TEST_CASE("aux spec validation") {
  AuxLossSpec spec;
  spec.variant = AuxVariant::kStp;
  spec.lambda = -0.1;
  CHECK_THROWS_AS(spec.validate(8), std::invalid_argument);
  spec.lambda = 0.02;
  spec.projector = Tensor::zeros({8, 8});
  CHECK_THROWS_AS(spec.validate(8), std::invalid_argument);  // projector without Pred
}
