#pragma once

// Next-token cross-entropy, the trajectory-straightening (STP) cosine loss,
// and the ablation loss zoo with lambda scheduling. Every loss is built from
// recorded primitives, so gradients flow to the trajectory (and projector).

#include <optional>
#include <string>
#include <vector>

#include "stp/data.hpp"
#include "stp/rng.hpp"
#include "stp/tensor.hpp"

namespace stp {

struct IndexTriple {
  int s = 0;
  int r = 1;
  int t = 2;
  std::optional<int> r_skip;  // when present: r < r_skip <= t-1

  void validate(int seq_len) const;  // throws std::invalid_argument
};

enum class TripleStrategy { kRandom, kZero, kTwoView };

enum class AuxVariant {
  kStp, kStpZero, kStpPred,
  kTwoView, kTwoViewWarmup, kTwoViewPred, kTwoViewMean,
  kMask, kMaskFull, kMaskPred,
  kCurvature, kCurvatureSigned,
  kNone,
};

const char* variant_name(AuxVariant v);
AuxVariant variant_from_name(const std::string& name);  // throws on unknown

struct AuxLossSpec {
  AuxVariant variant = AuxVariant::kNone;
  double lambda = 0.0;
  int warmup_steps = 0;     // TwoViewWarmup ramp horizon; 0 = whole run
  Tensor projector;         // d_model x d_model, Pred variants only
  int mask_token_id = kMaskToken;

  bool needs_projector() const;
  bool needs_mask_pass() const;
  TripleStrategy strategy() const;
  void validate(int d_model) const;
};

// Mean over unmasked positions of -log softmax(logits)[target].
Tensor ntp_loss(const Tensor& logits, const std::vector<int>& targets,
                const std::vector<uint8_t>& loss_mask);

// 1 - cos(h_t - h_{r' or r}, h_r - h_s), norms guarded; range [0, 2].
Tensor stp_loss(const Tensor& traj_states, const IndexTriple& triple);

// Random: uniform over all strictly increasing triples. Zero: s = 0, (r, t)
// uniform. TwoView: deterministic (query_start, query_end, answer_end).
IndexTriple sample_triple(Rng& rng, int seq_len, TripleStrategy strategy,
                          const std::optional<SpanMarks>& marks = std::nullopt);

// Variant dispatch. masked_traj is the trajectory of the masked sequence
// (Mask variants only; produced by an extra forward pass on the input with
// the triple's [s, r] span replaced by the mask token).
Tensor aux_loss(const AuxLossSpec& spec, const Tensor& traj_states, const IndexTriple& triple,
                const Tensor* masked_traj = nullptr);

// Constant lambda, except TwoViewWarmup ramps linearly from 0.
double lambda_at(const AuxLossSpec& spec, int step, int total_steps);

// ntp + lambda_now * aux. With lambda_now == 0 returns ntp unchanged so the
// graph (and training dynamics) match a pure-NTP run bit for bit.
Tensor combined_loss(const Tensor& ntp, const Tensor& aux, double lambda_now);

// 1 - dot(u, v) / (|u| |v|), all norms guarded; building block shared by the
// loss zoo.
Tensor cosine_deficit(const Tensor& u, const Tensor& v);

}  // namespace stp
