#include "stp/losses.hpp"

#include <algorithm>
#include <stdexcept>

namespace stp {

namespace {

Tensor traj_row(const Tensor& traj, int i) { return slice_rows(traj, i, i + 1); }

struct VariantName {
  AuxVariant variant;
  const char* name;
};
constexpr VariantName kVariantNames[] = {
    {AuxVariant::kStp, "STP"},
    {AuxVariant::kStpZero, "STP_Zero"},
    {AuxVariant::kStpPred, "STP_Pred"},
    {AuxVariant::kTwoView, "TwoView"},
    {AuxVariant::kTwoViewWarmup, "TwoView_Warmup"},
    {AuxVariant::kTwoViewPred, "TwoView_Pred"},
    {AuxVariant::kTwoViewMean, "TwoView_Mean"},
    {AuxVariant::kMask, "Mask"},
    {AuxVariant::kMaskFull, "Mask_Full"},
    {AuxVariant::kMaskPred, "Mask_Pred"},
    {AuxVariant::kCurvature, "Curvature"},
    {AuxVariant::kCurvatureSigned, "Curvature_Signed"},
    {AuxVariant::kNone, "None"},
};

}  // namespace

void IndexTriple::validate(int seq_len) const {
  if (!(0 <= s && s < r && r < t && t < seq_len))
    throw std::invalid_argument("triple: need 0 <= s < r < t < " + std::to_string(seq_len) +
                                ", got (" + std::to_string(s) + "," + std::to_string(r) + "," +
                                std::to_string(t) + ")");
  if (r_skip && !(r < *r_skip && *r_skip <= t - 1))
    throw std::invalid_argument("triple: skip index " + std::to_string(*r_skip) +
                                " must satisfy r < r' <= t-1");
}

const char* variant_name(AuxVariant v) {
  for (const auto& vn : kVariantNames)
    if (vn.variant == v) return vn.name;
  return "?";
}

AuxVariant variant_from_name(const std::string& name) {
  for (const auto& vn : kVariantNames)
    if (name == vn.name) return vn.variant;
  throw std::invalid_argument("variant: unknown name '" + name + "'");
}

bool AuxLossSpec::needs_projector() const {
  return variant == AuxVariant::kStpPred || variant == AuxVariant::kTwoViewPred ||
         variant == AuxVariant::kMaskPred;
}

bool AuxLossSpec::needs_mask_pass() const {
  return variant == AuxVariant::kMask || variant == AuxVariant::kMaskFull ||
         variant == AuxVariant::kMaskPred;
}

TripleStrategy AuxLossSpec::strategy() const {
  switch (variant) {
    case AuxVariant::kStpZero:
      return TripleStrategy::kZero;
    case AuxVariant::kTwoView:
    case AuxVariant::kTwoViewWarmup:
    case AuxVariant::kTwoViewPred:
    case AuxVariant::kTwoViewMean:
      return TripleStrategy::kTwoView;
    default:
      return TripleStrategy::kRandom;
  }
}

void AuxLossSpec::validate(int d_model) const {
  if (!std::isfinite(lambda) || lambda < 0.0)
    throw std::invalid_argument("aux spec: lambda must be finite and >= 0");
  if (needs_projector()) {
    if (projector.numel() == 0)
      throw std::invalid_argument(std::string("aux spec: variant ") + variant_name(variant) +
                                  " requires a projector");
    if (projector.ndim() != 2 || projector.shape()[0] != d_model ||
        projector.shape()[1] != d_model)
      throw std::invalid_argument("aux spec: projector must be d_model x d_model");
  } else if (projector.numel() != 0) {
    throw std::invalid_argument("aux spec: projector only valid for Pred variants");
  }
}

Tensor ntp_loss(const Tensor& logits, const std::vector<int>& targets,
                const std::vector<uint8_t>& loss_mask) {
  return cross_entropy_rows(logits, targets, loss_mask);
}

Tensor cosine_deficit(const Tensor& u, const Tensor& v) {
  Tensor cosine = div(dot(u, v), mul(l2_norm(u), l2_norm(v)));
  return sub(Tensor::scalar(1.0), cosine);
}

Tensor stp_loss(const Tensor& traj_states, const IndexTriple& triple) {
  triple.validate(traj_states.rows());
  int back = triple.r_skip ? *triple.r_skip : triple.r;
  Tensor u = sub(traj_row(traj_states, triple.t), traj_row(traj_states, back));
  Tensor v = sub(traj_row(traj_states, triple.r), traj_row(traj_states, triple.s));
  return cosine_deficit(u, v);
}

IndexTriple sample_triple(Rng& rng, int seq_len, TripleStrategy strategy,
                          const std::optional<SpanMarks>& marks) {
  if (seq_len < 3) throw std::invalid_argument("sample_triple: seq_len must be >= 3");
  IndexTriple triple;
  switch (strategy) {
    case TripleStrategy::kRandom: {
      // Three distinct positions, sorted: uniform over all valid triples.
      int a, b, c;
      do {
        a = rng.below_int(seq_len);
        b = rng.below_int(seq_len);
        c = rng.below_int(seq_len);
      } while (a == b || b == c || a == c);
      int lo = std::min({a, b, c}), hi = std::max({a, b, c});
      triple.s = lo;
      triple.r = a + b + c - lo - hi;
      triple.t = hi;
      break;
    }
    case TripleStrategy::kZero: {
      triple.s = 0;
      int a, b;
      do {
        a = 1 + rng.below_int(seq_len - 1);
        b = 1 + rng.below_int(seq_len - 1);
      } while (a == b);
      triple.r = std::min(a, b);
      triple.t = std::max(a, b);
      break;
    }
    case TripleStrategy::kTwoView: {
      if (!marks) throw std::invalid_argument("sample_triple: TwoView requires span marks");
      triple.s = marks->query_start;
      triple.r = marks->query_end;
      triple.t = marks->answer_end;
      break;
    }
  }
  triple.validate(seq_len);
  return triple;
}

Tensor aux_loss(const AuxLossSpec& spec, const Tensor& traj_states, const IndexTriple& triple,
                const Tensor* masked_traj) {
  int seq_len = traj_states.rows();
  if (spec.needs_mask_pass() && masked_traj == nullptr)
    throw std::invalid_argument(std::string("aux_loss: variant ") + variant_name(spec.variant) +
                                " requires the masked-sequence trajectory");

  switch (spec.variant) {
    case AuxVariant::kNone:
      return Tensor::scalar(0.0);

    case AuxVariant::kStp:
    case AuxVariant::kStpZero:
    case AuxVariant::kTwoView:
    case AuxVariant::kTwoViewWarmup:
      return stp_loss(traj_states, triple);

    case AuxVariant::kStpPred:
    case AuxVariant::kTwoViewPred: {
      spec.validate(traj_states.cols());
      triple.validate(seq_len);
      // 1 - cos(P(h_r - h_s), h_t - h_r); P applied as a right-multiplied
      // linear map on the row vector.
      Tensor past = sub(traj_row(traj_states, triple.r), traj_row(traj_states, triple.s));
      Tensor future = sub(traj_row(traj_states, triple.t), traj_row(traj_states, triple.r));
      return cosine_deficit(matmul(past, spec.projector), future);
    }

    case AuxVariant::kTwoViewMean: {
      triple.validate(seq_len);
      // Arms are mean pooled over the inclusive spans [s, r] and [r, t].
      Tensor left = mean(slice_rows(traj_states, triple.s, triple.r + 1));
      Tensor right = mean(slice_rows(traj_states, triple.r, triple.t + 1));
      return cosine_deficit(left, right);
    }

    case AuxVariant::kMask: {
      triple.validate(seq_len);
      Tensor span = sub(traj_row(traj_states, triple.r), traj_row(traj_states, triple.s));
      Tensor recovered = traj_row(*masked_traj, triple.t);
      return cosine_deficit(span, recovered);
    }

    case AuxVariant::kMaskFull: {
      triple.validate(seq_len);
      return cosine_deficit(traj_row(traj_states, triple.t), traj_row(*masked_traj, triple.t));
    }

    case AuxVariant::kMaskPred: {
      spec.validate(traj_states.cols());
      triple.validate(seq_len);
      Tensor span = sub(traj_row(traj_states, triple.r), traj_row(traj_states, triple.s));
      return cosine_deficit(matmul(span, spec.projector), traj_row(*masked_traj, triple.t));
    }

    case AuxVariant::kCurvature:
    case AuxVariant::kCurvatureSigned: {
      // Mean of arccos of the (clamped) cosine between consecutive increments.
      // arccos lands in [0, pi], so the signed form coincides with the
      // unsigned one; kCurvatureSigned is kept as an explicit alias.
      if (seq_len < 3)
        throw std::invalid_argument("aux_loss: curvature needs at least 3 positions");
      Tensor total = Tensor::scalar(0.0);
      for (int i = 1; i + 1 < seq_len; ++i) {
        Tensor prev = sub(traj_row(traj_states, i), traj_row(traj_states, i - 1));
        Tensor next = sub(traj_row(traj_states, i + 1), traj_row(traj_states, i));
        Tensor cosine = div(dot(prev, next), mul(l2_norm(prev), l2_norm(next)));
        total = add(total, arccos(cosine));
      }
      return scalar_mul(total, 1.0 / (seq_len - 2));
    }
  }
  throw std::invalid_argument("aux_loss: unknown variant");
}

double lambda_at(const AuxLossSpec& spec, int step, int total_steps) {
  if (step > total_steps)
    throw std::invalid_argument("lambda_at: step exceeds total_steps");
  if (spec.variant != AuxVariant::kTwoViewWarmup) return spec.lambda;
  int horizon = spec.warmup_steps > 0 ? spec.warmup_steps : total_steps;
  if (horizon <= 0) return spec.lambda;
  double ramp = std::min(1.0, static_cast<double>(step) / horizon);
  return spec.lambda * ramp;
}

Tensor combined_loss(const Tensor& ntp, const Tensor& aux, double lambda_now) {
  if (!std::isfinite(ntp.item()) || !std::isfinite(aux.item()))
    throw std::invalid_argument("combined_loss: non-finite inputs");
  if (lambda_now == 0.0) return ntp;
  return add(ntp, scalar_mul(aux, lambda_now));
}

}  // namespace stp
