#include "epcl/uncertainty.hpp"

#include <string>

#include "epcl/error.hpp"

namespace epcl {
namespace {

// Sum over all voxel axes of an [N, H, W, D] map, kept broadcastable.
torch::Tensor voxel_sum(const torch::Tensor& m) { return m.sum({1, 2, 3}, /*keepdim=*/true); }

void check_probs(const torch::Tensor& probs) {
  if (probs.dim() != 5) throw Error(Errc::ShapeMismatch, "probabilities must be [N, C, H, W, D]");
  if (probs.lt(0).any().item<bool>()) throw Error(Errc::NotADistribution, "negative probability");
  const auto sums = probs.sum(1);
  if ((sums - 1.0).abs().gt(1e-5).any().item<bool>()) {
    throw Error(Errc::NotADistribution, "class probabilities do not sum to 1 within 1e-5");
  }
}

}  // namespace

std::string_view to_string(ReliabilityMode mode) noexcept {
  return mode == ReliabilityMode::MinMax ? "minmax" : "verbatim_eq6";
}

ReliabilityMode parse_reliability_mode(std::string_view text) {
  if (text == "verbatim_eq6") return ReliabilityMode::VerbatimEq6;
  if (text == "minmax") return ReliabilityMode::MinMax;
  throw Error(Errc::BadConfig, "unknown reliability_mode '" + std::string(text) + "' (verbatim_eq6, minmax)");
}

UncertaintyMap entropy_map(const torch::Tensor& probs) {
  torch::NoGradGuard no_grad;
  check_probs(probs);
  const auto terms = torch::where(probs > 0, probs * torch::log(probs), torch::zeros_like(probs));
  return {-terms.sum(1), UncertaintyKind::Entropy};
}

UncertaintyMap head_variance(const PredictionSet& pred) {
  torch::NoGradGuard no_grad;
  if (pred.num_heads() < 2) throw Error(Errc::InvalidArgument, "head variance needs at least two heads");
  const auto stacked = torch::stack(pred.head_probs, 0);  // [K, N, C, H, W, D]
  const auto var = stacked.var(0, /*unbiased=*/false);    // [N, C, H, W, D]
  return {var.mean(1), UncertaintyKind::Variance};
}

UncertaintyMap dist_uncertainty_norm(const PredictionSet& pred) {
  torch::NoGradGuard no_grad;
  const auto var = head_variance(pred).data;
  return {torch::exp(-var / (voxel_sum(var) + kUncertaintyEps)), UncertaintyKind::DistNorm};
}

UncertaintyMap entropy_norm(const UncertaintyMap& entropy) {
  torch::NoGradGuard no_grad;
  const auto& e = entropy.data;
  if (e.lt(0).any().item<bool>()) throw Error(Errc::InvalidArgument, "entropy must be non-negative");
  return {1.0 - e / (voxel_sum(e) + kUncertaintyEps), UncertaintyKind::EntropyNorm};
}

UncertaintyMap juq(const PredictionSet& pred, const torch::Tensor& pl_probs) {
  torch::NoGradGuard no_grad;
  if (!pred.mean_probs.sizes().equals(pl_probs.sizes())) {
    throw Error(Errc::ShapeMismatch, "prediction set and pseudo-label shapes differ");
  }
  const auto dist = dist_uncertainty_norm(pred);
  const auto ent = entropy_norm(entropy_map(pl_probs));
  return {dist.data * ent.data, UncertaintyKind::Juq};
}

ReliabilityMap reliability_map(const UncertaintyMap& j, ReliabilityMode mode) {
  torch::NoGradGuard no_grad;
  const auto& m = j.data;
  if (m.dim() != 4) throw Error(Errc::ShapeMismatch, "uncertainty map must be [N, H, W, D]");
  if (m.lt(0).any().item<bool>()) throw Error(Errc::InvalidArgument, "reliability input must be non-negative");
  if (mode == ReliabilityMode::VerbatimEq6) {
    const double voxels = static_cast<double>(m.size(1) * m.size(2) * m.size(3));
    return {(1.0 - m / (voxel_sum(m) + kUncertaintyEps)) / voxels, mode};
  }
  const auto flat = m.flatten(1);
  const auto lo = std::get<0>(flat.min(1)).view({-1, 1, 1, 1});
  const auto hi = std::get<0>(flat.max(1)).view({-1, 1, 1, 1});
  return {1.0 - (m - lo) / (hi - lo + kUncertaintyEps), mode};
}

torch::Tensor argmax_lowest(const torch::Tensor& scores) {
  auto best = torch::zeros_like(scores.select(1, 0), torch::kLong);
  auto best_val = scores.select(1, 0).clone();
  for (std::int64_t c = 1; c < scores.size(1); ++c) {
    const auto v = scores.select(1, c);
    const auto better = v > best_val;
    best.masked_fill_(better, c);
    best_val = torch::where(better, v, best_val);
  }
  return best;
}

PseudoLabel refine_pseudo_labels(const torch::Tensor& pl_probs, const ReliabilityMap& r) {
  torch::NoGradGuard no_grad;
  if (pl_probs.dim() != 5 || r.data.dim() != 4 || pl_probs.size(0) != r.data.size(0) ||
      !pl_probs.sizes().slice(2).equals(r.data.sizes().slice(1))) {
    throw Error(Errc::ShapeMismatch, "pseudo-label and reliability shapes differ");
  }
  PseudoLabel pl;
  pl.probs = pl_probs.detach();
  pl.refined = pl.probs * r.data.unsqueeze(1);
  pl.hard = argmax_lowest(pl.refined);
  return pl;
}

}  // namespace epcl
