#pragma once

// Joint uncertainty quantification: entropy and head-disagreement maps, their
// per-image normalisations, the JUQ product, reliability maps and the
// reliability-weighted pseudo-labels derived from them.
//
// Probability tensors are [N, C, H, W, D]; voxel maps are [N, H, W, D]. All
// sums over voxels are taken per image (per N index).

#include <torch/torch.h>

#include <string_view>

#include "epcl/model.hpp"

namespace epcl {

inline constexpr double kUncertaintyEps = 1e-8;

enum class UncertaintyKind { Entropy, Variance, EntropyNorm, DistNorm, Juq };

struct UncertaintyMap {
  torch::Tensor data;
  UncertaintyKind kind;
};

enum class ReliabilityMode { VerbatimEq6, MinMax };

std::string_view to_string(ReliabilityMode mode) noexcept;
ReliabilityMode parse_reliability_mode(std::string_view text);

struct ReliabilityMap {
  torch::Tensor data;
  ReliabilityMode mode;
};

struct PseudoLabel {
  torch::Tensor probs;    // raw pseudo-label distribution
  torch::Tensor refined;  // reliability (x) probs, broadcast over classes
  torch::Tensor hard;     // int64 argmax of refined, lowest class wins ties
};

/// -sum_c p ln p with 0 ln 0 = 0. Throws NotADistribution.
UncertaintyMap entropy_map(const torch::Tensor& probs);

/// Variance across heads (population, divide by K) per class, averaged over classes.
UncertaintyMap head_variance(const PredictionSet& pred);

/// exp(-Var_p / (sum_p Var_p + eps)).
UncertaintyMap dist_uncertainty_norm(const PredictionSet& pred);

/// 1 - e_p / (sum_p e_p + eps).
UncertaintyMap entropy_norm(const UncertaintyMap& entropy);

/// dist_uncertainty_norm(pred) * entropy_norm(entropy_map(pl_probs)).
UncertaintyMap juq(const PredictionSet& pred, const torch::Tensor& pl_probs);

/// VerbatimEq6: (1 - j_p / (sum j + eps)) / (H*W*D).
/// MinMax:      1 - (j_p - min j) / (max j - min j + eps).
ReliabilityMap reliability_map(const UncertaintyMap& j, ReliabilityMode mode);

PseudoLabel refine_pseudo_labels(const torch::Tensor& pl_probs, const ReliabilityMap& r);

/// First-maximum argmax over dim 1, independent of backend tie handling.
torch::Tensor argmax_lowest(const torch::Tensor& scores);

}  // namespace epcl
