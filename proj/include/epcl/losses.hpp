#pragma once

// Training objectives: the four supervised losses and fused cross entropy,
// prototype consistency losses, the Gaussian ramp and the total loss.
//
// Probabilities are [N, C, H, W, D]. Hard targets are int64 [N, H, W, D];
// soft targets share the probability layout and may be sub-stochastic
// (reliability-weighted), in which case they act as per-voxel weights.

#include <torch/torch.h>

#include <string>

#include "epcl/model.hpp"

namespace epcl {

inline constexpr double kLogEps = 1e-8;
inline constexpr double kSmoothEps = 1e-5;

/// How a per-voxel loss is reduced over the voxels of one image. Images in a
/// batch are always averaged.
enum class VoxelReduction { Mean, Sum };

torch::Tensor one_hot_targets(const torch::Tensor& labels, int num_classes, const torch::TensorOptions& options);

/// -sum_c t_c ln(p_c + eps), reduced over voxels.
torch::Tensor ce_loss(const torch::Tensor& probs, const torch::Tensor& target,
                      VoxelReduction reduction = VoxelReduction::Mean);

/// 1 - mean_c (2 sum p t + eps) / (sum p + sum t + eps), sums over batch and voxels.
torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& target);

/// mean over voxels of -(1 - p_t)^gamma ln(p_t + eps).
torch::Tensor focal_loss(const torch::Tensor& probs, const torch::Tensor& target, double gamma = 2.0);

/// 1 - mean_c (sum p t + eps) / (sum p + sum t - sum p t + eps).
torch::Tensor iou_loss(const torch::Tensor& probs, const torch::Tensor& target);

struct SupervisedTerms {
  torch::Tensor l_ce, l_dice, l_focal, l_iou, l_fused, l_seg;
};

/// Head 0 gets CE, head 1 Dice, head 2 focal, head 3 IoU; fused CE on the head
/// mean. l_seg = (ce + dice + focal + iou) / 4 + fused.
SupervisedTerms supervised_loss(const PredictionSet& preds, const torch::Tensor& labels, double focal_gamma = 2.0);

struct ConsistencyTerms {
  torch::Tensor l_lc, l_uc1, l_uc2;
};

/// l_lc  = ce(sim_l, labels)
/// l_uc1 = ce(sim_u, pl_u2)
/// l_uc2 = ce(sim_u1, pl_u2) + ce(sim_u2, pl_u2)
/// `unlabeled_reduction` applies to the three unlabeled terms.
ConsistencyTerms consistency_losses(const torch::Tensor& sim_l, const torch::Tensor& sim_u, const torch::Tensor& sim_u1,
                                    const torch::Tensor& sim_u2, const torch::Tensor& labels,
                                    const torch::Tensor& refined_pl_u2, VoxelReduction unlabeled_reduction);

/// lambda_max * exp(-5 (1 - iter/total)^2), clamped to [0, lambda_max].
double ramp_lambda(double iter, double total_iters, double lambda_max = 1.0);

struct LossReport {
  std::int64_t iteration = 0;
  double l_ce = 0, l_dice = 0, l_focal = 0, l_iou = 0, l_fused = 0, l_seg = 0;
  double l_lc = 0, l_uc1 = 0, l_uc2 = 0, total = 0;
  double lambda_con = 0;

  std::string to_json_line() const;
  static LossReport from_json_line(const std::string& line);
};

/// L = l_seg + l_lc + lambda_con (l_uc1 + l_uc2). Throws NonFiniteLoss.
torch::Tensor total_loss(const torch::Tensor& l_seg, const torch::Tensor& l_lc, const torch::Tensor& l_uc1,
                         const torch::Tensor& l_uc2, double lambda_con);
double total_loss(const LossReport& r);

}  // namespace epcl
