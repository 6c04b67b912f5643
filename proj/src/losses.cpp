#include "epcl/losses.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "epcl/error.hpp"

namespace epcl {
namespace {

torch::Tensor as_distribution(const torch::Tensor& probs, const torch::Tensor& target) {
  if (probs.dim() != 5) throw Error(Errc::ShapeMismatch, "probabilities must be [N, C, H, W, D]");
  if (target.dim() == 4) {
    if (target.size(0) != probs.size(0) || !target.sizes().slice(1).equals(probs.sizes().slice(2))) {
      throw Error(Errc::ShapeMismatch, "hard target shape differs from probabilities");
    }
    return one_hot_targets(target, static_cast<int>(probs.size(1)), probs.options());
  }
  if (!target.sizes().equals(probs.sizes())) throw Error(Errc::ShapeMismatch, "soft target shape differs");
  return target.to(probs.dtype());
}

torch::Tensor reduce_voxels(const torch::Tensor& per_voxel, VoxelReduction reduction) {
  // per_voxel: [N, H, W, D]
  if (reduction == VoxelReduction::Mean) return per_voxel.mean();
  return per_voxel.sum({1, 2, 3}).mean();
}

}  // namespace

torch::Tensor one_hot_targets(const torch::Tensor& labels, int num_classes, const torch::TensorOptions& options) {
  return torch::one_hot(labels.to(torch::kLong), num_classes).permute({0, 4, 1, 2, 3}).to(options);
}

torch::Tensor ce_loss(const torch::Tensor& probs, const torch::Tensor& target, VoxelReduction reduction) {
  const auto t = as_distribution(probs, target);
  return reduce_voxels(-(t * torch::log(probs + kLogEps)).sum(1), reduction);
}

torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& target) {
  const auto t = as_distribution(probs, target);
  const std::vector<int64_t> dims{0, 2, 3, 4};
  const auto inter = (probs * t).sum(dims);
  const auto score = (2.0 * inter + kSmoothEps) / (probs.sum(dims) + t.sum(dims) + kSmoothEps);
  return 1.0 - score.mean();
}

torch::Tensor focal_loss(const torch::Tensor& probs, const torch::Tensor& target, double gamma) {
  const auto t = as_distribution(probs, target);
  const auto p_t = (probs * t).sum(1);
  return (-torch::pow(1.0 - p_t, gamma) * torch::log(p_t + kLogEps)).mean();
}

torch::Tensor iou_loss(const torch::Tensor& probs, const torch::Tensor& target) {
  const auto t = as_distribution(probs, target);
  const std::vector<int64_t> dims{0, 2, 3, 4};
  const auto inter = (probs * t).sum(dims);
  const auto uni = probs.sum(dims) + t.sum(dims) - inter;
  return 1.0 - ((inter + kSmoothEps) / (uni + kSmoothEps)).mean();
}

SupervisedTerms supervised_loss(const PredictionSet& preds, const torch::Tensor& labels, double focal_gamma) {
  if (preds.num_heads() != 4) throw Error(Errc::InvalidArgument, "supervised loss expects four heads");
  SupervisedTerms s;
  s.l_ce = ce_loss(preds.head_probs[0], labels);
  s.l_dice = dice_loss(preds.head_probs[1], labels);
  s.l_focal = focal_loss(preds.head_probs[2], labels, focal_gamma);
  s.l_iou = iou_loss(preds.head_probs[3], labels);
  s.l_fused = ce_loss(preds.mean_probs, labels);
  s.l_seg = (s.l_ce + s.l_dice + s.l_focal + s.l_iou) / 4.0 + s.l_fused;
  return s;
}

ConsistencyTerms consistency_losses(const torch::Tensor& sim_l, const torch::Tensor& sim_u, const torch::Tensor& sim_u1,
                                    const torch::Tensor& sim_u2, const torch::Tensor& labels,
                                    const torch::Tensor& refined_pl_u2, VoxelReduction unlabeled_reduction) {
  ConsistencyTerms c;
  c.l_lc = ce_loss(sim_l, labels);
  c.l_uc1 = ce_loss(sim_u, refined_pl_u2, unlabeled_reduction);
  c.l_uc2 = ce_loss(sim_u1, refined_pl_u2, unlabeled_reduction) + ce_loss(sim_u2, refined_pl_u2, unlabeled_reduction);
  return c;
}

double ramp_lambda(double iter, double total_iters, double lambda_max) {
  if (total_iters <= 0.0) return lambda_max;
  const double phase = 1.0 - std::clamp(iter / total_iters, 0.0, 1.0);
  return std::clamp(lambda_max * std::exp(-5.0 * phase * phase), 0.0, lambda_max);
}

torch::Tensor total_loss(const torch::Tensor& l_seg, const torch::Tensor& l_lc, const torch::Tensor& l_uc1,
                         const torch::Tensor& l_uc2, double lambda_con) {
  for (const auto* t : {&l_seg, &l_lc, &l_uc1, &l_uc2}) {
    if (!torch::isfinite(*t).all().item<bool>()) throw Error(Errc::NonFiniteLoss, "loss component is not finite");
  }
  auto total = l_seg + l_lc + lambda_con * (l_uc1 + l_uc2);
  if (!torch::isfinite(total).all().item<bool>()) throw Error(Errc::NonFiniteLoss, "total loss is not finite");
  return total;
}

double total_loss(const LossReport& r) {
  const double total = r.l_seg + r.l_lc + r.lambda_con * (r.l_uc1 + r.l_uc2);
  if (!std::isfinite(total)) throw Error(Errc::NonFiniteLoss, "total loss is not finite");
  return total;
}

std::string LossReport::to_json_line() const {
  const nlohmann::ordered_json j{{"iter", iteration}, {"l_ce", l_ce},   {"l_dice", l_dice}, {"l_focal", l_focal},
                                 {"l_iou", l_iou},    {"l_fused", l_fused}, {"l_seg", l_seg},   {"l_lc", l_lc},
                                 {"l_uc1", l_uc1},    {"l_uc2", l_uc2}, {"total", total},   {"lambda_con", lambda_con}};
  return j.dump();
}

LossReport LossReport::from_json_line(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  LossReport r;
  r.iteration = j.at("iter").get<std::int64_t>();
  r.l_ce = j.at("l_ce");
  r.l_dice = j.at("l_dice");
  r.l_focal = j.at("l_focal");
  r.l_iou = j.at("l_iou");
  r.l_fused = j.at("l_fused");
  r.l_seg = j.at("l_seg");
  r.l_lc = j.at("l_lc");
  r.l_uc1 = j.at("l_uc1");
  r.l_uc2 = j.at("l_uc2");
  r.total = j.at("total");
  r.lambda_con = j.at("lambda_con");
  return r;
}

}  // namespace epcl
