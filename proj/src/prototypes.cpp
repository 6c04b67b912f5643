#include "epcl/prototypes.hpp"

#include <algorithm>

#include "epcl/error.hpp"

namespace epcl {
namespace {

void check_pair(const torch::Tensor& features, const torch::Tensor& labels) {
  if (features.dim() != 5 || labels.dim() != 4 || features.size(0) != labels.size(0) ||
      !features.sizes().slice(2).equals(labels.sizes().slice(1))) {
    throw Error(Errc::ShapeMismatch, "features [N,F,H,W,D] and labels [N,H,W,D] do not match");
  }
}

torch::Tensor validity_mask(const std::vector<bool>& valid, const torch::TensorOptions& options) {
  std::vector<float> flags(valid.begin(), valid.end());
  return torch::tensor(flags).to(options).unsqueeze(1);
}

// Averages per-sample class vectors over the samples where the class is present.
// `sums`: [N, C, F], `present`: [N, C] (0/1).
ClassPrototype average_over_samples(const torch::Tensor& per_sample, const torch::Tensor& present) {
  const auto counts = present.sum(0);                                 // [C]
  const auto total = (per_sample * present.unsqueeze(2)).sum(0);      // [C, F]
  const auto safe = counts.clamp_min(1.0).unsqueeze(1);
  ClassPrototype proto;
  proto.vectors = total / safe;
  const auto counts_cpu = counts.to(torch::kCPU, torch::kDouble);
  const auto* c = counts_cpu.data_ptr<double>();
  for (std::int64_t i = 0; i < counts_cpu.size(0); ++i) proto.valid.push_back(c[i] > 0.0);
  return proto;
}

}  // namespace

bool ClassPrototype::any_valid() const noexcept {
  return std::any_of(valid.begin(), valid.end(), [](bool v) { return v; });
}

PooledVector masked_average_pool(const torch::Tensor& features, const torch::Tensor& mask) {
  if (features.dim() != 4 || mask.dim() != 3 || !features.sizes().slice(1).equals(mask.sizes())) {
    throw Error(Errc::ShapeMismatch, "features [F,H,W,D] and mask [H,W,D] do not match");
  }
  const auto m = mask.to(features.dtype());
  const auto count = m.sum();
  if (count.item<double>() == 0.0) return {torch::zeros({features.size(0)}, features.options()), false};
  return {(features * m.unsqueeze(0)).sum({1, 2, 3}) / count, true};
}

ClassPrototype labeled_prototypes(const torch::Tensor& features, const torch::Tensor& labels, int num_classes) {
  check_pair(features, labels);
  const auto onehot = torch::one_hot(labels.to(torch::kLong), num_classes).permute({0, 4, 1, 2, 3}).to(features.dtype());
  const auto mass = onehot.sum({2, 3, 4});                                      // [N, C]
  const auto sums = torch::einsum("ncxyz,nfxyz->ncf", {onehot, features});       // [N, C, F]
  const auto per_sample = sums / mass.clamp_min(1.0).unsqueeze(2);
  return average_over_samples(per_sample, (mass > 0).to(features.dtype()));
}

ClassPrototype unlabeled_prototypes(const torch::Tensor& features, const torch::Tensor& hard,
                                    const torch::Tensor& reliability, int num_classes) {
  check_pair(features, hard);
  if (!reliability.sizes().equals(hard.sizes())) throw Error(Errc::ShapeMismatch, "reliability shape differs from mask");
  const auto onehot = torch::one_hot(hard.to(torch::kLong), num_classes).permute({0, 4, 1, 2, 3}).to(features.dtype());
  const auto weights = onehot * reliability.to(features.dtype()).unsqueeze(1);  // [N, C, H, W, D]
  const auto num = torch::einsum("ncxyz,nfxyz->ncf", {weights, features});
  const auto den = weights.sum({2, 3, 4}).unsqueeze(2) + kPrototypeEps;
  const auto present = (onehot.sum({2, 3, 4}) > 0).to(features.dtype());
  return average_over_samples(num / den, present);
}

ClassPrototype fuse_unlabeled(const ClassPrototype& p_u1, const ClassPrototype& p_u2, double lambda1,
                              double lambda2) {
  if (lambda1 < 0.0 || lambda2 < 0.0) throw Error(Errc::InvalidArgument, "fusion coefficients must be >= 0");
  if (p_u1.num_classes() != p_u2.num_classes()) throw Error(Errc::ShapeMismatch, "prototype class counts differ");
  ClassPrototype out;
  std::vector<torch::Tensor> rows;
  for (int c = 0; c < p_u1.num_classes(); ++c) {
    const bool a = p_u1.valid[static_cast<std::size_t>(c)];
    const bool b = p_u2.valid[static_cast<std::size_t>(c)];
    const auto va = p_u1.vectors[c];
    const auto vb = p_u2.vectors[c];
    if (a && b) {
      rows.push_back(lambda1 * va + lambda2 * vb);
    } else if (a) {
      rows.push_back(va);
    } else if (b) {
      rows.push_back(vb);
    } else {
      rows.push_back(torch::zeros_like(va));
    }
    out.valid.push_back(a || b);
  }
  out.vectors = torch::stack(rows, 0);
  return out;
}

ClassPrototype fuse_global(const ClassPrototype& p_l, const ClassPrototype& p_u, double lambda_con) {
  if (lambda_con < 0.0 || lambda_con > 1.0) throw Error(Errc::InvalidArgument, "lambda_con must be in [0, 1]");
  if (p_l.num_classes() != p_u.num_classes()) throw Error(Errc::ShapeMismatch, "prototype class counts differ");
  ClassPrototype out;
  std::vector<torch::Tensor> rows;
  for (int c = 0; c < p_l.num_classes(); ++c) {
    const bool l = p_l.valid[static_cast<std::size_t>(c)];
    const bool u = p_u.valid[static_cast<std::size_t>(c)];
    const auto vl = p_l.vectors[c];
    const auto vu = p_u.vectors[c];
    if (l && u) {
      rows.push_back(((2.0 - lambda_con) * vl + lambda_con * vu) / 2.0);
    } else if (l) {
      rows.push_back(vl);
    } else if (u) {
      rows.push_back(vu);
    } else {
      rows.push_back(torch::zeros_like(vl));
    }
    out.valid.push_back(l || u);
  }
  out.vectors = torch::stack(rows, 0);
  return out;
}

SimilarityMap similarity_map(const ClassPrototype& protos, const torch::Tensor& features, double tau) {
  if (!protos.any_valid()) throw Error(Errc::NoValidPrototypes, "no class has a valid prototype");
  if (tau <= 0.0) throw Error(Errc::InvalidArgument, "temperature must be > 0");
  if (features.dim() != 5 || features.size(1) != protos.vectors.size(1)) {
    throw Error(Errc::ShapeMismatch, "feature channels differ from prototype dimension");
  }
  const auto dot = torch::einsum("nfxyz,cf->ncxyz", {features, protos.vectors});
  const auto f_norm = torch::linalg_vector_norm(features, 2, {1}, /*keepdim=*/true);   // [N,1,H,W,D]
  const auto p_norm = torch::linalg_vector_norm(protos.vectors, 2, {1}).view({1, -1, 1, 1, 1});
  auto cos = dot / (f_norm * p_norm + kPrototypeEps);
  const auto valid = validity_mask(protos.valid, features.options()).view({1, -1, 1, 1, 1});
  cos = torch::where(valid > 0, cos, torch::full_like(cos, -1.0));
  return {cos, torch::softmax(cos / tau, 1)};
}

}  // namespace epcl
