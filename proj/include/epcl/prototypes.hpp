#pragma once

// Class prototypes by masked average pooling, two-stage prototype fusion and
// feature-to-prototype cosine similarity maps.
//
// Feature tensors are [N, F, H, W, D] (F equals the class count for
// prototype-head outputs); label/mask tensors are int64 [N, H, W, D].

#include <torch/torch.h>

#include <vector>

namespace epcl {

inline constexpr double kPrototypeEps = 1e-8;

struct ClassPrototype {
  torch::Tensor vectors;    // [C, F]; rows of invalid classes are zero
  std::vector<bool> valid;  // class c present in the pooled batch

  int num_classes() const noexcept { return static_cast<int>(valid.size()); }
  bool any_valid() const noexcept;
};

struct PooledVector {
  torch::Tensor vector;  // [F]
  bool valid = false;
};

/// Mean feature over mask-true voxels of one sample ([F, H, W, D] features,
/// [H, W, D] mask). Zero vector and valid=false on an empty mask.
PooledVector masked_average_pool(const torch::Tensor& features, const torch::Tensor& mask);

/// Per class, the mean over samples containing the class of each sample's
/// masked average. Samples without the class are skipped.
ClassPrototype labeled_prototypes(const torch::Tensor& features, const torch::Tensor& labels, int num_classes);

/// Per class and sample sum_p r_p f_p [hard_p = c] / (sum_p r_p [hard_p = c] + eps),
/// averaged over the samples in which the class appears.
ClassPrototype unlabeled_prototypes(const torch::Tensor& features, const torch::Tensor& hard,
                                    const torch::Tensor& reliability, int num_classes);

/// lambda1 * p_u1 + lambda2 * p_u2; a class valid in only one input takes that one.
ClassPrototype fuse_unlabeled(const ClassPrototype& p_u1, const ClassPrototype& p_u2, double lambda1,
                              double lambda2);

/// ((2 - lambda_con) p_l + lambda_con p_u) / 2; a class valid on one side takes that side.
ClassPrototype fuse_global(const ClassPrototype& p_l, const ClassPrototype& p_u, double lambda_con);

struct SimilarityMap {
  torch::Tensor data;   // [N, C, H, W, D] cosine similarities, -1 for invalid classes
  torch::Tensor probs;  // softmax over classes of data / tau
};

/// Throws NoValidPrototypes when no class has a valid prototype.
SimilarityMap similarity_map(const ClassPrototype& protos, const torch::Tensor& features, double tau = 1.0);

}  // namespace epcl
