#pragma once

// V-Net style encoder-decoder with four parallel classifier heads and a
// low-channel prototype head, plus teacher/student weight management.
//
// Tensors follow the libtorch layout [N, C, H, W, D].

#include <torch/torch.h>

#include <cstdint>
#include <span>
#include <vector>

namespace epcl {

struct BackboneConfig {
  int in_channels = 1;
  int base_filters = 16;
  int depth = 4;
  int num_classes = 2;
  int num_heads = 4;
  int prototype_tap = 2;

  /// Throws BadConfig on an invariant violation.
  void validate() const;
  /// Channel width of decoder pyramid level `level` (1 = coarsest).
  int pyramid_channels(int level) const;
  /// Downsampling factor of pyramid level `level` relative to the input.
  int pyramid_stride(int level) const;
};

struct PredictionSet {
  std::vector<torch::Tensor> head_probs;  // K tensors [N, C, H, W, D]
  torch::Tensor mean_probs;               // [N, C, H, W, D]

  static PredictionSet from_logits(std::span<const torch::Tensor> logits);
  int num_heads() const noexcept { return static_cast<int>(head_probs.size()); }
  PredictionSet detached() const;
};

struct ForwardOutput {
  PredictionSet predictions;
  std::vector<torch::Tensor> head_logits;
  /// Decoder pyramid, index 0 holds level 1 (the bottleneck); the last entry
  /// is the full-resolution decoder output.
  std::vector<torch::Tensor> pyramid;
};

/// Three 3x3x3 convolutions F -> F/2 -> F/4 -> C with ReLU in between,
/// followed by trilinear upsampling of the C-channel result.
class PrototypeHeadImpl : public torch::nn::Module {
 public:
  PrototypeHeadImpl(int in_channels, int num_classes);
  torch::Tensor forward(const torch::Tensor& tap, torch::IntArrayRef label_size);

  int in_channels() const noexcept { return in_channels_; }

 private:
  int in_channels_;
  torch::nn::Conv3d conv1_{nullptr}, conv2_{nullptr}, conv3_{nullptr};
};
TORCH_MODULE(PrototypeHead);

class ConvStageImpl : public torch::nn::Module {
 public:
  ConvStageImpl(int channels, int n_convs);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(ConvStage);

class SegmentationNetImpl : public torch::nn::Module {
 public:
  explicit SegmentationNetImpl(BackboneConfig config);

  /// Throws BadSpatialSize unless every spatial axis is divisible by 2^(depth-1).
  ForwardOutput forward(const torch::Tensor& x);
  /// Prototype features at label resolution for the configured tap.
  torch::Tensor prototype_features(const ForwardOutput& out, torch::IntArrayRef label_size);
  torch::Tensor prototype_features(std::span<const torch::Tensor> pyramid, int tap, torch::IntArrayRef label_size);

  const BackboneConfig& config() const noexcept { return config_; }

 private:
  BackboneConfig config_;
  torch::nn::Conv3d stem_{nullptr};
  std::vector<ConvStage> enc_;
  std::vector<torch::nn::Conv3d> down_;
  std::vector<torch::nn::ConvTranspose3d> up_;
  std::vector<ConvStage> dec_;
  std::vector<torch::nn::Conv3d> heads_;
  std::vector<PrototypeHead> proto_heads_;  // one per tap-able level
};
TORCH_MODULE(SegmentationNet);

/// theta_t <- d * theta_t + (1 - d) * theta_s, elementwise. Throws ShapeMismatch.
void ema_update(std::span<torch::Tensor> teacher, std::span<const torch::Tensor> student, double decay);
void ema_update(SegmentationNet& teacher, const SegmentationNet& student, double decay);

/// Copies student weights into the teacher and freezes the teacher.
void init_teacher(SegmentationNet& teacher, const SegmentationNet& student);

// ---- activation memory of the two prototype-feature routes -------------------
//
// Float counts per sample, ignoring the tap tensor itself (it exists in both
// routes). The prototype route keeps at most two consecutive activations
// live: max(F/2 + F/4 at tap resolution, C at tap + C at label resolution).
// The raw route upsamples all F channels to label resolution.

std::int64_t prototype_head_peak_floats(std::int64_t tap_voxels, std::int64_t label_voxels, int tap_channels,
                                        int num_classes);
std::int64_t raw_upsample_floats(std::int64_t label_voxels, int tap_channels);

}  // namespace epcl
