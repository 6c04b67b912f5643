#include "epcl/model.hpp"

#include <algorithm>
#include <string>

#include "epcl/error.hpp"

namespace epcl {
namespace nn = torch::nn;

void BackboneConfig::validate() const {
  if (in_channels < 1) throw Error(Errc::BadConfig, "in_channels must be >= 1");
  if (base_filters < 4) throw Error(Errc::BadConfig, "base_filters must be >= 4");
  if (depth < 2) throw Error(Errc::BadConfig, "depth must be >= 2");
  if (num_classes < 2) throw Error(Errc::BadConfig, "num_classes must be >= 2");
  if (num_heads != 4) throw Error(Errc::BadConfig, "num_heads must be 4");
  if (prototype_tap < 1 || prototype_tap > std::min(3, depth)) {
    throw Error(Errc::BadConfig, "prototype_tap must be in [1, " + std::to_string(std::min(3, depth)) + "]");
  }
}

int BackboneConfig::pyramid_channels(int level) const { return base_filters << (depth - level); }

int BackboneConfig::pyramid_stride(int level) const { return 1 << (depth - level); }

PredictionSet PredictionSet::from_logits(std::span<const torch::Tensor> logits) {
  PredictionSet set;
  set.head_probs.reserve(logits.size());
  for (const auto& l : logits) set.head_probs.push_back(torch::softmax(l, 1));
  set.mean_probs = torch::stack(set.head_probs, 0).mean(0);
  return set;
}

PredictionSet PredictionSet::detached() const {
  PredictionSet out;
  for (const auto& p : head_probs) out.head_probs.push_back(p.detach());
  out.mean_probs = mean_probs.detach();
  return out;
}

// ---- prototype head -----------------------------------------------------------

PrototypeHeadImpl::PrototypeHeadImpl(int in_channels, int num_classes) : in_channels_(in_channels) {
  if (in_channels < 4) throw Error(Errc::BadConfig, "prototype head needs at least 4 input channels");
  const int mid1 = in_channels / 2;
  const int mid2 = in_channels / 4;
  conv1_ = register_module("conv1", nn::Conv3d(nn::Conv3dOptions(in_channels, mid1, 3).padding(1)));
  conv2_ = register_module("conv2", nn::Conv3d(nn::Conv3dOptions(mid1, mid2, 3).padding(1)));
  conv3_ = register_module("conv3", nn::Conv3d(nn::Conv3dOptions(mid2, num_classes, 3).padding(1)));
}

torch::Tensor PrototypeHeadImpl::forward(const torch::Tensor& tap, torch::IntArrayRef label_size) {
  auto x = torch::relu(conv1_->forward(tap));
  x = torch::relu(conv2_->forward(x));
  x = conv3_->forward(x);
  if (x.sizes().slice(2) == label_size) return x;
  namespace F = torch::nn::functional;
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<int64_t>(label_size.begin(), label_size.end()))
                               .mode(torch::kTrilinear)
                               .align_corners(false));
}

// ---- backbone -------------------------------------------------------------------

ConvStageImpl::ConvStageImpl(int channels, int n_convs) {
  body_ = nn::Sequential();
  for (int i = 0; i < n_convs; ++i) {
    body_->push_back(nn::Conv3d(nn::Conv3dOptions(channels, channels, 3).padding(1)));
    body_->push_back(nn::InstanceNorm3d(nn::InstanceNorm3dOptions(channels).affine(true)));
    if (i + 1 < n_convs) body_->push_back(nn::ReLU());
  }
  register_module("body", body_);
}

torch::Tensor ConvStageImpl::forward(const torch::Tensor& x) { return torch::relu(body_->forward(x) + x); }

namespace {
int stage_convs(int level) { return std::min(level + 1, 3); }
}  // namespace

SegmentationNetImpl::SegmentationNetImpl(BackboneConfig config) : config_(config) {
  config_.validate();
  const int b = config_.base_filters;
  const int levels = config_.depth;
  stem_ = register_module("stem", nn::Conv3d(nn::Conv3dOptions(config_.in_channels, b, 3).padding(1)));
  for (int l = 0; l < levels; ++l) {
    const int ch = b << l;
    if (l > 0) {
      down_.push_back(register_module("down" + std::to_string(l),
                                      nn::Conv3d(nn::Conv3dOptions(ch / 2, ch, 2).stride(2))));
    }
    enc_.push_back(register_module("enc" + std::to_string(l), ConvStage(ch, stage_convs(l))));
  }
  for (int l = levels - 2; l >= 0; --l) {
    const int ch = b << l;
    up_.push_back(register_module("up" + std::to_string(l),
                                  nn::ConvTranspose3d(nn::ConvTranspose3dOptions(ch * 2, ch, 2).stride(2))));
    dec_.push_back(register_module("dec" + std::to_string(l), ConvStage(ch, stage_convs(l))));
  }
  for (int k = 0; k < config_.num_heads; ++k) {
    heads_.push_back(register_module("head" + std::to_string(k),
                                     nn::Conv3d(nn::Conv3dOptions(b, config_.num_classes, 1))));
  }
  for (int tap = 1; tap <= std::min(3, levels); ++tap) {
    proto_heads_.push_back(register_module("proto" + std::to_string(tap),
                                           PrototypeHead(config_.pyramid_channels(tap), config_.num_classes)));
  }
}

ForwardOutput SegmentationNetImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 5 || x.size(1) != config_.in_channels) {
    throw Error(Errc::BadSpatialSize, "expected input [N, " + std::to_string(config_.in_channels) + ", H, W, D]");
  }
  const std::int64_t factor = std::int64_t{1} << (config_.depth - 1);
  for (int a = 2; a < 5; ++a) {
    if (x.size(a) % factor != 0 || x.size(a) < factor) {
      throw Error(Errc::BadSpatialSize, "spatial size " + std::to_string(x.size(a)) + " is not divisible by " +
                                            std::to_string(factor));
    }
  }
  std::vector<torch::Tensor> skips;
  auto h = enc_[0]->forward(stem_->forward(x));
  skips.push_back(h);
  for (std::size_t l = 1; l < enc_.size(); ++l) {
    h = enc_[l]->forward(down_[l - 1]->forward(h));
    skips.push_back(h);
  }
  ForwardOutput out;
  out.pyramid.push_back(h);
  for (std::size_t i = 0; i < dec_.size(); ++i) {
    const std::size_t skip = skips.size() - 2 - i;
    h = dec_[i]->forward(up_[i]->forward(h) + skips[skip]);
    out.pyramid.push_back(h);
  }
  for (auto& head : heads_) out.head_logits.push_back(head->forward(h));
  out.predictions = PredictionSet::from_logits(out.head_logits);
  return out;
}

torch::Tensor SegmentationNetImpl::prototype_features(const ForwardOutput& out, torch::IntArrayRef label_size) {
  return prototype_features(out.pyramid, config_.prototype_tap, label_size);
}

torch::Tensor SegmentationNetImpl::prototype_features(std::span<const torch::Tensor> pyramid, int tap,
                                                      torch::IntArrayRef label_size) {
  if (tap < 1 || tap > static_cast<int>(proto_heads_.size()) || tap > static_cast<int>(pyramid.size())) {
    throw Error(Errc::InvalidArgument, "prototype tap " + std::to_string(tap) + " is not available");
  }
  return proto_heads_[static_cast<std::size_t>(tap - 1)]->forward(pyramid[static_cast<std::size_t>(tap - 1)],
                                                                  label_size);
}

// ---- teacher / student ------------------------------------------------------------

void ema_update(std::span<torch::Tensor> teacher, std::span<const torch::Tensor> student, double decay) {
  if (teacher.size() != student.size()) throw Error(Errc::ShapeMismatch, "parameter counts differ");
  if (decay < 0.0 || decay > 1.0) throw Error(Errc::InvalidArgument, "ema decay must be in [0, 1]");
  torch::NoGradGuard no_grad;
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    if (!teacher[i].sizes().equals(student[i].sizes())) {
      throw Error(Errc::ShapeMismatch, "parameter " + std::to_string(i) + " differs in shape");
    }
  }
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    teacher[i].mul_(decay).add_(student[i].detach(), 1.0 - decay);
  }
}

void ema_update(SegmentationNet& teacher, const SegmentationNet& student, double decay) {
  auto t = teacher->parameters();
  const auto s = student->parameters();
  ema_update(std::span<torch::Tensor>(t), std::span<const torch::Tensor>(s), decay);
}

void init_teacher(SegmentationNet& teacher, const SegmentationNet& student) {
  torch::NoGradGuard no_grad;
  auto t = teacher->parameters();
  const auto s = student->parameters();
  if (t.size() != s.size()) throw Error(Errc::ShapeMismatch, "teacher and student architectures differ");
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!t[i].sizes().equals(s[i].sizes())) throw Error(Errc::ShapeMismatch, "teacher and student shapes differ");
    t[i].copy_(s[i]);
    t[i].set_requires_grad(false);
  }
}

std::int64_t prototype_head_peak_floats(std::int64_t tap_voxels, std::int64_t label_voxels, int tap_channels,
                                        int num_classes) {
  const std::int64_t f2 = tap_channels / 2;
  const std::int64_t f4 = tap_channels / 4;
  const std::int64_t conv1 = tap_voxels * f2;
  const std::int64_t conv2 = tap_voxels * (f2 + f4);
  const std::int64_t conv3 = tap_voxels * (f4 + num_classes);
  const std::int64_t upsample = tap_voxels * num_classes + label_voxels * num_classes;
  return std::max({conv1, conv2, conv3, upsample});
}

std::int64_t raw_upsample_floats(std::int64_t label_voxels, int tap_channels) { return label_voxels * tap_channels; }

}  // namespace epcl
