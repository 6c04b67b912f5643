#pragma once

// Copy-paste (CutMix) mixing of patches and light geometric augmentation.
// Every function takes the random engine explicitly; callers own it.

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "epcl/volume_io.hpp"

namespace epcl {

using Rng = std::mt19937_64;

struct CutBox {
  std::array<std::int64_t, 3> origin{};
  std::array<std::int64_t, 3> extent{};
};

struct CutMask {
  Shape3 shape;
  CutBox box;
  std::vector<std::uint8_t> data;  // 1 inside box, 0 outside

  static CutMask from_box(Shape3 shape, CutBox box);
  double fraction() const noexcept;
};

struct Provenance {
  std::string source_a;
  std::string source_b;
  CutMask mask;
};

/// An image patch and, when labelled, its class map. Mixed samples carry
/// the provenance of the mix.
struct Sample {
  Shape3 shape;
  std::vector<float> image;
  std::optional<std::vector<std::uint8_t>> label;
  std::string id;
  std::optional<Provenance> provenance;

  bool labeled() const noexcept { return label.has_value(); }
};

Sample make_sample(const Volume& image, std::string id = {});
Sample make_sample(const Volume& image, const LabelVolume& label, std::string id = {});

/// Per-axis extent drawn from U[0.25, 0.5] * axis, floored, at least 1.
CutMask generate_cut_mask(Shape3 patch, Rng& rng);

/// Voxels inside the mask come from `b`, the rest from `a`. Labels are mixed
/// with the same mask when `mix_labels` is set.
Sample cutmix(const Sample& a, const Sample& b, const CutMask& mask, bool mix_labels = true);

/// Returns the B originals followed by B/2 mixes of consecutive pairs.
std::vector<Sample> augment_labeled_batch(std::span<const Sample> batch, Rng& rng);

/// Sample i is mixed with sample (i + 1) mod B; images only.
std::vector<Sample> augment_unlabeled_batch(std::span<const Sample> batch, Rng& rng);

struct FlipRotate {
  std::array<bool, 3> flip{false, false, false};
  int quarter_turns = 0;  // rotation by k*90 degrees in the H-W plane
};

FlipRotate draw_flip_rotate(Shape3 shape, Rng& rng);
Sample apply_flip_rotate(const Sample& s, const FlipRotate& t);
Sample random_flip_rotate(const Sample& s, Rng& rng);

}  // namespace epcl
