#pragma once

// Volume containers, intensity normalization, sliding-window planning and
// the synthetic phantom generator used for desk-scale experiments.
//
// Memory layout is fixed as (H, W, D) row-major: the D index varies fastest.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace epcl {

struct Shape3 {
  std::int64_t h = 1;
  std::int64_t w = 1;
  std::int64_t d = 1;

  std::int64_t numel() const noexcept { return h * w * d; }
  std::int64_t operator[](int axis) const noexcept { return axis == 0 ? h : (axis == 1 ? w : d); }
  std::int64_t& operator[](int axis) noexcept { return axis == 0 ? h : (axis == 1 ? w : d); }
  std::int64_t index(std::int64_t i, std::int64_t j, std::int64_t k) const noexcept {
    return (i * w + j) * d + k;
  }
  bool operator==(const Shape3&) const = default;
};

using Spacing = std::array<double, 3>;

struct Volume {
  Shape3 shape;
  std::vector<float> data;
  Spacing spacing{1.0, 1.0, 1.0};
  std::string name;

  Volume() = default;
  Volume(Shape3 s, std::string n = {}) : shape(s), data(static_cast<std::size_t>(s.numel()), 0.0f), name(std::move(n)) {}

  float& at(std::int64_t i, std::int64_t j, std::int64_t k) { return data[shape.index(i, j, k)]; }
  float at(std::int64_t i, std::int64_t j, std::int64_t k) const { return data[shape.index(i, j, k)]; }
};

struct LabelVolume {
  Shape3 shape;
  std::vector<std::uint8_t> data;
  int num_classes = 2;
  std::string name;

  LabelVolume() = default;
  LabelVolume(Shape3 s, int classes, std::string n = {})
      : shape(s), data(static_cast<std::size_t>(s.numel()), 0), num_classes(classes), name(std::move(n)) {}

  std::uint8_t& at(std::int64_t i, std::int64_t j, std::int64_t k) { return data[shape.index(i, j, k)]; }
  std::uint8_t at(std::int64_t i, std::int64_t j, std::int64_t k) const { return data[shape.index(i, j, k)]; }
};

/// Throws ShapeMismatch / NonFiniteData / InvalidArgument when an invariant is broken.
void validate(const Volume& v);
void validate(const LabelVolume& labels);

// ---- raw+json container -------------------------------------------------
//
// <stem>.json  {"shape":[H,W,D],"spacing":[x,y,z],"dtype":"float32"}
// <stem>.bin   little-endian payload in (H,W,D) row-major order
//
// Label volumes use the same container with "dtype":"uint8" and an extra
// "num_classes" key.

void save_raw(const Volume& v, const std::filesystem::path& stem);
void save_raw(const LabelVolume& labels, const std::filesystem::path& stem);
Volume load_raw_volume(const std::filesystem::path& stem);
LabelVolume load_raw_labels(const std::filesystem::path& stem, int num_classes = 0);

enum class VolumeFormat { Nifti, RawJson };

/// Picks the format from the extension: .nii / .nii.gz are NIfTI, anything
/// else is treated as a raw+json stem (a trailing .json or .bin is stripped).
VolumeFormat guess_format(const std::filesystem::path& path);
Volume load_volume(const std::filesystem::path& path, VolumeFormat format);
Volume load_volume(const std::filesystem::path& path);
void save_volume(const Volume& v, const std::filesystem::path& path);
void save_labels(const LabelVolume& labels, const std::filesystem::path& path);
LabelVolume load_labels(const std::filesystem::path& path, int num_classes = 0);

// ---- intensity normalization -------------------------------------------

struct NormalizeResult {
  Volume volume;
  bool constant_warning = false;  // input had zero variance; output is all zeros
};

/// Zero mean, unit (population) variance.
NormalizeResult normalize_intensity(const Volume& v);

// ---- sliding window -----------------------------------------------------

struct PatchGrid {
  Shape3 volume_shape;
  Shape3 patch_size;
  Shape3 stride;
  std::vector<std::array<std::int64_t, 3>> origins;  // ascending lexicographic
};

PatchGrid plan_sliding_window(Shape3 shape, Shape3 patch, Shape3 stride);

/// A class-probability map laid out as C contiguous (h,w,d) planes.
struct ProbabilityMap {
  Shape3 shape;
  int num_classes = 0;
  std::vector<float> data;

  ProbabilityMap() = default;
  ProbabilityMap(Shape3 s, int classes)
      : shape(s), num_classes(classes), data(static_cast<std::size_t>(s.numel() * classes), 0.0f) {}

  float& at(int c, std::int64_t voxel) { return data[static_cast<std::size_t>(c * shape.numel() + voxel)]; }
  float at(int c, std::int64_t voxel) const { return data[static_cast<std::size_t>(c * shape.numel() + voxel)]; }
};

/// Uniform average of every patch prediction covering a voxel.
ProbabilityMap assemble_prediction(std::span<const ProbabilityMap> patch_probs, const PatchGrid& grid);

/// Lowest class index wins ties.
LabelVolume argmax_labels(const ProbabilityMap& probs);

// ---- patches ------------------------------------------------------------

Volume crop(const Volume& v, std::array<std::int64_t, 3> origin, Shape3 size);
LabelVolume crop(const LabelVolume& labels, std::array<std::int64_t, 3> origin, Shape3 size);

// ---- synthetic phantoms -------------------------------------------------

struct SynthCase {
  Volume image;
  LabelVolume label;
};

/// Random axis-aligned ellipsoids (1-3 per foreground class) on a noisy
/// background. Deterministic for a given seed.
std::vector<SynthCase> synth_dataset(int n_volumes, Shape3 shape, int num_classes, std::uint64_t seed);

/// Base intensity of class `c` before noise is added.
float synth_base_intensity(int c) noexcept;
inline constexpr float kSynthNoiseSigma = 0.1f;

}  // namespace epcl
