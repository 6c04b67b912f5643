#pragma once

// Overlap and surface-distance metrics for binary and multi-class label maps.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "epcl/volume_io.hpp"

namespace epcl {

struct OverlapMetrics {
  double dice = 0.0;
  double jaccard = 0.0;
};

/// Both masks empty counts as perfect agreement (1, 1).
OverlapMetrics overlap_metrics(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);

struct SurfaceMetrics {
  bool defined = false;  // false when either mask is empty; values are NaN then
  double hd95 = 0.0;
  double asd = 0.0;
};

/// Boundary voxels: foreground with at least one 6-connected neighbour that
/// is background or outside the grid.
std::vector<std::uint8_t> surface_voxels(std::span<const std::uint8_t> mask, Shape3 shape);

/// Exact Euclidean distance (in mm) from every voxel to the nearest voxel
/// where `features` is nonzero. Returns +inf everywhere when there is none.
std::vector<double> distance_to_features(std::span<const std::uint8_t> features, Shape3 shape, const Spacing& spacing);

/// Linear interpolation between closest ranks; `q` in [0, 100].
double percentile(std::vector<double> values, double q);

SurfaceMetrics surface_metrics(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, Shape3 shape,
                               const Spacing& spacing);

struct MetricReport {
  std::string volume;
  int label = 0;
  double dice = 0.0;
  double jaccard = 0.0;
  SurfaceMetrics surface;
};

/// One-vs-rest for every foreground class 1..C-1.
std::vector<MetricReport> evaluate_case(const LabelVolume& pred, const LabelVolume& gt, const Spacing& spacing,
                                        const std::string& name);

/// Mean over rows; surface metrics average only the rows where they are defined.
MetricReport macro_average(std::span<const MetricReport> rows);

/// volume,class,dice,jaccard,hd95,asd,surface_defined with Dice and Jaccard
/// scaled by 100, followed by a "mean" row.
std::string metrics_csv(std::span<const MetricReport> rows);

}  // namespace epcl
