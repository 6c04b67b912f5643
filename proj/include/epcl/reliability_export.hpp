#pragma once

#include <filesystem>
#include <vector>

#include "epcl/volume_io.hpp"

namespace epcl {

/// Writes one 8-bit grayscale PNG per slice along `axis` (0=H, 1=W, 2=D),
/// named <prefix>_<index>.png. Intensities are scaled to [0,255] using the
/// min and max of the whole volume so slices stay comparable. Returns the
/// written paths in slice order.
std::vector<std::filesystem::path> export_reliability_slices(const Volume& map, int axis,
                                                             const std::filesystem::path& dir,
                                                             const std::string& prefix = "slice");

}  // namespace epcl
