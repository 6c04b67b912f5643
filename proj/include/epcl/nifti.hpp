#pragma once

// Minimal NIfTI-1 single-file (.nii / .nii.gz) reader and writer. Only 3D
// scalar images are supported; reading accepts the common integer and
// floating point datatypes, writing emits float32 images and uint8 labels.

#include <filesystem>

#include "epcl/volume_io.hpp"

namespace epcl::nifti {

Volume read_volume(const std::filesystem::path& path);
LabelVolume read_labels(const std::filesystem::path& path, int num_classes = 0);
void write_volume(const Volume& v, const std::filesystem::path& path);
void write_labels(const LabelVolume& labels, const std::filesystem::path& path);

}  // namespace epcl::nifti
