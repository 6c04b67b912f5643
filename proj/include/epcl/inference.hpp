#pragma once

// Sliding-window inference with a trained teacher network.

#include <filesystem>
#include <vector>

#include "epcl/config.hpp"
#include "epcl/model.hpp"
#include "epcl/volume_io.hpp"

namespace epcl {

struct LoadedModel {
  TrainConfig config;
  std::int64_t iteration = 0;
  SegmentationNet teacher{nullptr};
};

LoadedModel load_model(const std::filesystem::path& checkpoint);

struct Prediction {
  ProbabilityMap probs;                   // mean over heads, overlap-averaged
  std::vector<ProbabilityMap> head_probs;  // per head, overlap-averaged
  LabelVolume labels;
};

/// `volume` must already be intensity-normalised. Throws PatchLargerThanVolume.
Prediction predict(SegmentationNet& net, const Volume& volume, Shape3 patch, Shape3 stride);
Prediction predict(LoadedModel& model, const Volume& volume);

/// Voxelwise confidence maps of a whole-volume prediction: normalised
/// entropy confidence alone, and the joint map that also folds in the
/// spread across heads.
struct ConfidenceMaps {
  Volume entropy;
  Volume juq;
};

ConfidenceMaps confidence_maps(const Prediction& prediction, const Spacing& spacing);

/// Population variance of a map after rescaling it to [0, 1] by its own
/// min and max (0 for a constant map).
double normalized_spatial_variance(const Volume& map);

}  // namespace epcl
