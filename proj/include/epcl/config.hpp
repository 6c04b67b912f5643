#pragma once

// Training configuration: presets, a flat `key = value` config file format
// and command-line overrides.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "epcl/model.hpp"
#include "epcl/uncertainty.hpp"
#include "epcl/volume_io.hpp"

namespace epcl {

/// How original and augmented unlabelled data are combined.
enum class CombinationMode {
  Concat,              // one teacher pass over the concatenated batch
  SeparateMultiProto,  // separate passes, two prototype sets, both consistency terms
  AugMapOnOrig,        // augmented reliability map weights original-stream pooling
  OrigMapOnAug,        // original reliability map weights augmented-stream pooling
};

std::string_view to_string(CombinationMode mode) noexcept;
CombinationMode parse_combination_mode(std::string_view text);

struct TrainConfig {
  std::string preset = "paper";
  std::int64_t total_iters = 14000;
  double lr = 1e-3;
  int labeled_batch = 2;
  int unlabeled_batch = 2;
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double ema_decay = 0.99;
  std::uint64_t seed = 1337;
  CombinationMode combination_mode = CombinationMode::SeparateMultiProto;
  ReliabilityMode reliability_mode = ReliabilityMode::VerbatimEq6;
  int prototype_tap = 2;
  int base_filters = 16;
  int depth = 4;
  int num_classes = 2;
  Shape3 patch{112, 112, 80};
  Shape3 stride{18, 18, 4};
  double temperature = 1.0;
  double focal_gamma = 2.0;
  std::int64_t checkpoint_every = 1000;
  bool unlabeled_losses = true;
  bool flip_rotate = false;
  std::string data_dir;
  std::string out_dir = "run";

  BackboneConfig backbone() const;
  /// Throws BadConfig.
  void validate() const;

  nlohmann::ordered_json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Sets network size, patch geometry and iteration count: "paper" or "tiny".
void apply_preset(TrainConfig& config, std::string_view preset);
TrainConfig make_config(std::string_view preset);

std::vector<std::string> config_keys();

/// Applies one `key=value` assignment. Unknown keys throw BadConfig listing
/// the valid keys. Shapes accept "32,32,32" or "[32,32,32]".
void apply_override(TrainConfig& config, std::string_view assignment);

/// Reads `key = value` lines (`#` starts a comment). A `preset` line is
/// applied before the remaining keys regardless of its position.
TrainConfig load_config_file(const std::filesystem::path& path);
std::string config_file_text(const TrainConfig& config);

}  // namespace epcl
