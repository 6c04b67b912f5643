#pragma once

// Mean-Teacher training loop with joint uncertainty quantification,
// multi-stream prototypes and prototype consistency losses.

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "epcl/augmentation.hpp"
#include "epcl/config.hpp"
#include "epcl/losses.hpp"
#include "epcl/model.hpp"
#include "epcl/volume_io.hpp"

namespace epcl {

struct Dataset {
  int num_classes = 2;
  std::vector<Volume> labeled_images;
  std::vector<LabelVolume> labeled_labels;
  std::vector<Volume> unlabeled_images;
  std::vector<Volume> test_images;
  std::vector<LabelVolume> test_labels;
};

/// Reads <dir>/splits.json ({"labeled":[...],"unlabeled":[...],"test":[...]})
/// with images under <dir>/images/<name> and labels under <dir>/labels/<name>
/// (raw+json stems). Images are intensity-normalised on load; labels of the
/// unlabelled split are never read.
Dataset load_dataset(const std::filesystem::path& dir, int num_classes);

/// Writes a dataset in the layout load_dataset expects.
void write_synthetic_dataset(const std::filesystem::path& dir, int n_volumes, int n_test, Shape3 shape,
                             int num_classes, std::uint64_t seed, double labeled_fraction);

class Trainer {
 public:
  Trainer(TrainConfig config, std::shared_ptr<const Dataset> data);

  /// Restores networks, optimiser state, iteration counter and random state.
  /// `replace`, when given, supersedes the stored config; the architecture must match.
  static Trainer from_checkpoint(const std::filesystem::path& path, std::shared_ptr<const Dataset> data,
                                 const TrainConfig* replace = nullptr);

  /// One full optimisation step; throws NonFiniteLoss after writing a
  /// diagnostics JSON next to the checkpoints.
  LossReport step();

  void save_checkpoint(const std::filesystem::path& path) const;

  std::int64_t iteration() const noexcept { return iteration_; }
  const TrainConfig& config() const noexcept { return config_; }
  SegmentationNet& student() noexcept { return student_; }
  SegmentationNet& teacher() noexcept { return teacher_; }

 private:
  struct Batch {
    std::vector<Sample> labeled;    // originals followed by mixes
    std::vector<Sample> unlabeled;  // originals
    std::vector<Sample> augmented;  // mixes of the originals
  };

  Batch draw_batch();

  TrainConfig config_;
  std::shared_ptr<const Dataset> data_;
  SegmentationNet student_{nullptr};
  SegmentationNet teacher_{nullptr};
  std::unique_ptr<torch::optim::Adam> optimizer_;
  Rng rng_;
  std::int64_t iteration_ = 0;
};

struct RunOptions {
  std::optional<std::filesystem::path> resume_from;
  /// Called after every step, e.g. for progress output.
  std::function<void(const LossReport&)> on_step;
};

struct RunResult {
  std::filesystem::path final_checkpoint;
  std::filesystem::path log_path;
  std::vector<LossReport> reports;  // steps executed by this call
};

/// Loops Trainer::step until total_iters, appending every report to
/// <out_dir>/train_log.jsonl and checkpointing every checkpoint_every steps
/// (<out_dir>/ckpt_<iter>.epcl) and at the end (<out_dir>/final.epcl). When
/// resuming, log lines beyond the checkpoint iteration are discarded first.
RunResult run_training(const TrainConfig& config, std::shared_ptr<const Dataset> data, const RunOptions& options = {});

std::vector<LossReport> read_loss_log(const std::filesystem::path& path);

std::filesystem::path checkpoint_path(const std::filesystem::path& out_dir, std::int64_t iteration);

/// Sets the intra-op thread count from EPCL_NUM_THREADS (default 1).
void configure_threads();

}  // namespace epcl
