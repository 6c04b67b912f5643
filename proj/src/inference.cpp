#include "epcl/inference.hpp"

#include <algorithm>
#include <cstring>
#include <sstream>

#include "epcl/checkpoint.hpp"
#include "epcl/error.hpp"
#include "epcl/uncertainty.hpp"

namespace epcl {

LoadedModel load_model(const std::filesystem::path& checkpoint) {
  const CheckpointFile file = read_checkpoint_file(checkpoint);
  LoadedModel m;
  try {
    m.config = TrainConfig::from_json(file.header.at("config"));
    m.iteration = file.header.at("iteration").get<std::int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::BadCheckpoint, std::string("checkpoint header: ") + e.what());
  }
  const auto it = file.blobs.find("teacher");
  if (it == file.blobs.end()) throw Error(Errc::BadCheckpoint, "checkpoint lacks 'teacher'");
  m.teacher = SegmentationNet(m.config.backbone());
  torch::serialize::InputArchive archive;
  std::istringstream is(it->second);
  archive.load_from(is);
  m.teacher->load(archive);
  m.teacher->eval();
  for (auto& p : m.teacher->parameters()) p.set_requires_grad(false);
  return m;
}

namespace {

ProbabilityMap to_map(const torch::Tensor& probs, Shape3 shape) {
  // probs: [C, H, W, D] contiguous float
  const auto c = static_cast<int>(probs.size(0));
  ProbabilityMap m(shape, c);
  const auto t = probs.contiguous();
  std::memcpy(m.data.data(), t.data_ptr<float>(), m.data.size() * sizeof(float));
  return m;
}

}  // namespace

Prediction predict(SegmentationNet& net, const Volume& volume, Shape3 patch, Shape3 stride) {
  validate(volume);
  const PatchGrid grid = plan_sliding_window(volume.shape, patch, stride);
  const int heads = net->config().num_heads;

  torch::NoGradGuard no_grad;
  std::vector<ProbabilityMap> mean_patches;
  std::vector<std::vector<ProbabilityMap>> head_patches(static_cast<std::size_t>(heads));
  mean_patches.reserve(grid.origins.size());
  for (const auto& o : grid.origins) {
    const Volume p = crop(volume, o, patch);
    auto x = torch::from_blob(const_cast<float*>(p.data.data()), {1, 1, patch.h, patch.w, patch.d}, torch::kFloat).clone();
    const auto out = net->forward(x);
    mean_patches.push_back(to_map(out.predictions.mean_probs[0], patch));
    for (int k = 0; k < heads; ++k) {
      head_patches[static_cast<std::size_t>(k)].push_back(to_map(out.predictions.head_probs[static_cast<std::size_t>(k)][0], patch));
    }
  }

  Prediction pred;
  pred.probs = assemble_prediction(mean_patches, grid);
  for (const auto& hp : head_patches) pred.head_probs.push_back(assemble_prediction(hp, grid));
  pred.labels = argmax_labels(pred.probs);
  pred.labels.name = volume.name;
  return pred;
}

Prediction predict(LoadedModel& model, const Volume& volume) {
  return predict(model.teacher, volume, model.config.patch, model.config.stride);
}

namespace {

torch::Tensor map_tensor(const ProbabilityMap& m) {
  const Shape3 s = m.shape;
  return torch::from_blob(const_cast<float*>(m.data.data()), {1, m.num_classes, s.h, s.w, s.d}, torch::kFloat).clone();
}

Volume map_volume(const torch::Tensor& t, Shape3 shape, const Spacing& spacing, std::string name) {
  Volume v;
  v.shape = shape;
  v.spacing = spacing;
  v.name = std::move(name);
  const auto c = t.reshape({-1}).to(torch::kFloat).contiguous();
  v.data.assign(c.data_ptr<float>(), c.data_ptr<float>() + c.numel());
  return v;
}

}  // namespace

ConfidenceMaps confidence_maps(const Prediction& prediction, const Spacing& spacing) {
  torch::NoGradGuard no_grad;
  PredictionSet set;
  for (const auto& h : prediction.head_probs) set.head_probs.push_back(map_tensor(h));
  set.mean_probs = map_tensor(prediction.probs);
  const Shape3 shape = prediction.probs.shape;
  const auto ent = entropy_norm(entropy_map(set.mean_probs));
  const auto joint = juq(set, set.mean_probs);
  return {map_volume(ent.data, shape, spacing, prediction.labels.name + "_entropy"),
          map_volume(joint.data, shape, spacing, prediction.labels.name + "_juq")};
}

double normalized_spatial_variance(const Volume& map) {
  if (map.data.empty()) return 0.0;
  const auto [lo, hi] = std::minmax_element(map.data.begin(), map.data.end());
  const double range = static_cast<double>(*hi) - static_cast<double>(*lo);
  if (!(range > 0.0)) return 0.0;
  double mean = 0.0;
  for (float x : map.data) mean += (x - *lo) / range;
  mean /= static_cast<double>(map.data.size());
  double var = 0.0;
  for (float x : map.data) {
    const double d = (x - *lo) / range - mean;
    var += d * d;
  }
  return var / static_cast<double>(map.data.size());
}

}  // namespace epcl
