#include "epcl/trainer.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "epcl/checkpoint.hpp"
#include "epcl/error.hpp"
#include "epcl/prototypes.hpp"
#include "epcl/uncertainty.hpp"

namespace epcl {
namespace fs = std::filesystem;
using json = nlohmann::json;

// ---- dataset ------------------------------------------------------------------

namespace {

std::vector<std::string> name_list(const json& splits, const char* key) {
  if (!splits.contains(key)) return {};
  return splits.at(key).get<std::vector<std::string>>();
}

Volume load_normalized(const fs::path& stem) {
  auto v = load_raw_volume(stem);
  auto norm = normalize_intensity(v);
  norm.volume.name = v.name;
  return std::move(norm.volume);
}

}  // namespace

Dataset load_dataset(const fs::path& dir, int num_classes) {
  std::ifstream in(dir / "splits.json");
  if (!in) throw Error(Errc::UnreadableFile, "cannot open " + (dir / "splits.json").string());
  json splits;
  try {
    splits = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(Errc::UnreadableFile, std::string("bad splits.json: ") + e.what());
  }
  Dataset d;
  d.num_classes = num_classes;
  for (const auto& name : name_list(splits, "labeled")) {
    d.labeled_images.push_back(load_normalized(dir / "images" / name));
    d.labeled_labels.push_back(load_raw_labels(dir / "labels" / name, num_classes));
    if (d.labeled_images.back().shape != d.labeled_labels.back().shape) {
      throw Error(Errc::ShapeMismatch, "image and label shapes differ for " + name);
    }
  }
  for (const auto& name : name_list(splits, "unlabeled")) d.unlabeled_images.push_back(load_normalized(dir / "images" / name));
  for (const auto& name : name_list(splits, "test")) {
    d.test_images.push_back(load_normalized(dir / "images" / name));
    d.test_labels.push_back(load_raw_labels(dir / "labels" / name, num_classes));
  }
  return d;
}

void write_synthetic_dataset(const fs::path& dir, int n_volumes, int n_test, Shape3 shape, int num_classes,
                             std::uint64_t seed, double labeled_fraction) {
  if (n_volumes < 1 || n_test < 0) throw Error(Errc::InvalidArgument, "need at least one training volume");
  if (labeled_fraction < 0.0 || labeled_fraction > 1.0) {
    throw Error(Errc::InvalidArgument, "labeled fraction must be in [0, 1]");
  }
  auto cases = synth_dataset(n_volumes + n_test, shape, num_classes, seed);
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "labels");
  const auto n_labeled =
      static_cast<int>(std::ceil(labeled_fraction * static_cast<double>(n_volumes) - 1e-9));
  json splits{{"labeled", json::array()}, {"unlabeled", json::array()}, {"test", json::array()}};
  for (int i = 0; i < n_volumes + n_test; ++i) {
    const bool test = i >= n_volumes;
    std::ostringstream name;
    name << (test ? "test_" : "case_") << std::setw(3) << std::setfill('0') << (test ? i - n_volumes : i);
    auto& c = cases[static_cast<std::size_t>(i)];
    c.image.name = c.label.name = name.str();
    save_raw(c.image, dir / "images" / name.str());
    save_raw(c.label, dir / "labels" / name.str());
    splits[test ? "test" : (i < n_labeled ? "labeled" : "unlabeled")].push_back(name.str());
  }
  std::ofstream out(dir / "splits.json");
  out << splits.dump(2) << '\n';
  if (!out) throw Error(Errc::UnreadableFile, "cannot write splits.json");
}

// ---- helpers ------------------------------------------------------------------

namespace {

torch::Tensor image_tensor(const std::vector<Sample>& samples) {
  const Shape3 s = samples.front().shape;
  auto t = torch::empty({static_cast<std::int64_t>(samples.size()), 1, s.h, s.w, s.d}, torch::kFloat);
  for (std::size_t n = 0; n < samples.size(); ++n) {
    if (samples[n].shape != s) throw Error(Errc::ShapeMismatch, "batch samples differ in shape");
    std::memcpy(t[static_cast<std::int64_t>(n)].data_ptr<float>(), samples[n].image.data(), samples[n].image.size() * sizeof(float));
  }
  return t;
}

torch::Tensor label_tensor(const std::vector<Sample>& samples) {
  const Shape3 s = samples.front().shape;
  auto t = torch::empty({static_cast<std::int64_t>(samples.size()), s.h, s.w, s.d}, torch::kLong);
  for (std::size_t n = 0; n < samples.size(); ++n) {
    if (!samples[n].label) throw Error(Errc::LabelArityMismatch, "labelled batch contains an unlabelled sample");
    auto* dst = t[static_cast<std::int64_t>(n)].data_ptr<std::int64_t>();
    const auto& src = *samples[n].label;
    for (std::size_t v = 0; v < src.size(); ++v) dst[v] = src[v];
  }
  return t;
}

struct StreamTargets {
  PredictionSet teacher;
  UncertaintyMap juq_map;
  ReliabilityMap reliability;
  PseudoLabel pseudo;
};

StreamTargets teacher_targets(SegmentationNet& teacher, const torch::Tensor& x, ReliabilityMode mode) {
  torch::NoGradGuard no_grad;
  StreamTargets s{teacher->forward(x).predictions, {}, {}, {}};
  s.juq_map = juq(s.teacher, s.teacher.mean_probs);
  s.reliability = reliability_map(s.juq_map, mode);
  s.pseudo = refine_pseudo_labels(s.teacher.mean_probs, s.reliability);
  return s;
}

// Summary statistics of intermediate maps, dumped when a loss goes non-finite.
class Diagnostics {
 public:
  void add(const std::string& name, const torch::Tensor& t) { entries_.emplace_back(name, t.detach()); }

  fs::path dump(const fs::path& dir, std::int64_t iteration) const {
    json j{{"iteration", iteration}, {"maps", json::object()}};
    for (const auto& [name, t] : entries_) {
      const auto d = t.to(torch::kDouble);
      const auto finite = torch::isfinite(d);
      j["maps"][name] = {{"shape", t.sizes().vec()},
                         {"all_finite", finite.all().item<bool>()},
                         {"non_finite_count", (~finite).sum().item<std::int64_t>()},
                         {"min", d.min().item<double>()},
                         {"max", d.max().item<double>()},
                         {"mean", d.mean().item<double>()}};
    }
    fs::create_directories(dir);
    const auto path = dir / ("diagnostics_iter_" + std::to_string(iteration) + ".json");
    std::ofstream out(path);
    out << j.dump(2) << '\n';
    return path;
  }

 private:
  std::vector<std::pair<std::string, torch::Tensor>> entries_;
};

std::string serialize_module(const torch::nn::Module& m) {
  torch::serialize::OutputArchive archive;
  m.save(archive);
  std::ostringstream os;
  archive.save_to(os);
  return os.str();
}

void deserialize_module(torch::nn::Module& m, const std::string& bytes) {
  torch::serialize::InputArchive archive;
  std::istringstream is(bytes);
  archive.load_from(is);
  m.load(archive);
}

}  // namespace

// ---- trainer ------------------------------------------------------------------

Trainer::Trainer(TrainConfig config, std::shared_ptr<const Dataset> data)
    : config_(std::move(config)), data_(std::move(data)), rng_(config_.seed) {
  config_.validate();
  if (!data_) throw Error(Errc::InvalidArgument, "trainer needs a dataset");
  if (data_->labeled_images.empty()) throw Error(Errc::InvalidArgument, "dataset has no labelled volumes");
  if (config_.unlabeled_losses && data_->unlabeled_images.empty()) {
    throw Error(Errc::InvalidArgument, "dataset has no unlabelled volumes");
  }
  if (data_->num_classes != config_.num_classes) throw Error(Errc::BadConfig, "dataset and config class counts differ");

  torch::manual_seed(config_.seed);
  student_ = SegmentationNet(config_.backbone());
  teacher_ = SegmentationNet(config_.backbone());
  init_teacher(teacher_, student_);
  optimizer_ = std::make_unique<torch::optim::Adam>(student_->parameters(), torch::optim::AdamOptions(config_.lr));
}

Trainer Trainer::from_checkpoint(const fs::path& path, std::shared_ptr<const Dataset> data,
                                 const TrainConfig* replace) {
  const CheckpointFile file = read_checkpoint_file(path);
  TrainConfig config;
  try {
    config = TrainConfig::from_json(file.header.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::BadCheckpoint, std::string("checkpoint header: ") + e.what());
  }
  if (replace) {
    const auto a = config.backbone();
    const auto b = replace->backbone();
    if (a.base_filters != b.base_filters || a.depth != b.depth || a.num_classes != b.num_classes ||
        a.prototype_tap != b.prototype_tap) {
      throw Error(Errc::BadCheckpoint, "checkpoint architecture differs from the requested config");
    }
    config = *replace;
  }
  Trainer t(config, std::move(data));
  for (const char* blob : {"student", "teacher", "optimizer"}) {
    if (!file.blobs.count(blob)) throw Error(Errc::BadCheckpoint, std::string("checkpoint lacks '") + blob + "'");
  }
  deserialize_module(*t.student_, file.blobs.at("student"));
  deserialize_module(*t.teacher_, file.blobs.at("teacher"));
  for (auto& p : t.teacher_->parameters()) p.set_requires_grad(false);
  {
    torch::serialize::InputArchive archive;
    std::istringstream is(file.blobs.at("optimizer"));
    archive.load_from(is);
    t.optimizer_->load(archive);
  }
  t.iteration_ = file.header.at("iteration").get<std::int64_t>();
  std::istringstream rng_state(file.header.at("rng_state").get<std::string>());
  rng_state >> t.rng_;
  if (!rng_state) throw Error(Errc::BadCheckpoint, "corrupt random state");
  return t;
}

void Trainer::save_checkpoint(const fs::path& path) const {
  CheckpointFile file;
  std::ostringstream rng_state;
  rng_state << rng_;
  file.header = {{"format_version", 1},
                 {"config", config_.to_json()},
                 {"iteration", iteration_},
                 {"rng_state", rng_state.str()}};
  file.blobs["student"] = serialize_module(*student_);
  file.blobs["teacher"] = serialize_module(*teacher_);
  {
    torch::serialize::OutputArchive archive;
    optimizer_->save(archive);
    std::ostringstream os;
    archive.save_to(os);
    file.blobs["optimizer"] = os.str();
  }
  write_checkpoint_file(path, file);
}

Trainer::Batch Trainer::draw_batch() {
  const Shape3 patch = config_.patch;
  auto origin_in = [&](Shape3 vol) {
    std::array<std::int64_t, 3> o{};
    for (int a = 0; a < 3; ++a) {
      if (vol[a] < patch[a]) throw Error(Errc::PatchLargerThanVolume, "training volume smaller than the patch");
      o[static_cast<std::size_t>(a)] = std::uniform_int_distribution<std::int64_t>(0, vol[a] - patch[a])(rng_);
    }
    return o;
  };
  auto tag = [](const std::string& name, const std::array<std::int64_t, 3>& o) {
    return name + "@" + std::to_string(o[0]) + "," + std::to_string(o[1]) + "," + std::to_string(o[2]);
  };

  Batch batch;
  std::vector<Sample> labeled;
  std::uniform_int_distribution<std::size_t> pick_l(0, data_->labeled_images.size() - 1);
  for (int b = 0; b < config_.labeled_batch; ++b) {
    const std::size_t i = pick_l(rng_);
    const auto& img = data_->labeled_images[i];
    const auto o = origin_in(img.shape);
    Sample s = make_sample(crop(img, o, patch), crop(data_->labeled_labels[i], o, patch), tag(img.name, o));
    if (config_.flip_rotate) s = random_flip_rotate(s, rng_);
    labeled.push_back(std::move(s));
  }
  batch.labeled = augment_labeled_batch(labeled, rng_);

  if (!data_->unlabeled_images.empty()) {
    std::uniform_int_distribution<std::size_t> pick_u(0, data_->unlabeled_images.size() - 1);
    for (int b = 0; b < config_.unlabeled_batch; ++b) {
      const auto& img = data_->unlabeled_images[pick_u(rng_)];
      const auto o = origin_in(img.shape);
      Sample s = make_sample(crop(img, o, patch), tag(img.name, o));
      if (config_.flip_rotate) s = random_flip_rotate(s, rng_);
      batch.unlabeled.push_back(std::move(s));
    }
    batch.augmented = augment_unlabeled_batch(batch.unlabeled, rng_);
  }
  return batch;
}

LossReport Trainer::step() {
  const int classes = config_.num_classes;
  const double lambda_con = ramp_lambda(static_cast<double>(iteration_ + 1), static_cast<double>(config_.total_iters));
  const Batch batch = draw_batch();
  Diagnostics diag;

  // Labelled stream: originals plus mixes through the student.
  const auto x_l = image_tensor(batch.labeled);
  const auto y_l = label_tensor(batch.labeled);
  const std::vector<std::int64_t> label_size(x_l.sizes().begin() + 2, x_l.sizes().end());
  const auto out_l = student_->forward(x_l);
  const auto sup = supervised_loss(out_l.predictions, y_l, config_.focal_gamma);
  const auto f_l = student_->prototype_features(out_l, label_size);
  const auto p_l = labeled_prototypes(f_l, y_l, classes);
  diag.add("labeled/mean_probs", out_l.predictions.mean_probs);
  diag.add("labeled/prototype_features", f_l);
  diag.add("labeled/prototypes", p_l.vectors);

  const auto zero = torch::zeros({}, x_l.options());
  torch::Tensor l_uc1 = zero;
  torch::Tensor l_uc2 = zero;
  ClassPrototype global = p_l;

  if (config_.unlabeled_losses) {
    const auto reduction =
        config_.reliability_mode == ReliabilityMode::VerbatimEq6 ? VoxelReduction::Sum : VoxelReduction::Mean;
    const auto x_u = image_tensor(batch.unlabeled);
    const auto x_a = image_tensor(batch.augmented);

    if (config_.combination_mode == CombinationMode::Concat) {
      const auto x_cat = torch::cat({x_u, x_a}, 0);
      const auto targets = teacher_targets(teacher_, x_cat, config_.reliability_mode);
      const auto f_cat = student_->prototype_features(student_->forward(x_cat), label_size);
      const auto p_u = unlabeled_prototypes(f_cat, targets.pseudo.hard, targets.reliability.data, classes);
      global = fuse_global(p_l, p_u, lambda_con);
      const auto s_cat = similarity_map(global, f_cat, config_.temperature);
      l_uc1 = ce_loss(s_cat.probs, targets.pseudo.refined, reduction);
      diag.add("concat/juq", targets.juq_map.data);
      diag.add("concat/reliability", targets.reliability.data);
      diag.add("concat/prototype_features", f_cat);
      diag.add("concat/similarity", s_cat.data);
    } else {
      const auto orig = teacher_targets(teacher_, x_u, config_.reliability_mode);
      const auto aug = teacher_targets(teacher_, x_a, config_.reliability_mode);
      const auto f_u1 = student_->prototype_features(student_->forward(x_u), label_size);
      const auto f_u2 = student_->prototype_features(student_->forward(x_a), label_size);

      const auto& r_u1 = config_.combination_mode == CombinationMode::AugMapOnOrig ? aug.reliability : orig.reliability;
      const auto& r_u2 = config_.combination_mode == CombinationMode::OrigMapOnAug ? orig.reliability : aug.reliability;
      const auto p_u1 = unlabeled_prototypes(f_u1, orig.pseudo.hard, r_u1.data, classes);
      const auto p_u2 = unlabeled_prototypes(f_u2, aug.pseudo.hard, r_u2.data, classes);
      const auto p_u = fuse_unlabeled(p_u1, p_u2, config_.lambda1, config_.lambda2);
      global = fuse_global(p_l, p_u, lambda_con);

      const auto s_u = similarity_map(global, (f_u1 + f_u2) / 2.0, config_.temperature);
      const auto s_u1 = similarity_map(global, f_u1, config_.temperature);
      const auto s_u2 = similarity_map(global, f_u2, config_.temperature);
      const auto pl_u2 = aug.pseudo.refined;
      l_uc1 = ce_loss(s_u.probs, pl_u2, reduction);
      l_uc2 = ce_loss(s_u1.probs, pl_u2, reduction) + ce_loss(s_u2.probs, pl_u2, reduction);

      diag.add("original/juq", orig.juq_map.data);
      diag.add("original/reliability", orig.reliability.data);
      diag.add("augmented/juq", aug.juq_map.data);
      diag.add("augmented/reliability", aug.reliability.data);
      diag.add("original/prototype_features", f_u1);
      diag.add("augmented/prototype_features", f_u2);
      diag.add("unlabeled/prototypes", p_u.vectors);
      diag.add("similarity/u", s_u.data);
      diag.add("similarity/u1", s_u1.data);
      diag.add("similarity/u2", s_u2.data);
    }
  }
  diag.add("global/prototypes", global.vectors);

  const auto s_l = similarity_map(global, f_l, config_.temperature);
  const auto l_lc = ce_loss(s_l.probs, y_l);
  diag.add("similarity/l", s_l.data);

  torch::Tensor total;
  try {
    total = total_loss(sup.l_seg, l_lc, l_uc1, l_uc2, lambda_con);
  } catch (const Error& e) {
    diag.add("loss/l_seg", sup.l_seg);
    diag.add("loss/l_lc", l_lc);
    diag.add("loss/l_uc1", l_uc1);
    diag.add("loss/l_uc2", l_uc2);
    const auto path = diag.dump(config_.out_dir, iteration_ + 1);
    throw Error(Errc::NonFiniteLoss,
                "iteration " + std::to_string(iteration_ + 1) + "; diagnostics written to " + path.string());
  }

  optimizer_->zero_grad();
  total.backward();
  optimizer_->step();
  ema_update(teacher_, student_, config_.ema_decay);
  ++iteration_;

  LossReport r;
  r.iteration = iteration_;
  r.lambda_con = lambda_con;
  r.l_ce = sup.l_ce.item<double>();
  r.l_dice = sup.l_dice.item<double>();
  r.l_focal = sup.l_focal.item<double>();
  r.l_iou = sup.l_iou.item<double>();
  r.l_fused = sup.l_fused.item<double>();
  r.l_seg = (r.l_ce + r.l_dice + r.l_focal + r.l_iou) / 4.0 + r.l_fused;
  r.l_lc = l_lc.item<double>();
  r.l_uc1 = l_uc1.item<double>();
  r.l_uc2 = l_uc2.item<double>();
  r.total = total_loss(r);
  return r;
}

// ---- run loop -----------------------------------------------------------------

fs::path checkpoint_path(const fs::path& out_dir, std::int64_t iteration) {
  std::ostringstream name;
  name << "ckpt_" << std::setw(6) << std::setfill('0') << iteration << ".epcl";
  return out_dir / name.str();
}

std::vector<LossReport> read_loss_log(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::UnreadableFile, "cannot open " + path.string());
  std::vector<LossReport> reports;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) reports.push_back(LossReport::from_json_line(line));
  }
  return reports;
}

RunResult run_training(const TrainConfig& config, std::shared_ptr<const Dataset> data, const RunOptions& options) {
  config.validate();
  const fs::path out_dir(config.out_dir);
  fs::create_directories(out_dir);
  Trainer trainer = options.resume_from ? Trainer::from_checkpoint(*options.resume_from, data, &config)
                                        : Trainer(config, data);

  RunResult result;
  result.log_path = out_dir / "train_log.jsonl";
  std::vector<std::string> kept;
  if (options.resume_from && fs::exists(result.log_path)) {
    for (const auto& r : read_loss_log(result.log_path)) {
      if (r.iteration <= trainer.iteration()) kept.push_back(r.to_json_line());
    }
  }
  {
    std::ofstream cfg(out_dir / "config.json");
    cfg << config.to_json().dump(2) << '\n';
  }
  std::ofstream log(result.log_path, std::ios::trunc);
  for (const auto& line : kept) log << line << '\n';

  while (trainer.iteration() < config.total_iters) {
    LossReport r = trainer.step();
    log << r.to_json_line() << '\n';
    log.flush();
    if (options.on_step) options.on_step(r);
    result.reports.push_back(r);
    if (trainer.iteration() % config.checkpoint_every == 0 && trainer.iteration() < config.total_iters) {
      trainer.save_checkpoint(checkpoint_path(out_dir, trainer.iteration()));
    }
  }
  result.final_checkpoint = out_dir / "final.epcl";
  trainer.save_checkpoint(result.final_checkpoint);
  return result;
}

void configure_threads() {
  int threads = 1;
  if (const char* env = std::getenv("EPCL_NUM_THREADS")) {
    try {
      threads = std::max(1, std::stoi(env));
    } catch (const std::exception&) {
      threads = 1;
    }
  }
  torch::set_num_threads(threads);
}

}  // namespace epcl
