// epcl command-line tool: synth, train, eval, predict, uq-report.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "epcl/config.hpp"
#include "epcl/error.hpp"
#include "epcl/eval_metrics.hpp"
#include "epcl/inference.hpp"
#include "epcl/reliability_export.hpp"
#include "epcl/trainer.hpp"
#include "epcl/volume_io.hpp"

namespace fs = std::filesystem;

namespace {

epcl::Shape3 parse_shape(const std::string& text) {
  epcl::Shape3 s{};
  char c1 = 0, c2 = 0;
  std::istringstream in(text);
  if (!(in >> s.h >> c1 >> s.w >> c2 >> s.d) || c1 != ',' || c2 != ',' || !in.eof()) {
    throw CLI::ValidationError("--shape", "expected H,W,D");
  }
  return s;
}

// Splits "dir/name.nii.gz" into ("dir/name", ".nii.gz"); raw stems keep no extension.
std::pair<std::string, std::string> split_output(const fs::path& path) {
  std::string s = path.string();
  for (const char* ext : {".nii.gz", ".nii", ".json", ".bin"}) {
    const std::string e(ext);
    if (s.size() > e.size() && s.compare(s.size() - e.size(), e.size(), e) == 0) {
      const bool raw = e == ".json" || e == ".bin";
      return {s.substr(0, s.size() - e.size()), raw ? "" : e};
    }
  }
  return {s, ""};
}

epcl::Volume load_normalized(const fs::path& path) {
  const auto raw = epcl::load_volume(path);
  auto norm = epcl::normalize_intensity(raw);
  if (norm.constant_warning) std::cerr << "warning: " << path << " has constant intensity\n";
  norm.volume.name = raw.name.empty() ? path.filename().string() : raw.name;
  norm.volume.spacing = raw.spacing;
  return std::move(norm.volume);
}

int cmd_synth(const fs::path& out, int n, int n_test, const std::string& shape, int classes, std::uint64_t seed,
              double frac) {
  epcl::write_synthetic_dataset(out, n, n_test, parse_shape(shape), classes, seed, frac);
  std::cout << "wrote " << n << " training and " << n_test << " test volumes to " << out.string() << '\n';
  return 0;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& resume) {
  epcl::TrainConfig config = config_path.empty() ? epcl::TrainConfig{} : epcl::load_config_file(config_path);
  for (const auto& o : overrides) epcl::apply_override(config, o);
  config.validate();
  if (config.data_dir.empty()) throw epcl::Error(epcl::Errc::BadConfig, "data_dir is not set");

  auto data = std::make_shared<const epcl::Dataset>(epcl::load_dataset(config.data_dir, config.num_classes));
  epcl::RunOptions options;
  if (!resume.empty()) options.resume_from = fs::path(resume);
  const std::int64_t every = std::max<std::int64_t>(1, config.total_iters / 20);
  options.on_step = [&](const epcl::LossReport& r) {
    if (r.iteration % every == 0 || r.iteration == config.total_iters) {
      std::cout << "iter " << r.iteration << "/" << config.total_iters << " total " << r.total << " seg " << r.l_seg
                << " lambda " << r.lambda_con << '\n'
                << std::flush;
    }
  };
  const auto result = epcl::run_training(config, data, options);
  if (!result.reports.empty()) {
    const auto& last = result.reports.back();
    std::cout << "final: " << last.to_json_line() << '\n';
  }
  std::cout << "checkpoint: " << result.final_checkpoint.string() << '\n';
  return 0;
}

int cmd_eval(const fs::path& checkpoint, const fs::path& data_dir, const fs::path& out) {
  auto model = epcl::load_model(checkpoint);
  const auto data = epcl::load_dataset(data_dir, model.config.num_classes);
  if (data.test_images.empty()) throw epcl::Error(epcl::Errc::InvalidArgument, "dataset has no test volumes");
  std::vector<epcl::MetricReport> rows;
  for (std::size_t i = 0; i < data.test_images.size(); ++i) {
    const auto pred = epcl::predict(model, data.test_images[i]);
    auto case_rows = epcl::evaluate_case(pred.labels, data.test_labels[i], data.test_images[i].spacing,
                                         data.test_images[i].name);
    rows.insert(rows.end(), case_rows.begin(), case_rows.end());
  }
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream csv(out);
  csv << epcl::metrics_csv(rows);
  if (!csv) throw epcl::Error(epcl::Errc::UnreadableFile, "cannot write " + out.string());
  const auto mean = epcl::macro_average(rows);
  std::printf("dice %.2f jaccard %.2f hd95 %.3f asd %.3f\n", 100.0 * mean.dice, 100.0 * mean.jaccard,
              mean.surface.hd95, mean.surface.asd);
  return 0;
}

int cmd_predict(const fs::path& checkpoint, const fs::path& in, const fs::path& out) {
  auto model = epcl::load_model(checkpoint);
  const auto volume = load_normalized(in);
  const auto pred = epcl::predict(model, volume);
  const auto& labels = pred.labels;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  epcl::save_labels(labels, out);
  const auto [stem, ext] = split_output(out);
  for (int c = 0; c < pred.probs.num_classes; ++c) {
    epcl::Volume p;
    p.shape = pred.probs.shape;
    p.spacing = volume.spacing;
    const auto n = static_cast<std::size_t>(p.shape.numel());
    const auto first = pred.probs.data.begin() + static_cast<std::ptrdiff_t>(c * n);
    p.data.assign(first, first + static_cast<std::ptrdiff_t>(n));
    epcl::save_volume(p, stem + "_prob_c" + std::to_string(c) + ext);
  }
  std::cout << "wrote " << out.string() << " and " << pred.probs.num_classes << " probability volumes\n";
  return 0;
}

int cmd_uq_report(const fs::path& checkpoint, const fs::path& in, const fs::path& out, int axis) {
  auto model = epcl::load_model(checkpoint);
  const auto volume = load_normalized(in);
  const auto pred = epcl::predict(model, volume);
  const auto maps = epcl::confidence_maps(pred, volume.spacing);
  const auto ent_png = epcl::export_reliability_slices(maps.entropy, axis, out / "entropy", "entropy");
  const auto juq_png = epcl::export_reliability_slices(maps.juq, axis, out / "juq", "juq");

  nlohmann::ordered_json summary;
  summary["volume"] = volume.name;
  summary["iteration"] = model.iteration;
  summary["axis"] = axis;
  summary["slices"] = {{"entropy", ent_png.size()}, {"juq", juq_png.size()}};
  auto stats = [](const epcl::Volume& v) {
    const auto [lo, hi] = std::minmax_element(v.data.begin(), v.data.end());
    double mean = 0.0;
    for (float x : v.data) mean += x;
    mean /= static_cast<double>(v.data.size());
    return nlohmann::ordered_json{{"min", *lo},
                                  {"max", *hi},
                                  {"mean", mean},
                                  {"normalized_spatial_variance", epcl::normalized_spatial_variance(v)}};
  };
  summary["entropy"] = stats(maps.entropy);
  summary["juq"] = stats(maps.juq);
  std::ofstream js(out / "summary.json");
  js << summary.dump(2) << '\n';
  if (!js) throw epcl::Error(epcl::Errc::UnreadableFile, "cannot write summary.json");
  std::cout << "wrote " << ent_png.size() << " entropy and " << juq_png.size() << " juq slices to " << out.string()
            << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semi-supervised 3D segmentation with uncertainty-weighted prototype consistency"};
  app.require_subcommand(1);

  std::string out_dir, shape = "48,48,48";
  int n = 20, n_test = 4, classes = 2;
  std::uint64_t seed = 1;
  double frac = 0.2;
  auto* synth = app.add_subcommand("synth", "write a synthetic phantom dataset");
  synth->add_option("--out", out_dir, "output directory")->required();
  synth->add_option("--n", n, "training volumes")->check(CLI::PositiveNumber);
  synth->add_option("--n-test", n_test, "extra held-out volumes")->check(CLI::NonNegativeNumber);
  synth->add_option("--shape", shape, "volume shape H,W,D");
  synth->add_option("--classes", classes, "classes including background")->check(CLI::Range(2, 255));
  synth->add_option("--seed", seed, "random seed");
  synth->add_option("--labeled-frac", frac, "fraction of training volumes with labels")->check(CLI::Range(0.0, 1.0));

  std::string config_path, resume;
  std::vector<std::string> overrides;
  auto* train = app.add_subcommand("train", "train student and teacher networks");
  train->add_option("--config", config_path, "config file (key = value lines)");
  train->add_option("--override", overrides, "key=value, applied after the config file")->take_all();
  train->add_option("--resume", resume, "checkpoint to resume from");

  std::string checkpoint, data_dir, out_file, in_file;
  auto* eval = app.add_subcommand("eval", "evaluate the teacher on the test split");
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--data", data_dir)->required();
  eval->add_option("--out", out_file, "metrics CSV")->required();

  auto* predict = app.add_subcommand("predict", "segment one volume");
  predict->add_option("--checkpoint", checkpoint)->required();
  predict->add_option("--in", in_file)->required();
  predict->add_option("--out", out_file, "label volume; probabilities go next to it")->required();

  int axis = 2;
  auto* uq = app.add_subcommand("uq-report", "entropy and joint confidence maps as PNG slices");
  uq->add_option("--checkpoint", checkpoint)->required();
  uq->add_option("--in", in_file)->required();
  uq->add_option("--out", out_dir)->required();
  uq->add_option("--axis", axis, "slice axis (0, 1, 2)")->check(CLI::Range(0, 2));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    epcl::configure_threads();
    if (synth->parsed()) return cmd_synth(out_dir, n, n_test, shape, classes, seed, frac);
    if (train->parsed()) return cmd_train(config_path, overrides, resume);
    if (eval->parsed()) return cmd_eval(checkpoint, data_dir, out_file);
    if (predict->parsed()) return cmd_predict(checkpoint, in_file, out_file);
    if (uq->parsed()) return cmd_uq_report(checkpoint, in_file, out_dir, axis);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const epcl::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.code() == epcl::Errc::BadConfig ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
