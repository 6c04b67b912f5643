#include "epcl/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "epcl/error.hpp"

namespace epcl {
using json = nlohmann::json;

std::string_view to_string(CombinationMode mode) noexcept {
  switch (mode) {
    case CombinationMode::Concat: return "concat";
    case CombinationMode::SeparateMultiProto: return "separate_multi_proto";
    case CombinationMode::AugMapOnOrig: return "aug_map_on_orig";
    case CombinationMode::OrigMapOnAug: return "orig_map_on_aug";
  }
  return "separate_multi_proto";
}

CombinationMode parse_combination_mode(std::string_view text) {
  for (auto m : {CombinationMode::Concat, CombinationMode::SeparateMultiProto, CombinationMode::AugMapOnOrig,
                 CombinationMode::OrigMapOnAug}) {
    if (text == to_string(m)) return m;
  }
  throw Error(Errc::BadConfig, "unknown combination_mode '" + std::string(text) +
                                   "' (concat, separate_multi_proto, aug_map_on_orig, orig_map_on_aug)");
}

BackboneConfig TrainConfig::backbone() const {
  BackboneConfig b;
  b.base_filters = base_filters;
  b.depth = depth;
  b.num_classes = num_classes;
  b.prototype_tap = prototype_tap;
  return b;
}

void TrainConfig::validate() const {
  backbone().validate();
  if (total_iters < 1) throw Error(Errc::BadConfig, "total_iters must be >= 1");
  if (!(lr > 0.0)) throw Error(Errc::BadConfig, "lr must be > 0");
  if (labeled_batch < 2 || labeled_batch % 2 != 0) throw Error(Errc::BadConfig, "labeled_batch must be even and >= 2");
  if (unlabeled_batch < 2) throw Error(Errc::BadConfig, "unlabeled_batch must be >= 2");
  if (lambda1 < 0.0 || lambda2 < 0.0) throw Error(Errc::BadConfig, "lambda1 and lambda2 must be >= 0");
  if (ema_decay < 0.0 || ema_decay > 1.0) throw Error(Errc::BadConfig, "ema_decay must be in [0, 1]");
  if (!(temperature > 0.0)) throw Error(Errc::BadConfig, "temperature must be > 0");
  if (focal_gamma < 0.0) throw Error(Errc::BadConfig, "focal_gamma must be >= 0");
  if (checkpoint_every < 1) throw Error(Errc::BadConfig, "checkpoint_every must be >= 1");
  const std::int64_t factor = std::int64_t{1} << (depth - 1);
  for (int a = 0; a < 3; ++a) {
    if (patch[a] < 4 || patch[a] % factor != 0) {
      throw Error(Errc::BadConfig, "patch axes must be >= 4 and divisible by " + std::to_string(factor));
    }
    if (stride[a] < 1) throw Error(Errc::BadConfig, "stride axes must be >= 1");
  }
}

namespace {

json shape_json(Shape3 s) { return json::array({s.h, s.w, s.d}); }

Shape3 shape_from_json(const json& j, const char* key) {
  const auto v = j.get<std::vector<std::int64_t>>();
  if (v.size() != 3) throw Error(Errc::BadConfig, std::string(key) + " needs three entries");
  return {v[0], v[1], v[2]};
}

}  // namespace

nlohmann::ordered_json TrainConfig::to_json() const {
  nlohmann::ordered_json j;
  j["preset"] = preset;
  j["total_iters"] = total_iters;
  j["lr"] = lr;
  j["labeled_batch"] = labeled_batch;
  j["unlabeled_batch"] = unlabeled_batch;
  j["lambda1"] = lambda1;
  j["lambda2"] = lambda2;
  j["ema_decay"] = ema_decay;
  j["seed"] = seed;
  j["combination_mode"] = std::string(epcl::to_string(combination_mode));
  j["reliability_mode"] = std::string(epcl::to_string(reliability_mode));
  j["prototype_tap"] = prototype_tap;
  j["base_filters"] = base_filters;
  j["depth"] = depth;
  j["num_classes"] = num_classes;
  j["patch"] = shape_json(patch);
  j["stride"] = shape_json(stride);
  j["temperature"] = temperature;
  j["focal_gamma"] = focal_gamma;
  j["checkpoint_every"] = checkpoint_every;
  j["unlabeled_losses"] = unlabeled_losses;
  j["flip_rotate"] = flip_rotate;
  j["data_dir"] = data_dir;
  j["out_dir"] = out_dir;
  return j;
}

namespace {

void set_key(TrainConfig& c, const std::string& key, const json& v) {
  try {
    if (key == "preset") apply_preset(c, v.get<std::string>());
    else if (key == "total_iters") c.total_iters = v.get<std::int64_t>();
    else if (key == "lr") c.lr = v.get<double>();
    else if (key == "labeled_batch") c.labeled_batch = v.get<int>();
    else if (key == "unlabeled_batch") c.unlabeled_batch = v.get<int>();
    else if (key == "lambda1") c.lambda1 = v.get<double>();
    else if (key == "lambda2") c.lambda2 = v.get<double>();
    else if (key == "ema_decay") c.ema_decay = v.get<double>();
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else if (key == "combination_mode") c.combination_mode = parse_combination_mode(v.get<std::string>());
    else if (key == "reliability_mode") c.reliability_mode = parse_reliability_mode(v.get<std::string>());
    else if (key == "prototype_tap") c.prototype_tap = v.get<int>();
    else if (key == "base_filters") c.base_filters = v.get<int>();
    else if (key == "depth") c.depth = v.get<int>();
    else if (key == "num_classes") c.num_classes = v.get<int>();
    else if (key == "patch") c.patch = shape_from_json(v, "patch");
    else if (key == "stride") c.stride = shape_from_json(v, "stride");
    else if (key == "temperature") c.temperature = v.get<double>();
    else if (key == "focal_gamma") c.focal_gamma = v.get<double>();
    else if (key == "checkpoint_every") c.checkpoint_every = v.get<std::int64_t>();
    else if (key == "unlabeled_losses") c.unlabeled_losses = v.get<bool>();
    else if (key == "flip_rotate") c.flip_rotate = v.get<bool>();
    else if (key == "data_dir") c.data_dir = v.get<std::string>();
    else if (key == "out_dir") c.out_dir = v.get<std::string>();
    else {
      std::string valid;
      for (const auto& k : config_keys()) valid += (valid.empty() ? "" : ", ") + k;
      throw Error(Errc::BadConfig, "unknown config key '" + key + "'; valid keys: " + valid);
    }
  } catch (const json::exception& e) {
    throw Error(Errc::BadConfig, "bad value for '" + key + "': " + e.what());
  }
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

json parse_value(const std::string& key, const std::string& text) {
  if (key == "patch" || key == "stride") {
    std::string t = text;
    if (t.empty() || t.front() != '[') t = "[" + t + "]";
    try {
      return json::parse(t);
    } catch (const json::exception&) {
      throw Error(Errc::BadConfig, "bad shape for '" + key + "': " + text);
    }
  }
  if (key == "preset" || key == "combination_mode" || key == "reliability_mode" || key == "data_dir" ||
      key == "out_dir") {
    if (text.size() >= 2 && text.front() == '"' && text.back() == '"') return text.substr(1, text.size() - 2);
    return text;
  }
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return text;  // reported as a type error by set_key
  }
}

}  // namespace

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  if (j.contains("preset")) set_key(c, "preset", j.at("preset"));
  for (const auto& [key, value] : j.items()) {
    if (key != "preset") set_key(c, key, value);
  }
  c.validate();
  return c;
}

void apply_preset(TrainConfig& c, std::string_view preset) {
  if (preset == "paper") {
    c.base_filters = 16;
    c.depth = 4;
    c.patch = {112, 112, 80};
    c.stride = {18, 18, 4};
    c.total_iters = 14000;
  } else if (preset == "tiny") {
    c.base_filters = 8;
    c.depth = 3;
    c.patch = {32, 32, 32};
    c.stride = {16, 16, 16};
    c.total_iters = 2000;
  } else {
    throw Error(Errc::BadConfig, "unknown preset '" + std::string(preset) + "' (paper, tiny)");
  }
  c.preset = std::string(preset);
}

TrainConfig make_config(std::string_view preset) {
  TrainConfig c;
  apply_preset(c, preset);
  return c;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  const auto j = TrainConfig{}.to_json();
  for (const auto& [key, value] : j.items()) keys.push_back(key);
  return keys;
}

void apply_override(TrainConfig& config, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw Error(Errc::BadConfig, "override '" + std::string(assignment) + "' is not key=value");
  }
  const std::string key = trim(assignment.substr(0, eq));
  const std::string value = trim(assignment.substr(eq + 1));
  set_key(config, key, parse_value(key, value));
}

TrainConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::UnreadableFile, "cannot open config " + path.string());
  std::vector<std::string> assignments;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    if (t.find('=') == std::string::npos) {
      throw Error(Errc::BadConfig, path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    }
    assignments.push_back(t);
  }
  TrainConfig c;
  auto is_preset = [](const std::string& a) { return trim(std::string_view(a).substr(0, a.find('='))) == "preset"; };
  for (const auto& a : assignments)
    if (is_preset(a)) apply_override(c, a);
  for (const auto& a : assignments)
    if (!is_preset(a)) apply_override(c, a);
  return c;
}

std::string config_file_text(const TrainConfig& config) {
  std::ostringstream out;
  const auto j = config.to_json();
  for (const auto& [key, value] : j.items()) {
    out << key << " = ";
    if (value.is_string()) {
      out << value.get<std::string>();
    } else if (value.is_array()) {
      out << value[0] << ',' << value[1] << ',' << value[2];
    } else {
      out << value.dump();
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace epcl
