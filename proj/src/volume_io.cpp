#include "epcl/volume_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>

#include <json.hpp>

#include "epcl/error.hpp"
#include "epcl/nifti.hpp"

namespace epcl {
namespace fs = std::filesystem;
using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "raw container I/O assumes a little-endian host");

void validate(const Volume& v) {
  if (v.shape.h < 1 || v.shape.w < 1 || v.shape.d < 1) {
    throw Error(Errc::InvalidArgument, "volume dimensions must be >= 1");
  }
  if (static_cast<std::int64_t>(v.data.size()) != v.shape.numel()) {
    throw Error(Errc::ShapeMismatch, "volume payload does not match its shape");
  }
  for (double s : v.spacing) {
    if (!(s > 0.0) || !std::isfinite(s)) throw Error(Errc::InvalidArgument, "spacing must be strictly positive");
  }
  if (!std::all_of(v.data.begin(), v.data.end(), [](float x) { return std::isfinite(x); })) {
    throw Error(Errc::NonFiniteData, "volume '" + v.name + "' contains NaN or Inf");
  }
}

void validate(const LabelVolume& labels) {
  if (labels.shape.h < 1 || labels.shape.w < 1 || labels.shape.d < 1) {
    throw Error(Errc::InvalidArgument, "label dimensions must be >= 1");
  }
  if (labels.num_classes < 2) throw Error(Errc::InvalidArgument, "num_classes must be >= 2");
  if (static_cast<std::int64_t>(labels.data.size()) != labels.shape.numel()) {
    throw Error(Errc::ShapeMismatch, "label payload does not match its shape");
  }
  for (auto value : labels.data) {
    if (value >= labels.num_classes) {
      throw Error(Errc::InvalidArgument, "label value " + std::to_string(value) + " outside [0, num_classes)");
    }
  }
}

// ---- raw+json -------------------------------------------------------------

namespace {

fs::path with_suffix(const fs::path& stem, const char* suffix) { return fs::path(stem.string() + suffix); }

json read_header(const fs::path& stem) {
  std::ifstream in(with_suffix(stem, ".json"));
  if (!in) throw Error(Errc::UnreadableFile, "cannot open " + with_suffix(stem, ".json").string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(Errc::UnreadableFile, "bad header " + with_suffix(stem, ".json").string() + ": " + e.what());
  }
}

Shape3 header_shape(const json& header) {
  try {
    const auto dims = header.at("shape").get<std::vector<std::int64_t>>();
    if (dims.size() != 3) throw Error(Errc::UnreadableFile, "shape must have three entries");
    return {dims[0], dims[1], dims[2]};
  } catch (const json::exception& e) {
    throw Error(Errc::UnreadableFile, std::string("bad shape in header: ") + e.what());
  }
}

std::vector<char> read_blob(const fs::path& stem) {
  const fs::path path = with_suffix(stem, ".bin");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::UnreadableFile, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const fs::path& path, const void* data, std::size_t bytes) {
  const fs::path tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::UnreadableFile, "cannot write " + tmp.string());
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
    if (!out) throw Error(Errc::UnreadableFile, "write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_header(const fs::path& stem, const json& header) {
  const std::string text = header.dump() + "\n";
  write_file_atomic(with_suffix(stem, ".json"), text.data(), text.size());
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

fs::path strip_raw_suffix(const fs::path& path) {
  const std::string s = path.string();
  if (ends_with(s, ".json") || ends_with(s, ".bin")) return fs::path(s.substr(0, s.rfind('.')));
  return path;
}

}  // namespace

void save_raw(const Volume& v, const fs::path& stem) {
  validate(v);
  write_header(stem, json{{"shape", {v.shape.h, v.shape.w, v.shape.d}},
                          {"spacing", {v.spacing[0], v.spacing[1], v.spacing[2]}},
                          {"dtype", "float32"}});
  write_file_atomic(with_suffix(stem, ".bin"), v.data.data(), v.data.size() * sizeof(float));
}

void save_raw(const LabelVolume& labels, const fs::path& stem) {
  validate(labels);
  write_header(stem, json{{"shape", {labels.shape.h, labels.shape.w, labels.shape.d}},
                          {"spacing", {1.0, 1.0, 1.0}},
                          {"dtype", "uint8"},
                          {"num_classes", labels.num_classes}});
  write_file_atomic(with_suffix(stem, ".bin"), labels.data.data(), labels.data.size());
}

Volume load_raw_volume(const fs::path& stem_in) {
  const fs::path stem = strip_raw_suffix(stem_in);
  const json header = read_header(stem);
  const Shape3 shape = header_shape(header);
  if (shape.h < 1 || shape.w < 1 || shape.d < 1) throw Error(Errc::UnreadableFile, "non-positive shape in header");
  if (header.value("dtype", std::string("float32")) != "float32") {
    throw Error(Errc::UnreadableFile, "volume dtype must be float32");
  }
  const std::vector<char> blob = read_blob(stem);
  if (blob.size() != static_cast<std::size_t>(shape.numel()) * sizeof(float)) {
    throw Error(Errc::ShapeMismatch, "header shape implies " + std::to_string(shape.numel()) + " floats but blob holds " +
                                         std::to_string(blob.size() / sizeof(float)) + " (" +
                                         std::to_string(blob.size()) + " bytes)");
  }
  Volume v(shape, stem.filename().string());
  std::memcpy(v.data.data(), blob.data(), blob.size());
  if (header.contains("spacing")) {
    const auto sp = header.at("spacing").get<std::vector<double>>();
    if (sp.size() != 3) throw Error(Errc::UnreadableFile, "spacing must have three entries");
    v.spacing = {sp[0], sp[1], sp[2]};
  }
  validate(v);
  return v;
}

LabelVolume load_raw_labels(const fs::path& stem_in, int num_classes) {
  const fs::path stem = strip_raw_suffix(stem_in);
  const json header = read_header(stem);
  const Shape3 shape = header_shape(header);
  if (header.value("dtype", std::string("uint8")) != "uint8") throw Error(Errc::UnreadableFile, "label dtype must be uint8");
  const std::vector<char> blob = read_blob(stem);
  if (blob.size() != static_cast<std::size_t>(shape.numel())) {
    throw Error(Errc::ShapeMismatch, "label blob length does not match header shape");
  }
  const int classes = num_classes > 0 ? num_classes : header.value("num_classes", 2);
  LabelVolume labels(shape, classes, stem.filename().string());
  std::memcpy(labels.data.data(), blob.data(), blob.size());
  validate(labels);
  return labels;
}

VolumeFormat guess_format(const fs::path& path) {
  const std::string s = path.string();
  return (ends_with(s, ".nii") || ends_with(s, ".nii.gz")) ? VolumeFormat::Nifti : VolumeFormat::RawJson;
}

Volume load_volume(const fs::path& path, VolumeFormat format) {
  return format == VolumeFormat::Nifti ? nifti::read_volume(path) : load_raw_volume(path);
}

Volume load_volume(const fs::path& path) { return load_volume(path, guess_format(path)); }

void save_volume(const Volume& v, const fs::path& path) {
  if (guess_format(path) == VolumeFormat::Nifti) {
    nifti::write_volume(v, path);
  } else {
    save_raw(v, strip_raw_suffix(path));
  }
}

void save_labels(const LabelVolume& labels, const fs::path& path) {
  if (guess_format(path) == VolumeFormat::Nifti) {
    nifti::write_labels(labels, path);
  } else {
    save_raw(labels, strip_raw_suffix(path));
  }
}

LabelVolume load_labels(const fs::path& path, int num_classes) {
  return guess_format(path) == VolumeFormat::Nifti ? nifti::read_labels(path, num_classes)
                                                   : load_raw_labels(path, num_classes);
}

// ---- normalization ----------------------------------------------------------

NormalizeResult normalize_intensity(const Volume& v) {
  validate(v);
  const auto n = static_cast<double>(v.data.size());
  double mean = 0.0;
  for (float x : v.data) mean += x;
  mean /= n;
  double var = 0.0;
  for (float x : v.data) var += (x - mean) * (x - mean);
  var /= n;

  NormalizeResult result{v, false};
  if (var <= 0.0) {
    std::fill(result.volume.data.begin(), result.volume.data.end(), 0.0f);
    result.constant_warning = true;
    return result;
  }
  const double inv_std = 1.0 / std::sqrt(var);
  for (float& x : result.volume.data) x = static_cast<float>((x - mean) * inv_std);
  return result;
}

// ---- sliding window ---------------------------------------------------------

PatchGrid plan_sliding_window(Shape3 shape, Shape3 patch, Shape3 stride) {
  for (int a = 0; a < 3; ++a) {
    if (shape[a] < 1 || patch[a] < 1) throw Error(Errc::InvalidArgument, "shape and patch must be >= 1");
    if (stride[a] < 1) throw Error(Errc::InvalidArgument, "stride must be >= 1");
    if (patch[a] > shape[a]) {
      throw Error(Errc::PatchLargerThanVolume, "patch axis " + std::to_string(a) + " is " + std::to_string(patch[a]) +
                                                   " but the volume is " + std::to_string(shape[a]));
    }
  }
  std::array<std::vector<std::int64_t>, 3> starts;
  for (int a = 0; a < 3; ++a) {
    const std::int64_t last = shape[a] - patch[a];
    auto& axis = starts[static_cast<std::size_t>(a)];
    for (std::int64_t s = 0; s < last; s += stride[a]) axis.push_back(s);
    axis.push_back(last);
  }
  PatchGrid grid{shape, patch, stride, {}};
  for (auto i : starts[0])
    for (auto j : starts[1])
      for (auto k : starts[2]) grid.origins.push_back({i, j, k});
  return grid;
}

ProbabilityMap assemble_prediction(std::span<const ProbabilityMap> patch_probs, const PatchGrid& grid) {
  if (patch_probs.size() != grid.origins.size()) {
    throw Error(Errc::CountMismatch, std::to_string(patch_probs.size()) + " patch predictions for " +
                                         std::to_string(grid.origins.size()) + " grid origins");
  }
  if (patch_probs.empty()) throw Error(Errc::CountMismatch, "no patch predictions");
  const int classes = patch_probs.front().num_classes;
  const Shape3 vs = grid.volume_shape;
  const Shape3 ps = grid.patch_size;

  ProbabilityMap out(vs, classes);
  std::vector<std::uint32_t> hits(static_cast<std::size_t>(vs.numel()), 0);
  for (std::size_t n = 0; n < patch_probs.size(); ++n) {
    const ProbabilityMap& p = patch_probs[n];
    if (p.shape != ps || p.num_classes != classes) {
      throw Error(Errc::ShapeMismatch, "patch prediction shape differs from the grid patch size");
    }
    const auto& o = grid.origins[n];
    for (std::int64_t i = 0; i < ps.h; ++i)
      for (std::int64_t j = 0; j < ps.w; ++j)
        for (std::int64_t k = 0; k < ps.d; ++k) {
          const std::int64_t dst = vs.index(o[0] + i, o[1] + j, o[2] + k);
          const std::int64_t src = ps.index(i, j, k);
          ++hits[static_cast<std::size_t>(dst)];
          for (int c = 0; c < classes; ++c) out.at(c, dst) += p.at(c, src);
        }
  }
  for (std::int64_t v = 0; v < vs.numel(); ++v) {
    const auto count = hits[static_cast<std::size_t>(v)];
    if (count == 0) throw Error(Errc::CountMismatch, "grid does not cover every voxel");
    const float inv = 1.0f / static_cast<float>(count);
    for (int c = 0; c < classes; ++c) out.at(c, v) *= inv;
  }
  return out;
}

LabelVolume argmax_labels(const ProbabilityMap& probs) {
  LabelVolume labels(probs.shape, std::max(2, probs.num_classes));
  for (std::int64_t v = 0; v < probs.shape.numel(); ++v) {
    int best = 0;
    for (int c = 1; c < probs.num_classes; ++c) {
      if (probs.at(c, v) > probs.at(best, v)) best = c;
    }
    labels.data[static_cast<std::size_t>(v)] = static_cast<std::uint8_t>(best);
  }
  return labels;
}

// ---- patches ----------------------------------------------------------------

namespace {

void check_crop(Shape3 src, std::array<std::int64_t, 3> origin, Shape3 size) {
  for (int a = 0; a < 3; ++a) {
    if (origin[static_cast<std::size_t>(a)] < 0 || size[a] < 1 ||
        origin[static_cast<std::size_t>(a)] + size[a] > src[a]) {
      throw Error(Errc::PatchLargerThanVolume, "crop window leaves the volume on axis " + std::to_string(a));
    }
  }
}

template <typename T>
void copy_window(const std::vector<T>& src, Shape3 ss, std::vector<T>& dst, Shape3 ds,
                 std::array<std::int64_t, 3> o) {
  for (std::int64_t i = 0; i < ds.h; ++i)
    for (std::int64_t j = 0; j < ds.w; ++j) {
      const auto from = src.begin() + ss.index(o[0] + i, o[1] + j, o[2]);
      std::copy(from, from + ds.d, dst.begin() + ds.index(i, j, 0));
    }
}

}  // namespace

Volume crop(const Volume& v, std::array<std::int64_t, 3> origin, Shape3 size) {
  check_crop(v.shape, origin, size);
  Volume out(size, v.name);
  out.spacing = v.spacing;
  copy_window(v.data, v.shape, out.data, size, origin);
  return out;
}

LabelVolume crop(const LabelVolume& labels, std::array<std::int64_t, 3> origin, Shape3 size) {
  check_crop(labels.shape, origin, size);
  LabelVolume out(size, labels.num_classes, labels.name);
  copy_window(labels.data, labels.shape, out.data, size, origin);
  return out;
}

// ---- synthetic phantoms -----------------------------------------------------

float synth_base_intensity(int c) noexcept { return 0.3f * static_cast<float>(c); }

std::vector<SynthCase> synth_dataset(int n_volumes, Shape3 shape, int num_classes, std::uint64_t seed) {
  if (n_volumes < 0) throw Error(Errc::InvalidArgument, "n_volumes must be >= 0");
  if (shape.h < 16 || shape.w < 16 || shape.d < 16) throw Error(Errc::InvalidArgument, "synthetic shape axes must be >= 16");
  if (num_classes != 2 && num_classes != 3) throw Error(Errc::InvalidArgument, "num_classes must be 2 or 3");

  // Radii are a fraction of each axis; this range keeps the foreground
  // fraction inside [0.02, 0.4] for one to three ellipsoids per class.
  constexpr double kMinRadius = 0.17;
  constexpr double kMaxRadius = 0.24;

  std::mt19937_64 rng(seed);
  std::vector<SynthCase> cases;
  cases.reserve(static_cast<std::size_t>(n_volumes));
  for (int n = 0; n < n_volumes; ++n) {
    const std::string name = "case_" + std::to_string(n);
    SynthCase sc{Volume(shape, name), LabelVolume(shape, num_classes, name)};

    for (int c = 1; c < num_classes; ++c) {
      const int count = std::uniform_int_distribution<int>(1, 3)(rng);
      for (int e = 0; e < count; ++e) {
        std::array<double, 3> centre{};
        std::array<double, 3> radius{};
        for (int a = 0; a < 3; ++a) {
          const double extent = static_cast<double>(shape[a]);
          radius[static_cast<std::size_t>(a)] =
              std::uniform_real_distribution<double>(kMinRadius, kMaxRadius)(rng) * extent;
          const double r = radius[static_cast<std::size_t>(a)];
          centre[static_cast<std::size_t>(a)] = std::uniform_real_distribution<double>(r, extent - r)(rng);
        }
        for (std::int64_t i = 0; i < shape.h; ++i)
          for (std::int64_t j = 0; j < shape.w; ++j)
            for (std::int64_t k = 0; k < shape.d; ++k) {
              const double di = (static_cast<double>(i) + 0.5 - centre[0]) / radius[0];
              const double dj = (static_cast<double>(j) + 0.5 - centre[1]) / radius[1];
              const double dk = (static_cast<double>(k) + 0.5 - centre[2]) / radius[2];
              if (di * di + dj * dj + dk * dk <= 1.0) sc.label.at(i, j, k) = static_cast<std::uint8_t>(c);
            }
      }
    }

    std::normal_distribution<float> noise(0.0f, kSynthNoiseSigma);
    for (std::size_t v = 0; v < sc.image.data.size(); ++v) {
      sc.image.data[v] = synth_base_intensity(sc.label.data[v]) + noise(rng);
    }
    cases.push_back(std::move(sc));
  }
  return cases;
}

}  // namespace epcl
