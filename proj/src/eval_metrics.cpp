#include "epcl/eval_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "epcl/error.hpp"

namespace epcl {

OverlapMetrics overlap_metrics(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size()) throw Error(Errc::ShapeMismatch, "prediction and ground truth sizes differ");
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] != 0;
    const bool b = gt[i] != 0;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return {1.0, 1.0};
  const double inter = static_cast<double>(both);
  return {2.0 * inter / static_cast<double>(p + g), inter / static_cast<double>(p + g - both)};
}

std::vector<std::uint8_t> surface_voxels(std::span<const std::uint8_t> mask, Shape3 s) {
  std::vector<std::uint8_t> surface(mask.size(), 0);
  auto fg = [&](std::int64_t i, std::int64_t j, std::int64_t k) {
    if (i < 0 || j < 0 || k < 0 || i >= s.h || j >= s.w || k >= s.d) return false;
    return mask[static_cast<std::size_t>(s.index(i, j, k))] != 0;
  };
  for (std::int64_t i = 0; i < s.h; ++i)
    for (std::int64_t j = 0; j < s.w; ++j)
      for (std::int64_t k = 0; k < s.d; ++k) {
        if (!fg(i, j, k)) continue;
        const bool interior = fg(i - 1, j, k) && fg(i + 1, j, k) && fg(i, j - 1, k) && fg(i, j + 1, k) &&
                              fg(i, j, k - 1) && fg(i, j, k + 1);
        if (!interior) surface[static_cast<std::size_t>(s.index(i, j, k))] = 1;
      }
  return surface;
}

namespace {

// Lower envelope of parabolas (Felzenszwalb & Huttenlocher) over one line of
// squared distances sampled every `h` millimetres. Result replaces `f`.
void edt_line(std::vector<double>& f, double h, std::vector<double>& out, std::vector<int>& v, std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  const double inf = std::numeric_limits<double>::infinity();
  const double h2 = h * h;
  auto F = [&](int i) { return f[static_cast<std::size_t>(i)]; };
  auto intersect = [&](int p, int q) {
    return ((F(q) + h2 * q * q) - (F(p) + h2 * p * p)) / (2.0 * h2 * (q - p));
  };
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (!std::isfinite(F(q))) continue;
    while (k >= 0 && intersect(v[static_cast<std::size_t>(k)], q) <= z[static_cast<std::size_t>(k)]) --k;
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = k == 0 ? -inf : intersect(v[static_cast<std::size_t>(k - 1)], q);
    z[static_cast<std::size_t>(k + 1)] = inf;
  }
  out.resize(f.size());
  if (k < 0) {
    std::fill(out.begin(), out.end(), inf);
  } else {
    int j = 0;
    for (int q = 0; q < n; ++q) {
      while (z[static_cast<std::size_t>(j + 1)] < q) ++j;
      const int p = v[static_cast<std::size_t>(j)];
      out[static_cast<std::size_t>(q)] = h2 * (q - p) * (q - p) + F(p);
    }
  }
  f.swap(out);
}

}  // namespace

std::vector<double> distance_to_features(std::span<const std::uint8_t> features, Shape3 s, const Spacing& spacing) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> grid(features.size());
  for (std::size_t i = 0; i < features.size(); ++i) grid[i] = features[i] != 0 ? 0.0 : inf;

  const std::int64_t longest = std::max({s.h, s.w, s.d});
  std::vector<double> line, d, z(static_cast<std::size_t>(longest + 1));
  std::vector<int> v(static_cast<std::size_t>(longest));
  const std::array<std::int64_t, 3> strides{s.w * s.d, s.d, 1};
  for (int axis = 0; axis < 3; ++axis) {
    const std::int64_t n = s[axis];
    const std::int64_t stride = strides[static_cast<std::size_t>(axis)];
    line.resize(static_cast<std::size_t>(n));
    for (std::int64_t base = 0; base < s.numel(); ++base) {
      // Visit each line once, starting from its element with coordinate 0.
      if ((base / stride) % n != 0) continue;
      for (std::int64_t t = 0; t < n; ++t) line[static_cast<std::size_t>(t)] = grid[static_cast<std::size_t>(base + t * stride)];
      edt_line(line, spacing[static_cast<std::size_t>(axis)], d, v, z);
      for (std::int64_t t = 0; t < n; ++t) grid[static_cast<std::size_t>(base + t * stride)] = line[static_cast<std::size_t>(t)];
    }
  }
  for (double& x : grid) x = std::sqrt(x);
  return grid;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw Error(Errc::InvalidArgument, "percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + (values[hi] - values[lo]) * frac;
}

SurfaceMetrics surface_metrics(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, Shape3 shape,
                               const Spacing& spacing) {
  if (pred.size() != gt.size() || static_cast<std::int64_t>(pred.size()) != shape.numel()) {
    throw Error(Errc::ShapeMismatch, "surface metric operands differ in shape");
  }
  const bool pred_empty = std::none_of(pred.begin(), pred.end(), [](auto x) { return x != 0; });
  const bool gt_empty = std::none_of(gt.begin(), gt.end(), [](auto x) { return x != 0; });
  if (pred_empty || gt_empty) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    return {false, nan, nan};
  }
  const auto sp = surface_voxels(pred, shape);
  const auto sg = surface_voxels(gt, shape);
  const auto to_gt = distance_to_features(sg, shape, spacing);
  const auto to_pred = distance_to_features(sp, shape, spacing);

  std::vector<double> pred_to_gt, gt_to_pred;
  for (std::size_t i = 0; i < sp.size(); ++i) {
    if (sp[i]) pred_to_gt.push_back(to_gt[i]);
    if (sg[i]) gt_to_pred.push_back(to_pred[i]);
  }
  double total = 0.0;
  for (double x : pred_to_gt) total += x;
  for (double x : gt_to_pred) total += x;
  const double asd = total / static_cast<double>(pred_to_gt.size() + gt_to_pred.size());
  const double hd95 = std::max(percentile(pred_to_gt, 95.0), percentile(gt_to_pred, 95.0));
  return {true, hd95, asd};
}

std::vector<MetricReport> evaluate_case(const LabelVolume& pred, const LabelVolume& gt, const Spacing& spacing,
                                        const std::string& name) {
  if (pred.shape != gt.shape) throw Error(Errc::ShapeMismatch, "prediction and ground truth shapes differ");
  std::vector<MetricReport> rows;
  const int classes = std::max(pred.num_classes, gt.num_classes);
  std::vector<std::uint8_t> p(pred.data.size()), g(gt.data.size());
  for (int c = 1; c < classes; ++c) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] = pred.data[i] == c;
      g[i] = gt.data[i] == c;
    }
    const auto overlap = overlap_metrics(p, g);
    rows.push_back({name, c, overlap.dice, overlap.jaccard, surface_metrics(p, g, gt.shape, spacing)});
  }
  return rows;
}

MetricReport macro_average(std::span<const MetricReport> rows) {
  MetricReport avg{"mean", 0, 0.0, 0.0, {false, 0.0, 0.0}};
  if (rows.empty()) return avg;
  std::size_t defined = 0;
  for (const auto& r : rows) {
    avg.dice += r.dice;
    avg.jaccard += r.jaccard;
    if (r.surface.defined) {
      avg.surface.hd95 += r.surface.hd95;
      avg.surface.asd += r.surface.asd;
      ++defined;
    }
  }
  avg.dice /= static_cast<double>(rows.size());
  avg.jaccard /= static_cast<double>(rows.size());
  if (defined > 0) {
    avg.surface.defined = true;
    avg.surface.hd95 /= static_cast<double>(defined);
    avg.surface.asd /= static_cast<double>(defined);
  } else {
    avg.surface.hd95 = avg.surface.asd = std::numeric_limits<double>::quiet_NaN();
  }
  return avg;
}

std::string metrics_csv(std::span<const MetricReport> rows) {
  std::ostringstream out;
  out.precision(10);
  out << "volume,class,dice,jaccard,hd95,asd,surface_defined\n";
  auto row = [&](const MetricReport& r, const std::string& cls) {
    out << r.volume << ',' << cls << ',' << r.dice * 100.0 << ',' << r.jaccard * 100.0 << ',';
    if (r.surface.defined) {
      out << r.surface.hd95 << ',' << r.surface.asd << ",1\n";
    } else {
      out << "nan,nan,0\n";
    }
  };
  for (const auto& r : rows) row(r, std::to_string(r.label));
  row(macro_average(rows), "all");
  return out.str();
}

}  // namespace epcl
