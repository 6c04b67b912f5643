#include "epcl/augmentation.hpp"

#include <algorithm>
#include <cmath>

#include "epcl/error.hpp"

namespace epcl {

CutMask CutMask::from_box(Shape3 shape, CutBox box) {
  CutMask m{shape, box, std::vector<std::uint8_t>(static_cast<std::size_t>(shape.numel()), 0)};
  for (int a = 0; a < 3; ++a) {
    const auto i = static_cast<std::size_t>(a);
    if (box.origin[i] < 0 || box.extent[i] < 0 || box.origin[i] + box.extent[i] > shape[a]) {
      throw Error(Errc::InvalidArgument, "cut box leaves the patch");
    }
  }
  for (std::int64_t i = box.origin[0]; i < box.origin[0] + box.extent[0]; ++i)
    for (std::int64_t j = box.origin[1]; j < box.origin[1] + box.extent[1]; ++j)
      for (std::int64_t k = box.origin[2]; k < box.origin[2] + box.extent[2]; ++k) m.data[shape.index(i, j, k)] = 1;
  return m;
}

double CutMask::fraction() const noexcept {
  const auto inside = std::count(data.begin(), data.end(), std::uint8_t{1});
  return static_cast<double>(inside) / static_cast<double>(data.size());
}

Sample make_sample(const Volume& image, std::string id) {
  return Sample{image.shape, image.data, std::nullopt, id.empty() ? image.name : std::move(id), std::nullopt};
}

Sample make_sample(const Volume& image, const LabelVolume& label, std::string id) {
  if (image.shape != label.shape) throw Error(Errc::ShapeMismatch, "image and label shapes differ");
  return Sample{image.shape, image.data, label.data, id.empty() ? image.name : std::move(id), std::nullopt};
}

CutMask generate_cut_mask(Shape3 patch, Rng& rng) {
  CutBox box;
  for (int a = 0; a < 3; ++a) {
    if (patch[a] < 4) throw Error(Errc::InvalidArgument, "cut mask needs every patch axis >= 4");
    const auto i = static_cast<std::size_t>(a);
    const double axis = static_cast<double>(patch[a]);
    const double drawn = std::uniform_real_distribution<double>(0.25 * axis, 0.5 * axis)(rng);
    box.extent[i] = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::floor(drawn)));
    box.origin[i] = std::uniform_int_distribution<std::int64_t>(0, patch[a] - box.extent[i])(rng);
  }
  return CutMask::from_box(patch, box);
}

Sample cutmix(const Sample& a, const Sample& b, const CutMask& mask, bool mix_labels) {
  if (a.shape != b.shape || a.shape != mask.shape) throw Error(Errc::ShapeMismatch, "cutmix operands differ in shape");
  if (mix_labels && a.labeled() != b.labeled()) {
    throw Error(Errc::LabelArityMismatch, "label mixing requested but only one sample is labelled");
  }
  Sample out{a.shape, a.image, std::nullopt, "mix(" + a.id + "," + b.id + ")", Provenance{a.id, b.id, mask}};
  const bool labels = mix_labels && a.labeled();
  if (labels) out.label = *a.label;
  for (std::size_t v = 0; v < mask.data.size(); ++v) {
    if (mask.data[v] != 0) {
      out.image[v] = b.image[v];
      if (labels) (*out.label)[v] = (*b.label)[v];
    }
  }
  return out;
}

std::vector<Sample> augment_labeled_batch(std::span<const Sample> batch, Rng& rng) {
  if (batch.size() < 2 || batch.size() % 2 != 0) {
    throw Error(Errc::OddBatch, "labelled batch size must be even and >= 2, got " + std::to_string(batch.size()));
  }
  std::vector<Sample> out(batch.begin(), batch.end());
  out.reserve(batch.size() * 3 / 2);
  for (std::size_t i = 0; i + 1 < batch.size(); i += 2) {
    const CutMask mask = generate_cut_mask(batch[i].shape, rng);
    out.push_back(cutmix(batch[i], batch[i + 1], mask, true));
  }
  return out;
}

std::vector<Sample> augment_unlabeled_batch(std::span<const Sample> batch, Rng& rng) {
  if (batch.size() < 2) throw Error(Errc::InvalidArgument, "unlabelled batch size must be >= 2");
  std::vector<Sample> out;
  out.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Sample& next = batch[(i + 1) % batch.size()];
    const CutMask mask = generate_cut_mask(batch[i].shape, rng);
    out.push_back(cutmix(batch[i], next, mask, false));
  }
  return out;
}

FlipRotate draw_flip_rotate(Shape3 shape, Rng& rng) {
  FlipRotate t;
  std::bernoulli_distribution coin(0.5);
  for (auto& f : t.flip) f = coin(rng);
  t.quarter_turns = std::uniform_int_distribution<int>(0, 3)(rng);
  // Odd turns would swap H and W; keep the patch shape when it is not square.
  if (shape.h != shape.w) t.quarter_turns &= ~1;
  return t;
}

namespace {

template <typename T>
std::vector<T> flip_rotate(const std::vector<T>& in, Shape3 s, const FlipRotate& t, Shape3& out_shape) {
  std::vector<T> flipped(in.size());
  for (std::int64_t i = 0; i < s.h; ++i)
    for (std::int64_t j = 0; j < s.w; ++j)
      for (std::int64_t k = 0; k < s.d; ++k) {
        const std::int64_t si = t.flip[0] ? s.h - 1 - i : i;
        const std::int64_t sj = t.flip[1] ? s.w - 1 - j : j;
        const std::int64_t sk = t.flip[2] ? s.d - 1 - k : k;
        flipped[static_cast<std::size_t>(s.index(i, j, k))] = in[static_cast<std::size_t>(s.index(si, sj, sk))];
      }
  std::vector<T> cur = std::move(flipped);
  Shape3 cs = s;
  const int turns = ((t.quarter_turns % 4) + 4) % 4;
  for (int r = 0; r < turns; ++r) {
    // out(i, j) = in(H - 1 - j, i), out shape (W, H, D)
    const Shape3 ns{cs.w, cs.h, cs.d};
    std::vector<T> next(cur.size());
    for (std::int64_t i = 0; i < ns.h; ++i)
      for (std::int64_t j = 0; j < ns.w; ++j)
        for (std::int64_t k = 0; k < ns.d; ++k)
          next[static_cast<std::size_t>(ns.index(i, j, k))] = cur[static_cast<std::size_t>(cs.index(cs.h - 1 - j, i, k))];
    cur = std::move(next);
    cs = ns;
  }
  out_shape = cs;
  return cur;
}

}  // namespace

Sample apply_flip_rotate(const Sample& s, const FlipRotate& t) {
  Sample out = s;
  out.image = flip_rotate(s.image, s.shape, t, out.shape);
  if (s.label) {
    Shape3 ls;
    out.label = flip_rotate(*s.label, s.shape, t, ls);
  }
  return out;
}

Sample random_flip_rotate(const Sample& s, Rng& rng) { return apply_flip_rotate(s, draw_flip_rotate(s.shape, rng)); }

}  // namespace epcl
