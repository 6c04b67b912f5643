#include "epcl/nifti.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <string>

#include "epcl/error.hpp"

namespace epcl::nifti {
namespace {

#pragma pack(push, 1)
struct Header {
  std::int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration;
  float toffset;
  std::int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code, sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4], srow_y[4], srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Header) == 348);

enum : std::int16_t {
  kUint8 = 2,
  kInt16 = 4,
  kInt32 = 8,
  kFloat32 = 16,
  kFloat64 = 64,
  kInt8 = 256,
  kUint16 = 512,
};

struct GzCloser {
  void operator()(gzFile f) const noexcept { gzclose(f); }
};
using GzHandle = std::unique_ptr<std::remove_pointer_t<gzFile>, GzCloser>;

bool is_gz(const std::filesystem::path& path) { return path.extension() == ".gz"; }

GzHandle open(const std::filesystem::path& path, const char* mode) {
  GzHandle f(gzopen(path.c_str(), mode));
  if (!f) throw Error(Errc::UnreadableFile, "cannot open " + path.string());
  return f;
}

void read_exact(gzFile f, void* dst, std::size_t bytes, const std::filesystem::path& path) {
  auto* out = static_cast<char*>(dst);
  while (bytes > 0) {
    const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(bytes, 1u << 30));
    const int got = gzread(f, out, chunk);
    if (got <= 0) throw Error(Errc::ShapeMismatch, "truncated NIfTI payload in " + path.string());
    out += got;
    bytes -= static_cast<std::size_t>(got);
  }
}

void write_exact(gzFile f, const void* src, std::size_t bytes, const std::filesystem::path& path) {
  const auto* in = static_cast<const char*>(src);
  while (bytes > 0) {
    const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(bytes, 1u << 30));
    const int put = gzwrite(f, in, chunk);
    if (put <= 0) throw Error(Errc::UnreadableFile, "write failed for " + path.string());
    in += put;
    bytes -= static_cast<std::size_t>(put);
  }
}

struct Raw {
  Header hdr;
  Shape3 shape;
  std::vector<double> values;  // NIfTI order: i fastest
};

template <typename T>
void decode(const std::vector<char>& bytes, std::vector<double>& out) {
  const std::size_t n = bytes.size() / sizeof(T);
  out.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    T v;
    std::memcpy(&v, bytes.data() + i * sizeof(T), sizeof(T));
    out[i] = static_cast<double>(v);
  }
}

Raw read_raw(const std::filesystem::path& path) {
  auto f = open(path, "rb");
  Raw raw{};
  read_exact(f.get(), &raw.hdr, sizeof(Header), path);
  const Header& h = raw.hdr;
  if (h.sizeof_hdr != 348) throw Error(Errc::UnreadableFile, "not a little-endian NIfTI-1 file: " + path.string());
  if (std::memcmp(h.magic, "n+1", 3) != 0) throw Error(Errc::UnreadableFile, "only single-file NIfTI is supported");
  if (h.dim[0] < 1 || h.dim[0] > 7) throw Error(Errc::UnreadableFile, "bad dim[0] in " + path.string());
  for (int i = 4; i <= h.dim[0]; ++i) {
    if (h.dim[i] > 1) throw Error(Errc::UnreadableFile, "only 3D scalar NIfTI images are supported");
  }
  raw.shape = {h.dim[1], h.dim[0] >= 2 ? h.dim[2] : 1, h.dim[0] >= 3 ? h.dim[3] : 1};
  if (raw.shape.h < 1 || raw.shape.w < 1 || raw.shape.d < 1) throw Error(Errc::UnreadableFile, "non-positive dims");

  const auto offset = static_cast<std::size_t>(h.vox_offset);
  if (offset > sizeof(Header)) {
    std::vector<char> skip(offset - sizeof(Header));
    read_exact(f.get(), skip.data(), skip.size(), path);
  }
  std::size_t elem = 0;
  switch (h.datatype) {
    case kUint8: case kInt8: elem = 1; break;
    case kInt16: case kUint16: elem = 2; break;
    case kInt32: case kFloat32: elem = 4; break;
    case kFloat64: elem = 8; break;
    default: throw Error(Errc::UnreadableFile, "unsupported NIfTI datatype " + std::to_string(h.datatype));
  }
  std::vector<char> bytes(static_cast<std::size_t>(raw.shape.numel()) * elem);
  read_exact(f.get(), bytes.data(), bytes.size(), path);
  switch (h.datatype) {
    case kUint8: decode<std::uint8_t>(bytes, raw.values); break;
    case kInt8: decode<std::int8_t>(bytes, raw.values); break;
    case kInt16: decode<std::int16_t>(bytes, raw.values); break;
    case kUint16: decode<std::uint16_t>(bytes, raw.values); break;
    case kInt32: decode<std::int32_t>(bytes, raw.values); break;
    case kFloat32: decode<float>(bytes, raw.values); break;
    case kFloat64: decode<double>(bytes, raw.values); break;
    default: break;
  }
  return raw;
}

Header make_header(Shape3 shape, const Spacing& spacing, std::int16_t datatype, std::int16_t bitpix) {
  Header h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = 3;
  h.dim[1] = static_cast<std::int16_t>(shape.h);
  h.dim[2] = static_cast<std::int16_t>(shape.w);
  h.dim[3] = static_cast<std::int16_t>(shape.d);
  for (int i = 4; i < 8; ++i) h.dim[i] = 1;
  h.datatype = datatype;
  h.bitpix = bitpix;
  h.pixdim[0] = 1.0f;
  for (int i = 0; i < 3; ++i) h.pixdim[i + 1] = static_cast<float>(spacing[static_cast<std::size_t>(i)]);
  for (int i = 4; i < 8; ++i) h.pixdim[i] = 1.0f;
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.xyzt_units = 2;  // millimetres
  h.sform_code = 1;
  h.srow_x[0] = h.pixdim[1];
  h.srow_y[1] = h.pixdim[2];
  h.srow_z[2] = h.pixdim[3];
  std::memcpy(h.magic, "n+1\0", 4);
  return h;
}

template <typename T, typename Getter>
void write_payload(const std::filesystem::path& path, const Header& hdr, Shape3 shape, Getter get) {
  if (shape.h > 32767 || shape.w > 32767 || shape.d > 32767) {
    throw Error(Errc::InvalidArgument, "dimension exceeds NIfTI-1 limits");
  }
  auto f = open(path, is_gz(path) ? "wb6" : "wbT");
  write_exact(f.get(), &hdr, sizeof(Header), path);
  const char extension[4] = {0, 0, 0, 0};
  write_exact(f.get(), extension, 4, path);
  std::vector<T> buf(static_cast<std::size_t>(shape.numel()));
  std::size_t n = 0;
  for (std::int64_t k = 0; k < shape.d; ++k)
    for (std::int64_t j = 0; j < shape.w; ++j)
      for (std::int64_t i = 0; i < shape.h; ++i) buf[n++] = get(shape.index(i, j, k));
  write_exact(f.get(), buf.data(), buf.size() * sizeof(T), path);
}

}  // namespace

Volume read_volume(const std::filesystem::path& path) {
  const Raw raw = read_raw(path);
  Volume v(raw.shape, path.filename().string());
  for (int i = 0; i < 3; ++i) {
    const float p = raw.hdr.pixdim[i + 1];
    v.spacing[static_cast<std::size_t>(i)] = (p > 0.0f && std::isfinite(p)) ? p : 1.0;
  }
  const double slope = (raw.hdr.scl_slope != 0.0f && std::isfinite(raw.hdr.scl_slope)) ? raw.hdr.scl_slope : 1.0;
  const double inter = std::isfinite(raw.hdr.scl_inter) ? raw.hdr.scl_inter : 0.0;
  std::size_t n = 0;
  for (std::int64_t k = 0; k < raw.shape.d; ++k)
    for (std::int64_t j = 0; j < raw.shape.w; ++j)
      for (std::int64_t i = 0; i < raw.shape.h; ++i) {
        const double value = raw.values[n++];
        v.at(i, j, k) = static_cast<float>(slope == 1.0 && inter == 0.0 ? value : value * slope + inter);
      }
  validate(v);
  return v;
}

LabelVolume read_labels(const std::filesystem::path& path, int num_classes) {
  const Raw raw = read_raw(path);
  LabelVolume labels(raw.shape, 2, path.filename().string());
  int max_label = 0;
  std::size_t n = 0;
  for (std::int64_t k = 0; k < raw.shape.d; ++k)
    for (std::int64_t j = 0; j < raw.shape.w; ++j)
      for (std::int64_t i = 0; i < raw.shape.h; ++i) {
        const double value = raw.values[n++];
        if (value < 0.0 || value > 255.0 || value != std::floor(value)) {
          throw Error(Errc::InvalidArgument, "label values must be small non-negative integers");
        }
        labels.at(i, j, k) = static_cast<std::uint8_t>(value);
        max_label = std::max(max_label, static_cast<int>(value));
      }
  labels.num_classes = num_classes > 0 ? num_classes : std::max(2, max_label + 1);
  validate(labels);
  return labels;
}

void write_volume(const Volume& v, const std::filesystem::path& path) {
  validate(v);
  write_payload<float>(path, make_header(v.shape, v.spacing, kFloat32, 32), v.shape,
                       [&](std::int64_t idx) { return v.data[static_cast<std::size_t>(idx)]; });
}

void write_labels(const LabelVolume& labels, const std::filesystem::path& path) {
  validate(labels);
  write_payload<std::uint8_t>(path, make_header(labels.shape, Spacing{1, 1, 1}, kUint8, 8), labels.shape,
                              [&](std::int64_t idx) { return labels.data[static_cast<std::size_t>(idx)]; });
}

}  // namespace epcl::nifti
