#include "epcl/reliability_export.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <memory>
#include <sstream>

#include "epcl/error.hpp"

namespace epcl {
namespace {

void write_png(const std::filesystem::path& path, int width, int height, const std::vector<std::uint8_t>& pixels) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw Error(Errc::UnreadableFile, "cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error(Errc::UnreadableFile, "libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error(Errc::UnreadableFile, "libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int r = 0; r < height; ++r) {
    png_write_row(png, const_cast<png_bytep>(pixels.data() + static_cast<std::size_t>(r) * static_cast<std::size_t>(width)));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

std::vector<std::filesystem::path> export_reliability_slices(const Volume& map, int axis,
                                                             const std::filesystem::path& dir,
                                                             const std::string& prefix) {
  if (axis < 0 || axis > 2) throw Error(Errc::InvalidArgument, "slice axis must be 0, 1 or 2");
  validate(map);
  std::filesystem::create_directories(dir);
  const auto [lo_it, hi_it] = std::minmax_element(map.data.begin(), map.data.end());
  const double lo = *lo_it;
  const double range = static_cast<double>(*hi_it) - lo;

  const Shape3 s = map.shape;
  const int rows_axis = axis == 0 ? 1 : 0;
  const int cols_axis = axis == 2 ? 1 : 2;
  const auto rows = static_cast<int>(s[rows_axis]);
  const auto cols = static_cast<int>(s[cols_axis]);

  std::vector<std::filesystem::path> written;
  std::vector<std::uint8_t> pixels(static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols));
  for (std::int64_t slice = 0; slice < s[axis]; ++slice) {
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        std::array<std::int64_t, 3> idx{};
        idx[static_cast<std::size_t>(axis)] = slice;
        idx[static_cast<std::size_t>(rows_axis)] = r;
        idx[static_cast<std::size_t>(cols_axis)] = c;
        const double value = map.at(idx[0], idx[1], idx[2]);
        const double unit = range > 0.0 ? (value - lo) / range : 1.0;
        pixels[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)] =
            static_cast<std::uint8_t>(std::lround(std::clamp(unit, 0.0, 1.0) * 255.0));
      }
    std::ostringstream name;
    name << prefix << '_' << std::setw(4) << std::setfill('0') << slice << ".png";
    const auto path = dir / name.str();
    write_png(path, cols, rows, pixels);
    written.push_back(path);
  }
  return written;
}

}  // namespace epcl
