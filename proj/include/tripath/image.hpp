#pragma once

// 8-bit PNG rasters through the libpng simplified API.

#include <png.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tripath/error.hpp"

namespace tripath {

// Interleaved HWC bytes; channels is 1 (gray) or 3 (RGB).
struct Raster {
  int width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> pixels;

  Raster() = default;
  Raster(int w, int h, int c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w) * h * c, fill) {}

  std::uint8_t& at(int y, int x, int c = 0) { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  std::uint8_t at(int y, int x, int c = 0) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

inline Raster read_png(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) throw MissingFile(path.string());
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) throw FormatError(path.string(), img.message);
  const bool color = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
  img.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Raster r(static_cast<int>(img.width), static_cast<int>(img.height), color ? 3 : 1);
  if (!png_image_finish_read(&img, nullptr, r.pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw FormatError(path.string(), msg);
  }
  return r;
}

inline void write_png(const std::filesystem::path& path, const Raster& r) {
  if (r.channels != 1 && r.channels != 3) throw InvalidArg(path.string(), "PNG raster needs 1 or 3 channels");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(r.width);
  img.height = static_cast<png_uint_32>(r.height);
  img.format = r.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.c_str(), 0, r.pixels.data(), 0, nullptr))
    throw FormatError(path.string(), img.message);
}

}  // namespace tripath
