#pragma once

#include <png.h>

#include <cstdint>
#include <string>
#include <vector>

#include "adsam/errors.hpp"

namespace adsam {

struct Raster {
  std::size_t width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> pixels;  // row-major, interleaved
};

namespace detail {

inline void write_png(const std::string& path, const Raster& raster, png_uint_32 format) {
  require(raster.pixels.size() == raster.width * raster.height * raster.channels, "png: pixel buffer size mismatch");
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(raster.width);
  image.height = static_cast<png_uint_32>(raster.height);
  image.format = format;
  if (!png_image_write_to_file(&image, path.c_str(), 0, raster.pixels.data(), 0, nullptr)) {
    const std::string message = image.message;
    png_image_free(&image);
    throw DataError("cannot write PNG " + path + ": " + message);
  }
}

// Reads `path`; `accept` inspects the file's native format before decoding.
template <typename Accept>
Raster read_png(const std::string& path, png_uint_32 format, std::size_t channels, Accept&& accept) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    const std::string message = image.message;
    png_image_free(&image);
    throw DataError("cannot read PNG " + path + ": " + message);
  }
  if (const std::string problem = accept(image.format); !problem.empty()) {
    png_image_free(&image);
    throw DataError("PNG " + path + ": " + problem);
  }
  image.format = format;
  Raster raster{image.width, image.height, channels, {}};
  raster.pixels.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, raster.pixels.data(), 0, nullptr)) {
    const std::string message = image.message;
    png_image_free(&image);
    throw DataError("cannot decode PNG " + path + ": " + message);
  }
  return raster;
}

}  // namespace detail

inline void save_rgb_png(const std::string& path, const Raster& raster) {
  detail::require(raster.channels == 3, "save_rgb_png: expected 3 channels");
  detail::write_png(path, raster, PNG_FORMAT_RGB);
}

// Any 8-bit PNG is converted to RGB; 16-bit files are rejected.
inline Raster load_rgb_png(const std::string& path) {
  return detail::read_png(path, PNG_FORMAT_RGB, 3, [](png_uint_32 native) -> std::string {
    if (native & PNG_FORMAT_FLAG_LINEAR) return "expected 8-bit samples, found 16-bit";
    return {};
  });
}

// Single-channel 8-bit grayscale; pixel value == class id.
inline void save_label_png(const std::string& path, const Raster& labels) {
  detail::require(labels.channels == 1, "save_label_png: expected 1 channel");
  detail::write_png(path, labels, PNG_FORMAT_GRAY);
}

inline Raster load_label_png(const std::string& path) {
  return detail::read_png(path, PNG_FORMAT_GRAY, 1, [](png_uint_32 native) -> std::string {
    if (native & PNG_FORMAT_FLAG_COLOR) return "label maps must be single-channel grayscale, found color";
    if (native & PNG_FORMAT_FLAG_LINEAR) return "label maps must be 8-bit, found 16-bit";
    if (native & PNG_FORMAT_FLAG_ALPHA) return "label maps must not carry an alpha channel";
    if (native & PNG_FORMAT_FLAG_COLORMAP) return "label maps must not be palette images";
    return {};
  });
}

}  // namespace adsam
