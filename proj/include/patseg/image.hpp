#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "patseg/errors.hpp"

namespace patseg {

// Interleaved float image, values in [0,1]. channels is 1 (gray), 3 (RGB)
// or 4 (RGBA sprites, straight alpha in channel 3).
struct Image {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<float> pix;

  static Image create(int h, int w, int c, float fill = 0.0f) {
    if (h < 1 || w < 1 || (c != 1 && c != 3 && c != 4)) {
      throw SizeError("bad image dims " + std::to_string(h) + "x" + std::to_string(w) + "x" +
                      std::to_string(c));
    }
    Image im;
    im.height = h;
    im.width = w;
    im.channels = c;
    im.pix.assign(static_cast<std::size_t>(h) * w * c, fill);
    return im;
  }

  float& at(int y, int x, int c) {
    return pix[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  float at(int y, int x, int c) const {
    return pix[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;  // {0,1}

  static BinaryMask create(int h, int w) {
    BinaryMask m;
    m.height = h;
    m.width = w;
    m.data.assign(static_cast<std::size_t>(h) * w, 0);
    return m;
  }

  std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const {
    return data[static_cast<std::size_t>(y) * width + x];
  }
  std::int64_t area() const {
    std::int64_t n = 0;
    for (std::uint8_t v : data) n += v;
    return n;
  }
};

namespace detail {

inline std::uint8_t to_byte(float v) {
  const float s = std::min(std::max(v, 0.0f), 1.0f) * 255.0f;
  return static_cast<std::uint8_t>(std::lround(s));
}

}  // namespace detail

inline void write_png(const std::string& path, const Image& im) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(im.width);
  png.height = static_cast<png_uint_32>(im.height);
  switch (im.channels) {
    case 1: png.format = PNG_FORMAT_GRAY; break;
    case 3: png.format = PNG_FORMAT_RGB; break;
    case 4: png.format = PNG_FORMAT_RGBA; break;
    default: throw IoError("unsupported channel count for PNG: " + std::to_string(im.channels));
  }
  std::vector<std::uint8_t> buf(im.pix.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = detail::to_byte(im.pix[i]);
  if (!png_image_write_to_file(&png, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw IoError("failed to write PNG " + path + ": " + png.message);
  }
}

inline Image read_png(const std::string& path, int want_channels = 3) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw IoError("failed to read PNG " + path + ": " + png.message);
  }
  switch (want_channels) {
    case 1: png.format = PNG_FORMAT_GRAY; break;
    case 3: png.format = PNG_FORMAT_RGB; break;
    case 4: png.format = PNG_FORMAT_RGBA; break;
    default:
      png_image_free(&png);
      throw IoError("unsupported channel request: " + std::to_string(want_channels));
  }
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
    throw IoError("failed to decode PNG " + path + ": " + png.message);
  }
  Image im = Image::create(static_cast<int>(png.height), static_cast<int>(png.width),
                           want_channels);
  for (std::size_t i = 0; i < buf.size(); ++i) im.pix[i] = buf[i] / 255.0f;
  return im;
}

inline void write_mask_png(const std::string& path, const BinaryMask& mask) {
  Image im = Image::create(mask.height, mask.width, 1);
  for (std::size_t i = 0; i < mask.data.size(); ++i) im.pix[i] = mask.data[i] ? 1.0f : 0.0f;
  write_png(path, im);
}

inline BinaryMask read_mask_png(const std::string& path) {
  Image im = read_png(path, 1);
  BinaryMask m = BinaryMask::create(im.height, im.width);
  for (std::size_t i = 0; i < im.pix.size(); ++i) m.data[i] = im.pix[i] > 0.5f ? 1 : 0;
  return m;
}

// Peak signal-to-noise ratio in dB over all channels; +inf for identical
// images.
inline double psnr(const Image& a, const Image& b) {
  if (a.height != b.height || a.width != b.width || a.channels != b.channels) {
    throw SizeError("psnr shape mismatch");
  }
  double mse = 0.0;
  for (std::size_t i = 0; i < a.pix.size(); ++i) {
    const double d = static_cast<double>(a.pix[i]) - b.pix[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.pix.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

}  // namespace patseg
