#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <vector>

#include "patseg/image.hpp"
#include "patseg/ops.hpp"
#include "patseg/rng.hpp"
#include "patseg/tensor.hpp"

namespace patseg {

struct Hsv {
  float h;  // radians in [0, 2*pi)
  float s;
  float v;
};

inline Hsv rgb_to_hsv(float r, float g, float b) {
  const float maxc = std::max({r, g, b});
  const float minc = std::min({r, g, b});
  const float d = maxc - minc;
  float h6 = 0.0f;
  if (d > 0.0f) {
    if (maxc == r) {
      h6 = std::fmod((g - b) / d, 6.0f);
      if (h6 < 0.0f) h6 += 6.0f;
    } else if (maxc == g) {
      h6 = (b - r) / d + 2.0f;
    } else {
      h6 = (r - g) / d + 4.0f;
    }
  }
  const float two_pi = 2.0f * std::numbers::pi_v<float>;
  float h = h6 / 6.0f * two_pi;
  if (h >= two_pi) h -= two_pi;
  return {h, maxc > 0.0f ? d / maxc : 0.0f, maxc};
}

inline void hsv_to_rgb(const Hsv& hsv, float& r, float& g, float& b) {
  const float two_pi = 2.0f * std::numbers::pi_v<float>;
  float h = std::fmod(hsv.h, two_pi);
  if (h < 0.0f) h += two_pi;
  const float h6 = h / two_pi * 6.0f;
  const int i = std::min(static_cast<int>(h6), 5);
  const float f = h6 - i;
  const float p = hsv.v * (1.0f - hsv.s);
  const float q = hsv.v * (1.0f - hsv.s * f);
  const float t = hsv.v * (1.0f - hsv.s * (1.0f - f));
  switch (i) {
    case 0: r = hsv.v; g = t; b = p; break;
    case 1: r = q; g = hsv.v; b = p; break;
    case 2: r = p; g = hsv.v; b = t; break;
    case 3: r = p; g = q; b = hsv.v; break;
    case 4: r = t; g = p; b = hsv.v; break;
    default: r = hsv.v; g = p; b = q; break;
  }
}

struct Rect {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;
};

struct AttributeStats {
  double brightness = 0.0;      // mean HSV value
  double saturation = 0.0;      // mean HSV saturation
  double hue = 0.0;             // circular mean, radians in [0, 2*pi)
  double local_contrast = 0.0;  // population std of V over the window
  double global_contrast = 0.0; // population std of V over the whole image
};

namespace detail {

struct HsvAccumulator {
  double sum_v = 0.0, sum_v2 = 0.0, sum_s = 0.0, sum_sin = 0.0, sum_cos = 0.0;
  std::int64_t n = 0;

  void add(float r, float g, float b) {
    const Hsv hsv = rgb_to_hsv(r, g, b);
    sum_v += hsv.v;
    sum_v2 += static_cast<double>(hsv.v) * hsv.v;
    sum_s += hsv.s;
    sum_sin += std::sin(hsv.h);
    sum_cos += std::cos(hsv.h);
    ++n;
  }

  double mean_v() const { return n ? sum_v / n : 0.0; }
  double mean_s() const { return n ? sum_s / n : 0.0; }
  double std_v() const {
    if (!n) return 0.0;
    const double m = sum_v / n;
    return std::sqrt(std::max(0.0, sum_v2 / n - m * m));
  }
  double circular_hue() const {
    if (!n) return 0.0;
    double h = std::atan2(sum_sin, sum_cos);
    const double two_pi = 2.0 * std::numbers::pi;
    if (h < 0.0) h += two_pi;
    if (h >= two_pi) h = 0.0;
    return h;
  }
};

}  // namespace detail

// Attribute statistics over a window (or the whole image). global_contrast
// always covers the whole image regardless of the window.
inline AttributeStats compute_stats(const Image& im, std::optional<Rect> window = {}) {
  if (im.channels < 3) throw DimensionError("compute_stats needs an RGB image");
  Rect r = window.value_or(Rect{0, 0, im.width, im.height});
  if (r.x < 0 || r.y < 0 || r.w < 1 || r.h < 1 || r.x + r.w > im.width ||
      r.y + r.h > im.height || static_cast<std::int64_t>(r.w) * r.h < 4) {
    throw SizeError("compute_stats window degenerate or out of bounds");
  }
  detail::HsvAccumulator win, whole;
  for (int y = 0; y < im.height; ++y) {
    for (int x = 0; x < im.width; ++x) {
      whole.add(im.at(y, x, 0), im.at(y, x, 1), im.at(y, x, 2));
    }
  }
  for (int y = r.y; y < r.y + r.h; ++y) {
    for (int x = r.x; x < r.x + r.w; ++x) {
      win.add(im.at(y, x, 0), im.at(y, x, 1), im.at(y, x, 2));
    }
  }
  AttributeStats s;
  s.brightness = win.mean_v();
  s.saturation = win.mean_s();
  s.hue = win.circular_hue();
  s.local_contrast = win.std_v();
  s.global_contrast = whole.std_v();
  return s;
}

// Bilinear resample with the same half-pixel/border-clamp convention as the
// tensor op.
inline Image resize_image(const Image& im, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw SizeError("resize target must be >= 1x1");
  if (out_h == im.height && out_w == im.width) return im;
  const auto ytaps = detail::resize_taps(im.height, out_h);
  const auto xtaps = detail::resize_taps(im.width, out_w);
  Image out = Image::create(out_h, out_w, im.channels);
  for (int oy = 0; oy < out_h; ++oy) {
    const auto& ty = ytaps[static_cast<std::size_t>(oy)];
    const float wy1 = static_cast<float>(ty.w_hi), wy0 = 1.0f - wy1;
    for (int ox = 0; ox < out_w; ++ox) {
      const auto& tx = xtaps[static_cast<std::size_t>(ox)];
      const float wx1 = static_cast<float>(tx.w_hi), wx0 = 1.0f - wx1;
      for (int c = 0; c < im.channels; ++c) {
        out.at(oy, ox, c) = wy0 * (wx0 * im.at(ty.lo, tx.lo, c) + wx1 * im.at(ty.lo, tx.hi, c)) +
                            wy1 * (wx0 * im.at(ty.hi, tx.lo, c) + wx1 * im.at(ty.hi, tx.hi, c));
      }
    }
  }
  return out;
}

// Separable Gaussian, kernel truncated at 3 std, replicated borders.
inline Image gaussian_blur(const Image& im, double std_dev) {
  if (std_dev <= 0.0) return im;
  const int r = static_cast<int>(std::ceil(3.0 * std_dev));
  std::vector<float> kernel(static_cast<std::size_t>(2 * r + 1));
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) {
    const double w = std::exp(-0.5 * (i * i) / (std_dev * std_dev));
    kernel[static_cast<std::size_t>(i + r)] = static_cast<float>(w);
    sum += w;
  }
  for (auto& w : kernel) w = static_cast<float>(w / sum);

  const auto clamp_i = [](int v, int hi) { return std::min(std::max(v, 0), hi); };
  Image tmp = Image::create(im.height, im.width, im.channels);
  for (int y = 0; y < im.height; ++y) {
    for (int x = 0; x < im.width; ++x) {
      for (int c = 0; c < im.channels; ++c) {
        float acc = 0.0f;
        for (int i = -r; i <= r; ++i) {
          acc += kernel[static_cast<std::size_t>(i + r)] *
                 im.at(y, clamp_i(x + i, im.width - 1), c);
        }
        tmp.at(y, x, c) = acc;
      }
    }
  }
  Image out = Image::create(im.height, im.width, im.channels);
  for (int y = 0; y < im.height; ++y) {
    for (int x = 0; x < im.width; ++x) {
      for (int c = 0; c < im.channels; ++c) {
        float acc = 0.0f;
        for (int i = -r; i <= r; ++i) {
          acc += kernel[static_cast<std::size_t>(i + r)] *
                 tmp.at(clamp_i(y + i, im.height - 1), x, c);
        }
        out.at(y, x, c) = acc;
      }
    }
  }
  return out;
}

struct ScalePyramid {
  std::vector<Image> levels;          // coarse to fine; back() is full resolution
  std::vector<double> scale_factors;  // sigma per level, finest is 1
  // Source image dims; stay valid when the fine levels are truncated away.
  int full_height = 0;
  int full_width = 0;
};

inline int round_half_up(double v) { return static_cast<int>(std::floor(v + 0.5)); }

// Level l (coarse index 0) is the input blurred with std 0.5*sigma_l and
// resampled to round(H/sigma_l) x round(W/sigma_l), sigma_l =
// sigma_step^(num_levels-1-l). The finest level is the input itself.
inline ScalePyramid build_pyramid(const Image& im, int num_levels, double sigma_step) {
  if (num_levels < 1) throw ConfigError("build_pyramid needs num_levels >= 1");
  if (sigma_step <= 1.0) throw ConfigError("build_pyramid needs sigma_step > 1");
  ScalePyramid pyr;
  pyr.full_height = im.height;
  pyr.full_width = im.width;
  for (int l = 0; l < num_levels; ++l) {
    const double sigma = std::pow(sigma_step, num_levels - 1 - l);
    pyr.scale_factors.push_back(sigma);
    if (l == num_levels - 1) {
      pyr.levels.push_back(im);
      continue;
    }
    const int lh = round_half_up(im.height / sigma);
    const int lw = round_half_up(im.width / sigma);
    if (lh < 8 || lw < 8) {
      throw SizeError("pyramid level " + std::to_string(l) + " would be " + std::to_string(lh) +
                      "x" + std::to_string(lw) + ", minimum is 8x8");
    }
    pyr.levels.push_back(resize_image(gaussian_blur(im, 0.5 * sigma), lh, lw));
  }
  return pyr;
}

enum class AttributeMode { kMatch, kMismatch };

// Shifts a sprite's mean brightness/saturation toward (match) or away from
// (mismatch) the target stats and rotates hue accordingly; mismatch uses a
// random rotation in [pi/2, 3*pi/2]. Only pixels with alpha > 0 count and
// change; alpha itself is preserved exactly.
inline Image adjust_attributes(const Image& sprite, const AttributeStats& target,
                               AttributeMode mode, double strength, Rng& rng) {
  if (sprite.channels != 4) throw DimensionError("adjust_attributes expects an RGBA sprite");
  if (strength < 0.0 || strength > 1.0) throw ConfigError("strength must be in [0,1]");

  detail::HsvAccumulator acc;
  for (int y = 0; y < sprite.height; ++y) {
    for (int x = 0; x < sprite.width; ++x) {
      if (sprite.at(y, x, 3) > 0.0f) acc.add(sprite.at(y, x, 0), sprite.at(y, x, 1), sprite.at(y, x, 2));
    }
  }
  if (acc.n == 0) return sprite;

  const double two_pi = 2.0 * std::numbers::pi;
  double dv, ds, dh;
  const double to_target_v = target.brightness - acc.mean_v();
  const double to_target_s = target.saturation - acc.mean_s();
  double to_target_h = std::fmod(target.hue - acc.circular_hue(), two_pi);
  if (to_target_h > std::numbers::pi) to_target_h -= two_pi;
  if (to_target_h < -std::numbers::pi) to_target_h += two_pi;
  if (mode == AttributeMode::kMatch) {
    dv = strength * to_target_v;
    ds = strength * to_target_s;
    dh = strength * to_target_h;
  } else {
    dv = -strength * to_target_v;
    ds = -strength * to_target_s;
    dh = rng.uniform(std::numbers::pi / 2.0, 3.0 * std::numbers::pi / 2.0);
  }
  // The HSV round trip is not bit-exact, so a no-op adjustment must not
  // touch the pixels at all.
  if (dv == 0.0 && ds == 0.0 && dh == 0.0) return sprite;

  Image out = sprite;
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      if (out.at(y, x, 3) <= 0.0f) continue;
      Hsv hsv = rgb_to_hsv(out.at(y, x, 0), out.at(y, x, 1), out.at(y, x, 2));
      hsv.v = std::min(std::max(hsv.v + static_cast<float>(dv), 0.0f), 1.0f);
      hsv.s = std::min(std::max(hsv.s + static_cast<float>(ds), 0.0f), 1.0f);
      hsv.h = static_cast<float>(std::fmod(hsv.h + dh + two_pi, two_pi));
      hsv_to_rgb(hsv, out.at(y, x, 0), out.at(y, x, 1), out.at(y, x, 2));
    }
  }
  return out;
}

namespace detail {

// ITU-T T.81 Annex K reference quantization tables.
inline constexpr int kJpegLumaQuant[64] = {
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
    14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
    18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};
inline constexpr int kJpegChromaQuant[64] = {
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99};

inline std::array<int, 64> scaled_quant_table(const int* base, int quality) {
  const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
  std::array<int, 64> t{};
  for (int i = 0; i < 64; ++i) {
    t[static_cast<std::size_t>(i)] =
        std::min(std::max((base[i] * scale + 50) / 100, 1), 255);
  }
  return t;
}

// Orthonormal 8x8 DCT-II basis: row u is c(u)/2 * cos((2x+1)u*pi/16).
inline const std::array<std::array<double, 8>, 8>& dct_basis() {
  static const auto basis = [] {
    std::array<std::array<double, 8>, 8> m{};
    for (int u = 0; u < 8; ++u) {
      const double c = u == 0 ? 1.0 / std::sqrt(2.0) : 1.0;
      for (int x = 0; x < 8; ++x) {
        m[static_cast<std::size_t>(u)][static_cast<std::size_t>(x)] =
            0.5 * c * std::cos((2 * x + 1) * u * std::numbers::pi / 16.0);
      }
    }
    return m;
  }();
  return basis;
}

inline void jpeg_roundtrip_block(double block[8][8], const std::array<int, 64>& quant) {
  const auto& m = dct_basis();
  double tmp[8][8], freq[8][8];
  // freq = M * block * M^T
  for (int u = 0; u < 8; ++u) {
    for (int x = 0; x < 8; ++x) {
      double acc = 0.0;
      for (int y = 0; y < 8; ++y) acc += block[x][y] * m[u][y];
      tmp[x][u] = acc;
    }
  }
  for (int u = 0; u < 8; ++u) {
    for (int v = 0; v < 8; ++v) {
      double acc = 0.0;
      for (int x = 0; x < 8; ++x) acc += m[u][x] * tmp[x][v];
      const int q = quant[static_cast<std::size_t>(u * 8 + v)];
      freq[u][v] = std::round(acc / q) * q;
    }
  }
  // block = M^T * freq * M
  for (int x = 0; x < 8; ++x) {
    for (int v = 0; v < 8; ++v) {
      double acc = 0.0;
      for (int u = 0; u < 8; ++u) acc += m[u][x] * freq[u][v];
      tmp[x][v] = acc;
    }
  }
  for (int x = 0; x < 8; ++x) {
    for (int y = 0; y < 8; ++y) {
      double acc = 0.0;
      for (int v = 0; v < 8; ++v) acc += tmp[x][v] * m[v][y];
      block[x][y] = acc;
    }
  }
}

}  // namespace detail

// Simulated baseline-JPEG round trip: YCbCr conversion, per-channel 8x8 DCT,
// quantization with Annex-K tables scaled by the standard quality rule,
// dequantization, inverse DCT, conversion back. No chroma subsampling and no
// entropy coding; dimensions are padded to multiples of 8 by edge
// replication and cropped back.
inline Image jpeg_degrade(const Image& im, int quality) {
  if (quality < 1 || quality > 100) throw ConfigError("jpeg quality must be in [1,100]");
  if (im.channels != 3) throw DimensionError("jpeg_degrade expects an RGB image");

  const int ph = (im.height + 7) / 8 * 8;
  const int pw = (im.width + 7) / 8 * 8;
  std::vector<double> planes[3];
  for (auto& p : planes) p.assign(static_cast<std::size_t>(ph) * pw, 0.0);
  for (int y = 0; y < ph; ++y) {
    const int sy = std::min(y, im.height - 1);
    for (int x = 0; x < pw; ++x) {
      const int sx = std::min(x, im.width - 1);
      const double r = im.at(sy, sx, 0) * 255.0;
      const double g = im.at(sy, sx, 1) * 255.0;
      const double b = im.at(sy, sx, 2) * 255.0;
      const std::size_t i = static_cast<std::size_t>(y) * pw + x;
      planes[0][i] = 0.299 * r + 0.587 * g + 0.114 * b - 128.0;
      planes[1][i] = -0.168736 * r - 0.331264 * g + 0.5 * b;
      planes[2][i] = 0.5 * r - 0.418688 * g - 0.081312 * b;
    }
  }

  const auto luma = detail::scaled_quant_table(detail::kJpegLumaQuant, quality);
  const auto chroma = detail::scaled_quant_table(detail::kJpegChromaQuant, quality);
  for (int c = 0; c < 3; ++c) {
    const auto& quant = c == 0 ? luma : chroma;
    for (int by = 0; by < ph; by += 8) {
      for (int bx = 0; bx < pw; bx += 8) {
        double block[8][8];
        for (int y = 0; y < 8; ++y) {
          for (int x = 0; x < 8; ++x) {
            block[y][x] = planes[c][static_cast<std::size_t>(by + y) * pw + bx + x];
          }
        }
        detail::jpeg_roundtrip_block(block, quant);
        for (int y = 0; y < 8; ++y) {
          for (int x = 0; x < 8; ++x) {
            planes[c][static_cast<std::size_t>(by + y) * pw + bx + x] = block[y][x];
          }
        }
      }
    }
  }

  Image out = Image::create(im.height, im.width, 3);
  for (int y = 0; y < im.height; ++y) {
    for (int x = 0; x < im.width; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * pw + x;
      const double yy = planes[0][i] + 128.0;
      const double cb = planes[1][i];
      const double cr = planes[2][i];
      const double r = yy + 1.402 * cr;
      const double g = yy - 0.344136 * cb - 0.714136 * cr;
      const double b = yy + 1.772 * cb;
      out.at(y, x, 0) = static_cast<float>(std::min(std::max(r / 255.0, 0.0), 1.0));
      out.at(y, x, 1) = static_cast<float>(std::min(std::max(g / 255.0, 0.0), 1.0));
      out.at(y, x, 2) = static_cast<float>(std::min(std::max(b / 255.0, 0.0), 1.0));
    }
  }
  return out;
}

// Bridges between HWC images and NCHW tensors.
inline Tensor image_to_tensor(const Image& im) {
  std::vector<float> data(im.pix.size());
  const std::int64_t plane = static_cast<std::int64_t>(im.height) * im.width;
  for (int y = 0; y < im.height; ++y) {
    for (int x = 0; x < im.width; ++x) {
      for (int c = 0; c < im.channels; ++c) {
        data[static_cast<std::size_t>(c * plane + y * im.width + x)] = im.at(y, x, c);
      }
    }
  }
  return Tensor::from_data({1, im.channels, im.height, im.width}, std::move(data));
}

inline Image tensor_to_image(const Tensor& t) {
  const Shape& s = t.shape();
  if (s.size() != 4 || s[0] != 1) throw DimensionError("tensor_to_image expects [1,C,H,W]");
  Image im = Image::create(s[2], s[3], s[1]);
  for (int c = 0; c < s[1]; ++c) {
    for (int y = 0; y < s[2]; ++y) {
      for (int x = 0; x < s[3]; ++x) {
        im.at(y, x, c) = t.at(0, c, y, x);
      }
    }
  }
  return im;
}

inline Tensor mask_to_tensor(const BinaryMask& m) {
  std::vector<float> data(m.data.size());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = m.data[i] ? 1.0f : 0.0f;
  return Tensor::from_data({1, 1, m.height, m.width}, std::move(data));
}

}  // namespace patseg
