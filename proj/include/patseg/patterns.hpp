#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "patseg/image.hpp"
#include "patseg/imgproc.hpp"
#include "patseg/rng.hpp"

namespace patseg {

enum class PatternCategory { kSticker, kLine, kText, kLogo };

inline const char* category_name(PatternCategory c) {
  switch (c) {
    case PatternCategory::kSticker: return "sticker";
    case PatternCategory::kLine: return "line";
    case PatternCategory::kText: return "text";
    default: return "logo";
  }
}

inline PatternCategory category_from_name(const std::string& name) {
  if (name == "sticker") return PatternCategory::kSticker;
  if (name == "line") return PatternCategory::kLine;
  if (name == "text") return PatternCategory::kText;
  if (name == "logo") return PatternCategory::kLogo;
  throw ConfigError("unknown pattern category: " + name);
}

// An RGBA sprite plus the metrics the size rules need.
struct Pattern {
  Image sprite;
  PatternCategory category = PatternCategory::kSticker;
  int line_width_px = 0;    // lines only
  int glyph_height_px = 0;  // text only
  std::string text;         // text only
};

namespace detail {

// Classic 5x7 column font, bit 0 is the top row. Charset: 0-9 then A-Z.
inline constexpr char kFontChars[] = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ";
inline constexpr std::uint8_t kFont5x7[36][5] = {
    {0x3E, 0x51, 0x49, 0x45, 0x3E}, {0x00, 0x42, 0x7F, 0x40, 0x00},
    {0x42, 0x61, 0x51, 0x49, 0x46}, {0x21, 0x41, 0x45, 0x4B, 0x31},
    {0x18, 0x14, 0x12, 0x7F, 0x10}, {0x27, 0x45, 0x45, 0x45, 0x39},
    {0x3C, 0x4A, 0x49, 0x49, 0x30}, {0x01, 0x71, 0x09, 0x05, 0x03},
    {0x36, 0x49, 0x49, 0x49, 0x36}, {0x06, 0x49, 0x49, 0x29, 0x1E},
    {0x7E, 0x11, 0x11, 0x11, 0x7E}, {0x7F, 0x49, 0x49, 0x49, 0x36},
    {0x3E, 0x41, 0x41, 0x41, 0x22}, {0x7F, 0x41, 0x41, 0x22, 0x1C},
    {0x7F, 0x49, 0x49, 0x49, 0x41}, {0x7F, 0x09, 0x09, 0x09, 0x01},
    {0x3E, 0x41, 0x49, 0x49, 0x7A}, {0x7F, 0x08, 0x08, 0x08, 0x7F},
    {0x00, 0x41, 0x7F, 0x41, 0x00}, {0x20, 0x40, 0x41, 0x3F, 0x01},
    {0x7F, 0x08, 0x14, 0x22, 0x41}, {0x7F, 0x40, 0x40, 0x40, 0x40},
    {0x7F, 0x02, 0x0C, 0x02, 0x7F}, {0x7F, 0x04, 0x08, 0x10, 0x7F},
    {0x3E, 0x41, 0x41, 0x41, 0x3E}, {0x7F, 0x09, 0x09, 0x09, 0x06},
    {0x3E, 0x41, 0x51, 0x21, 0x5E}, {0x7F, 0x09, 0x19, 0x29, 0x46},
    {0x46, 0x49, 0x49, 0x49, 0x31}, {0x01, 0x01, 0x7F, 0x01, 0x01},
    {0x3F, 0x40, 0x40, 0x40, 0x3F}, {0x1F, 0x20, 0x40, 0x20, 0x1F},
    {0x3F, 0x40, 0x38, 0x40, 0x3F}, {0x63, 0x14, 0x08, 0x14, 0x63},
    {0x07, 0x08, 0x70, 0x08, 0x07}, {0x61, 0x51, 0x49, 0x45, 0x43}};

inline int font_index(char ch) {
  if (ch >= '0' && ch <= '9') return ch - '0';
  if (ch >= 'A' && ch <= 'Z') return ch - 'A' + 10;
  throw ConfigError(std::string("glyph not in font charset: ") + ch);
}

struct Color {
  float r, g, b;
};

inline Color random_pattern_color(Rng& rng) {
  Color c;
  hsv_to_rgb(Hsv{static_cast<float>(rng.uniform(0.0, 2.0 * std::numbers::pi)),
                 static_cast<float>(rng.uniform(0.3, 1.0)),
                 static_cast<float>(rng.uniform(0.3, 1.0))},
             c.r, c.g, c.b);
  return c;
}

struct Vec2 {
  double x, y;
};

inline double point_segment_distance(Vec2 p, Vec2 a, Vec2 b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::min(std::max(t, 0.0), 1.0);
  const double px = a.x + t * dx - p.x, py = a.y + t * dy - p.y;
  return std::sqrt(px * px + py * py);
}

inline bool point_in_convex_polygon(Vec2 p, const std::vector<Vec2>& poly) {
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2& a = poly[i];
    const Vec2& b = poly[(i + 1) % n];
    if ((b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x) < 0.0) return false;
  }
  return true;
}

// Zero inside, Euclidean distance to the boundary outside; the rounded
// polygon is the set within round_r of the core polygon.
inline double polygon_distance(Vec2 p, const std::vector<Vec2>& poly) {
  if (point_in_convex_polygon(p, poly)) return 0.0;
  double best = std::numeric_limits<double>::max();
  for (std::size_t i = 0; i < poly.size(); ++i) {
    best = std::min(best, point_segment_distance(p, poly[i], poly[(i + 1) % poly.size()]));
  }
  return best;
}

// Supersampled painter canvas: flat-color shapes are painted in order onto
// straight-alpha RGBA, then box-downsampled (premultiplied) by factor 4.
class SpriteCanvas {
 public:
  static constexpr int kSuper = 4;

  SpriteCanvas(int h, int w)
      : h_(h * kSuper), w_(w * kSuper), rgba_(static_cast<std::size_t>(h_) * w_ * 4, 0.0f) {}

  int super_height() const { return h_; }
  int super_width() const { return w_; }

  // inside() receives supersampled pixel-center coordinates.
  template <typename Inside>
  void paint(const Color& c, Inside&& inside) {
    for (int y = 0; y < h_; ++y) {
      for (int x = 0; x < w_; ++x) {
        if (inside(x + 0.5, y + 0.5)) {
          float* px = &rgba_[(static_cast<std::size_t>(y) * w_ + x) * 4];
          px[0] = c.r;
          px[1] = c.g;
          px[2] = c.b;
          px[3] = 1.0f;
        }
      }
    }
  }

  Image downsample() const {
    Image out = Image::create(h_ / kSuper, w_ / kSuper, 4);
    for (int y = 0; y < out.height; ++y) {
      for (int x = 0; x < out.width; ++x) {
        double r = 0.0, g = 0.0, b = 0.0, a = 0.0;
        for (int sy = 0; sy < kSuper; ++sy) {
          for (int sx = 0; sx < kSuper; ++sx) {
            const float* px =
                &rgba_[(static_cast<std::size_t>(y * kSuper + sy) * w_ + x * kSuper + sx) * 4];
            r += px[0] * px[3];
            g += px[1] * px[3];
            b += px[2] * px[3];
            a += px[3];
          }
        }
        const double cover = a / (kSuper * kSuper);
        out.at(y, x, 3) = static_cast<float>(cover);
        if (a > 0.0) {
          out.at(y, x, 0) = static_cast<float>(r / a);
          out.at(y, x, 1) = static_cast<float>(g / a);
          out.at(y, x, 2) = static_cast<float>(b / a);
        }
      }
    }
    return out;
  }

 private:
  int h_, w_;
  std::vector<float> rgba_;
};

// Crops fully transparent margins; throws if the sprite is entirely empty.
inline Image trim_to_alpha(const Image& sprite) {
  int x0 = sprite.width, x1 = -1, y0 = sprite.height, y1 = -1;
  for (int y = 0; y < sprite.height; ++y) {
    for (int x = 0; x < sprite.width; ++x) {
      if (sprite.at(y, x, 3) > 0.0f) {
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
      }
    }
  }
  if (x1 < x0) throw ContractViolation("generated sprite has empty alpha");
  Image out = Image::create(y1 - y0 + 1, x1 - x0 + 1, 4);
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      for (int c = 0; c < 4; ++c) out.at(y, x, c) = sprite.at(y0 + y, x0 + x, c);
    }
  }
  return out;
}

}  // namespace detail

// Filled ellipse or rounded convex polygon carrying 2-4 flat-color regions
// and an optional border ring. Alpha is soft at the silhouette (supersampled
// coverage).
inline Pattern make_sticker(Rng& rng) {
  const int n = 64;
  const int sn = n * detail::SpriteCanvas::kSuper;
  detail::SpriteCanvas canvas(n, n);
  const double cx = sn / 2.0, cy = sn / 2.0;

  const bool use_ellipse = rng.bernoulli(0.5);
  double ax = 0.0, ay = 0.0, rot = 0.0, round_r = 0.0;
  std::vector<detail::Vec2> poly;
  if (use_ellipse) {
    ax = rng.uniform(0.30, 0.48) * sn;
    ay = rng.uniform(0.30, 0.48) * sn;
    rot = rng.uniform(0.0, std::numbers::pi);
  } else {
    // Regular polygon core keeps the convex inside-test valid; variety comes
    // from vertex count, rotation, and corner radius.
    const int verts = rng.uniform_int(3, 8);
    round_r = rng.uniform(0.02, 0.12) * sn;
    const double base_r = rng.uniform(0.30, 0.46) * sn - round_r;
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (int i = 0; i < verts; ++i) {
      const double ang = phase + 2.0 * std::numbers::pi * i / verts;
      poly.push_back({cx + base_r * std::cos(ang), cy + base_r * std::sin(ang)});
    }
  }

  // inset > 0 erodes the base silhouette; used for the border ring fill.
  auto base_inside = [&](double x, double y, double inset) {
    if (use_ellipse) {
      const double dx = x - cx, dy = y - cy;
      const double u = dx * std::cos(rot) + dy * std::sin(rot);
      const double v = -dx * std::sin(rot) + dy * std::cos(rot);
      const double sx = u / std::max(ax - inset, 1.0);
      const double sy = v / std::max(ay - inset, 1.0);
      return sx * sx + sy * sy <= 1.0;
    }
    return detail::polygon_distance({x, y}, poly) <= std::max(round_r - inset, 0.0);
  };

  const detail::Color base_color = detail::random_pattern_color(rng);
  const bool border = rng.bernoulli(0.5);
  const double border_t = border ? rng.uniform(0.02, 0.06) * sn : 0.0;
  if (border) {
    canvas.paint(detail::random_pattern_color(rng),
                 [&](double x, double y) { return base_inside(x, y, 0.0); });
  }
  canvas.paint(base_color, [&](double x, double y) { return base_inside(x, y, border_t); });

  const int regions = rng.uniform_int(1, 3);
  for (int i = 0; i < regions; ++i) {
    const detail::Color c = detail::random_pattern_color(rng);
    if (rng.bernoulli(0.5)) {
      // Inner ellipse region.
      const double ex = rng.uniform(0.08, 0.25) * sn;
      const double ey = rng.uniform(0.08, 0.25) * sn;
      const double ecx = cx + rng.uniform(-0.2, 0.2) * sn;
      const double ecy = cy + rng.uniform(-0.2, 0.2) * sn;
      canvas.paint(c, [&](double x, double y) {
        if (!base_inside(x, y, border_t)) return false;
        const double dx = (x - ecx) / ex, dy = (y - ecy) / ey;
        return dx * dx + dy * dy <= 1.0;
      });
    } else {
      // Half-plane cut through the middle.
      const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double off = rng.uniform(-0.15, 0.15) * sn;
      const double nx = std::cos(ang), ny = std::sin(ang);
      canvas.paint(c, [&](double x, double y) {
        return base_inside(x, y, border_t) && (x - cx) * nx + (y - cy) * ny >= off;
      });
    }
  }

  Pattern p;
  p.category = PatternCategory::kSticker;
  p.sprite = detail::trim_to_alpha(canvas.downsample());
  return p;
}

// Straight segment or quadratic curve with the requested stroke width,
// rasterized by distance threshold: alpha is hard {0,1}.
inline Pattern make_line(Rng& rng, int width_px, int max_h, int max_w) {
  if (width_px < 1) throw ConfigError("line width must be >= 1 px");
  const double margin = width_px / 2.0 + 1.0;
  const double max_len = std::min(max_h, max_w) - 2.0 * margin;
  if (max_len < 2.0) throw SizeError("canvas too small for a line pattern");
  const double len = rng.uniform(std::max(2.0, 0.3 * max_len), max_len);
  const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
  detail::Vec2 a{0.0, 0.0};
  detail::Vec2 b{len * std::cos(ang), len * std::sin(ang)};
  const bool curved = rng.bernoulli(0.5);
  detail::Vec2 ctrl{(a.x + b.x) / 2.0, (a.y + b.y) / 2.0};
  if (curved) {
    const double bulge = rng.uniform(-0.25, 0.25) * len;
    ctrl.x += -std::sin(ang) * bulge;
    ctrl.y += std::cos(ang) * bulge;
  }

  // Flatten to a polyline; distance to the polyline drives the raster.
  std::vector<detail::Vec2> pts;
  const int segs = curved ? 48 : 1;
  for (int i = 0; i <= segs; ++i) {
    const double t = static_cast<double>(i) / segs;
    const double mt = 1.0 - t;
    pts.push_back({mt * mt * a.x + 2.0 * mt * t * ctrl.x + t * t * b.x,
                   mt * mt * a.y + 2.0 * mt * t * ctrl.y + t * t * b.y});
  }
  double x0 = pts[0].x, x1 = pts[0].x, y0 = pts[0].y, y1 = pts[0].y;
  for (const auto& p : pts) {
    x0 = std::min(x0, p.x);
    x1 = std::max(x1, p.x);
    y0 = std::min(y0, p.y);
    y1 = std::max(y1, p.y);
  }
  const int cw = std::min(static_cast<int>(std::ceil(x1 - x0 + 2.0 * margin)), max_w);
  const int ch = std::min(static_cast<int>(std::ceil(y1 - y0 + 2.0 * margin)), max_h);
  for (auto& p : pts) {
    p.x += margin - x0;
    p.y += margin - y0;
  }

  Image sprite = Image::create(ch, cw, 4);
  const detail::Color c = detail::random_pattern_color(rng);
  const double half = width_px / 2.0;
  for (int y = 0; y < ch; ++y) {
    for (int x = 0; x < cw; ++x) {
      const detail::Vec2 p{x + 0.5, y + 0.5};
      double d = std::numeric_limits<double>::max();
      for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
        d = std::min(d, detail::point_segment_distance(p, pts[i], pts[i + 1]));
        if (d <= half) break;
      }
      if (d <= half) {
        sprite.at(y, x, 0) = c.r;
        sprite.at(y, x, 1) = c.g;
        sprite.at(y, x, 2) = c.b;
        sprite.at(y, x, 3) = 1.0f;
      }
    }
  }

  Pattern p;
  p.category = PatternCategory::kLine;
  p.sprite = detail::trim_to_alpha(sprite);
  p.line_width_px = width_px;
  return p;
}

// Bitmap-font string at an integer scale; hard alpha.
inline Pattern make_text(Rng& rng, int font_scale, int length) {
  if (font_scale < 1) throw ConfigError("font scale must be >= 1");
  if (length < 1 || length > 12) throw ConfigError("text length must be in [1,12]");
  std::string text;
  for (int i = 0; i < length; ++i) {
    text += detail::kFontChars[rng.uniform_int(0, 35)];
  }
  const int s = font_scale;
  const int w = length * 6 * s - s;  // 5 px glyph + 1 px advance, minus trailing gap
  const int h = 7 * s;
  Image sprite = Image::create(h, w, 4);
  const detail::Color c = detail::random_pattern_color(rng);
  for (int i = 0; i < length; ++i) {
    const auto& glyph = detail::kFont5x7[detail::font_index(text[static_cast<std::size_t>(i)])];
    for (int col = 0; col < 5; ++col) {
      for (int row = 0; row < 7; ++row) {
        if (!((glyph[col] >> row) & 1)) continue;
        for (int sy = 0; sy < s; ++sy) {
          for (int sx = 0; sx < s; ++sx) {
            const int y = row * s + sy;
            const int x = (i * 6 + col) * s + sx;
            sprite.at(y, x, 0) = c.r;
            sprite.at(y, x, 1) = c.g;
            sprite.at(y, x, 2) = c.b;
            sprite.at(y, x, 3) = 1.0f;
          }
        }
      }
    }
  }

  Pattern p;
  p.category = PatternCategory::kText;
  p.sprite = detail::trim_to_alpha(sprite);
  p.glyph_height_px = 7 * s;
  p.text = text;
  return p;
}

// 2-5 overlapping flat-color primitives (discs, rings, boxes, triangles).
inline Pattern make_logo(Rng& rng) {
  const int n = 64;
  const int sn = n * detail::SpriteCanvas::kSuper;
  detail::SpriteCanvas canvas(n, n);
  const int prims = rng.uniform_int(2, 5);
  for (int i = 0; i < prims; ++i) {
    const detail::Color c = detail::random_pattern_color(rng);
    const double cx = rng.uniform(0.25, 0.75) * sn;
    const double cy = rng.uniform(0.25, 0.75) * sn;
    switch (rng.uniform_int(0, 3)) {
      case 0: {  // disc
        const double r = rng.uniform(0.10, 0.30) * sn;
        canvas.paint(c, [&](double x, double y) {
          const double dx = x - cx, dy = y - cy;
          return dx * dx + dy * dy <= r * r;
        });
        break;
      }
      case 1: {  // ring
        const double r = rng.uniform(0.12, 0.32) * sn;
        const double t = rng.uniform(0.25, 0.5) * r;
        canvas.paint(c, [&](double x, double y) {
          const double dx = x - cx, dy = y - cy;
          const double d2 = dx * dx + dy * dy;
          return d2 <= r * r && d2 >= (r - t) * (r - t);
        });
        break;
      }
      case 2: {  // rotated box
        const double w2 = rng.uniform(0.08, 0.28) * sn;
        const double h2 = rng.uniform(0.05, 0.20) * sn;
        const double rot = rng.uniform(0.0, std::numbers::pi);
        canvas.paint(c, [&](double x, double y) {
          const double dx = x - cx, dy = y - cy;
          const double u = dx * std::cos(rot) + dy * std::sin(rot);
          const double v = -dx * std::sin(rot) + dy * std::cos(rot);
          return std::abs(u) <= w2 && std::abs(v) <= h2;
        });
        break;
      }
      default: {  // triangle
        std::vector<detail::Vec2> tri;
        const double r = rng.uniform(0.12, 0.30) * sn;
        const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        for (int k = 0; k < 3; ++k) {
          const double ang = phase + 2.0 * std::numbers::pi * k / 3.0;
          tri.push_back({cx + r * std::cos(ang), cy + r * std::sin(ang)});
        }
        canvas.paint(c, [&](double x, double y) {
          return detail::point_in_convex_polygon({x, y}, tri);
        });
        break;
      }
    }
  }

  Pattern p;
  p.category = PatternCategory::kLogo;
  p.sprite = detail::trim_to_alpha(canvas.downsample());
  return p;
}

// Category dispatch with self-chosen size parameters (the synthesis pipeline
// calls the specific generators directly with sizes from its config).
inline Pattern generate_pattern(PatternCategory category, Rng& rng) {
  switch (category) {
    case PatternCategory::kSticker:
      return make_sticker(rng);
    case PatternCategory::kLine: {
      const int canvas = 128;
      const int width_px = std::max(1, round_half_up(rng.uniform(0.008, 0.15) * canvas));
      return make_line(rng, width_px, canvas, canvas);
    }
    case PatternCategory::kText: {
      const int scale = rng.uniform_int(1, 4);
      return make_text(rng, scale, rng.uniform_int(1, 12));
    }
    default:
      return make_logo(rng);
  }
}

}  // namespace patseg
