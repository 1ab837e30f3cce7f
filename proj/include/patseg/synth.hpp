#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "patseg/image.hpp"
#include "patseg/imgproc.hpp"
#include "patseg/patterns.hpp"
#include "patseg/rng.hpp"

namespace patseg {

enum class SizeLevel { kSmall, kMedium, kLarge };

inline const char* size_level_name(SizeLevel s) {
  switch (s) {
    case SizeLevel::kSmall: return "small";
    case SizeLevel::kMedium: return "medium";
    default: return "large";
  }
}

inline SizeLevel size_level_from_name(const std::string& name) {
  if (name == "small") return SizeLevel::kSmall;
  if (name == "medium") return SizeLevel::kMedium;
  if (name == "large") return SizeLevel::kLarge;
  throw ConfigError("unknown size level: " + name);
}

// One (category, size) synthesis cell. size_range means total coverage ratio
// for stickers/logos, stroke width ratio for lines, and glyph size (single
// character width over image width) for text; bbox_range applies to text
// only.
struct SynthesisConfig {
  PatternCategory category = PatternCategory::kSticker;
  SizeLevel size_level = SizeLevel::kMedium;
  std::pair<double, double> size_range{0.016, 0.064};
  std::pair<double, double> bbox_range{0.0, 1.0};
  int count_min = 1;
  int count_max = 1;
  double match_probability = 0.5;
  int jpeg_quality_min = 70;
  int jpeg_quality_max = 100;
  bool attribute_adjustment = true;
  bool apply_jpeg = true;

  void validate() const {
    if (!(0.0 < size_range.first && size_range.first < size_range.second &&
          size_range.second <= 0.6)) {
      throw ConfigError("size_range must satisfy 0 < lo < hi <= 0.6");
    }
    if (count_min < 1 || count_max < count_min) throw ConfigError("bad count range");
    if (match_probability < 0.0 || match_probability > 1.0) {
      throw ConfigError("match_probability must be in [0,1]");
    }
    if (jpeg_quality_min < 1 || jpeg_quality_max > 100 || jpeg_quality_max < jpeg_quality_min) {
      throw ConfigError("bad jpeg quality range");
    }
  }
};

inline SynthesisConfig default_synthesis_config(PatternCategory category, SizeLevel size) {
  SynthesisConfig c;
  c.category = category;
  c.size_level = size;
  const bool coverage =
      category == PatternCategory::kSticker || category == PatternCategory::kLogo;
  if (coverage) {
    switch (size) {
      case SizeLevel::kSmall: c.size_range = {0.001, 0.016}; c.count_max = 2; break;
      case SizeLevel::kMedium: c.size_range = {0.016, 0.064}; c.count_max = 4; break;
      case SizeLevel::kLarge: c.size_range = {0.064, 0.4}; c.count_max = 12; break;
    }
  } else if (category == PatternCategory::kLine) {
    switch (size) {
      case SizeLevel::kSmall: c.size_range = {0.008, 0.02}; c.count_max = 10; break;
      case SizeLevel::kMedium: c.size_range = {0.02, 0.06}; c.count_max = 10; break;
      case SizeLevel::kLarge: c.size_range = {0.06, 0.15}; c.count_max = 6; break;
    }
  } else {
    switch (size) {
      case SizeLevel::kSmall: c.size_range = {0.05, 0.1}; c.bbox_range = {0.002, 0.016}; break;
      case SizeLevel::kMedium: c.size_range = {0.1, 0.2}; c.bbox_range = {0.016, 0.25}; break;
      case SizeLevel::kLarge: c.size_range = {0.15, 0.4}; c.bbox_range = {0.25, 0.6}; break;
    }
  }
  return c;
}

struct PlacedPattern {
  PatternCategory category = PatternCategory::kSticker;
  Rect bbox;
  double area_fraction = 0.0;  // alpha > 0.5 footprint over image pixels
  double size_param = 0.0;     // the drawn size-rule value
  bool matched = false;
  std::string text;
};

struct SynthSample {
  Image image;
  BinaryMask mask;
  std::vector<PlacedPattern> placements;
  // Raw draws of the size rule: one total-coverage value for stickers and
  // logos, one width ratio per line, one glyph size for text.
  std::vector<double> size_draws;
  int jpeg_quality = 0;
};

namespace detail {

// Premultiplied-alpha bilinear resize; straight-alpha interpolation would
// bleed the transparent pixels' (black) color into sprite edges.
inline Image resize_sprite(const Image& sprite, int out_h, int out_w) {
  Image pre = sprite;
  for (int y = 0; y < pre.height; ++y) {
    for (int x = 0; x < pre.width; ++x) {
      const float a = pre.at(y, x, 3);
      for (int c = 0; c < 3; ++c) pre.at(y, x, c) *= a;
    }
  }
  Image small = resize_image(pre, out_h, out_w);
  for (int y = 0; y < small.height; ++y) {
    for (int x = 0; x < small.width; ++x) {
      const float a = small.at(y, x, 3);
      if (a > 0.0f) {
        for (int c = 0; c < 3; ++c) {
          small.at(y, x, c) = std::min(small.at(y, x, c) / a, 1.0f);
        }
      }
    }
  }
  return small;
}

inline std::int64_t opaque_pixels(const Image& sprite) {
  std::int64_t n = 0;
  for (int y = 0; y < sprite.height; ++y) {
    for (int x = 0; x < sprite.width; ++x) {
      if (sprite.at(y, x, 3) > 0.5f) ++n;
    }
  }
  return n;
}

}  // namespace detail

// Fully procedural training/test background: smooth low-frequency color
// fields with a few blended shapes, meant to look loosely photographic.
inline Image random_background(Rng& rng, int h, int w) {
  const int grid = rng.uniform_int(3, 8);
  Image lowres = Image::create(grid, grid, 3);
  for (auto& v : lowres.pix) v = static_cast<float>(rng.uniform(0.05, 0.95));
  Image im = resize_image(lowres, h, w);

  const int shapes = rng.uniform_int(0, 4);
  for (int i = 0; i < shapes; ++i) {
    const float cr = static_cast<float>(rng.uniform(0.0, 1.0));
    const float cg = static_cast<float>(rng.uniform(0.0, 1.0));
    const float cb = static_cast<float>(rng.uniform(0.0, 1.0));
    const float blend = static_cast<float>(rng.uniform(0.3, 0.8));
    if (rng.bernoulli(0.5)) {
      const double cx = rng.uniform(0.0, w), cy = rng.uniform(0.0, h);
      const double r = rng.uniform(0.1, 0.45) * std::min(h, w);
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const double dx = x - cx, dy = y - cy;
          if (dx * dx + dy * dy <= r * r) {
            im.at(y, x, 0) += blend * (cr - im.at(y, x, 0));
            im.at(y, x, 1) += blend * (cg - im.at(y, x, 1));
            im.at(y, x, 2) += blend * (cb - im.at(y, x, 2));
          }
        }
      }
    } else {
      const int x0 = rng.uniform_int(0, w - 1), y0 = rng.uniform_int(0, h - 1);
      const int x1 = rng.uniform_int(x0, w - 1), y1 = rng.uniform_int(y0, h - 1);
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          im.at(y, x, 0) += blend * (cr - im.at(y, x, 0));
          im.at(y, x, 1) += blend * (cg - im.at(y, x, 1));
          im.at(y, x, 2) += blend * (cb - im.at(y, x, 2));
        }
      }
    }
  }

  const double blur = rng.uniform(0.0, 1.2);
  if (blur > 0.2) im = gaussian_blur(im, blur);
  const float noise = static_cast<float>(rng.uniform(0.0, 0.04));
  for (auto& v : im.pix) {
    v = std::clamp(v + noise * static_cast<float>(rng.uniform(-1.0, 1.0)), 0.0f, 1.0f);
  }
  return im;
}

namespace detail {

struct PreparedSprite {
  Image sprite;
  double size_param = 0.0;
  std::string text;
};

inline std::vector<PreparedSprite> prepare_coverage_sprites(const SynthesisConfig& cfg,
                                                            int h, int w, Rng& rng,
                                                            std::vector<double>& draws) {
  const double total = rng.uniform(cfg.size_range.first, cfg.size_range.second);
  draws.push_back(total);
  const double total_px = total * h * w;
  // Every pattern needs a 3x3 footprint to stay recognizable. Tiny draws
  // first shed pattern count, then overshoot the drawn coverage; the draw
  // itself is what gets recorded, so the sampler never fails on small images.
  constexpr double kMinPatternPx = 9.0;
  int k = rng.uniform_int(cfg.count_min, cfg.count_max);
  k = std::max(1, std::min(k, static_cast<int>(total_px / kMinPatternPx)));

  // Symmetric random split of the total coverage across the K patterns;
  // resample lopsided splits that would starve one pattern.
  constexpr int kMaxAttempts = 20;
  std::vector<double> shares(static_cast<std::size_t>(k));
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    double sum = 0.0;
    for (auto& s : shares) {
      s = rng.uniform(0.0, 1.0);
      sum += s;
    }
    bool balanced = true;
    for (auto& s : shares) {
      s = s / sum * total_px;
      if (s < kMinPatternPx) balanced = false;
    }
    if (balanced) break;
  }

  std::vector<PreparedSprite> out;
  for (int i = 0; i < k; ++i) {
    const double target_px = std::max(shares[static_cast<std::size_t>(i)], kMinPatternPx);
    Pattern pat = cfg.category == PatternCategory::kSticker ? make_sticker(rng)
                                                            : make_logo(rng);
    const std::int64_t opaque = opaque_pixels(pat.sprite);
    double scale = std::sqrt(target_px / static_cast<double>(opaque));
    const double fit = std::min(h / static_cast<double>(pat.sprite.height),
                                w / static_cast<double>(pat.sprite.width));
    scale = std::min(scale, fit);
    const int nh = std::clamp(round_half_up(pat.sprite.height * scale), 3, h);
    const int nw = std::clamp(round_half_up(pat.sprite.width * scale), 3, w);
    out.push_back({resize_sprite(pat.sprite, nh, nw), shares[static_cast<std::size_t>(i)] /
                                                          (static_cast<double>(h) * w),
                   ""});
  }
  return out;
}

inline std::vector<PreparedSprite> prepare_line_sprites(const SynthesisConfig& cfg, int h,
                                                        int w, Rng& rng,
                                                        std::vector<double>& draws) {
  const int k = rng.uniform_int(cfg.count_min, cfg.count_max);
  std::vector<PreparedSprite> out;
  for (int i = 0; i < k; ++i) {
    const double frac = rng.uniform(cfg.size_range.first, cfg.size_range.second);
    draws.push_back(frac);
    const int width_px = std::max(1, round_half_up(frac * std::min(h, w)));
    Pattern pat = make_line(rng, width_px, h, w);
    out.push_back({std::move(pat.sprite), frac, ""});
  }
  return out;
}

inline std::vector<PreparedSprite> prepare_text_sprites(const SynthesisConfig& cfg, int h,
                                                        int w, Rng& rng,
                                                        std::vector<double>& draws) {
  const double glyph_frac = rng.uniform(cfg.size_range.first, cfg.size_range.second);
  draws.push_back(glyph_frac);
  // Glyph size is the single-character width relative to image width; the
  // font core is 5 px wide at unit scale.
  int s = std::max(1, round_half_up(glyph_frac * w / 5.0));
  while (s > 1 && (7 * s > h || 5 * s > w)) --s;  // must fit one glyph
  if (7 * s > h || 5 * s > w) throw SizeError("image too small for any text glyph");

  const auto bbox_frac = [&](int len) {
    const double bw = 6.0 * s * len - s;
    const double bh = 7.0 * s;
    return bw * bh / (static_cast<double>(h) * w);
  };
  const auto fits = [&](int len) { return 6 * s * len - s <= w; };

  std::vector<int> viable;
  for (int len = 1; len <= 12; ++len) {
    if (fits(len) && bbox_frac(len) >= cfg.bbox_range.first &&
        bbox_frac(len) <= cfg.bbox_range.second) {
      viable.push_back(len);
    }
  }
  int len;
  if (!viable.empty()) {
    len = viable[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(viable.size()) - 1))];
  } else {
    // Nothing satisfies the bbox window at this scale; take the fitting
    // length closest to the window.
    len = 1;
    double best = std::numeric_limits<double>::max();
    for (int cand = 1; cand <= 12; ++cand) {
      if (!fits(cand)) break;
      const double f = bbox_frac(cand);
      const double dist = f < cfg.bbox_range.first ? cfg.bbox_range.first - f
                                                   : std::max(0.0, f - cfg.bbox_range.second);
      if (dist < best) {
        best = dist;
        len = cand;
      }
    }
  }
  Pattern pat = make_text(rng, s, len);
  std::vector<PreparedSprite> out;
  out.push_back({std::move(pat.sprite), glyph_frac, pat.text});
  return out;
}

}  // namespace detail

// Full synthesis pipeline for one sample: draw patterns per the category size rule,
// place them fully inside the image, optionally align attributes to the
// local neighborhood, composite, union the mask, and JPEG-degrade.
inline SynthSample synthesize(const Image& base, const SynthesisConfig& cfg, Rng& rng) {
  cfg.validate();
  if (base.channels != 3) throw DimensionError("synthesize expects an RGB base image");
  if (base.height < 8 || base.width < 8) throw SizeError("base image below 8x8");

  const int h = base.height, w = base.width;
  SynthSample sample;
  std::vector<detail::PreparedSprite> sprites;
  switch (cfg.category) {
    case PatternCategory::kSticker:
    case PatternCategory::kLogo:
      sprites = detail::prepare_coverage_sprites(cfg, h, w, rng, sample.size_draws);
      break;
    case PatternCategory::kLine:
      sprites = detail::prepare_line_sprites(cfg, h, w, rng, sample.size_draws);
      break;
    case PatternCategory::kText:
      sprites = detail::prepare_text_sprites(cfg, h, w, rng, sample.size_draws);
      break;
  }

  sample.image = base;
  sample.mask = BinaryMask::create(h, w);
  for (auto& prep : sprites) {
    Image sprite = std::move(prep.sprite);
    const int sh = sprite.height, sw = sprite.width;
    const int x0 = rng.uniform_int(0, w - sw);
    const int y0 = rng.uniform_int(0, h - sh);

    bool matched = false;
    if (cfg.attribute_adjustment) {
      // Local neighborhood: placement bbox dilated by 25% per side.
      const int dx = std::max(1, sw / 4), dy = std::max(1, sh / 4);
      Rect win;
      win.x = std::max(0, x0 - dx);
      win.y = std::max(0, y0 - dy);
      win.w = std::min(w, x0 + sw + dx) - win.x;
      win.h = std::min(h, y0 + sh + dy) - win.y;
      const AttributeStats stats = compute_stats(sample.image, win);
      matched = rng.bernoulli(cfg.match_probability);
      const double strength = rng.uniform(0.5, 1.0);
      sprite = adjust_attributes(
          sprite, stats, matched ? AttributeMode::kMatch : AttributeMode::kMismatch, strength,
          rng);
    }

    std::int64_t opaque = 0;
    for (int y = 0; y < sh; ++y) {
      for (int x = 0; x < sw; ++x) {
        const float a = sprite.at(y, x, 3);
        if (a <= 0.0f) continue;
        for (int c = 0; c < 3; ++c) {
          float& dst = sample.image.at(y0 + y, x0 + x, c);
          dst = a * sprite.at(y, x, c) + (1.0f - a) * dst;
        }
        if (a > 0.5f) {
          sample.mask.at(y0 + y, x0 + x) = 1;
          ++opaque;
        }
      }
    }

    PlacedPattern rec;
    rec.category = cfg.category;
    rec.bbox = Rect{x0, y0, sw, sh};
    rec.area_fraction = static_cast<double>(opaque) / (static_cast<double>(h) * w);
    rec.size_param = prep.size_param;
    rec.matched = matched;
    rec.text = prep.text;
    sample.placements.push_back(std::move(rec));
  }

  sample.jpeg_quality = rng.uniform_int(cfg.jpeg_quality_min, cfg.jpeg_quality_max);
  if (cfg.apply_jpeg) sample.image = jpeg_degrade(sample.image, sample.jpeg_quality);
  return sample;
}

struct TestSetCell {
  PatternCategory category;
  SizeLevel size;
  int count = 0;
};

struct TestSetSpec {
  std::vector<TestSetCell> cells;
  std::uint64_t seed = 0;
  std::optional<std::pair<int, int>> jpeg_quality;  // overrides the default 70..100
  bool apply_jpeg = true;
  std::optional<std::pair<double, double>> size_range;  // overrides every cell
  bool attribute_adjustment = false;
  int jobs = 1;
};

inline nlohmann::json placed_pattern_json(const PlacedPattern& p) {
  nlohmann::json j;
  j["category"] = category_name(p.category);
  j["bbox"] = {p.bbox.x, p.bbox.y, p.bbox.w, p.bbox.h};
  j["area_fraction"] = p.area_fraction;
  j["size_param"] = p.size_param;
  j["attribute_mode"] = p.matched ? "match" : "mismatch";
  if (!p.text.empty()) j["text"] = p.text;
  return j;
}

// Writes out_dir/<category>/<size>/<index>.png (+ _mask.png) for every cell
// plus a manifest. Test synthesis skips attribute alignment by default.
// Cell RNG streams are pre-split, so jobs > 1 parallelizes whole cells and
// still produces byte-identical trees.
inline nlohmann::json build_test_set(const std::vector<Image>& bases,
                                     const std::string& out_dir, const TestSetSpec& spec) {
  if (bases.empty()) throw ConfigError("build_test_set needs at least one base image");
  if (spec.jobs < 1) throw ConfigError("jobs must be >= 1");
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());

  const Rng master(spec.seed);
  std::vector<nlohmann::json> cell_jsons(spec.cells.size());
  const auto run_cell = [&](std::size_t cell_index) {
    const TestSetCell& cell = spec.cells[cell_index];
    SynthesisConfig cfg = default_synthesis_config(cell.category, cell.size);
    cfg.attribute_adjustment = spec.attribute_adjustment;
    cfg.apply_jpeg = spec.apply_jpeg;
    if (spec.jpeg_quality) {
      cfg.jpeg_quality_min = spec.jpeg_quality->first;
      cfg.jpeg_quality_max = spec.jpeg_quality->second;
    }
    if (spec.size_range) cfg.size_range = *spec.size_range;
    cfg.validate();

    const std::string rel_dir =
        std::string(category_name(cell.category)) + "/" + size_level_name(cell.size);
    std::error_code cell_ec;
    fs::create_directories(fs::path(out_dir) / rel_dir, cell_ec);
    if (cell_ec) throw IoError("cannot create cell dir: " + cell_ec.message());

    nlohmann::json cell_json;
    cell_json["category"] = category_name(cell.category);
    cell_json["size"] = size_level_name(cell.size);
    cell_json["count"] = cell.count;
    cell_json["jpeg_quality_range"] = {cfg.jpeg_quality_min, cfg.jpeg_quality_max};
    cell_json["apply_jpeg"] = cfg.apply_jpeg;
    cell_json["size_range"] = {cfg.size_range.first, cfg.size_range.second};
    cell_json["samples"] = nlohmann::json::array();

    const Rng cell_rng = master.split(cell_index);
    for (int i = 0; i < cell.count; ++i) {
      Rng rng = cell_rng.split(static_cast<std::uint64_t>(i));
      const Image& base = bases[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<int>(bases.size()) - 1))];
      const SynthSample sample = synthesize(base, cfg, rng);

      const std::string img_rel = rel_dir + "/" + std::to_string(i) + ".png";
      const std::string mask_rel = rel_dir + "/" + std::to_string(i) + "_mask.png";
      write_png((fs::path(out_dir) / img_rel).string(), sample.image);
      write_mask_png((fs::path(out_dir) / mask_rel).string(), sample.mask);

      nlohmann::json s;
      s["index"] = i;
      s["image"] = img_rel;
      s["mask"] = mask_rel;
      s["jpeg_quality"] = sample.jpeg_quality;
      s["size_draws"] = sample.size_draws;
      s["placements"] = nlohmann::json::array();
      for (const auto& p : sample.placements) s["placements"].push_back(placed_pattern_json(p));
      cell_json["samples"].push_back(std::move(s));
    }
    cell_jsons[cell_index] = std::move(cell_json);
  };

  if (spec.jobs == 1 || spec.cells.size() < 2) {
    for (std::size_t c = 0; c < spec.cells.size(); ++c) run_cell(c);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::mutex fail_mutex;
    std::exception_ptr failure;
    const int workers = std::min<int>(spec.jobs, static_cast<int>(spec.cells.size()));
    for (int t = 0; t < workers; ++t) {
      pool.emplace_back([&] {
        for (;;) {
          const std::size_t c = next.fetch_add(1);
          if (c >= spec.cells.size()) return;
          try {
            run_cell(c);
          } catch (...) {
            const std::lock_guard<std::mutex> lock(fail_mutex);
            if (!failure) failure = std::current_exception();
            return;
          }
        }
      });
    }
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
  }

  nlohmann::json manifest;
  manifest["seed"] = spec.seed;
  manifest["cells"] = nlohmann::json::array();
  for (auto& cj : cell_jsons) manifest["cells"].push_back(std::move(cj));

  std::ofstream out(fs::path(out_dir) / "manifest.json");
  if (!out) throw IoError("cannot write manifest.json in " + out_dir);
  out << manifest.dump(2) << "\n";
  return manifest;
}

}  // namespace patseg
