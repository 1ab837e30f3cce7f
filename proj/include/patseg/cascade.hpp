#pragma once

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "patseg/image.hpp"
#include "patseg/imgproc.hpp"
#include "patseg/ops.hpp"
#include "patseg/rng.hpp"
#include "patseg/tensor.hpp"

namespace patseg {

struct CascadeConfig {
  int levels = 3;
  double sigma_step = std::numbers::sqrt2;
  int channels = 16;
  // Provenance only: the net is fully convolutional, but runs record the
  // resolution they were trained at.
  int input_resolution = 64;

  void validate() const {
    if (levels < 1) throw ConfigError("cascade needs at least 1 level");
    if (sigma_step <= 1.0) throw ConfigError("sigma_step must be > 1");
    if (channels < 2 || channels % 2 != 0) {
      throw ConfigError("channels must be even and >= 2 (the head halves them)");
    }
    if (input_resolution < 8) throw ConfigError("input_resolution must be >= 8");
  }

  // Absolute downscale factor of level l; the finest level is 1.
  double scale_factor(int level) const {
    return std::pow(sigma_step, levels - 1 - level);
  }
};

inline nlohmann::json cascade_config_to_json(const CascadeConfig& c) {
  nlohmann::json j;
  j["levels"] = c.levels;
  j["sigma_step"] = c.sigma_step;
  j["channels"] = c.channels;
  j["input_resolution"] = c.input_resolution;
  return j;
}

inline CascadeConfig cascade_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key != "levels" && key != "sigma_step" && key != "channels" &&
        key != "input_resolution") {
      throw ConfigError("unknown model config key: " + key);
    }
  }
  CascadeConfig c;
  try {
    if (j.contains("levels")) c.levels = j.at("levels").get<int>();
    if (j.contains("sigma_step")) c.sigma_step = j.at("sigma_step").get<double>();
    if (j.contains("channels")) c.channels = j.at("channels").get<int>();
    if (j.contains("input_resolution")) {
      c.input_resolution = j.at("input_resolution").get<int>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad model config value: ") + e.what());
  }
  c.validate();
  return c;
}

// One scale: backbone f (entry conv + 4 residual blocks, all 3x3, C wide)
// and head g (3x3 C->C/2, then 1x1 C/2->1, sigmoid).
struct SubNetwork {
  Tensor entry_w, entry_b;
  std::array<Tensor, 8> block_w;
  std::array<Tensor, 8> block_b;
  Tensor head1_w, head1_b;
  Tensor head2_w, head2_b;
};

struct CascadeModel {
  CascadeConfig config;
  std::vector<SubNetwork> levels;
};

namespace detail {

inline Tensor he_conv_weight(Rng& rng, int c_out, int c_in, int k) {
  const double std_dev = std::sqrt(2.0 / (static_cast<double>(c_in) * k * k));
  std::vector<float> data(static_cast<std::size_t>(c_out) * c_in * k * k);
  for (auto& v : data) v = static_cast<float>(rng.normal(0.0, std_dev));
  return Tensor::param({c_out, c_in, k, k}, std::move(data));
}

inline Tensor zero_bias(int c_out) {
  return Tensor::param({c_out}, std::vector<float>(static_cast<std::size_t>(c_out), 0.0f));
}

}  // namespace detail

inline CascadeModel make_cascade(const CascadeConfig& config, Rng& rng) {
  config.validate();
  CascadeModel model;
  model.config = config;
  const int c = config.channels;
  for (int l = 0; l < config.levels; ++l) {
    SubNetwork s;
    const int in_ch = l == 0 ? 3 : 3 + c;
    s.entry_w = detail::he_conv_weight(rng, c, in_ch, 3);
    s.entry_b = detail::zero_bias(c);
    for (int i = 0; i < 8; ++i) {
      s.block_w[static_cast<std::size_t>(i)] = detail::he_conv_weight(rng, c, c, 3);
      s.block_b[static_cast<std::size_t>(i)] = detail::zero_bias(c);
    }
    s.head1_w = detail::he_conv_weight(rng, c / 2, c, 3);
    s.head1_b = detail::zero_bias(c / 2);
    s.head2_w = detail::he_conv_weight(rng, 1, c / 2, 1);
    s.head2_b = detail::zero_bias(1);
    model.levels.push_back(std::move(s));
  }
  return model;
}

inline std::vector<std::pair<std::string, Tensor>> named_parameters(const CascadeModel& model,
                                                                    int level) {
  const SubNetwork& s = model.levels.at(static_cast<std::size_t>(level));
  const std::string p = "level" + std::to_string(level) + ".";
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back(p + "entry.weight", s.entry_w);
  out.emplace_back(p + "entry.bias", s.entry_b);
  for (int i = 0; i < 8; ++i) {
    const std::string q =
        p + "block" + std::to_string(i / 2) + ".conv" + std::to_string(i % 2) + ".";
    out.emplace_back(q + "weight", s.block_w[static_cast<std::size_t>(i)]);
    out.emplace_back(q + "bias", s.block_b[static_cast<std::size_t>(i)]);
  }
  out.emplace_back(p + "head.conv0.weight", s.head1_w);
  out.emplace_back(p + "head.conv0.bias", s.head1_b);
  out.emplace_back(p + "head.conv1.weight", s.head2_w);
  out.emplace_back(p + "head.conv1.bias", s.head2_b);
  return out;
}

inline std::vector<std::pair<std::string, Tensor>> named_parameters(const CascadeModel& model) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (int l = 0; l < model.config.levels; ++l) {
    auto lvl = named_parameters(model, l);
    out.insert(out.end(), lvl.begin(), lvl.end());
  }
  return out;
}

inline std::vector<Tensor> parameters(const CascadeModel& model, int level) {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters(model, level)) out.push_back(t);
  return out;
}

inline std::vector<Tensor> parameters(const CascadeModel& model) {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters(model)) out.push_back(t);
  return out;
}

inline std::int64_t count_parameters(const CascadeModel& model) {
  std::int64_t n = 0;
  for (const auto& t : parameters(model)) n += shape_numel(t.shape());
  return n;
}

inline Tensor run_backbone(const SubNetwork& s, const Tensor& x) {
  Tensor h = relu(conv2d(x, s.entry_w, s.entry_b, 1, 1));
  for (int b = 0; b < 4; ++b) {
    Tensor r = relu(conv2d(h, s.block_w[static_cast<std::size_t>(2 * b)],
                           s.block_b[static_cast<std::size_t>(2 * b)], 1, 1));
    r = conv2d(r, s.block_w[static_cast<std::size_t>(2 * b + 1)],
               s.block_b[static_cast<std::size_t>(2 * b + 1)], 1, 1);
    h = relu(add(h, r));
  }
  return h;
}

inline Tensor run_head(const SubNetwork& s, const Tensor& v) {
  Tensor h = relu(conv2d(v, s.head1_w, s.head1_b, 1, 1));
  return sigmoid(conv2d(h, s.head2_w, s.head2_b, 1, 0));
}

enum class ForwardMode {
  kInference,   // no gradients anywhere
  kStageTrain,  // gradients only through the up_to_level sub-network
  kJoint        // gradients through every level
};

struct CascadeOutput {
  std::vector<Tensor> level_masks;      // M_l, [N,1,h_l,w_l]
  std::vector<Tensor> level_features;   // V_l, [N,C,h_l,w_l]
  std::vector<Tensor> cumulative_masks; // M~_l at full resolution
};

// Per-level stacked inputs for a batch of same-sized images, coarse to fine.
struct PyramidBatch {
  std::vector<Tensor> levels;  // [N,3,h_l,w_l]
  int full_height = 0;
  int full_width = 0;
};

inline PyramidBatch make_pyramid_batch(const std::vector<ScalePyramid>& pyramids,
                                       int levels_used) {
  if (pyramids.empty()) throw DimensionError("empty pyramid batch");
  const int n = static_cast<int>(pyramids.size());
  PyramidBatch batch;
  batch.full_height = pyramids[0].full_height;
  batch.full_width = pyramids[0].full_width;
  for (const auto& p : pyramids) {
    if (static_cast<int>(p.levels.size()) < levels_used ||
        p.full_height != batch.full_height || p.full_width != batch.full_width) {
      throw DimensionError("pyramid batch entries disagree on levels or size");
    }
  }
  for (int l = 0; l < levels_used; ++l) {
    const int h = pyramids[0].levels[static_cast<std::size_t>(l)].height;
    const int w = pyramids[0].levels[static_cast<std::size_t>(l)].width;
    std::vector<float> data;
    data.reserve(static_cast<std::size_t>(n) * 3 * h * w);
    for (const auto& p : pyramids) {
      const Image& im = p.levels[static_cast<std::size_t>(l)];
      if (im.height != h || im.width != w || im.channels != 3) {
        throw DimensionError("pyramid level shape mismatch in batch");
      }
      for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < h; ++y) {
          for (int x = 0; x < w; ++x) data.push_back(im.at(y, x, c));
        }
      }
    }
    batch.levels.push_back(Tensor::from_data({n, 3, h, w}, std::move(data)));
  }
  return batch;
}

// Runs sub-networks 0..up_to_level. Concatenation input for level l >= 1 is
// the level image joined with V_{l-1} bilinearly resized to the level size;
// cumulative masks are each level's mask upsampled to full resolution and
// multiplied together in level order.
inline CascadeOutput forward(const CascadeModel& model, const PyramidBatch& batch,
                             int up_to_level, ForwardMode mode = ForwardMode::kInference) {
  if (up_to_level < 0 || up_to_level >= model.config.levels) {
    throw DimensionError("up_to_level out of range");
  }
  if (static_cast<int>(batch.levels.size()) != up_to_level + 1) {
    throw DimensionError("pyramid batch must carry exactly up_to_level+1 levels");
  }
  if (batch.full_height <= 0 || batch.full_width <= 0) {
    throw DimensionError("pyramid batch missing full resolution");
  }

  CascadeOutput out;
  Tensor cumulative;
  for (int l = 0; l <= up_to_level; ++l) {
    const bool live = mode == ForwardMode::kJoint ||
                      (mode == ForwardMode::kStageTrain && l == up_to_level);
    NoGradGuard guard(!live);

    const Tensor& x = batch.levels[static_cast<std::size_t>(l)];
    Tensor input = x;
    if (l > 0) {
      const Tensor& prev = out.level_features.back();
      input = concat_channels(x, bilinear_resize(prev, x.shape()[2], x.shape()[3]));
    }
    const SubNetwork& s = model.levels[static_cast<std::size_t>(l)];
    Tensor v = run_backbone(s, input);
    Tensor m = run_head(s, v);
    Tensor up = bilinear_resize(m, batch.full_height, batch.full_width);
    cumulative = l == 0 ? up : mul(cumulative, up);
    out.level_features.push_back(std::move(v));
    out.level_masks.push_back(std::move(m));
    out.cumulative_masks.push_back(cumulative);
  }
  return out;
}

inline CascadeOutput forward(const CascadeModel& model, const ScalePyramid& pyramid,
                             int up_to_level, ForwardMode mode = ForwardMode::kInference) {
  if (static_cast<int>(pyramid.levels.size()) != up_to_level + 1) {
    throw DimensionError("pyramid must carry exactly up_to_level+1 levels");
  }
  for (int l = 0; l <= up_to_level; ++l) {
    if (std::abs(pyramid.scale_factors[static_cast<std::size_t>(l)] -
                 model.config.scale_factor(l)) > 1e-9) {
      throw DimensionError("pyramid scale factors do not match the model");
    }
  }
  return forward(model, make_pyramid_batch({pyramid}, up_to_level + 1), up_to_level, mode);
}

// Keeps the coarsest keep_levels levels; full resolution metadata survives so
// cumulative masks still land at the source size.
inline ScalePyramid truncate_pyramid(const ScalePyramid& pyramid, int keep_levels) {
  if (keep_levels < 1 || keep_levels > static_cast<int>(pyramid.levels.size())) {
    throw DimensionError("truncate_pyramid keep_levels out of range");
  }
  ScalePyramid out;
  out.full_height = pyramid.full_height;
  out.full_width = pyramid.full_width;
  out.levels.assign(pyramid.levels.begin(), pyramid.levels.begin() + keep_levels);
  out.scale_factors.assign(pyramid.scale_factors.begin(),
                           pyramid.scale_factors.begin() + keep_levels);
  return out;
}

inline Tensor predict_soft_mask(const CascadeModel& model, const Image& image) {
  const ScalePyramid pyr =
      build_pyramid(image, model.config.levels, model.config.sigma_step);
  CascadeOutput out = forward(model, pyr, model.config.levels - 1, ForwardMode::kInference);
  return out.cumulative_masks.back();
}

inline BinaryMask predict_mask(const CascadeModel& model, const Image& image,
                               float threshold) {
  if (!(threshold > 0.0f && threshold < 1.0f)) {
    throw ConfigError("threshold must be in (0,1)");
  }
  const Tensor soft = predict_soft_mask(model, image);
  BinaryMask mask = BinaryMask::create(image.height, image.width);
  const auto& v = soft.values();
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      mask.at(y, x) =
          v[static_cast<std::size_t>(y) * image.width + x] >= threshold ? 1 : 0;
    }
  }
  return mask;
}

}  // namespace patseg
