#include "patseg/cascade.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "patseg/rng.hpp"
#include "patseg/synth.hpp"

namespace patseg {
namespace {

Image noise_image(Rng& rng, int h, int w) {
  Image im = Image::create(h, w, 3);
  for (auto& v : im.pix) v = static_cast<float>(rng.uniform(0.0, 1.0));
  return im;
}

// Independent scalar bilinear for the recomposition oracle: same half-pixel
// centers and clamped taps as the library op, evaluated in double.
std::vector<double> scalar_upsample(const std::vector<float>& in, int h, int w, int oh,
                                    int ow) {
  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  for (int oy = 0; oy < oh; ++oy) {
    const double sy = (oy + 0.5) * h / oh - 0.5;
    const int y0 = std::clamp(static_cast<int>(std::floor(sy)), 0, h - 1);
    const int y1 = std::clamp(static_cast<int>(std::floor(sy)) + 1, 0, h - 1);
    const double wy = sy - std::floor(sy);
    for (int ox = 0; ox < ow; ++ox) {
      const double sx = (ox + 0.5) * w / ow - 0.5;
      const int x0 = std::clamp(static_cast<int>(std::floor(sx)), 0, w - 1);
      const int x1 = std::clamp(static_cast<int>(std::floor(sx)) + 1, 0, w - 1);
      const double wx = sx - std::floor(sx);
      const double a = (1.0 - wy) * ((1.0 - wx) * in[static_cast<std::size_t>(y0) * w + x0] +
                                     wx * in[static_cast<std::size_t>(y0) * w + x1]) +
                       wy * ((1.0 - wx) * in[static_cast<std::size_t>(y1) * w + x0] +
                             wx * in[static_cast<std::size_t>(y1) * w + x1]);
      out[static_cast<std::size_t>(oy) * ow + ox] = a;
    }
  }
  return out;
}

TEST(CascadeConfig, ValidationAndJsonRoundTrip) {
  CascadeConfig c;
  c.levels = 2;
  c.sigma_step = 1.5;
  c.channels = 8;
  c.input_resolution = 96;
  const CascadeConfig back = cascade_config_from_json(cascade_config_to_json(c));
  EXPECT_EQ(back.levels, 2);
  EXPECT_DOUBLE_EQ(back.sigma_step, 1.5);
  EXPECT_EQ(back.channels, 8);
  EXPECT_EQ(back.input_resolution, 96);

  EXPECT_THROW(cascade_config_from_json({{"levles", 3}}), ConfigError);
  EXPECT_THROW(cascade_config_from_json({{"channels", 5}}), ConfigError);
  EXPECT_THROW(cascade_config_from_json({{"levels", 0}}), ConfigError);
  EXPECT_THROW(cascade_config_from_json({{"sigma_step", 1.0}}), ConfigError);
  EXPECT_THROW(cascade_config_from_json(nlohmann::json::array()), ConfigError);

  CascadeConfig defaults = cascade_config_from_json(nlohmann::json::object());
  EXPECT_EQ(defaults.levels, 3);
  EXPECT_DOUBLE_EQ(defaults.sigma_step, std::numbers::sqrt2);
  EXPECT_EQ(defaults.channels, 16);
}

TEST(CascadeParams, HandCountedTinyModel) {
  CascadeConfig cfg;
  cfg.levels = 1;
  cfg.channels = 2;
  Rng rng(1);
  const CascadeModel m = make_cascade(cfg, rng);
  // entry 3*2*9+2, 8 block convs (2*2*9+2 each), head 2*1*9+1 and 1*1+1.
  EXPECT_EQ(count_parameters(m), 381);
  EXPECT_EQ(m.levels[0].entry_w.shape(), (Shape{2, 3, 3, 3}));
}

TEST(CascadeParams, FinerLevelsTakeConcatInput) {
  CascadeConfig cfg;
  cfg.levels = 3;
  cfg.channels = 4;
  Rng rng(2);
  const CascadeModel m = make_cascade(cfg, rng);
  EXPECT_EQ(m.levels[0].entry_w.shape(), (Shape{4, 3, 3, 3}));
  EXPECT_EQ(m.levels[1].entry_w.shape(), (Shape{4, 7, 3, 3}));
  EXPECT_EQ(m.levels[2].entry_w.shape(), (Shape{4, 7, 3, 3}));
  EXPECT_EQ(named_parameters(m).size(), 3u * 22u);
}

TEST(CascadeParams, DefaultDeskModelUnderMillion) {
  CascadeConfig cfg;
  Rng rng(3);
  const CascadeModel m = make_cascade(cfg, rng);
  EXPECT_LT(count_parameters(m), 1000000);
  EXPECT_GT(count_parameters(m), 10000);
}

TEST(CascadeParams, DoublingChannelsNearQuadruplesBlocks) {
  CascadeConfig small, big;
  small.levels = 1;
  small.channels = 8;
  big.levels = 1;
  big.channels = 16;
  Rng r1(4), r2(4);
  const auto ps = count_parameters(make_cascade(small, r1));
  const auto pb = count_parameters(make_cascade(big, r2));
  EXPECT_GT(pb, 3 * ps);
  EXPECT_LT(pb, 5 * ps);
}

TEST(CascadeParams, InitIsSeedDeterministic) {
  CascadeConfig cfg;
  cfg.levels = 2;
  cfg.channels = 4;
  Rng r1(9), r2(9), r3(10);
  const CascadeModel a = make_cascade(cfg, r1);
  const CascadeModel b = make_cascade(cfg, r2);
  const CascadeModel c = make_cascade(cfg, r3);
  EXPECT_EQ(a.levels[1].entry_w.values(), b.levels[1].entry_w.values());
  EXPECT_NE(a.levels[1].entry_w.values(), c.levels[1].entry_w.values());
  for (const auto& t : parameters(a)) EXPECT_TRUE(t.requires_grad());
}

TEST(CascadeForward, SingleLevelCumulativeEqualsMask) {
  CascadeConfig cfg;
  cfg.levels = 1;
  cfg.channels = 4;
  Rng rng(5);
  const CascadeModel m = make_cascade(cfg, rng);
  const Image im = noise_image(rng, 16, 16);
  const ScalePyramid pyr = build_pyramid(im, 1, cfg.sigma_step);
  const CascadeOutput out = forward(m, pyr, 0);
  ASSERT_EQ(out.level_masks.size(), 1u);
  EXPECT_EQ(out.cumulative_masks[0].values(), out.level_masks[0].values());
}

TEST(CascadeForward, AllOnesHeadsGiveAllOnesCumulative) {
  CascadeConfig cfg;
  cfg.levels = 3;
  cfg.channels = 4;
  cfg.sigma_step = std::numbers::sqrt2;
  Rng rng(6);
  CascadeModel m = make_cascade(cfg, rng);
  for (auto& level : m.levels) {
    std::fill(level.head2_w.data(), level.head2_w.data() + shape_numel(level.head2_w.shape()),
              0.0f);
    level.head2_b.data()[0] = 100.0f;  // sigmoid(100) saturates to 1
  }
  const Image im = noise_image(rng, 23, 31);
  const ScalePyramid pyr = build_pyramid(im, 3, cfg.sigma_step);
  const CascadeOutput out = forward(m, pyr, 2);
  for (const auto& cum : out.cumulative_masks) {
    for (const float v : cum.values()) EXPECT_NEAR(v, 1.0f, 1e-6f);
  }
}

TEST(CascadeForward, CumulativeMatchesScalarRecomposition) {
  CascadeConfig cfg;
  cfg.levels = 3;
  cfg.channels = 4;
  Rng rng(7);
  const CascadeModel m = make_cascade(cfg, rng);
  for (int trial = 0; trial < 100; ++trial) {
    const int h = 16 + static_cast<int>(rng.uniform_int(0, 16));
    const int w = 16 + static_cast<int>(rng.uniform_int(0, 16));
    const Image im = noise_image(rng, h, w);
    const ScalePyramid pyr = build_pyramid(im, 3, cfg.sigma_step);
    const CascadeOutput out = forward(m, pyr, 2);

    std::vector<double> prod(static_cast<std::size_t>(h) * w, 1.0);
    for (int l = 0; l < 3; ++l) {
      const auto& mshape = out.level_masks[static_cast<std::size_t>(l)].shape();
      const auto up = scalar_upsample(out.level_masks[static_cast<std::size_t>(l)].values(),
                                      mshape[2], mshape[3], h, w);
      for (std::size_t i = 0; i < prod.size(); ++i) prod[i] *= up[i];
    }
    const auto& cum = out.cumulative_masks[2].values();
    double max_diff = 0.0;
    for (std::size_t i = 0; i < prod.size(); ++i) {
      max_diff = std::max(max_diff, std::abs(prod[i] - cum[i]));
    }
    EXPECT_LT(max_diff, 1e-6) << "trial " << trial;
  }
}

TEST(CascadeForward, CumulativeMonotoneAndBounded) {
  CascadeConfig cfg;
  cfg.levels = 3;
  cfg.channels = 4;
  Rng rng(8);
  const CascadeModel m = make_cascade(cfg, rng);
  const Image im = noise_image(rng, 20, 28);
  const ScalePyramid pyr = build_pyramid(im, 3, cfg.sigma_step);
  const CascadeOutput out = forward(m, pyr, 2);
  for (int l = 0; l < 3; ++l) {
    const auto& cum = out.cumulative_masks[static_cast<std::size_t>(l)].values();
    const auto& mshape = out.level_masks[static_cast<std::size_t>(l)].shape();
    const Tensor up =
        bilinear_resize(out.level_masks[static_cast<std::size_t>(l)], 20, 28);
    for (std::size_t i = 0; i < cum.size(); ++i) {
      EXPECT_TRUE(std::isfinite(cum[i]));
      EXPECT_GE(cum[i], 0.0f);
      EXPECT_LE(cum[i], 1.0f);
      EXPECT_LE(cum[i], up.values()[i] + 1e-6f);
      if (l > 0) {
        EXPECT_LE(cum[i],
                  out.cumulative_masks[static_cast<std::size_t>(l - 1)].values()[i] + 1e-6f);
      }
    }
    EXPECT_EQ(mshape[1], 1);
  }
}

TEST(CascadeForward, DeterministicAndShapeChecked) {
  CascadeConfig cfg;
  cfg.levels = 2;
  cfg.channels = 4;
  Rng rng(12);
  const CascadeModel m = make_cascade(cfg, rng);
  const Image im = noise_image(rng, 18, 18);
  const ScalePyramid pyr = build_pyramid(im, 2, cfg.sigma_step);
  const CascadeOutput a = forward(m, pyr, 1);
  const CascadeOutput b = forward(m, pyr, 1);
  EXPECT_EQ(a.cumulative_masks[1].values(), b.cumulative_masks[1].values());

  EXPECT_THROW(forward(m, pyr, 0), DimensionError);   // level count mismatch
  EXPECT_THROW(forward(m, pyr, 2), DimensionError);   // out of range
  const ScalePyramid wrong = build_pyramid(im, 2, 1.7);
  EXPECT_THROW(forward(m, wrong, 1), DimensionError);  // scale factors differ
}

TEST(CascadeForward, TruncatedPyramidKeepsFullResolution) {
  CascadeConfig cfg;
  cfg.levels = 3;
  cfg.channels = 4;
  Rng rng(13);
  const CascadeModel m = make_cascade(cfg, rng);
  const Image im = noise_image(rng, 32, 32);
  const ScalePyramid full = build_pyramid(im, 3, cfg.sigma_step);
  const ScalePyramid part = truncate_pyramid(full, 2);
  ASSERT_EQ(part.levels.size(), 2u);
  EXPECT_EQ(part.full_height, 32);
  const CascadeOutput out = forward(m, part, 1, ForwardMode::kStageTrain);
  EXPECT_EQ(out.cumulative_masks[1].shape(), (Shape{1, 1, 32, 32}));
  EXPECT_THROW(truncate_pyramid(full, 0), DimensionError);
  EXPECT_THROW(truncate_pyramid(full, 4), DimensionError);
}

TEST(CascadeForward, StageModeFreezesCoarseLevels) {
  CascadeConfig cfg;
  cfg.levels = 2;
  cfg.channels = 4;
  Rng rng(14);
  const CascadeModel m = make_cascade(cfg, rng);
  const Image im = noise_image(rng, 16, 16);
  const ScalePyramid pyr = build_pyramid(im, 2, cfg.sigma_step);
  CascadeOutput out = forward(m, pyr, 1, ForwardMode::kStageTrain);
  Tensor cum = out.cumulative_masks[1];
  cum.backward(std::vector<float>(cum.values().size(), 1.0f));
  for (const auto& t : parameters(m, 0)) EXPECT_FALSE(t.has_grad());
  bool any_grad = false;
  for (const auto& t : parameters(m, 1)) {
    if (t.has_grad()) {
      for (const float g : t.grad()) {
        if (g != 0.0f) any_grad = true;
      }
    }
  }
  EXPECT_TRUE(any_grad);
}

TEST(CascadeForward, JointModeReachesAllLevels) {
  CascadeConfig cfg;
  cfg.levels = 2;
  cfg.channels = 4;
  Rng rng(15);
  const CascadeModel m = make_cascade(cfg, rng);
  const Image im = noise_image(rng, 16, 16);
  const ScalePyramid pyr = build_pyramid(im, 2, cfg.sigma_step);
  CascadeOutput out = forward(m, pyr, 1, ForwardMode::kJoint);
  Tensor cum = out.cumulative_masks[1];
  cum.backward(std::vector<float>(cum.values().size(), 1.0f));
  for (int l = 0; l < 2; ++l) {
    bool any = false;
    for (const auto& t : parameters(m, l)) {
      if (!t.has_grad()) continue;
      for (const float g : t.grad()) {
        if (g != 0.0f) any = true;
      }
    }
    EXPECT_TRUE(any) << "level " << l;
  }
}

TEST(CascadeForward, InferenceModeLeavesNoTape) {
  CascadeConfig cfg;
  cfg.levels = 2;
  cfg.channels = 4;
  Rng rng(16);
  const CascadeModel m = make_cascade(cfg, rng);
  const Image im = noise_image(rng, 16, 16);
  const ScalePyramid pyr = build_pyramid(im, 2, cfg.sigma_step);
  const CascadeOutput out = forward(m, pyr, 1, ForwardMode::kInference);
  EXPECT_FALSE(out.cumulative_masks[1].requires_grad());
}

TEST(PredictMask, ThresholdExtremesAndSubsetProperty) {
  CascadeConfig cfg;
  cfg.levels = 2;
  cfg.channels = 4;
  Rng rng(17);
  const CascadeModel m = make_cascade(cfg, rng);
  const Image im = noise_image(rng, 24, 24);
  const Tensor soft = predict_soft_mask(m, im);
  float lo = 1.0f, hi = 0.0f;
  for (const float v : soft.values()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const float below = std::max(lo * 0.5f, 1e-6f);
  const BinaryMask all = predict_mask(m, im, below);
  EXPECT_EQ(all.area(), 24 * 24);
  if (hi < 1.0f) {
    const float above = hi + (1.0f - hi) * 0.5f;
    const BinaryMask none = predict_mask(m, im, above);
    EXPECT_EQ(none.area(), 0);
  }

  // Predicted positives are a subset of each level's thresholded positives.
  const ScalePyramid pyr = build_pyramid(im, 2, cfg.sigma_step);
  const CascadeOutput out = forward(m, pyr, 1);
  const float tau = 0.5f * (lo + hi);
  const BinaryMask pred = predict_mask(m, im, tau);
  for (int l = 0; l < 2; ++l) {
    const Tensor up = bilinear_resize(out.level_masks[static_cast<std::size_t>(l)], 24, 24);
    for (int y = 0; y < 24; ++y) {
      for (int x = 0; x < 24; ++x) {
        if (pred.at(y, x)) {
          EXPECT_GE(up.values()[static_cast<std::size_t>(y) * 24 + x], tau);
        }
      }
    }
  }

  EXPECT_THROW(predict_mask(m, im, 0.0f), ConfigError);
  EXPECT_THROW(predict_mask(m, im, 1.0f), ConfigError);
  const Image tiny = Image::create(8, 8, 3, 0.5f);
  EXPECT_THROW(predict_mask(m, tiny, 0.5f), SizeError);
}

}  // namespace
}  // namespace patseg
