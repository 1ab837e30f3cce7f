#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "patseg/adam.hpp"
#include "patseg/cascade.hpp"
#include "patseg/checkpoint.hpp"
#include "patseg/metrics.hpp"
#include "patseg/synth.hpp"

namespace patseg {

struct TrainSample {
  Image image;
  BinaryMask mask;
};

// Draws one fresh synthesized sample; all randomness must come from the
// passed stream so training stays reproducible.
using DataStream = std::function<TrainSample(Rng&)>;

// Supplies the clean background a sample gets composited onto.
using BaseProvider = std::function<Image(Rng&, int, int)>;

// On-the-fly synthesis over a weighted mixture of cells. Backgrounds default
// to fresh procedural noise; pass a provider to train on stock imagery.
inline DataStream make_synth_stream(int height, int width, std::vector<SynthesisConfig> cells,
                                    std::vector<double> weights = {},
                                    BaseProvider base_provider = {}) {
  if (cells.empty()) throw ConfigError("synth stream needs at least one cell");
  for (const auto& c : cells) c.validate();
  if (weights.empty()) weights.assign(cells.size(), 1.0);
  if (weights.size() != cells.size()) throw ConfigError("cell/weight count mismatch");
  double total = 0.0;
  for (const double w : weights) {
    if (w < 0.0) throw ConfigError("negative mixture weight");
    total += w;
  }
  if (total <= 0.0) throw ConfigError("mixture weights sum to zero");
  std::vector<double> cumulative;
  double acc = 0.0;
  for (const double w : weights) {
    acc += w / total;
    cumulative.push_back(acc);
  }
  cumulative.back() = 1.0;
  if (!base_provider) {
    base_provider = [](Rng& rng, int h, int w) { return random_background(rng, h, w); };
  }

  return [height, width, cells = std::move(cells), cumulative = std::move(cumulative),
          base_provider = std::move(base_provider)](Rng& rng) {
    const double u = rng.uniform();
    std::size_t idx = 0;
    while (idx + 1 < cumulative.size() && u >= cumulative[idx]) ++idx;
    Image bg = base_provider(rng, height, width);
    SynthSample s = synthesize(bg, cells[idx], rng);
    return TrainSample{std::move(s.image), std::move(s.mask)};
  };
}

// Area-average the {0,1} mask onto the target grid with exact fractional
// pixel overlap, then binarize at 0.5; exact ties round up to 1.
inline BinaryMask downsample_gt(const BinaryMask& mask, int target_h, int target_w) {
  if (target_h < 1 || target_w < 1) throw SizeError("downsample_gt target must be >= 1x1");
  if (target_h > mask.height || target_w > mask.width) {
    throw SizeError("downsample_gt cannot upsample");
  }
  BinaryMask out = BinaryMask::create(target_h, target_w);
  const double sy = static_cast<double>(mask.height) / target_h;
  const double sx = static_cast<double>(mask.width) / target_w;
  for (int ty = 0; ty < target_h; ++ty) {
    const double y0 = ty * sy, y1 = (ty + 1) * sy;
    for (int tx = 0; tx < target_w; ++tx) {
      const double x0 = tx * sx, x1 = (tx + 1) * sx;
      double sum = 0.0;
      for (int y = static_cast<int>(std::floor(y0)); y < y1 && y < mask.height; ++y) {
        const double hy = std::min<double>(y + 1, y1) - std::max<double>(y, y0);
        if (hy <= 0.0) continue;
        for (int x = static_cast<int>(std::floor(x0)); x < x1 && x < mask.width; ++x) {
          const double hx = std::min<double>(x + 1, x1) - std::max<double>(x, x0);
          if (hx <= 0.0 || !mask.at(y, x)) continue;
          sum += hy * hx;
        }
      }
      out.at(ty, tx) = sum / (sy * sx) >= 0.5 ? 1 : 0;
    }
  }
  return out;
}

namespace detail {

inline Tensor masks_to_tensor(const std::vector<BinaryMask>& masks) {
  if (masks.empty()) throw DimensionError("empty mask batch");
  const int h = masks[0].height, w = masks[0].width;
  std::vector<float> data;
  data.reserve(masks.size() * static_cast<std::size_t>(h) * w);
  for (const auto& m : masks) {
    if (m.height != h || m.width != w) throw DimensionError("mask batch dims differ");
    for (const auto v : m.data) data.push_back(v ? 1.0f : 0.0f);
  }
  return Tensor::from_data({static_cast<int>(masks.size()), 1, h, w}, std::move(data));
}

// Per-sample balance weights 1/alpha and 1/(1-alpha); alpha clamped to
// [1/(HW), 1-1/(HW)] so empty and full masks stay finite.
inline std::pair<std::vector<float>, std::vector<float>> balance_weights(
    const std::vector<BinaryMask>& gts, int* clamp_events) {
  std::vector<float> pos, neg;
  for (const auto& gt : gts) {
    const double hw = static_cast<double>(gt.height) * gt.width;
    double alpha = static_cast<double>(gt.area()) / hw;
    const double lo = 1.0 / hw, hi = 1.0 - 1.0 / hw;
    if (alpha < lo || alpha > hi) {
      alpha = std::clamp(alpha, lo, hi);
      if (clamp_events) ++*clamp_events;
    }
    pos.push_back(static_cast<float>(1.0 / alpha));
    neg.push_back(static_cast<float>(1.0 / (1.0 - alpha)));
  }
  return {std::move(pos), std::move(neg)};
}

}  // namespace detail

// Balanced BCE on the cumulative mask of `level` at full resolution; coarser
// levels run detached so their parameters stay untouched (gradients to them
// are masked by construction).
inline Tensor stage_loss(const CascadeModel& model, const std::vector<Image>& images,
                         const std::vector<BinaryMask>& gts, int level,
                         int* alpha_clamp_events = nullptr) {
  if (images.empty() || images.size() != gts.size()) {
    throw DimensionError("stage_loss needs aligned nonempty image/mask batches");
  }
  std::vector<ScalePyramid> pyramids;
  pyramids.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (gts[i].height != images[i].height || gts[i].width != images[i].width) {
      throw DimensionError("ground truth dims differ from image");
    }
    pyramids.push_back(truncate_pyramid(
        build_pyramid(images[i], model.config.levels, model.config.sigma_step), level + 1));
  }
  const PyramidBatch batch = make_pyramid_batch(pyramids, level + 1);
  CascadeOutput out = forward(model, batch, level, ForwardMode::kStageTrain);
  const Tensor target = detail::masks_to_tensor(gts);
  auto [pos_w, neg_w] = detail::balance_weights(gts, alpha_clamp_events);
  return weighted_bce_per_sample(out.cumulative_masks[static_cast<std::size_t>(level)], target,
                                 pos_w, neg_w);
}

struct StageConfig {
  int level = 0;
  int steps = 500;
  int batch_size = 8;
  float learning_rate = 1e-3f;
  bool cosine_lr = true;
  double p_min = 0.6;
  double r_min = 0.95;
  double threshold_grid = 0.01;
  int validation_samples = 32;

  void validate() const {
    if (level < 0) throw ConfigError("stage level must be >= 0");
    if (steps < 1) throw ConfigError("stage steps must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(learning_rate > 0.0f)) throw ConfigError("learning_rate must be > 0");
    if (!(p_min > 0.0 && p_min <= 1.0)) throw ConfigError("p_min must be in (0,1]");
    if (!(r_min > 0.0 && r_min <= 1.0)) throw ConfigError("r_min must be in (0,1]");
    if (!(threshold_grid > 0.0 && threshold_grid < 1.0)) {
      throw ConfigError("threshold_grid must be in (0,1)");
    }
    if (validation_samples < 1) throw ConfigError("validation_samples must be >= 1");
  }
};

struct StageResult {
  int level = 0;
  double calibrated_threshold = 0.5;
  double achieved_precision = 0.0;
  double achieved_recall = 0.0;
  bool recall_feasible = true;
  bool precision_feasible = true;
  std::vector<double> loss_curve;
  int alpha_clamp_events = 0;
};

namespace detail {

inline SoftMask partial_soft_mask(const CascadeModel& model, const Image& image, int level) {
  const ScalePyramid pyr = truncate_pyramid(
      build_pyramid(image, model.config.levels, model.config.sigma_step), level + 1);
  CascadeOutput out = forward(model, pyr, level, ForwardMode::kInference);
  return SoftMask::from_tensor(out.cumulative_masks[static_cast<std::size_t>(level)]);
}

// Constraint calibration: largest tau meeting both constraints, else largest
// tau meeting recall alone (precision flagged), else the best-recall tau with
// both flags down.
// Interior grid {step, 2*step, ..., < 1}: calibrated thresholds must stay
// usable as prediction thresholds, which live in (0,1).
inline std::vector<double> calibration_grid(double step) {
  if (!(step > 0.0 && step < 1.0)) throw ConfigError("calibration grid step must be in (0,1)");
  std::vector<double> taus;
  for (int k = 1;; ++k) {
    const double tau = k * step;
    if (tau >= 1.0 - 1e-12) break;
    taus.push_back(tau);
  }
  return taus;
}

inline void calibrate_stage(const std::vector<SoftMask>& preds,
                            const std::vector<BinaryMask>& gts, const StageConfig& cfg,
                            StageResult& res) {
  double best_both = -1.0, best_recall_tau = -1.0, fallback_tau = 0.0, fallback_recall = -1.0;
  for (const double tau : calibration_grid(cfg.threshold_grid)) {
    double psum = 0.0, rsum = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const auto pr = precision_recall(preds[i], gts[i], tau);
      psum += pr.precision;
      rsum += pr.recall;
    }
    const double p = psum / static_cast<double>(preds.size());
    const double r = rsum / static_cast<double>(preds.size());
    if (r >= cfg.r_min) {
      best_recall_tau = tau;
      if (p >= cfg.p_min) best_both = tau;
    }
    if (r > fallback_recall) {
      fallback_recall = r;
      fallback_tau = tau;
    }
  }
  if (best_both >= 0.0) {
    res.calibrated_threshold = best_both;
  } else if (best_recall_tau >= 0.0) {
    res.calibrated_threshold = best_recall_tau;
    res.precision_feasible = false;
  } else {
    res.calibrated_threshold = fallback_tau;
    res.recall_feasible = false;
    res.precision_feasible = false;
  }
  double psum = 0.0, rsum = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto pr = precision_recall(preds[i], gts[i], res.calibrated_threshold);
    psum += pr.precision;
    rsum += pr.recall;
  }
  res.achieved_precision = psum / static_cast<double>(preds.size());
  res.achieved_recall = rsum / static_cast<double>(preds.size());
}

}  // namespace detail

// Trains only the level-`cfg.level` sub-network on fresh stream batches, then
// calibrates its threshold on a fresh validation draw. Coarser levels must
// already be trained; their gradients are asserted zero every step.
inline StageResult train_stage(CascadeModel& model, const DataStream& stream,
                               const StageConfig& cfg, Rng rng) {
  cfg.validate();
  if (cfg.level < 0 || cfg.level >= model.config.levels) {
    throw ConfigError("stage level outside the model");
  }
  std::vector<Tensor> params = parameters(model, cfg.level);
  std::vector<Tensor> frozen;
  for (int l = 0; l < cfg.level; ++l) {
    for (auto& t : parameters(model, l)) frozen.push_back(t);
  }
  // Earlier stages leave their last gradients behind; clear them so the
  // per-step zero-gradient assertion checks this stage, not stale state.
  for (auto& t : frozen) {
    if (t.has_grad()) t.zero_grad();
  }
  AdamConfig acfg;
  acfg.lr = cfg.learning_rate;
  Adam opt(params, acfg);

  StageResult res;
  res.level = cfg.level;
  for (int step = 0; step < cfg.steps; ++step) {
    if (cfg.cosine_lr) {
      // Half-cosine decay to ~0; the class-balanced loss is spiky and the
      // late steps only settle once the step size shrinks.
      const double f = 0.5 * (1.0 + std::cos(std::numbers::pi * step / cfg.steps));
      opt.set_lr(static_cast<float>(cfg.learning_rate * f));
    }
    Rng step_rng = rng.split(static_cast<std::uint64_t>(step));
    std::vector<Image> images;
    std::vector<BinaryMask> gts;
    for (int j = 0; j < cfg.batch_size; ++j) {
      TrainSample s = stream(step_rng);
      images.push_back(std::move(s.image));
      gts.push_back(std::move(s.mask));
    }
    Tensor loss = stage_loss(model, images, gts, cfg.level, &res.alpha_clamp_events);
    opt.zero_grad();
    loss.backward();
    for (const auto& t : frozen) {
      if (!t.has_grad()) continue;
      for (const float g : t.grad()) {
        if (g != 0.0f) throw ContractViolation("frozen coarse level received a gradient");
      }
    }
    opt.step();
    res.loss_curve.push_back(static_cast<double>(loss.values()[0]));
  }

  Rng val_rng = rng.split(0x76616c69ull);  // distinct stream for validation draws
  std::vector<SoftMask> preds;
  std::vector<BinaryMask> gts;
  for (int i = 0; i < cfg.validation_samples; ++i) {
    TrainSample s = stream(val_rng);
    preds.push_back(detail::partial_soft_mask(model, s.image, cfg.level));
    gts.push_back(std::move(s.mask));
  }
  detail::calibrate_stage(preds, gts, cfg, res);
  return res;
}

namespace detail {

inline void write_stage_artifacts(const std::string& run_dir,
                                  const std::vector<StageResult>& results,
                                  const CascadeModel& model, std::uint64_t seed,
                                  const CheckpointMeta& prior) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(run_dir, ec);
  if (ec) throw IoError("cannot create run dir " + run_dir + ": " + ec.message());

  // Fold in prior stages so resumed runs emit the same checkpoints a full
  // run would.
  CheckpointMeta meta = prior;
  meta.seed = seed;
  for (const auto& r : results) {
    meta.step += static_cast<std::int64_t>(r.loss_curve.size());
    meta.calibrated_thresholds.push_back(r.calibrated_threshold);
  }
  save_checkpoint(
      (fs::path(run_dir) / ("stage" + std::to_string(results.back().level) + ".ckpt")).string(),
      model, meta);
  save_checkpoint((fs::path(run_dir) / "model.ckpt").string(), model, meta);

  std::ofstream curve(fs::path(run_dir) / "loss_curve.csv");
  if (!curve) throw IoError("cannot write loss_curve.csv");
  curve << "stage,step,loss\n";
  for (const auto& r : results) {
    for (std::size_t i = 0; i < r.loss_curve.size(); ++i) {
      curve << r.level << ',' << i << ',' << r.loss_curve[i] << "\n";
    }
  }

  nlohmann::json calib = nlohmann::json::array();
  for (const auto& r : results) {
    nlohmann::json j;
    j["level"] = r.level;
    j["threshold"] = r.calibrated_threshold;
    j["precision"] = r.achieved_precision;
    j["recall"] = r.achieved_recall;
    j["recall_feasible"] = r.recall_feasible;
    j["precision_feasible"] = r.precision_feasible;
    j["alpha_clamp_events"] = r.alpha_clamp_events;
    calib.push_back(std::move(j));
  }
  std::ofstream cj(fs::path(run_dir) / "calibration.json");
  if (!cj) throw IoError("cannot write calibration.json");
  cj << calib.dump(2) << "\n";
}

}  // namespace detail

// Picks up a run at `first_stage` with the weights and metadata of an
// earlier checkpoint already applied to the model. Stage RNG streams are
// keyed by absolute stage index, so a resumed stage consumes exactly the
// randomness the full run would have.
struct ResumeState {
  int first_stage = 0;
  CheckpointMeta prior;
};

// Sequential coarse-to-fine schedule. When run_dir is nonempty, emits a
// checkpoint after every stage plus loss_curve.csv and calibration.json.
inline std::vector<StageResult> train_cascade(CascadeModel& model, const DataStream& stream,
                                              const std::vector<StageConfig>& stage_configs,
                                              Rng rng, const std::string& run_dir = "",
                                              std::uint64_t seed = 0,
                                              const ResumeState& resume = {}) {
  if (static_cast<int>(stage_configs.size()) != model.config.levels) {
    throw ConfigError("stage config count must equal model levels");
  }
  for (int i = 0; i < model.config.levels; ++i) {
    if (stage_configs[static_cast<std::size_t>(i)].level != i) {
      throw ConfigError("stage configs must be ordered level 0..L-1");
    }
  }
  if (resume.first_stage < 0 || resume.first_stage >= model.config.levels) {
    throw ConfigError("resume stage outside the model's levels");
  }
  if (static_cast<int>(resume.prior.calibrated_thresholds.size()) != resume.first_stage) {
    throw ConfigError("resume metadata must carry one threshold per completed stage");
  }
  std::vector<StageResult> results;
  for (int i = resume.first_stage; i < model.config.levels; ++i) {
    results.push_back(train_stage(model, stream, stage_configs[static_cast<std::size_t>(i)],
                                  rng.split(static_cast<std::uint64_t>(i))));
    if (!run_dir.empty()) {
      detail::write_stage_artifacts(run_dir, results, model, seed, resume.prior);
    }
  }
  return results;
}

struct JointConfig {
  int steps = 1500;
  int batch_size = 8;
  float learning_rate = 1e-3f;
  bool cosine_lr = true;

  void validate() const {
    if (steps < 1) throw ConfigError("joint steps must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(learning_rate > 0.0f)) throw ConfigError("learning_rate must be > 0");
  }
};

// Ablation baseline: every level optimized simultaneously with per-level
// supervision (balanced BCE of M_l against the area-averaged ground truth at
// the level's resolution), mean over levels.
inline std::vector<double> train_joint(CascadeModel& model, const DataStream& stream,
                                       const JointConfig& cfg, Rng rng) {
  cfg.validate();
  std::vector<Tensor> params = parameters(model);
  AdamConfig acfg;
  acfg.lr = cfg.learning_rate;
  Adam opt(params, acfg);
  const int levels = model.config.levels;

  std::vector<double> curve;
  for (int step = 0; step < cfg.steps; ++step) {
    if (cfg.cosine_lr) {
      const double f = 0.5 * (1.0 + std::cos(std::numbers::pi * step / cfg.steps));
      opt.set_lr(static_cast<float>(cfg.learning_rate * f));
    }
    Rng step_rng = rng.split(static_cast<std::uint64_t>(step));
    std::vector<Image> images;
    std::vector<BinaryMask> gts;
    for (int j = 0; j < cfg.batch_size; ++j) {
      TrainSample s = stream(step_rng);
      images.push_back(std::move(s.image));
      gts.push_back(std::move(s.mask));
    }
    std::vector<ScalePyramid> pyramids;
    for (const auto& im : images) {
      pyramids.push_back(build_pyramid(im, levels, model.config.sigma_step));
    }
    const PyramidBatch batch = make_pyramid_batch(pyramids, levels);
    CascadeOutput out = forward(model, batch, levels - 1, ForwardMode::kJoint);

    Tensor total;
    for (int l = 0; l < levels; ++l) {
      const Tensor& m = out.level_masks[static_cast<std::size_t>(l)];
      const int lh = m.shape()[2], lw = m.shape()[3];
      std::vector<BinaryMask> level_gts;
      for (const auto& gt : gts) level_gts.push_back(downsample_gt(gt, lh, lw));
      auto [pos_w, neg_w] = detail::balance_weights(level_gts, nullptr);
      Tensor loss =
          weighted_bce_per_sample(m, detail::masks_to_tensor(level_gts), pos_w, neg_w);
      total = l == 0 ? loss : add(total, loss);
    }
    total = scale(total, 1.0f / static_cast<float>(levels));
    opt.zero_grad();
    total.backward();
    opt.step();
    curve.push_back(static_cast<double>(total.values()[0]));
  }
  return curve;
}

}  // namespace patseg
