#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "patseg/cascade.hpp"
#include "patseg/image.hpp"

namespace patseg {

// A prediction in [0,1] aligned with a ground-truth mask.
struct SoftMask {
  int height = 0;
  int width = 0;
  std::vector<float> data;

  static SoftMask create(int h, int w, float fill = 0.0f) {
    if (h < 1 || w < 1) throw SizeError("SoftMask dims must be positive");
    SoftMask m;
    m.height = h;
    m.width = w;
    m.data.assign(static_cast<std::size_t>(h) * w, fill);
    return m;
  }

  // Accepts the [1,1,H,W] cascade output.
  static SoftMask from_tensor(const Tensor& t) {
    const Shape& s = t.shape();
    if (s.size() != 4 || s[0] != 1 || s[1] != 1) {
      throw DimensionError("SoftMask::from_tensor expects a [1,1,H,W] tensor");
    }
    SoftMask m;
    m.height = s[2];
    m.width = s[3];
    m.data = t.values();
    return m;
  }

  float& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  float at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
};

inline double iou(const BinaryMask& a, const BinaryMask& b) {
  if (a.height != b.height || a.width != b.width) {
    throw DimensionError("iou mask dims differ");
  }
  std::int64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const bool pa = a.data[i] != 0, pb = b.data[i] != 0;
    inter += pa && pb;
    uni += pa || pb;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline double mae(const SoftMask& pred, const BinaryMask& gt) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw DimensionError("mae dims differ");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    sum += std::abs(static_cast<double>(pred.data[i]) - (gt.data[i] != 0 ? 1.0 : 0.0));
  }
  return sum / static_cast<double>(pred.data.size());
}

inline BinaryMask binarize(const SoftMask& pred, double tau) {
  BinaryMask m = BinaryMask::create(pred.height, pred.width);
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    m.data[i] = pred.data[i] >= tau ? 1 : 0;
  }
  return m;
}

namespace detail {

// Empty-set conventions: precision 1 with no predicted positives, recall 1
// with empty ground truth. Keeps all-negative samples out of the averages'
// way.
struct PrPair {
  double precision;
  double recall;
};

inline PrPair precision_recall(const SoftMask& pred, const BinaryMask& gt, double tau) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw DimensionError("precision_recall dims differ");
  }
  std::int64_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const bool p = pred.data[i] >= tau;
    const bool y = gt.data[i] != 0;
    tp += p && y;
    fp += p && !y;
    fn += !p && y;
  }
  PrPair out;
  out.precision = tp + fp == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  out.recall = tp + fn == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
  return out;
}

}  // namespace detail

inline std::vector<double> threshold_grid(double step) {
  if (!(step > 0.0 && step <= 1.0)) throw ConfigError("threshold grid step must be in (0,1]");
  std::vector<double> taus;
  for (int k = 0;; ++k) {
    const double tau = k * step;
    if (tau >= 1.0 - 1e-12) break;
    taus.push_back(tau);
  }
  taus.push_back(1.0);
  return taus;
}

struct PRPoint {
  double tau;
  double precision;
  double recall;
};

inline std::vector<PRPoint> pr_curve(const std::vector<SoftMask>& preds,
                                     const std::vector<BinaryMask>& gts, double grid_step) {
  if (preds.empty() || preds.size() != gts.size()) {
    throw DimensionError("pr_curve needs nonempty aligned pred/gt lists");
  }
  std::vector<PRPoint> curve;
  for (const double tau : threshold_grid(grid_step)) {
    double psum = 0.0, rsum = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const auto pr = detail::precision_recall(preds[i], gts[i], tau);
      psum += pr.precision;
      rsum += pr.recall;
    }
    curve.push_back(
        {tau, psum / static_cast<double>(preds.size()), rsum / static_cast<double>(preds.size())});
  }
  return curve;
}

inline double f_beta(double precision, double recall, double beta) {
  const double b2 = beta * beta;
  const double denom = b2 * precision + recall;
  if (denom == 0.0) return 0.0;
  return (1.0 + b2) * precision * recall / denom;
}

struct FBetaResult {
  double value;
  double tau;
};

// Maximum of F_beta over the macro-averaged curve; smallest tau on ties.
inline FBetaResult max_f_beta(const std::vector<SoftMask>& preds,
                              const std::vector<BinaryMask>& gts, double beta,
                              double grid_step) {
  if (!(beta > 0.0)) throw ConfigError("beta must be > 0");
  FBetaResult best{-1.0, 0.0};
  for (const PRPoint& p : pr_curve(preds, gts, grid_step)) {
    const double f = f_beta(p.precision, p.recall, beta);
    if (f > best.value) best = {f, p.tau};
  }
  return best;
}

struct ThresholdSelection {
  double tau;
  double miou;
};

// tau maximizing mean IoU; smallest tau on ties.
inline ThresholdSelection select_miou_threshold(const std::vector<SoftMask>& preds,
                                                const std::vector<BinaryMask>& gts,
                                                double grid_step) {
  if (preds.empty() || preds.size() != gts.size()) {
    throw DimensionError("select_miou_threshold needs nonempty aligned lists");
  }
  ThresholdSelection best{0.0, -1.0};
  for (const double tau : threshold_grid(grid_step)) {
    double sum = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      sum += iou(binarize(preds[i], tau), gts[i]);
    }
    const double miou = sum / static_cast<double>(preds.size());
    if (miou > best.miou) best = {tau, miou};
  }
  return best;
}

struct CellMetrics {
  std::string category;
  std::string size;
  int samples = 0;
  double miou = 0.0;
  double mae = 0.0;
  FBetaResult f03{0.0, 0.0};
  FBetaResult f2{0.0, 0.0};
  std::vector<PRPoint> curve;
};

struct EvalReport {
  double miou_threshold = 0.5;
  double grid_step = 0.01;
  std::vector<CellMetrics> cells;
  CellMetrics overall;
};

namespace detail {

inline CellMetrics cell_metrics(const std::string& category, const std::string& size,
                                const std::vector<SoftMask>& preds,
                                const std::vector<BinaryMask>& gts, double miou_threshold,
                                double grid_step) {
  CellMetrics m;
  m.category = category;
  m.size = size;
  m.samples = static_cast<int>(preds.size());
  double iou_sum = 0.0, mae_sum = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    iou_sum += iou(binarize(preds[i], miou_threshold), gts[i]);
    mae_sum += mae(preds[i], gts[i]);
  }
  m.miou = iou_sum / static_cast<double>(preds.size());
  m.mae = mae_sum / static_cast<double>(preds.size());
  m.curve = pr_curve(preds, gts, grid_step);
  m.f03 = max_f_beta(preds, gts, 0.3, grid_step);
  m.f2 = max_f_beta(preds, gts, 2.0, grid_step);
  return m;
}

}  // namespace detail

inline nlohmann::json cell_metrics_to_json(const CellMetrics& m) {
  nlohmann::json j;
  j["category"] = m.category;
  j["size"] = m.size;
  j["samples"] = m.samples;
  j["miou"] = m.miou;
  j["mae"] = m.mae;
  j["max_f0.3"] = {{"value", m.f03.value}, {"tau", m.f03.tau}};
  j["max_f2"] = {{"value", m.f2.value}, {"tau", m.f2.tau}};
  return j;
}

inline nlohmann::json eval_report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["miou_threshold"] = r.miou_threshold;
  j["grid_step"] = r.grid_step;
  j["cells"] = nlohmann::json::array();
  for (const auto& c : r.cells) j["cells"].push_back(cell_metrics_to_json(c));
  j["overall"] = cell_metrics_to_json(r.overall);
  return j;
}

// Walks a synthgen-layout dataset (manifest.json with cells of image/mask
// pairs), predicts with the cascade, and aggregates metrics per cell plus an
// overall row. miou_threshold should come from validation (see
// select_miou_threshold); it is applied unchanged here. Samples are
// independent, so jobs > 1 splits inference across threads; results land in
// fixed slots and the metric reduction stays serial, keeping every byte of
// the report independent of the thread count.
inline EvalReport evaluate_dataset(const CascadeModel& model, const std::string& test_dir,
                                   double grid_step = 0.01, double miou_threshold = 0.5,
                                   int jobs = 1) {
  namespace fs = std::filesystem;
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
  const fs::path root(test_dir);
  std::ifstream in(root / "manifest.json");
  if (!in) throw IoError("cannot open manifest.json under " + test_dir);
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed manifest.json: ") + e.what());
  }
  if (!manifest.contains("cells") || !manifest.at("cells").is_array() ||
      manifest.at("cells").empty()) {
    throw IoError("manifest.json has no cells");
  }

  struct CellFiles {
    std::string category;
    std::string size;
    std::vector<std::pair<std::string, std::string>> pairs;
  };
  std::vector<CellFiles> cells;
  std::size_t total = 0;
  try {
    for (const auto& cell : manifest.at("cells")) {
      CellFiles cf;
      cf.category = cell.at("category").get<std::string>();
      cf.size = cell.at("size").get<std::string>();
      for (const auto& sample : cell.at("samples")) {
        cf.pairs.emplace_back((root / sample.at("image").get<std::string>()).string(),
                              (root / sample.at("mask").get<std::string>()).string());
      }
      if (cf.pairs.empty()) throw IoError("manifest cell with no samples: " + cf.category);
      total += cf.pairs.size();
      cells.push_back(std::move(cf));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed manifest.json: ") + e.what());
  }

  std::vector<std::vector<SoftMask>> preds(cells.size());
  std::vector<std::vector<BinaryMask>> gts(cells.size());
  for (std::size_t c = 0; c < cells.size(); ++c) {
    preds[c].resize(cells[c].pairs.size());
    gts[c].resize(cells[c].pairs.size());
  }
  const auto run_sample = [&](std::size_t c, std::size_t s) {
    const Image im = read_png(cells[c].pairs[s].first);
    gts[c][s] = read_mask_png(cells[c].pairs[s].second);
    preds[c][s] = SoftMask::from_tensor(predict_soft_mask(model, im));
  };
  if (jobs == 1) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      for (std::size_t s = 0; s < cells[c].pairs.size(); ++s) run_sample(c, s);
    }
  } else {
    std::vector<std::pair<std::size_t, std::size_t>> units;
    units.reserve(total);
    for (std::size_t c = 0; c < cells.size(); ++c) {
      for (std::size_t s = 0; s < cells[c].pairs.size(); ++s) units.emplace_back(c, s);
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::mutex fail_mutex;
    std::exception_ptr failure;
    for (int t = 0; t < jobs; ++t) {
      pool.emplace_back([&] {
        for (;;) {
          const std::size_t i = next.fetch_add(1);
          if (i >= units.size()) return;
          try {
            run_sample(units[i].first, units[i].second);
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

  EvalReport report;
  report.miou_threshold = miou_threshold;
  report.grid_step = grid_step;
  std::vector<SoftMask> all_preds;
  std::vector<BinaryMask> all_gts;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    report.cells.push_back(detail::cell_metrics(cells[c].category, cells[c].size, preds[c],
                                                gts[c], miou_threshold, grid_step));
    for (std::size_t s = 0; s < preds[c].size(); ++s) {
      all_preds.push_back(std::move(preds[c][s]));
      all_gts.push_back(std::move(gts[c][s]));
    }
  }
  report.overall =
      detail::cell_metrics("overall", "all", all_preds, all_gts, miou_threshold, grid_step);
  return report;
}

// report.json plus pr_curves.csv with per-point F values for plotting.
inline void write_eval_report(const EvalReport& report, const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());

  std::ofstream rj(fs::path(out_dir) / "report.json");
  if (!rj) throw IoError("cannot write report.json");
  rj << eval_report_to_json(report).dump(2) << "\n";

  std::ofstream csv(fs::path(out_dir) / "pr_curves.csv");
  if (!csv) throw IoError("cannot write pr_curves.csv");
  csv << "category,size,tau,precision,recall,f0.3,f2\n";
  const auto emit = [&csv](const CellMetrics& cell) {
    for (const PRPoint& p : cell.curve) {
      csv << cell.category << ',' << cell.size << ',' << p.tau << ',' << p.precision << ','
          << p.recall << ',' << f_beta(p.precision, p.recall, 0.3) << ','
          << f_beta(p.precision, p.recall, 2.0) << "\n";
    }
  };
  for (const auto& c : report.cells) emit(c);
  emit(report.overall);
}

}  // namespace patseg
