#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "patseg/checkpoint.hpp"
#include "patseg/gradcheck.hpp"
#include "patseg/metrics.hpp"
#include "patseg/synth.hpp"
#include "patseg/trainer.hpp"

namespace patseg {

inline constexpr const char* kCliUsage =
    "usage: patseg <synth|train|eval|infer|gradcheck> [--config PATH] [--out PATH]"
    " [--seed INT] [--jobs INT] [--deterministic]";

struct CliOptions {
  std::string command;
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  int jobs = 1;
  bool deterministic = false;
};

namespace detail {

// Unknown keys are rejected everywhere: a typoed hyperparameter must fail
// loudly, not silently fall back to a default.
inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                       const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    bool known = false;
    for (const char* a : allowed) {
      if (key == a) {
        known = true;
        break;
      }
    }
    if (!known) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

inline nlohmann::json load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  try {
    nlohmann::json j;
    in >> j;
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
}

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("bad value for '") + key + "'");
  }
}

inline std::vector<PatternCategory> parse_categories(const nlohmann::json& j) {
  std::vector<std::string> names =
      get_or<std::vector<std::string>>(j, "categories", {"sticker", "line", "text", "logo"});
  if (names.empty()) throw ConfigError("categories must not be empty");
  std::vector<PatternCategory> out;
  for (const auto& n : names) out.push_back(category_from_name(n));
  return out;
}

inline std::vector<SizeLevel> parse_sizes(const nlohmann::json& j) {
  std::vector<std::string> names =
      get_or<std::vector<std::string>>(j, "sizes", {"small", "medium", "large"});
  if (names.empty()) throw ConfigError("sizes must not be empty");
  std::vector<SizeLevel> out;
  for (const auto& n : names) out.push_back(size_level_from_name(n));
  return out;
}

// Bases come from a PNG directory when given, otherwise they are procedural
// backgrounds derived from the seed.
inline std::vector<Image> load_bases(const nlohmann::json& j, int height, int width,
                                     std::uint64_t seed) {
  namespace fs = std::filesystem;
  std::vector<Image> bases;
  if (j.contains("base_dir")) {
    const std::string dir = j.at("base_dir").get<std::string>();
    if (!fs::is_directory(dir)) throw IoError("base_dir is not a directory: " + dir);
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.path().extension() == ".png" &&
          entry.path().filename().string().find("_mask") == std::string::npos) {
        files.push_back(entry.path().string());
      }
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) bases.push_back(resize_image(read_png(f), height, width));
    if (bases.empty()) throw IoError("base_dir has no PNG images: " + dir);
  } else {
    const int count = get_or<int>(j, "base_count", 8);
    if (count < 1) throw ConfigError("base_count must be >= 1");
    const Rng base_rng = Rng(seed).split(0xBA5Eull);
    for (int i = 0; i < count; ++i) {
      Rng r = base_rng.split(static_cast<std::uint64_t>(i));
      bases.push_back(random_background(r, height, width));
    }
  }
  return bases;
}

inline void write_run_manifest(const std::string& out_dir, const std::string& command,
                               const nlohmann::json& resolved, std::uint64_t seed, int jobs,
                               bool deterministic, const std::vector<std::string>& artifacts,
                               const std::vector<std::string>& warnings) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());
  nlohmann::json m;
  m["command"] = command;
  m["seed"] = seed;
  m["jobs"] = jobs;
  m["deterministic"] = deterministic;
  m["config"] = resolved;
  m["artifacts"] = artifacts;
  m["warnings"] = warnings;
  m["status"] = warnings.empty() ? "ok" : "warning";
  std::ofstream out(fs::path(out_dir) / "run_manifest.json");
  if (!out) throw IoError("cannot write run_manifest.json in " + out_dir);
  out << m.dump(2) << "\n";
}

inline StageConfig parse_stage_config(const nlohmann::json& j, int level) {
  check_keys(j,
             {"steps", "batch_size", "learning_rate", "cosine_lr", "p_min", "r_min",
              "threshold_grid", "validation_samples"},
             "stages[" + std::to_string(level) + "]");
  StageConfig sc;
  sc.level = level;
  sc.steps = get_or<int>(j, "steps", sc.steps);
  sc.batch_size = get_or<int>(j, "batch_size", sc.batch_size);
  sc.learning_rate = get_or<float>(j, "learning_rate", sc.learning_rate);
  sc.cosine_lr = get_or<bool>(j, "cosine_lr", sc.cosine_lr);
  sc.p_min = get_or<double>(j, "p_min", sc.p_min);
  sc.r_min = get_or<double>(j, "r_min", sc.r_min);
  sc.threshold_grid = get_or<double>(j, "threshold_grid", sc.threshold_grid);
  sc.validation_samples = get_or<int>(j, "validation_samples", sc.validation_samples);
  sc.validate();
  return sc;
}

inline nlohmann::json stage_config_to_json(const StageConfig& sc) {
  nlohmann::json j;
  j["steps"] = sc.steps;
  j["batch_size"] = sc.batch_size;
  j["learning_rate"] = sc.learning_rate;
  j["cosine_lr"] = sc.cosine_lr;
  j["p_min"] = sc.p_min;
  j["r_min"] = sc.r_min;
  j["threshold_grid"] = sc.threshold_grid;
  j["validation_samples"] = sc.validation_samples;
  return j;
}

// Mixture stream per the data section: cells are the category x size cross
// product, weighted per size level, optionally composited onto stock bases.
inline DataStream make_train_stream(const nlohmann::json& data, int height, int width,
                                    std::uint64_t seed, nlohmann::json& resolved) {
  check_keys(data,
             {"height", "width", "base_dir", "categories", "sizes", "apply_jpeg",
              "attribute_adjustment", "size_weights"},
             "data");
  const auto categories = parse_categories(data);
  const auto sizes = parse_sizes(data);
  const bool apply_jpeg = get_or<bool>(data, "apply_jpeg", true);
  const bool attribute_adjustment = get_or<bool>(data, "attribute_adjustment", true);

  std::vector<double> size_weights =
      get_or<std::vector<double>>(data, "size_weights", {});
  if (size_weights.empty()) {
    size_weights = sizes.size() == 3 ? std::vector<double>{0.5, 0.3, 0.2}
                                     : std::vector<double>(sizes.size(), 1.0);
  }
  if (size_weights.size() != sizes.size()) {
    throw ConfigError("size_weights length must match sizes");
  }

  std::vector<SynthesisConfig> cells;
  std::vector<double> weights;
  for (const auto cat : categories) {
    for (std::size_t si = 0; si < sizes.size(); ++si) {
      SynthesisConfig cfg = default_synthesis_config(cat, sizes[si]);
      cfg.apply_jpeg = apply_jpeg;
      cfg.attribute_adjustment = attribute_adjustment;
      cells.push_back(cfg);
      weights.push_back(size_weights[si]);
    }
  }

  resolved["height"] = height;
  resolved["width"] = width;
  for (const auto cat : categories) resolved["categories"].push_back(category_name(cat));
  for (const auto s : sizes) resolved["sizes"].push_back(size_level_name(s));
  resolved["apply_jpeg"] = apply_jpeg;
  resolved["attribute_adjustment"] = attribute_adjustment;
  resolved["size_weights"] = size_weights;

  BaseProvider provider;
  if (data.contains("base_dir")) {
    resolved["base_dir"] = data.at("base_dir");
    auto bases = std::make_shared<std::vector<Image>>(load_bases(data, height, width, seed));
    provider = [bases](Rng& rng, int, int) {
      return (*bases)[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<int>(bases->size()) - 1))];
    };
  }
  return make_synth_stream(height, width, std::move(cells), std::move(weights),
                           std::move(provider));
}

inline int cmd_synth(const CliOptions& opt) {
  const nlohmann::json cfg = load_config(opt.config_path);
  check_keys(cfg,
             {"seed", "height", "width", "samples_per_cell", "base_dir", "base_count",
              "categories", "sizes", "jpeg_quality", "apply_jpeg", "size_range",
              "attribute_adjustment"},
             "synth config");
  const std::uint64_t seed = opt.seed.value_or(get_or<std::uint64_t>(cfg, "seed", 0));
  const int height = get_or<int>(cfg, "height", 64);
  const int width = get_or<int>(cfg, "width", 64);
  if (height < 8 || width < 8) throw ConfigError("height/width must be >= 8");
  const int per_cell = get_or<int>(cfg, "samples_per_cell", 2);
  if (per_cell < 1) throw ConfigError("samples_per_cell must be >= 1");

  TestSetSpec spec;
  spec.seed = seed;
  spec.apply_jpeg = get_or<bool>(cfg, "apply_jpeg", true);
  spec.attribute_adjustment = get_or<bool>(cfg, "attribute_adjustment", false);
  spec.jobs = opt.deterministic ? 1 : opt.jobs;
  if (cfg.contains("jpeg_quality")) {
    const auto q = cfg.at("jpeg_quality").get<std::vector<int>>();
    if (q.size() != 2) throw ConfigError("jpeg_quality must be [lo, hi]");
    spec.jpeg_quality = {q[0], q[1]};
  }
  if (cfg.contains("size_range")) {
    const auto r = cfg.at("size_range").get<std::vector<double>>();
    if (r.size() != 2) throw ConfigError("size_range must be [lo, hi]");
    spec.size_range = {r[0], r[1]};
  }
  for (const auto cat : parse_categories(cfg)) {
    for (const auto size : parse_sizes(cfg)) {
      spec.cells.push_back({cat, size, per_cell});
    }
  }

  const std::vector<Image> bases = load_bases(cfg, height, width, seed);
  build_test_set(bases, opt.out_dir, spec);

  nlohmann::json resolved = cfg;
  resolved["seed"] = seed;
  resolved["height"] = height;
  resolved["width"] = width;
  resolved["samples_per_cell"] = per_cell;
  write_run_manifest(opt.out_dir, "synth", resolved, seed, spec.jobs, opt.deterministic,
                     {"manifest.json"}, {});
  return 0;
}

inline int cmd_train(const CliOptions& opt) {
  const nlohmann::json cfg = load_config(opt.config_path);
  check_keys(cfg, {"seed", "model", "data", "stages", "resume_checkpoint"}, "train config");
  if (!cfg.contains("model")) throw ConfigError("train config needs a 'model' section");
  const std::uint64_t seed = opt.seed.value_or(get_or<std::uint64_t>(cfg, "seed", 0));
  const CascadeConfig model_cfg = cascade_config_from_json(cfg.at("model"));

  CascadeModel model;
  ResumeState resume;
  if (cfg.contains("resume_checkpoint")) {
    const std::string ckpt_path = cfg.at("resume_checkpoint").get<std::string>();
    LoadedCheckpoint loaded = load_checkpoint(ckpt_path);
    if (cascade_config_to_json(loaded.model.config) != cascade_config_to_json(model_cfg)) {
      throw ConfigError("model config does not match checkpoint " + ckpt_path);
    }
    resume.first_stage = static_cast<int>(loaded.meta.calibrated_thresholds.size());
    if (resume.first_stage >= model_cfg.levels) {
      throw ConfigError("checkpoint already covers every stage; nothing to resume");
    }
    resume.prior = loaded.meta;
    model = std::move(loaded.model);
  } else {
    Rng init_rng = Rng(seed).split(0x1217ull);
    model = make_cascade(model_cfg, init_rng);
  }

  const nlohmann::json data = cfg.contains("data") ? cfg.at("data") : nlohmann::json::object();
  const int height = get_or<int>(data, "height", model_cfg.input_resolution);
  const int width = get_or<int>(data, "width", model_cfg.input_resolution);
  nlohmann::json resolved_data;
  const DataStream stream = make_train_stream(data, height, width, seed, resolved_data);

  std::vector<StageConfig> stages;
  if (cfg.contains("stages")) {
    const auto& arr = cfg.at("stages");
    if (!arr.is_array() || static_cast<int>(arr.size()) != model_cfg.levels) {
      throw ConfigError("stages must be an array with one entry per level");
    }
    for (int i = 0; i < model_cfg.levels; ++i) {
      stages.push_back(parse_stage_config(arr[static_cast<std::size_t>(i)], i));
    }
  } else {
    for (int i = 0; i < model_cfg.levels; ++i) {
      StageConfig sc;
      sc.level = i;
      stages.push_back(sc);
    }
  }

  const auto results =
      train_cascade(model, stream, stages, Rng(seed), opt.out_dir, seed, resume);

  std::vector<std::string> warnings;
  for (const auto& r : results) {
    if (!r.recall_feasible) {
      warnings.push_back("stage " + std::to_string(r.level) +
                         ": no threshold met the recall floor");
    } else if (!r.precision_feasible) {
      warnings.push_back("stage " + std::to_string(r.level) +
                         ": recall floor met but precision floor was infeasible");
    }
  }

  nlohmann::json resolved;
  resolved["seed"] = seed;
  resolved["model"] = cascade_config_to_json(model_cfg);
  resolved["data"] = resolved_data;
  resolved["stages"] = nlohmann::json::array();
  for (const auto& sc : stages) resolved["stages"].push_back(stage_config_to_json(sc));
  if (cfg.contains("resume_checkpoint")) {
    resolved["resume_checkpoint"] = cfg.at("resume_checkpoint");
  }
  std::vector<std::string> artifacts{"model.ckpt", "loss_curve.csv", "calibration.json"};
  for (const auto& r : results) {
    artifacts.push_back("stage" + std::to_string(r.level) + ".ckpt");
  }
  write_run_manifest(opt.out_dir, "train", resolved, seed, 1, opt.deterministic, artifacts,
                     warnings);
  return 0;
}

inline int cmd_eval(const CliOptions& opt) {
  const nlohmann::json cfg = load_config(opt.config_path);
  check_keys(cfg, {"seed", "checkpoint", "test_dir", "grid_step", "miou_threshold", "model"},
             "eval config");
  if (!cfg.contains("checkpoint") || !cfg.contains("test_dir")) {
    throw ConfigError("eval config needs 'checkpoint' and 'test_dir'");
  }
  const std::uint64_t seed = opt.seed.value_or(get_or<std::uint64_t>(cfg, "seed", 0));
  const LoadedCheckpoint loaded = load_checkpoint(cfg.at("checkpoint").get<std::string>());
  if (cfg.contains("model") &&
      cascade_config_to_json(loaded.model.config) != cascade_config_to_json(
                                                         cascade_config_from_json(cfg.at("model")))) {
    throw ConfigError("model config does not match the checkpoint");
  }
  const double grid_step = get_or<double>(cfg, "grid_step", 0.01);
  double miou_tau = 0.5;
  if (!loaded.meta.calibrated_thresholds.empty()) {
    miou_tau = loaded.meta.calibrated_thresholds.back();
  }
  miou_tau = get_or<double>(cfg, "miou_threshold", miou_tau);

  const int jobs = opt.deterministic ? 1 : opt.jobs;
  const EvalReport report = evaluate_dataset(
      loaded.model, cfg.at("test_dir").get<std::string>(), grid_step, miou_tau, jobs);
  write_eval_report(report, opt.out_dir);

  nlohmann::json resolved = cfg;
  resolved["seed"] = seed;
  resolved["grid_step"] = grid_step;
  resolved["miou_threshold"] = miou_tau;
  write_run_manifest(opt.out_dir, "eval", resolved, seed, jobs, opt.deterministic,
                     {"report.json", "pr_curves.csv"}, {});
  return 0;
}

inline int cmd_infer(const CliOptions& opt) {
  namespace fs = std::filesystem;
  const nlohmann::json cfg = load_config(opt.config_path);
  check_keys(cfg, {"seed", "checkpoint", "image", "threshold"}, "infer config");
  if (!cfg.contains("checkpoint") || !cfg.contains("image")) {
    throw ConfigError("infer config needs 'checkpoint' and 'image'");
  }
  const std::uint64_t seed = opt.seed.value_or(get_or<std::uint64_t>(cfg, "seed", 0));
  const LoadedCheckpoint loaded = load_checkpoint(cfg.at("checkpoint").get<std::string>());
  double tau = 0.5;
  if (!loaded.meta.calibrated_thresholds.empty()) {
    tau = loaded.meta.calibrated_thresholds.back();
  }
  tau = get_or<double>(cfg, "threshold", tau);
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("threshold must be in (0,1)");

  const Image im = read_png(cfg.at("image").get<std::string>());
  const SoftMask soft = SoftMask::from_tensor(predict_soft_mask(loaded.model, im));

  std::error_code ec;
  fs::create_directories(opt.out_dir, ec);
  if (ec) throw IoError("cannot create " + opt.out_dir + ": " + ec.message());
  Image soft_img = Image::create(soft.height, soft.width, 1);
  std::copy(soft.data.begin(), soft.data.end(), soft_img.pix.begin());
  write_png((fs::path(opt.out_dir) / "soft_mask.png").string(), soft_img);
  write_mask_png((fs::path(opt.out_dir) / "mask.png").string(), binarize(soft, tau));

  nlohmann::json resolved = cfg;
  resolved["seed"] = seed;
  resolved["threshold"] = tau;
  write_run_manifest(opt.out_dir, "infer", resolved, seed, 1, opt.deterministic,
                     {"soft_mask.png", "mask.png"}, {});
  return 0;
}

inline int cmd_gradcheck(const CliOptions& opt, std::ostream& out) {
  const std::uint64_t seed = opt.seed.value_or(20240);
  const auto reports = run_standard_gradchecks(seed);
  bool all_pass = true;
  nlohmann::json results = nlohmann::json::array();
  for (const auto& r : reports) {
    out << (r.pass ? "pass" : "FAIL") << "  " << r.name << "  max_rel_err=" << r.max_rel_err
        << "\n";
    all_pass = all_pass && r.pass;
    nlohmann::json jr;
    jr["name"] = r.name;
    jr["max_rel_err"] = r.max_rel_err;
    jr["pass"] = r.pass;
    results.push_back(std::move(jr));
  }
  if (!opt.out_dir.empty()) {
    nlohmann::json resolved;
    resolved["seed"] = seed;
    resolved["results"] = std::move(results);
    write_run_manifest(opt.out_dir, "gradcheck", resolved, seed, 1, opt.deterministic, {},
                       all_pass ? std::vector<std::string>{}
                                : std::vector<std::string>{"finite-difference check failed"});
  }
  return all_pass ? 0 : 3;
}

}  // namespace detail

// In-process entry point; the binary's main() forwards here. Exit codes:
// 0 success, 1 usage or config problem, 2 I/O failure, 3 numerical failure.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CliOptions opt;
  if (args.empty()) {
    err << kCliUsage << "\n";
    return 1;
  }
  opt.command = args[0];
  for (std::size_t i = 1; i < args.size(); ++i) {
    const std::string& a = args[i];
    const auto need_value = [&]() -> const std::string& {
      if (i + 1 >= args.size()) throw ConfigError(a + " needs a value");
      return args[++i];
    };
    try {
      if (a == "--config") {
        opt.config_path = need_value();
      } else if (a == "--out") {
        opt.out_dir = need_value();
      } else if (a == "--seed") {
        opt.seed = std::stoull(need_value());
      } else if (a == "--jobs") {
        opt.jobs = std::stoi(need_value());
        if (opt.jobs < 1) throw ConfigError("--jobs must be >= 1");
      } else if (a == "--deterministic") {
        opt.deterministic = true;
      } else {
        err << "unknown flag " << a << "\n" << kCliUsage << "\n";
        return 1;
      }
    } catch (const std::invalid_argument& e) {
      err << "config error: " << e.what() << "\n";
      return 1;
    } catch (const std::out_of_range&) {
      err << "config error: value out of range for " << a << "\n";
      return 1;
    }
  }

  const bool known = opt.command == "synth" || opt.command == "train" ||
                     opt.command == "eval" || opt.command == "infer" ||
                     opt.command == "gradcheck";
  if (!known) {
    err << "unknown command '" << opt.command << "'\n" << kCliUsage << "\n";
    return 1;
  }
  const bool needs_config = opt.command != "gradcheck";
  if (needs_config && opt.config_path.empty()) {
    err << "config error: " << opt.command << " requires --config\n";
    return 1;
  }
  if (needs_config && opt.out_dir.empty()) {
    err << "config error: " << opt.command << " requires --out\n";
    return 1;
  }

  try {
    if (opt.command == "synth") return detail::cmd_synth(opt);
    if (opt.command == "train") return detail::cmd_train(opt);
    if (opt.command == "eval") return detail::cmd_eval(opt);
    if (opt.command == "infer") return detail::cmd_infer(opt);
    return detail::cmd_gradcheck(opt, out);
  } catch (const std::invalid_argument& e) {
    err << "config error: " << e.what() << "\n";
    return 1;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "numerical error: " << e.what() << "\n";
    return 3;
  }
}

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args, out, err);
}

}  // namespace patseg
