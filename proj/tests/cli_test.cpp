#include "patseg/cli.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace patseg {
namespace {

namespace fs = std::filesystem;

struct CliFixture : ::testing::Test {
  fs::path dir = fs::temp_directory_path() / "patseg_cli_test";
  std::ostringstream out, err;

  CliFixture() {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~CliFixture() override { fs::remove_all(dir); }

  fs::path write_config(const std::string& name, const nlohmann::json& j) {
    const fs::path p = dir / name;
    std::ofstream f(p);
    f << j.dump(2);
    return p;
  }

  int run(std::vector<std::string> args) {
    out.str("");
    err.str("");
    return run_cli(args, out, err);
  }

  // Byte-level digest of every regular file under root, keyed by relative
  // path, so reruns can be compared for exact equality.
  std::map<std::string, std::string> tree_bytes(const fs::path& root) {
    std::map<std::string, std::string> m;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
      if (!e.is_regular_file()) continue;
      std::ifstream f(e.path(), std::ios::binary);
      m[fs::relative(e.path(), root).string()] =
          std::string(std::istreambuf_iterator<char>(f), {});
    }
    return m;
  }
};

TEST_F(CliFixture, UsageErrors) {
  EXPECT_EQ(run({}), 1);
  EXPECT_EQ(run({"frobnicate"}), 1);
  EXPECT_NE(err.str().find("usage"), std::string::npos);
  EXPECT_EQ(run({"synth"}), 1);
  EXPECT_EQ(run({"synth", "--config", "x.json"}), 1);  // missing --out
  EXPECT_EQ(run({"synth", "--config", "x.json", "--out", "y", "--bogus"}), 1);
  EXPECT_EQ(run({"synth", "--config", "x.json", "--out", "y", "--seed"}), 1);
  EXPECT_EQ(run({"synth", "--config", "x.json", "--out", "y", "--jobs", "zero"}), 1);
}

TEST_F(CliFixture, SynthSmokeSetAndDeterminism) {
  const fs::path cfg = write_config("synth.json", {{"seed", 5},
                                                   {"height", 48},
                                                   {"width", 48},
                                                   {"samples_per_cell", 2}});
  const fs::path out_a = dir / "set_a";
  const fs::path out_b = dir / "set_b";
  ASSERT_EQ(run({"synth", "--config", cfg.string(), "--out", out_a.string(),
                 "--deterministic"}),
            0)
      << err.str();
  ASSERT_EQ(run({"synth", "--config", cfg.string(), "--out", out_b.string(),
                 "--deterministic"}),
            0);

  // 4 categories x 3 sizes x 2 samples -> 24 image/mask pairs.
  int pairs = 0;
  for (const auto& e : fs::recursive_directory_iterator(out_a)) {
    if (e.is_regular_file() && e.path().filename().string().find("_mask.png") !=
                                   std::string::npos) {
      ++pairs;
    }
  }
  EXPECT_EQ(pairs, 24);
  EXPECT_TRUE(fs::exists(out_a / "manifest.json"));
  EXPECT_TRUE(fs::exists(out_a / "run_manifest.json"));
  EXPECT_EQ(tree_bytes(out_a), tree_bytes(out_b));
}

TEST_F(CliFixture, SynthJobsMatchSerialBytes) {
  const fs::path cfg = write_config("synth_jobs.json", {{"seed", 9},
                                                        {"height", 48},
                                                        {"width", 48},
                                                        {"samples_per_cell", 2},
                                                        {"categories", {"sticker", "line"}}});
  const fs::path serial = dir / "serial";
  const fs::path threaded = dir / "threaded";
  ASSERT_EQ(run({"synth", "--config", cfg.string(), "--out", serial.string()}), 0)
      << err.str();
  ASSERT_EQ(run({"synth", "--config", cfg.string(), "--out", threaded.string(), "--jobs",
                 "3"}),
            0);
  auto a = tree_bytes(serial);
  auto b = tree_bytes(threaded);
  // run_manifest records the differing jobs value; everything else matches.
  a.erase("run_manifest.json");
  b.erase("run_manifest.json");
  EXPECT_EQ(a, b);
}

TEST_F(CliFixture, SynthRejectsBadConfigNamingField) {
  const fs::path cfg =
      write_config("bad_range.json", {{"size_range", {0.4, 0.1}}, {"samples_per_cell", 1}});
  EXPECT_EQ(run({"synth", "--config", cfg.string(), "--out", (dir / "x").string()}), 1);
  EXPECT_NE(err.str().find("size_range"), std::string::npos);

  const fs::path unknown = write_config("unknown.json", {{"smaples_per_cell", 2}});
  EXPECT_EQ(run({"synth", "--config", unknown.string(), "--out", (dir / "y").string()}), 1);
  EXPECT_NE(err.str().find("smaples_per_cell"), std::string::npos);

  EXPECT_EQ(run({"synth", "--config", (dir / "missing.json").string(), "--out",
                 (dir / "z").string()}),
            2);

  std::ofstream bad(dir / "garbage.json");
  bad << "{ not json";
  bad.close();
  EXPECT_EQ(run({"synth", "--config", (dir / "garbage.json").string(), "--out",
                 (dir / "w").string()}),
            1);
}

TEST_F(CliFixture, TrainEvalInferRoundTrip) {
  const nlohmann::json model = {{"levels", 2},
                                {"sigma_step", 1.4142135623730951},
                                {"channels", 4},
                                {"input_resolution", 24}};
  nlohmann::json stage = {{"steps", 3},
                          {"batch_size", 2},
                          {"validation_samples", 4},
                          {"threshold_grid", 0.1}};
  const fs::path train_cfg = write_config(
      "train.json",
      {{"seed", 11},
       {"model", model},
       {"data",
        {{"categories", {"line"}}, {"sizes", {"small"}}, {"apply_jpeg", false}}},
       {"stages", {stage, stage}}});
  const fs::path run_dir = dir / "run";
  ASSERT_EQ(run({"train", "--config", train_cfg.string(), "--out", run_dir.string()}), 0)
      << err.str();
  for (const char* rel :
       {"model.ckpt", "stage0.ckpt", "stage1.ckpt", "loss_curve.csv", "calibration.json",
        "run_manifest.json"}) {
    EXPECT_TRUE(fs::exists(run_dir / rel)) << rel;
  }

  const fs::path synth_cfg = write_config("testset.json", {{"seed", 21},
                                                           {"height", 24},
                                                           {"width", 24},
                                                           {"samples_per_cell", 2},
                                                           {"categories", {"line"}},
                                                           {"sizes", {"small"}},
                                                           {"apply_jpeg", false}});
  const fs::path test_dir = dir / "test_set";
  ASSERT_EQ(run({"synth", "--config", synth_cfg.string(), "--out", test_dir.string()}), 0)
      << err.str();

  const fs::path eval_cfg = write_config(
      "eval.json", {{"checkpoint", (run_dir / "model.ckpt").string()},
                    {"test_dir", test_dir.string()},
                    {"grid_step", 0.25},
                    {"model", model}});
  const fs::path eval_out = dir / "eval";
  ASSERT_EQ(run({"eval", "--config", eval_cfg.string(), "--out", eval_out.string()}), 0)
      << err.str();
  EXPECT_TRUE(fs::exists(eval_out / "report.json"));
  EXPECT_TRUE(fs::exists(eval_out / "pr_curves.csv"));
  std::ifstream rj(eval_out / "report.json");
  nlohmann::json report;
  rj >> report;
  EXPECT_EQ(report.at("cells").size(), 1u);
  EXPECT_EQ(report.at("overall").at("category"), "overall");

  // Config hash mismatch: eval with a different model section must refuse.
  nlohmann::json wrong_model = model;
  wrong_model["channels"] = 8;
  const fs::path bad_eval = write_config(
      "eval_bad.json", {{"checkpoint", (run_dir / "model.ckpt").string()},
                        {"test_dir", test_dir.string()},
                        {"model", wrong_model}});
  EXPECT_EQ(run({"eval", "--config", bad_eval.string(), "--out", (dir / "e2").string()}), 1);

  const fs::path infer_cfg = write_config(
      "infer.json", {{"checkpoint", (run_dir / "model.ckpt").string()},
                     {"image", (test_dir / "line/small/0.png").string()}});
  const fs::path infer_out = dir / "infer";
  ASSERT_EQ(run({"infer", "--config", infer_cfg.string(), "--out", infer_out.string()}), 0)
      << err.str();
  EXPECT_TRUE(fs::exists(infer_out / "soft_mask.png"));
  EXPECT_TRUE(fs::exists(infer_out / "mask.png"));
  const Image soft = read_png((infer_out / "soft_mask.png").string(), 1);
  EXPECT_EQ(soft.height, 24);
  EXPECT_EQ(soft.width, 24);

  // Missing checkpoint is an I/O failure.
  const fs::path gone = write_config(
      "infer_gone.json", {{"checkpoint", (dir / "gone.ckpt").string()},
                          {"image", (test_dir / "line/small/0.png").string()}});
  EXPECT_EQ(run({"infer", "--config", gone.string(), "--out", (dir / "i2").string()}), 2);
}

TEST_F(CliFixture, ResumeReproducesNextStageBitExact) {
  const nlohmann::json model = {{"levels", 2},
                                {"sigma_step", 1.4142135623730951},
                                {"channels", 4},
                                {"input_resolution", 24}};
  nlohmann::json stage = {{"steps", 3},
                          {"batch_size", 2},
                          {"validation_samples", 4},
                          {"threshold_grid", 0.1}};
  nlohmann::json base = {{"seed", 31},
                         {"model", model},
                         {"data",
                          {{"categories", {"line"}},
                           {"sizes", {"small"}},
                           {"apply_jpeg", false}}},
                         {"stages", {stage, stage}}};

  const fs::path full_cfg = write_config("full.json", base);
  const fs::path full_dir = dir / "full";
  ASSERT_EQ(run({"train", "--config", full_cfg.string(), "--out", full_dir.string()}), 0)
      << err.str();

  nlohmann::json resumed = base;
  resumed["resume_checkpoint"] = (full_dir / "stage0.ckpt").string();
  const fs::path resume_cfg = write_config("resume.json", resumed);
  const fs::path resume_dir = dir / "resumed";
  ASSERT_EQ(run({"train", "--config", resume_cfg.string(), "--out", resume_dir.string()}), 0)
      << err.str();

  const auto slurp = [](const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), {});
  };
  EXPECT_EQ(slurp(full_dir / "stage1.ckpt"), slurp(resume_dir / "stage1.ckpt"));
  EXPECT_EQ(slurp(full_dir / "model.ckpt"), slurp(resume_dir / "model.ckpt"));

  // Resuming a finished run has nothing left to train.
  nlohmann::json done = base;
  done["resume_checkpoint"] = (full_dir / "model.ckpt").string();
  const fs::path done_cfg = write_config("done.json", done);
  EXPECT_EQ(run({"train", "--config", done_cfg.string(), "--out", (dir / "d").string()}), 1);
}

TEST_F(CliFixture, GradcheckPassesAndReports) {
  ASSERT_EQ(run({"gradcheck"}), 0) << err.str();
  EXPECT_NE(out.str().find("pass"), std::string::npos);
  EXPECT_EQ(out.str().find("FAIL"), std::string::npos);

  ASSERT_EQ(run({"gradcheck", "--out", (dir / "gc").string()}), 0);
  EXPECT_TRUE(fs::exists(dir / "gc" / "run_manifest.json"));
}

}  // namespace
}  // namespace patseg
