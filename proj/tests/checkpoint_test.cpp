#include "patseg/checkpoint.hpp"

#include <gtest/gtest.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "patseg/imgproc.hpp"
#include "patseg/synth.hpp"

namespace patseg {
namespace {

namespace fs = std::filesystem;

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void spit(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

struct CheckpointFixture : ::testing::Test {
  fs::path dir = fs::temp_directory_path() / "patseg_ckpt_test";
  fs::path path = dir / "model.ckpt";
  CascadeModel model;

  CheckpointFixture() {
    fs::create_directories(dir);
    CascadeConfig cfg;
    cfg.levels = 2;
    cfg.channels = 4;
    cfg.input_resolution = 16;
    Rng rng(99);
    model = make_cascade(cfg, rng);
  }
  ~CheckpointFixture() override { fs::remove_all(dir); }
};

TEST_F(CheckpointFixture, RoundTripBitExact) {
  CheckpointMeta meta;
  meta.step = 1234;
  meta.seed = 99;
  meta.calibrated_thresholds = {0.37, 0.62};
  save_checkpoint(path.string(), model, meta);

  const LoadedCheckpoint loaded = load_checkpoint(path.string());
  EXPECT_EQ(loaded.meta.step, 1234);
  EXPECT_EQ(loaded.meta.seed, 99u);
  EXPECT_EQ(loaded.meta.calibrated_thresholds, meta.calibrated_thresholds);
  EXPECT_EQ(cascade_config_to_json(loaded.model.config),
            cascade_config_to_json(model.config));

  auto expect = named_parameters(model);
  auto got = named_parameters(loaded.model);
  ASSERT_EQ(expect.size(), got.size());
  for (std::size_t i = 0; i < expect.size(); ++i) {
    EXPECT_EQ(expect[i].first, got[i].first);
    EXPECT_EQ(expect[i].second.values(), got[i].second.values()) << expect[i].first;
  }

  Rng irng(7);
  const Image probe = random_background(irng, 16, 16);
  EXPECT_EQ(predict_soft_mask(model, probe).values(),
            predict_soft_mask(loaded.model, probe).values());
}

TEST_F(CheckpointFixture, RejectsCorruptFiles) {
  save_checkpoint(path.string(), model, CheckpointMeta{});
  const std::string good = slurp(path);
  ASSERT_GT(good.size(), 64u);

  EXPECT_THROW(load_checkpoint((dir / "nope.ckpt").string()), IoError);

  std::string bad_magic = good;
  bad_magic[0] = 'X';
  spit(path, bad_magic);
  EXPECT_THROW(load_checkpoint(path.string()), IoError);

  spit(path, good.substr(0, good.size() / 2));
  EXPECT_THROW(load_checkpoint(path.string()), IoError);

  std::string huge_header = good;
  const std::uint64_t absurd = 1ull << 40;
  std::memcpy(huge_header.data() + 8, &absurd, sizeof(absurd));
  spit(path, huge_header);
  EXPECT_THROW(load_checkpoint(path.string()), IoError);

  std::string bad_version = good;
  const auto vpos = bad_version.find("\"format_version\":1");
  ASSERT_NE(vpos, std::string::npos);
  bad_version[vpos + std::strlen("\"format_version\":")] = '9';
  spit(path, bad_version);
  EXPECT_THROW(load_checkpoint(path.string()), IoError);

  // Renaming one stored tensor makes the real name unresolvable.
  std::string renamed = good;
  const auto npos = renamed.find("level0.entry.weight");
  ASSERT_NE(npos, std::string::npos);
  renamed[npos + 7] = 'x';
  spit(path, renamed);
  EXPECT_THROW(load_checkpoint(path.string()), IoError);
}

TEST_F(CheckpointFixture, RejectsShapeMismatchAndExtraTensors) {
  save_checkpoint(path.string(), model, CheckpointMeta{});
  const std::string good = slurp(path);

  std::uint64_t header_len = 0;
  std::memcpy(&header_len, good.data() + 8, sizeof(header_len));
  const std::string header_json = good.substr(16, header_len);
  const std::string payload = good.substr(16 + header_len);

  // Same bytes, but the header claims a wider model than the payload holds.
  nlohmann::json header = nlohmann::json::parse(header_json);
  nlohmann::json mismatched = header;
  mismatched["model_config"]["channels"] = 6;
  {
    const std::string out = mismatched.dump();
    std::string bytes(kCheckpointMagic, 8);
    const std::uint64_t len = out.size();
    bytes.append(reinterpret_cast<const char*>(&len), sizeof(len));
    bytes += out + payload;
    spit(path, bytes);
    EXPECT_THROW(load_checkpoint(path.string()), IoError);
  }

  nlohmann::json extra = header;
  extra["tensors"]["bogus.weight"] = {{"shape", {1}}, {"offset", 0}, {"numel", 1}};
  {
    const std::string out = extra.dump();
    std::string bytes(kCheckpointMagic, 8);
    const std::uint64_t len = out.size();
    bytes.append(reinterpret_cast<const char*>(&len), sizeof(len));
    bytes += out + payload;
    spit(path, bytes);
    EXPECT_THROW(load_checkpoint(path.string()), IoError);
  }
}

}  // namespace
}  // namespace patseg
