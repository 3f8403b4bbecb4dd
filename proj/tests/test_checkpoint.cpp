#include "micromoe/serialize.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "micromoe/rng.hpp"

namespace micromoe {
namespace {

namespace fs = std::filesystem;

std::vector<char> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / "micromoe_ckpt_test";
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

Checkpoint make_checkpoint() {
  Checkpoint ck;
  ck.phase = "instruct";
  ck.step = 417;
  ck.config_hash = "deadbeef00112233";
  ck.corpus_seed = 99;
  ck.model_config = {{"config", {{"d", 8}}}, {"note", "test"}};
  RngStream rng(3);
  Tensor a(3, 4), b(2, 2);
  for (double& x : a.values()) x = rng.next_normal();
  for (double& x : b.values()) x = rng.next_normal();
  ck.params.add("layer.a", std::move(a));
  auto fb = ck.params.add("layer.b", std::move(b));
  fb->requires_grad = false;

  OptimSnapshot snap;
  snap.step = 417;
  AdamW::Moments mom;
  mom.m = {0.1, -0.2, 0.3, 0.0, 1e-300, 5.5, 0.25, -0.125, 2.0, 3.0, 4.0, 5.0};
  mom.v = {1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0};
  snap.moments["layer.a"] = mom;
  ck.optim = snap;
  return ck;
}

TEST_F(CheckpointTest, RoundTripIsBitExact) {
  Checkpoint ck = make_checkpoint();
  fs::path p1 = dir_ / "a.ckpt";
  fs::path p2 = dir_ / "b.ckpt";
  save_checkpoint(p1, ck);

  Checkpoint loaded = load_checkpoint(p1);
  EXPECT_EQ(loaded.phase, "instruct");
  EXPECT_EQ(loaded.step, 417);
  EXPECT_EQ(loaded.config_hash, "deadbeef00112233");
  EXPECT_EQ(loaded.corpus_seed, 99u);
  EXPECT_FALSE(loaded.params.get("layer.b")->requires_grad);
  EXPECT_TRUE(loaded.params.get("layer.a")->requires_grad);

  // Values identical to the bit.
  auto& src = ck.params.get("layer.a")->values();
  auto& dst = loaded.params.get("layer.a")->values();
  for (std::size_t i = 0; i < src.size(); ++i) EXPECT_EQ(src[i], dst[i]);

  // Saving the loaded checkpoint reproduces the file byte for byte.
  save_checkpoint(p2, loaded);
  EXPECT_EQ(read_bytes(p1), read_bytes(p2));
}

TEST_F(CheckpointTest, OptimizerStateSurvives) {
  Checkpoint ck = make_checkpoint();
  fs::path p = dir_ / "opt.ckpt";
  save_checkpoint(p, ck);
  Checkpoint loaded = load_checkpoint(p);
  ASSERT_TRUE(loaded.optim.has_value());
  EXPECT_EQ(loaded.optim->step, 417);
  const auto& mom = loaded.optim->moments.at("layer.a");
  EXPECT_EQ(mom.m[4], 1e-300);
  EXPECT_EQ(mom.v[11], 12.0);
}

TEST_F(CheckpointTest, RejectsGarbage) {
  fs::path p = dir_ / "garbage.ckpt";
  std::ofstream(p) << "this is not a checkpoint";
  EXPECT_THROW(load_checkpoint(p), std::runtime_error);
  EXPECT_THROW(load_checkpoint(dir_ / "missing.ckpt"), std::runtime_error);
}

TEST(ConfigHash, StableAndSensitive) {
  nlohmann::json a = {{"x", 1}, {"y", "z"}};
  nlohmann::json b = {{"x", 2}, {"y", "z"}};
  EXPECT_EQ(config_hash(a), config_hash(a));
  EXPECT_NE(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
}

}  // namespace
}  // namespace micromoe
