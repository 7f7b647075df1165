#include "flowturbo/checkpoint.hpp"

#include <gtest/gtest.h>

#include <filesystem>

#include "flowturbo/rng.hpp"

namespace flowturbo {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir() {
  static int counter = 0;
  fs::path p = fs::temp_directory_path() / ("ft_ckpt_test_" + std::to_string(counter++));
  fs::create_directories(p);
  return p;
}

DenseNet sample_net(NetKind kind, std::uint64_t seed) {
  NetConfig cfg;
  cfg.kind = kind;
  cfg.data_dim = 2;
  cfg.time_dim = 16;
  cfg.num_classes = 2;
  cfg.cond_dim = 8;
  cfg.hidden = {24, 16};
  Rng rng(seed);
  return DenseNet::create(cfg, rng);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const fs::path dir = temp_dir();
  const DenseNet net = sample_net(NetKind::Velocity, 5);
  save_checkpoint(net, dir / "a.ftrb");
  const DenseNet back = load_checkpoint(dir / "a.ftrb");
  save_checkpoint(back, dir / "b.ftrb");
  EXPECT_EQ(read_file(dir / "a.ftrb"), read_file(dir / "b.ftrb"));
  EXPECT_EQ(back.cfg.hidden, net.cfg.hidden);
  EXPECT_EQ(back.param_count(), net.param_count());
}

TEST(Checkpoint, LoadedParamsAreFloatRoundedOriginals) {
  const fs::path dir = temp_dir();
  const DenseNet net = sample_net(NetKind::Velocity, 6);
  save_checkpoint(net, dir / "n.ftrb");
  const DenseNet back = load_checkpoint(dir / "n.ftrb");
  const auto orig = get_params(net);
  const auto got = get_params(back);
  ASSERT_EQ(orig.size(), got.size());
  for (std::size_t i = 0; i < orig.size(); ++i)
    EXPECT_EQ(got[i], static_cast<double>(static_cast<float>(orig[i])));
}

TEST(Checkpoint, HeaderLayout) {
  const std::string bytes = serialize_checkpoint(sample_net(NetKind::Velocity, 7));
  ASSERT_GE(bytes.size(), 12u);
  EXPECT_EQ(bytes.substr(0, 4), "FTRB");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1);  // version 1 little-endian
  EXPECT_EQ(static_cast<unsigned char>(bytes[5]), 0);
  const auto meta_len = detail::get_u32(bytes, 8);
  const auto meta = nlohmann::json::parse(bytes.substr(12, meta_len));
  EXPECT_EQ(meta["kind"], "velocity");
  EXPECT_EQ(meta["data_dim"], 2);
  EXPECT_EQ(meta["hidden"], (std::vector<int>{24, 16}));
}

TEST(Checkpoint, RefinerKindSurvives) {
  const fs::path dir = temp_dir();
  DenseNet ref = sample_net(NetKind::Refiner, 8);
  Rng rng(9);
  for (double& v : ref.layers.back().w.a) v = 0.1 * rng.normal();
  save_checkpoint(ref, dir / "r.ftrb");
  const DenseNet back = load_checkpoint(dir / "r.ftrb");
  EXPECT_EQ(back.cfg.kind, NetKind::Refiner);
  // Same forward as the original net with parameters rounded to f32.
  DenseNet rounded = ref;
  visit_params(rounded, [](double& v) { v = static_cast<double>(static_cast<float>(v)); });
  Mat x(1, 2), vprev(1, 2);
  x(0, 0) = 0.5;
  vprev(0, 1) = -0.25;
  const std::vector<int> y{0};
  const Mat a = forward(rounded, x, vprev, 0.5, y);
  const Mat b = forward(back, x, vprev, 0.5, y);
  EXPECT_EQ(a.a, b.a);
}

TEST(Checkpoint, CorruptionIsDiagnosed) {
  const std::string good = serialize_checkpoint(sample_net(NetKind::Velocity, 10));

  EXPECT_THROW(deserialize_checkpoint(good.substr(0, 6), "t"), IoError);

  std::string bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad_magic, "t"), IoError);

  std::string bad_version = good;
  bad_version[4] = 9;
  EXPECT_THROW(deserialize_checkpoint(bad_version, "t"), IoError);

  std::string bad_meta = good;
  bad_meta[12] = '#';
  EXPECT_THROW(deserialize_checkpoint(bad_meta, "t"), IoError);

  std::string short_payload = good.substr(0, good.size() - 4);
  EXPECT_THROW(deserialize_checkpoint(short_payload, "t"), IoError);

  std::string long_payload = good + std::string(4, '\0');
  EXPECT_THROW(deserialize_checkpoint(long_payload, "t"), IoError);
}

TEST(Checkpoint, MissingFileThrows) {
  EXPECT_THROW(load_checkpoint(temp_dir() / "missing.ftrb"), IoError);
}

}  // namespace
}  // namespace flowturbo
