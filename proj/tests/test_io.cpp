#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "fixtures.hpp"

using namespace stnalign;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("stnalign_io_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                         "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
};

}  // namespace

TEST(Pgm, QuantizedImagesRoundTripExactly) {
  TempDir dir;
  Tensor img({1, 1, 5, 7});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>((i * 37) % 256) / 255.0;
  write_pgm(dir.file("a.pgm"), img);
  const Tensor back = read_pgm(dir.file("a.pgm"));
  EXPECT_EQ(back.shape(), img.shape());
  EXPECT_EQ(back.storage(), img.storage());
  // rewriting what was read gives the same bytes
  write_pgm(dir.file("b.pgm"), back);
  EXPECT_EQ(read_text_file(dir.file("a.pgm")), read_text_file(dir.file("b.pgm")));
}

TEST(Pgm, ClampsAndRounds) {
  TempDir dir;
  const Tensor img({1, 1, 1, 3}, std::vector<double>{-0.5, 0.5, 2.0});
  write_pgm(dir.file("c.pgm"), img);
  const Tensor back = read_pgm(dir.file("c.pgm"));
  EXPECT_EQ(back[0], 0.0);
  EXPECT_EQ(back[1], 128.0 / 255.0);
  EXPECT_EQ(back[2], 1.0);
}

TEST(Pgm, RejectsMissingAndMalformedFiles) {
  TempDir dir;
  EXPECT_THROW(read_pgm(dir.file("none.pgm")), IoError);
  write_text_file(dir.file("p2.pgm"), "P2\n2 2\n255\n0 0 0 0\n");
  EXPECT_THROW(read_pgm(dir.file("p2.pgm")), IoError);
  write_text_file(dir.file("short.pgm"), "P5\n4 4\n255\nabc");
  EXPECT_THROW(read_pgm(dir.file("short.pgm")), IoError);
  write_text_file(dir.file("hdr.pgm"), "P5\nfour 4\n255\n");
  EXPECT_THROW(read_pgm(dir.file("hdr.pgm")), IoError);
}

TEST(Pgm, CommentsInTheHeaderAreSkipped) {
  TempDir dir;
  write_text_file(dir.file("c.pgm"), std::string("P5\n# made by hand\n2 1\n255\n") + char(0) + char(255));
  const Tensor img = read_pgm(dir.file("c.pgm"));
  EXPECT_EQ(img.to_vector(), (std::vector<double>{0.0, 1.0}));
}

TEST(CheckpointFile, DoubleRoundTripIsBitExact) {
  TempDir dir;
  const PipelineState s = build_pipeline(fixture::tiny_pipeline(TransformKind::projective), 8);
  Checkpoint c = pipeline_checkpoint(s);
  c.meta.set("iteration", "41");
  save_checkpoint(dir.file("m.ckpt"), c);
  const Checkpoint back = load_checkpoint(dir.file("m.ckpt"));
  EXPECT_EQ(back.meta.to_text(), c.meta.to_text());
  ASSERT_EQ(back.tensors.size(), c.tensors.size());
  for (const auto& [name, t] : c.tensors) {
    EXPECT_EQ(back.tensors.at(name).shape(), t.shape());
    EXPECT_EQ(back.tensors.at(name).storage(), t.storage()) << name;
  }
}

TEST(CheckpointFile, SinglePrecisionKeepsFloatAccuracy) {
  Checkpoint c;
  std::mt19937_64 rng(81);
  c.tensors["w"] = fixture::random_image(2, 3, 3, rng);
  const Checkpoint back = decode_checkpoint(encode_checkpoint(c, TensorDtype::f32));
  const Tensor& w = c.tensors.at("w");
  for (std::size_t i = 0; i < w.size(); ++i) {
    EXPECT_EQ(back.tensors.at("w")[i], static_cast<double>(static_cast<float>(w[i])));
  }
}

TEST(CheckpointFile, CorruptionIsReportedAsIoError) {
  Checkpoint c;
  c.tensors["a"] = Tensor({2, 2}, 1.0);
  const std::string good = encode_checkpoint(c);
  EXPECT_THROW(decode_checkpoint("NOTACKPT" + good.substr(8)), IoError);
  EXPECT_THROW(decode_checkpoint(good.substr(0, good.size() - 3)), IoError);
  EXPECT_THROW(decode_checkpoint(good + "x"), IoError);
  std::string bad_dtype = good;
  bad_dtype[8 + 4 + c.meta.to_text().size() + 4 + 4 + 1] = 9;
  EXPECT_THROW(decode_checkpoint(bad_dtype), IoError);
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/x.ckpt"), IoError);
}

TEST(KeyValuesFile, TypedAccessAndErrors) {
  const KeyValues kv = KeyValues::parse("# comment\n a = 3 \nb=0.25\nc=true\nd=1,2,3\ne=x\nf=2.5\n");
  EXPECT_EQ(kv.get("a", 0L), 3);
  EXPECT_EQ(kv.get("b", 0.0), 0.25);
  EXPECT_TRUE(kv.get("c", false));
  EXPECT_EQ(kv.get("d", std::vector<int>{}), (std::vector<int>{1, 2, 3}));
  EXPECT_THROW(kv.get("e", 0.0), InputError);
  EXPECT_THROW(kv.get("f", 0L), InputError);
  EXPECT_THROW(kv.get("e", false), InputError);
  EXPECT_EQ(kv.get("missing", 7L), 7);
  EXPECT_THROW(KeyValues::parse("novalue\n"), InputError);
}

TEST(KeyValuesFile, ReportsUnusedKeys) {
  const KeyValues kv = KeyValues::parse("a=1\ntypo=2\n");
  kv.get("a", 0L);
  EXPECT_EQ(kv.unused(), std::vector<std::string>{"typo"});
}
