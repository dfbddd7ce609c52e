#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <sys/wait.h>

#include "fixtures.hpp"

using namespace stnalign;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string output;  // stdout and stderr interleaved
};

Result run(const std::string& args) {
  const std::string cmd = std::string(STN_ALIGN_BIN) + " " + args + " 2>&1";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.output.append(buf.data(), n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           (std::string("stnalign_cli_") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& rel) const { return (dir_ / rel).string(); }

  /// A config file describing the tiny dataset, pipeline and schedule.
  std::string tiny_config(TransformKind kind, long iters) const {
    KeyValues kv;
    for (const auto& [k, v] : fixture::tiny_dataset().to_kv().entries()) kv.set("data." + k, v);
    TrainConfig t = fixture::tiny_train(iters);
    t.reinit_at = "none";
    for (const auto& [k, v] : t.to_kv().entries()) kv.set("train." + k, v);
    for (const auto& [k, v] : fixture::tiny_pipeline(kind).to_kv().entries()) kv.set(k, v);
    const std::string p = path("tiny.cfg");
    write_text_file(p, kv.to_text());
    return p;
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, HelpListsCommandsAndDefaults) {
  const Result top = run("--help");
  EXPECT_EQ(top.code, 0);
  for (const char* c : {"gradcheck", "gen-data", "train", "eval", "sweep-locnet", "compare-kinds", "warp", "relocate"}) {
    EXPECT_NE(top.output.find(c), std::string::npos) << c;
  }
  const Result train = run("train --help");
  EXPECT_EQ(train.code, 0);
  EXPECT_NE(train.output.find("--loc-lr-ratio"), std::string::npos);
  EXPECT_NE(train.output.find("--deterministic"), std::string::npos);
}

TEST_F(Cli, UsageErrorsExitWithTwo) {
  EXPECT_EQ(run("train --no-such-flag --out " + path("x")).code, 2);
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("gen-data --out " + path("g") + " --perturbation wobble").code, 2);
  EXPECT_EQ(run("gradcheck --module nonsense").code, 2);
}

TEST_F(Cli, GradcheckPassFailAndVacuousRuns) {
  const Result ok = run("gradcheck --module transforms --trials 3");
  EXPECT_EQ(ok.code, 0) << ok.output;
  EXPECT_NE(ok.output.find("PASS"), std::string::npos);
  const Result fail = run("gradcheck --module transforms --trials 3 --tolerance 0");
  EXPECT_EQ(fail.code, 1) << fail.output;
  EXPECT_NE(fail.output.find("FAIL"), std::string::npos);
  const Result none = run("gradcheck --module sampler --trials 0");
  EXPECT_EQ(none.code, 0);
  EXPECT_NE(none.output.find("warning"), std::string::npos);
}

TEST_F(Cli, GenDataIsReproducible) {
  const std::string cfg = tiny_config(TransformKind::similarity, 1);
  ASSERT_EQ(run("gen-data --config " + cfg + " --seed 7 --out " + path("a")).code, 0);
  ASSERT_EQ(run("gen-data --config " + cfg + " --seed 7 --out " + path("b")).code, 0);
  ASSERT_EQ(run("gen-data --config " + cfg + " --seed 8 --out " + path("c")).code, 0);
  const std::string ma = read_text_file(path("a/manifest.txt"));
  EXPECT_EQ(ma, read_text_file(path("b/manifest.txt")));
  EXPECT_NE(ma, read_text_file(path("c/manifest.txt")));
  EXPECT_NE(ma.find("pairs.txt"), std::string::npos);
  EXPECT_NE(ma.find("test_landmarks.csv"), std::string::npos);
  EXPECT_TRUE(fs::is_directory(path("a/canonical")));
}

TEST_F(Cli, IdentityWarpCopiesTheImage) {
  Tensor img({1, 1, 9, 11});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>((i * 29) % 256) / 255.0;
  write_pgm(path("in.pgm"), img);
  write_text_file(path("id.txt"), "kind=identity\n");
  const Result r = run("warp --input " + path("in.pgm") + " --params " + path("id.txt") + " --output " + path("out.pgm"));
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(read_text_file(path("in.pgm")), read_text_file(path("out.pgm")));
}

TEST_F(Cli, WarpThenInverseWarpRestoresTheInterior) {
  const Tensor img = fixture::smooth_image(48, 48);
  write_pgm(path("in.pgm"), img);
  const SimilarityTransform s{0.2, 0.9, 0.05, -0.03};
  write_text_file(path("s.txt"), to_record(s));
  write_text_file(path("inv.txt"), to_record(invert(s)));
  ASSERT_EQ(run("warp --input " + path("in.pgm") + " --params " + path("s.txt") + " --output " + path("w.pgm")).code, 0);
  ASSERT_EQ(run("warp --input " + path("w.pgm") + " --params " + path("inv.txt") + " --output " + path("b.pgm")).code,
            0);
  const Tensor back = read_pgm(path("b.pgm"));
  double worst = 0.0;
  for (std::size_t i = 12; i < 36; ++i)
    for (std::size_t j = 12; j < 36; ++j) worst = std::max(worst, std::abs(back[i * 48 + j] - img[i * 48 + j]));
  EXPECT_LT(worst, 0.02);
}

TEST_F(Cli, WarpNeedsExactlyOneTransformSource) {
  write_pgm(path("in.pgm"), Tensor({1, 1, 4, 4}, 0.5));
  EXPECT_EQ(run("warp --input " + path("in.pgm") + " --output " + path("o.pgm")).code, 2);
  write_text_file(path("id.txt"), "kind=identity\n");
  EXPECT_EQ(run("warp --input " + path("in.pgm") + " --params " + path("id.txt") + " --checkpoint " + path("c.ckpt") +
                " --output " + path("o.pgm"))
                .code,
            2);
}

TEST_F(Cli, MissingFilesExitWithThree) {
  write_text_file(path("id.txt"), "kind=identity\n");
  EXPECT_EQ(run("warp --input " + path("nope.pgm") + " --params " + path("id.txt") + " --output " + path("o.pgm")).code,
            3);
  EXPECT_EQ(run("train --config " + path("nope.cfg") + " --out " + path("t")).code, 3);
  EXPECT_EQ(run("eval --checkpoint " + path("nope.ckpt") + " --out " + path("e")).code, 3);
}

TEST_F(Cli, UnknownConfigKeysAreRejected) {
  write_text_file(path("bad.cfg"), "train.base_lr=0.01\ntrain.learning_rate=0.1\n");
  const Result r = run("train --config " + path("bad.cfg") + " --out " + path("t"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("train.learning_rate"), std::string::npos);
}

TEST_F(Cli, FlagsOverrideTheConfigFile) {
  const std::string cfg = tiny_config(TransformKind::similarity, 2);
  const Result r = run("train --config " + cfg + " --max-iters 3 --out " + path("t") + " --deterministic");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("train.max_iters=3"), std::string::npos);
  EXPECT_NE(r.output.find("train.batch_size=8"), std::string::npos);
  EXPECT_EQ(parse_metrics_log(read_text_file(path("t/metrics.log"))).size(), 3u);
}

TEST_F(Cli, ZeroIterationTrainingWritesALoadableCheckpoint) {
  const std::string cfg = tiny_config(TransformKind::affine, 0);
  ASSERT_EQ(run("train --config " + cfg + " --out " + path("t") + " --deterministic").code, 0);
  const PipelineState s = pipeline_from_checkpoint(load_checkpoint(path("t/checkpoints/final.ckpt")));
  EXPECT_EQ(s.config.kind, TransformKind::affine);
  const Result e = run("eval --checkpoint " + path("t/checkpoints/final.ckpt") + " --config " + cfg + " --out " +
                       path("e") + " --folds 2 --samples 2");
  ASSERT_EQ(e.code, 0) << e.output;
  EXPECT_TRUE(fs::exists(path("e/verification.txt")));
  EXPECT_TRUE(fs::exists(path("e/roc.txt")));
}

TEST_F(Cli, DeterministicTrainingRepeatsBitwise) {
  const std::string cfg = tiny_config(TransformKind::projective, 4);
  ASSERT_EQ(run("train --config " + cfg + " --out " + path("a") + " --deterministic").code, 0);
  ASSERT_EQ(run("train --config " + cfg + " --out " + path("b") + " --deterministic").code, 0);
  EXPECT_EQ(read_text_file(path("a/manifest.txt")), read_text_file(path("b/manifest.txt")));
  EXPECT_EQ(read_text_file(path("a/checkpoints/final.ckpt")), read_text_file(path("b/checkpoints/final.ckpt")));
}

TEST_F(Cli, RelocateFileModeAppliesThePerImageRecord) {
  std::map<int, LandmarkSet> sets;
  sets[3] = {{{0.1, 0.2}, {-0.4, 0.0}}, LandmarkFrame::normalized_image, std::nullopt};
  write_text_file(path("lm.csv"), format_landmark_csv(sets));
  const SimilarityTransform s{0.3, 1.1, 0.05, 0.0};
  write_text_file(path("p.txt"), "3 " + to_inline_record(s) + "\n");
  const Result r =
      run("relocate --landmarks " + path("lm.csv") + " --params " + path("p.txt") + " --output " + path("o.csv"));
  ASSERT_EQ(r.code, 0) << r.output;
  const auto out = parse_landmark_csv(read_text_file(path("o.csv")));
  ASSERT_EQ(out.at(3).frame, LandmarkFrame::original);
  const Point2 want = apply_point(s, {0.1, 0.2});
  EXPECT_NEAR(out.at(3).points[0].x, want.x, 1e-15);
  EXPECT_NEAR(out.at(3).points[0].y, want.y, 1e-15);
}
