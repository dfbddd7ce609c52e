#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "oracles.hpp"

using namespace stnalign;

namespace {

const DatasetSplit& tiny_split() {
  static const DatasetSplit s = generate_dataset(fixture::tiny_dataset());
  return s;
}

bool same_prefix_tensors(const Checkpoint& a, const Checkpoint& b, const std::string& prefix) {
  for (const auto& [name, t] : a.tensors) {
    if (name.rfind(prefix, 0) != 0) continue;
    if (!b.tensors.count(name) || b.tensors.at(name).storage() != t.storage()) return false;
  }
  return true;
}

bool any_prefix_tensor_differs(const Checkpoint& a, const Checkpoint& b, const std::string& prefix) {
  for (const auto& [name, t] : a.tensors)
    if (name.rfind(prefix, 0) == 0 && b.tensors.at(name).storage() != t.storage()) return true;
  return false;
}

/// Brute force over every candidate threshold.
double oracle_best_accuracy(const std::vector<double>& scores, const std::vector<bool>& same) {
  std::vector<double> cands{-1e300};
  for (double s : scores) cands.push_back(s);
  std::size_t best = 0;
  for (double t : cands) {
    std::size_t c = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) c += (scores[i] > t) == same[i];
    best = std::max(best, c);
  }
  return static_cast<double>(best) / static_cast<double>(scores.size());
}

}  // namespace

TEST(Schedule, StepDecayAndLocalizationRatio) {
  TrainConfig c;
  c.base_lr = 0.01;
  c.lr_decay_every = 1000;
  EXPECT_EQ(c.lr_rec(0), 0.01);
  EXPECT_EQ(c.lr_rec(999), 0.01);
  EXPECT_NEAR(c.lr_rec(1000), 0.001, 1e-18);
  EXPECT_NEAR(c.lr_rec(2999), 0.0001, 1e-18);
  EXPECT_NEAR(c.lr_loc(1500), 0.0001, 1e-18);
  EXPECT_EQ(c.reinit_iteration(), 1500);
  c.reinit_at = "none";
  EXPECT_FALSE(c.reinit_iteration());
}

TEST(Schedule, ValidationRejectsNonsense) {
  TrainConfig c;
  c.loc_lr_ratio = 1.5;
  EXPECT_THROW(c.validate(), InputError);
  c = {};
  c.reinit_at = "3000";
  EXPECT_THROW(c.validate(), InputError);
  c = {};
  c.reinit_at = "12x";
  EXPECT_THROW(c.validate(), InputError);
  c = {};
  c.momentum = 1.0;
  EXPECT_THROW(c.validate(), InputError);
  c = {};
  c.loc_lr_ratio = 0.0;
  EXPECT_NO_THROW(c.validate());
}

TEST(Metrics, LogRoundTripsExactly) {
  const std::vector<MetricsRow> rows{{0, 3.25, 0.125, 0.01, 0.001, 0.5}, {1, 1.0 / 3.0, 2.0e-17, 0.01, 0.001, 0.75}};
  const auto back = parse_metrics_log(format_metrics_log(rows));
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].loss_softmax, 1.0 / 3.0);
  EXPECT_EQ(back[1].loss_center, 2.0e-17);
  EXPECT_THROW(parse_metrics_log("0 1 2\n"), InputError);
}

TEST(Training, RowsFollowTheSchedule) {
  const TrainConfig cfg = fixture::tiny_train(20);
  const TrainRun run = train(cfg, fixture::tiny_pipeline(TransformKind::similarity), tiny_split());
  ASSERT_EQ(run.metrics.size(), 20u);
  for (const auto& r : run.metrics) {
    EXPECT_EQ(r.lr_rec, cfg.lr_rec(r.iter));
    EXPECT_NEAR(r.lr_loc / r.lr_rec, cfg.loc_lr_ratio, 1e-15);
    EXPECT_TRUE(std::isfinite(r.loss_softmax));
  }
  EXPECT_EQ(run.iteration, 20);
  EXPECT_TRUE(run.checkpoints.count("final"));
  EXPECT_TRUE(run.checkpoints.count("last"));
}

TEST(Training, FewStepsReduceTheLossOnAFixedBatch) {
  TrainConfig cfg = fixture::tiny_train(30);
  cfg.batch_size = static_cast<int>(tiny_split().train.size());  // whole training set every step
  cfg.flip_augment = false;
  cfg.reinit_at = "none";
  cfg.lr_decay_every = 1000;
  const TrainRun run = train(cfg, fixture::tiny_pipeline(TransformKind::affine), tiny_split());
  EXPECT_LT(run.metrics.back().loss_softmax, run.metrics.front().loss_softmax);
}

TEST(Training, ReinitKeepsTheLocalizerAndRedrawsRecognition) {
  TrainConfig cfg = fixture::tiny_train(20);
  cfg.reinit_at = "10";
  const TrainRun run = train(cfg, fixture::tiny_pipeline(TransformKind::projective), tiny_split());
  const Checkpoint& pre = run.checkpoints.at("pre_reinit");
  const Checkpoint& post = run.checkpoints.at("post_reinit");
  EXPECT_TRUE(same_prefix_tensors(pre, post, "loc."));
  EXPECT_TRUE(any_prefix_tensor_differs(pre, post, "rec."));
  EXPECT_NE(pre.tensors.at("centers").storage(), post.tensors.at("centers").storage());
  // the localizer keeps training afterwards
  EXPECT_TRUE(any_prefix_tensor_differs(post, run.checkpoints.at("final"), "loc."));
  EXPECT_EQ(post.meta.get("iteration", std::string()), "9");
}

TEST(Training, CentersCanSurviveTheReinit) {
  TrainConfig cfg = fixture::tiny_train(12);
  cfg.reinit_at = "6";
  cfg.reinit_centers = false;
  const TrainRun run = train(cfg, fixture::tiny_pipeline(TransformKind::similarity), tiny_split());
  EXPECT_EQ(run.checkpoints.at("pre_reinit").tensors.at("centers").storage(),
            run.checkpoints.at("post_reinit").tensors.at("centers").storage());
}

TEST(Training, FrozenLocalizerMatchesTheIdentityBaseline) {
  // With loc_lr_ratio 0 the similarity localizer stays at its identity-predicting
  // init, so the warp is the center resample and recognition sees what it would
  // see with no transformer at all.
  TrainConfig cfg = fixture::tiny_train(12);
  cfg.loc_lr_ratio = 0.0;
  const TrainRun sim = train(cfg, fixture::tiny_pipeline(TransformKind::similarity), tiny_split());
  const TrainRun ident = train(cfg, fixture::tiny_pipeline(TransformKind::identity), tiny_split());
  for (const auto& [name, t] : ident.state.params) {
    EXPECT_LT(max_abs_diff(t.values(), sim.state.params.at(name).values()), 1e-9) << name;
  }
  const Checkpoint init = pipeline_checkpoint(build_pipeline(sim.state.config, cfg.seed));
  EXPECT_TRUE(same_prefix_tensors(init, sim.checkpoints.at("final"), "loc."));
}

TEST(Training, SplitRunsResumeBitExactly) {
  TrainConfig cfg = fixture::tiny_train(16);
  cfg.reinit_at = "10";
  const PipelineConfig p = fixture::tiny_pipeline(TransformKind::affine);
  const TrainRun whole = train(cfg, p, tiny_split());

  TrainRun parts = init_training(cfg, p, tiny_split());
  const TrainingSet data = make_training_set(tiny_split(), cfg.flip_augment);
  parts.config.max_iters = 7;
  continue_training(parts, data);
  parts.config.max_iters = 16;
  continue_training(parts, data);
  for (const auto& [name, t] : whole.state.params) EXPECT_EQ(t.storage(), parts.state.params.at(name).storage()) << name;
}

TEST(Training, RepeatedRunsAreBitwiseIdentical) {
  const TrainConfig cfg = fixture::tiny_train(10);
  const PipelineConfig p = fixture::tiny_pipeline(TransformKind::projective);
  const TrainRun a = train(cfg, p, tiny_split()), b = train(cfg, p, tiny_split());
  for (const auto& [name, t] : a.state.params) EXPECT_EQ(t.storage(), b.state.params.at(name).storage()) << name;
  EXPECT_EQ(format_metrics_log(a.metrics), format_metrics_log(b.metrics));
}

TEST(Training, WorkerCountDoesNotChangeTheResult) {
  TrainConfig cfg = fixture::tiny_train(6);
  const PipelineConfig p = fixture::tiny_pipeline(TransformKind::similarity);
  const TrainRun one = train(cfg, p, tiny_split());
  cfg.workers = 3;
  const TrainRun three = train(cfg, p, tiny_split());
  for (const auto& [name, t] : one.state.params) {
    EXPECT_LT(max_abs_diff(t.values(), three.state.params.at(name).values()), 1e-12) << name;
  }
}

TEST(Training, DivergenceReportsTheLastCheckpoint) {
  TrainConfig cfg = fixture::tiny_train(40);
  cfg.base_lr = 1e12;
  cfg.lr_decay_every = 1000;
  cfg.reinit_at = "none";
  try {
    train(cfg, fixture::tiny_pipeline(TransformKind::affine), tiny_split());
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_LT(e.iteration(), 40);
    EXPECT_FALSE(e.last_checkpoint().tensors.empty());
  }
}

TEST(Training, MismatchedImageSizeIsRejected) {
  PipelineConfig p = fixture::tiny_pipeline(TransformKind::similarity);
  p.image_size = 32;
  p.sync();
  EXPECT_THROW(init_training(fixture::tiny_train(), p, tiny_split()), DimensionError);
}

TEST(Checkpoints, PipelineRoundTrip) {
  const PipelineState s = build_pipeline(fixture::tiny_pipeline(TransformKind::affine), 2);
  const PipelineState back = pipeline_from_checkpoint(pipeline_checkpoint(s));
  EXPECT_EQ(back.config.to_kv().to_text(), s.config.to_kv().to_text());
  for (const auto& [name, t] : s.params) EXPECT_EQ(t.storage(), back.params.at(name).storage());

  Checkpoint extra = pipeline_checkpoint(s);
  extra.tensors["loc.stray"] = Tensor({1});
  EXPECT_THROW(pipeline_from_checkpoint(extra), IoError);
  Checkpoint missing = pipeline_checkpoint(s);
  missing.tensors.erase("loc.head.b");
  EXPECT_THROW(pipeline_from_checkpoint(missing), IoError);
}

TEST(Checkpoints, IdentityKindHasNoLocalizerTensors) {
  const Checkpoint c = pipeline_checkpoint(build_pipeline(fixture::tiny_pipeline(TransformKind::identity), 2));
  for (const auto& [name, t] : c.tensors) EXPECT_NE(name.rfind("loc.", 0), 0u) << name;
}

TEST(Verification, ThresholdIsOptimalOnItsOwnPairs) {
  std::mt19937_64 rng(61);
  std::normal_distribution<double> noise(0.0, 0.3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> scores;
    std::vector<bool> same;
    for (int i = 0; i < 40; ++i) {
      const bool s = i % 2 == 0;
      scores.push_back(std::round(((s ? 0.4 : 0.0) + noise(rng)) * 20.0) / 20.0);  // coarse, so ties occur
      same.push_back(s);
    }
    const double t = best_threshold(scores, same);
    std::size_t c = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) c += (scores[i] > t) == same[i];
    EXPECT_EQ(static_cast<double>(c) / 40.0, oracle_best_accuracy(scores, same)) << trial;
  }
}

TEST(Verification, RocRunsFromOriginToOne) {
  const std::vector<double> scores{0.9, 0.8, 0.8, 0.1};
  const std::vector<bool> same{true, false, true, false};
  const auto roc = roc_curve(scores, same);
  ASSERT_EQ(roc.size(), 4u);
  EXPECT_EQ(roc[1].tpr, 0.5);
  EXPECT_EQ(roc[2].fpr, 0.5);
  EXPECT_EQ(roc[2].tpr, 1.0);
  EXPECT_EQ(roc.back().fpr, 1.0);
}

TEST(Verification, PcaComponentsAreOrthonormalAndOrdered) {
  std::mt19937_64 rng(62);
  std::normal_distribution<double> g(0.0, 1.0);
  FeatureRows rows;
  for (int i = 0; i < 200; ++i) rows.push_back({3.0 * g(rng), g(rng), 0.1 * g(rng), 2.0});
  const Pca pca = fit_pca(rows, 3);
  const Eigen::MatrixXd gram = pca.components * pca.components.transpose();
  EXPECT_LT((gram - Eigen::MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_GT(std::abs(pca.components(0, 0)), 0.99);
  EXPECT_GT(std::abs(pca.components(1, 1)), 0.99);
  EXPECT_THROW(fit_pca(rows, 5), InputError);
}

TEST(Verification, SeparableFeaturesScorePerfectly) {
  // identity k has feature e_k plus small noise; different identities are orthogonal
  std::mt19937_64 rng(63);
  std::normal_distribution<double> g(0.0, 0.01);
  FeatureRows f;
  for (int i = 0; i < 40; ++i) {
    std::vector<double> v(8, 0.0);
    v[static_cast<std::size_t>(i / 5)] = 1.0;
    for (auto& x : v) x += g(rng);
    f.push_back(v);
  }
  std::vector<VerificationPair> pairs;
  for (std::size_t i = 0; i < 40; ++i) pairs.push_back({i, (i + 1) % 40, i / 5 == ((i + 1) % 40) / 5});
  for (std::size_t i = 0; i < 40; ++i) pairs.push_back({i, (i + 13) % 40, false});
  const VerificationReport r = evaluate_verification(f, pairs, 0, 10);
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.fold_accuracy.size(), 10u);
  EXPECT_EQ(evaluate_verification(f, pairs, 6, 10).accuracy, 1.0);
  EXPECT_THROW(evaluate_verification(f, pairs, 0, 1), InputError);
}

TEST(Sweep, SixRowsWithOracleParameterCounts) {
  DatasetOptions o = fixture::tiny_dataset();
  o.image_size = 32;
  const DatasetSplit split = generate_dataset(o);
  LocNetSpec base;
  base.kind = TransformKind::similarity;
  base.input_size = 32;
  base.conv_widths = {4, 4, 4, 4};
  base.kernel_sizes = {3, 3, 3, 3};
  base.fc_width = 8;
  SweepConfig sc;
  sc.iters = 5;
  sc.batch_size = 4;
  const auto rows = locnet_regression_sweep(locnet_variants(base), split, sc);
  ASSERT_EQ(rows.size(), 6u);
  for (const auto& r : rows) {
    const auto& s = r.spec;
    EXPECT_EQ(r.param_count, oracle::locnet_param_count(s.input_size, s.channels, s.conv_widths, s.kernel_sizes,
                                                        s.conv_blocks, s.fc_layers, s.fc_width, 4))
        << r.name;
    EXPECT_TRUE(std::isfinite(r.fit_mse));
    EXPECT_GT(r.initial_mse, 0.0);
  }
}

TEST(Sweep, TargetsUndoThePerturbation) {
  const Observation& o = tiny_split().train[3];
  const auto target = alignment_target(o, TransformKind::affine);
  const TransformParams t = from_vector(TransformKind::affine, target);
  const Point2 p{0.2, -0.3};
  const Point2 q = apply_point(o.truth, apply_point(t, p));
  EXPECT_NEAR(q.x, p.x, 1e-12);
  EXPECT_NEAR(q.y, p.y, 1e-12);
}

TEST(CompareKinds, OneResultPerKind) {
  const auto res = compare_transform_kinds(fixture::tiny_train(4), fixture::tiny_pipeline(TransformKind::identity),
                                           tiny_split(), {TransformKind::identity, TransformKind::similarity}, 4, 2);
  ASSERT_EQ(res.size(), 2u);
  EXPECT_EQ(res[0].loc_params, 0u);
  EXPECT_GT(res[1].loc_params, 0u);
  for (const auto& r : res) {
    EXPECT_GE(r.accuracy, 0.0);
    EXPECT_LE(r.accuracy, 1.0);
  }
}
