#ifndef STNALIGN_TRAINING_HPP_
#define STNALIGN_TRAINING_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "stnalign/config.hpp"
#include "stnalign/io.hpp"
#include "stnalign/pipeline.hpp"
#include "stnalign/seeding.hpp"
#include "stnalign/synth_data.hpp"
#include "stnalign/verification.hpp"

namespace stnalign {

/**
 * SGD recipe. Both learning rates follow lr(i) = base_lr * lr_decay_factor^floor(i / lr_decay_every);
 * the localization rate is the recognition rate times loc_lr_ratio. reinit_at is
 * "auto" (max_iters / 2), "none", or an iteration index.
 */
struct TrainConfig {
  int batch_size = 100;
  double base_lr = 0.01;
  long lr_decay_every = 1000;
  double lr_decay_factor = 0.1;
  double loc_lr_ratio = 0.1;
  double center_loss_weight = 0.008;
  double momentum = 0.9;
  std::string reinit_at = "auto";
  bool reinit_centers = true;
  long max_iters = 3000;
  std::uint64_t seed = 1;
  bool flip_augment = true;
  long checkpoint_every = 500;
  std::size_t workers = 1;

  /// Iteration at which the recognition network is redrawn, if any.
  std::optional<long> reinit_iteration() const {
    if (reinit_at == "none") return std::nullopt;
    if (reinit_at == "auto") {
      if (max_iters < 2) return std::nullopt;
      return max_iters / 2;
    }
    try {
      std::size_t used = 0;
      const long v = std::stol(reinit_at, &used);
      if (used != reinit_at.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw InputError("reinit_at must be auto, none, or an iteration index");
    }
  }

  double lr_rec(long i) const {
    return base_lr * std::pow(lr_decay_factor, static_cast<double>(i / lr_decay_every));
  }
  double lr_loc(long i) const { return lr_rec(i) * loc_lr_ratio; }

  void validate() const {
    if (batch_size <= 0) throw InputError("batch_size must be positive");
    if (!(base_lr > 0.0) || !(lr_decay_factor > 0.0) || lr_decay_every <= 0) {
      throw InputError("learning rates and decay settings must be positive");
    }
    if (loc_lr_ratio < 0.0 || loc_lr_ratio > 1.0) throw InputError("loc_lr_ratio must lie in [0, 1]");
    if (center_loss_weight < 0.0) throw InputError("center_loss_weight must be non-negative");
    if (momentum < 0.0 || momentum >= 1.0) throw InputError("momentum must lie in [0, 1)");
    if (max_iters < 0) throw InputError("max_iters must be non-negative");
    if (checkpoint_every < 0) throw InputError("checkpoint_every must be non-negative");
    if (workers == 0) throw InputError("workers must be positive");
    const auto r = reinit_iteration();
    if (r && (*r < 1 || *r >= std::max(max_iters, 1L))) throw InputError("reinit_at must lie in [1, max_iters)");
  }

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("batch_size", std::to_string(batch_size));
    kv.set("base_lr", KeyValues::format(base_lr));
    kv.set("lr_decay_every", std::to_string(lr_decay_every));
    kv.set("lr_decay_factor", KeyValues::format(lr_decay_factor));
    kv.set("loc_lr_ratio", KeyValues::format(loc_lr_ratio));
    kv.set("center_loss_weight", KeyValues::format(center_loss_weight));
    kv.set("momentum", KeyValues::format(momentum));
    kv.set("reinit_at", reinit_at);
    kv.set("reinit_centers", reinit_centers ? "true" : "false");
    kv.set("max_iters", std::to_string(max_iters));
    kv.set("seed", std::to_string(seed));
    kv.set("flip_augment", flip_augment ? "true" : "false");
    kv.set("checkpoint_every", std::to_string(checkpoint_every));
    return kv;
  }

  void read(const KeyValues& kv) {
    batch_size = kv.get("batch_size", batch_size);
    base_lr = kv.get("base_lr", base_lr);
    lr_decay_every = kv.get("lr_decay_every", lr_decay_every);
    lr_decay_factor = kv.get("lr_decay_factor", lr_decay_factor);
    loc_lr_ratio = kv.get("loc_lr_ratio", loc_lr_ratio);
    center_loss_weight = kv.get("center_loss_weight", center_loss_weight);
    momentum = kv.get("momentum", momentum);
    reinit_at = kv.get("reinit_at", reinit_at);
    reinit_centers = kv.get("reinit_centers", reinit_centers);
    max_iters = kv.get("max_iters", max_iters);
    seed = static_cast<std::uint64_t>(kv.get("seed", static_cast<long>(seed)));
    flip_augment = kv.get("flip_augment", flip_augment);
    checkpoint_every = kv.get("checkpoint_every", checkpoint_every);
  }
};

struct MetricsRow {
  long iter = 0;
  double loss_softmax = 0.0;
  double loss_center = 0.0;
  double lr_rec = 0.0;
  double lr_loc = 0.0;
  double train_acc = 0.0;
};

inline std::string format_metrics_row(const MetricsRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%ld %.17g %.17g %.17g %.17g %.17g", r.iter, r.loss_softmax, r.loss_center, r.lr_rec,
                r.lr_loc, r.train_acc);
  return buf;
}

inline std::string format_metrics_log(const std::vector<MetricsRow>& rows) {
  std::string out = "# iter loss_softmax loss_center lr_rec lr_loc train_acc\n";
  for (const auto& r : rows) out += format_metrics_row(r) + "\n";
  return out;
}

inline std::vector<MetricsRow> parse_metrics_log(const std::string& text) {
  std::vector<MetricsRow> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    MetricsRow r;
    if (!(ls >> r.iter >> r.loss_softmax >> r.loss_center >> r.lr_rec >> r.lr_loc >> r.train_acc)) {
      throw InputError("malformed metrics line: " + line);
    }
    rows.push_back(r);
  }
  return rows;
}

/// Pipeline parameters plus the pipeline spec (and anything in `extra`) as metadata.
inline Checkpoint pipeline_checkpoint(const PipelineState& state, const KeyValues& extra = {}) {
  Checkpoint c;
  c.meta = state.config.to_kv();
  for (const auto& [k, v] : extra.entries()) c.meta.set(k, v);
  c.tensors = state.params;
  return c;
}

/// Rebuilds a pipeline from a checkpoint, checking every tensor against its config.
inline PipelineState pipeline_from_checkpoint(const Checkpoint& ckpt) {
  PipelineConfig cfg;
  cfg.read(ckpt.meta);
  PipelineState reference = build_pipeline(cfg, 0);
  for (const auto& [name, t] : reference.params) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) throw IoError("checkpoint lacks tensor " + name);
    if (it->second.shape() != t.shape()) {
      throw IoError("checkpoint tensor " + name + " has shape " + shape_string(it->second.shape()) + ", spec expects " +
                    shape_string(t.shape()));
    }
  }
  for (const auto& [name, t] : ckpt.tensors)
    if (!reference.params.count(name)) throw IoError("checkpoint has unexpected tensor " + name);
  reference.params = ckpt.tensors;
  return reference;
}

/// Loss became non-finite. Carries the iteration and the most recent checkpoint.
class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(long iteration, Checkpoint last)
      : NumericError("training diverged at iteration " + std::to_string(iteration)),
        iteration_(iteration),
        last_(std::move(last)) {}
  long iteration() const { return iteration_; }
  const Checkpoint& last_checkpoint() const { return last_; }

 private:
  long iteration_;
  Checkpoint last_;
};

struct TrainRun {
  TrainConfig config;
  PipelineState state;
  long iteration = 0;  // completed steps
  std::vector<MetricsRow> metrics;
  ParamSet velocity;
  /// "pre_reinit" (after step reinit_at - 1), "post_reinit" (redrawn, before step reinit_at),
  /// "last" (most recent periodic snapshot), "final".
  std::map<std::string, Checkpoint> checkpoints;
};

namespace detail {

inline KeyValues train_meta(const TrainRun& run, long iteration) {
  KeyValues kv;
  const KeyValues cfg = run.config.to_kv();
  for (const auto& [k, v] : cfg.entries()) kv.set("train." + k, v);
  kv.set("iteration", std::to_string(iteration));
  return kv;
}

inline bool starts_with(const std::string& s, const char* prefix) { return s.rfind(prefix, 0) == 0; }

}  // namespace detail

/// Training examples: the split's training observations, optionally followed by their mirrors.
struct TrainingSet {
  std::vector<Tensor> images;
  std::vector<int> labels;
};

inline TrainingSet make_training_set(const DatasetSplit& split, bool flip) {
  TrainingSet ts;
  for (const auto& o : split.train) {
    ts.images.push_back(o.image);
    ts.labels.push_back(o.label);
  }
  if (flip) {
    for (const auto& o : split.train) {
      ts.images.push_back(flip_horizontal(o.image));
      ts.labels.push_back(o.label);
    }
  }
  return ts;
}

/// Initialized run (no steps taken). The pipeline's class count is set from the split.
inline TrainRun init_training(const TrainConfig& cfg, PipelineConfig pcfg, const DatasetSplit& split) {
  cfg.validate();
  if (split.train.empty()) throw InputError("training split is empty");
  pcfg.rec.class_count = split.train_classes;
  pcfg.center_weight = cfg.center_loss_weight;
  const auto& img = split.train.front().image;
  if (img.dim(2) != static_cast<std::size_t>(pcfg.image_size)) {
    throw DimensionError("dataset image size " + std::to_string(img.dim(2)) + " does not match pipeline image_size " +
                         std::to_string(pcfg.image_size));
  }
  TrainRun run;
  run.config = cfg;
  run.state = build_pipeline(pcfg, cfg.seed);
  run.state.loc_frozen = cfg.loc_lr_ratio == 0.0;
  return run;
}

/// Runs steps until run.iteration == config.max_iters. `on_step` (optional) sees each metrics row.
inline void continue_training(TrainRun& run, const TrainingSet& data,
                              const std::function<void(const MetricsRow&)>& on_step = {}) {
  const TrainConfig& cfg = run.config;
  PipelineState& st = run.state;
  const std::size_t n = data.images.size();
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  const auto reinit = cfg.reinit_iteration();
  const Shape& ishape = data.images.front().shape();
  const std::size_t stride = data.images.front().size();

  // Batches walk a fresh permutation each epoch. Replaying from iteration 0 keeps
  // the stream identical however the run was split into calls.
  std::mt19937_64 order_rng(derive_seed(cfg.seed, 0xba7cULL));
  std::vector<std::size_t> order(n);
  std::size_t cursor = n;
  auto next_index = [&]() {
    if (cursor == n) {
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), order_rng);
      cursor = 0;
    }
    return order[cursor++];
  };
  for (long skip = 0; skip < run.iteration * static_cast<long>(batch); ++skip) next_index();

  Checkpoint last = pipeline_checkpoint(st, detail::train_meta(run, run.iteration - 1));
  for (long i = run.iteration; i < cfg.max_iters; ++i) {
    if (reinit && i == *reinit) {
      run.checkpoints["pre_reinit"] = pipeline_checkpoint(st, detail::train_meta(run, i - 1));
      std::mt19937_64 rng(derive_seed(cfg.seed, 0x5ecULL, static_cast<std::uint64_t>(i)));
      const Tensor centers = st.params.at("centers");
      reinitialize_recognition(st, rng);
      if (!cfg.reinit_centers) st.params["centers"] = centers;
      for (auto it = run.velocity.begin(); it != run.velocity.end();) {
        if (detail::starts_with(it->first, "rec.")) it = run.velocity.erase(it);
        else ++it;
      }
      run.checkpoints["post_reinit"] = pipeline_checkpoint(st, detail::train_meta(run, i - 1));
    }
    Tensor x(Shape{batch, ishape[1], ishape[2], ishape[3]});
    std::vector<int> labels(batch);
    for (std::size_t k = 0; k < batch; ++k) {
      const std::size_t idx = next_index();
      std::copy(data.images[idx].storage().begin(), data.images[idx].storage().end(), x.data() + k * stride);
      labels[k] = data.labels[idx];
    }
    LossGrads lg;
    PipelineForward fwd;
    try {
      fwd = forward_pipeline(st, x, cfg.workers, true);
      lg = pipeline_loss(st, fwd, labels);
    } catch (const NumericError&) {
      throw TrainingDiverged(i, last);
    }
    if (!std::isfinite(lg.objective)) throw TrainingDiverged(i, last);
    const ParamSet grads = backward_pipeline(st, fwd, lg, cfg.workers);

    const double lr_r = cfg.lr_rec(i), lr_l = cfg.lr_loc(i);
    for (const auto& [name, g] : grads) {
      const bool is_loc = detail::starts_with(name, "loc.");
      const double lr = is_loc ? lr_l : lr_r;
      if (lr == 0.0 || (is_loc && st.loc_frozen) || (!is_loc && st.rec_frozen)) continue;
      Tensor& p = st.params.at(name);
      auto [it, fresh] = run.velocity.try_emplace(name, Tensor(p.shape()));
      Tensor& v = it->second;
      for (std::size_t k = 0; k < p.size(); ++k) {
        v[k] = cfg.momentum * v[k] + lr * g[k];
        p[k] -= v[k];
      }
    }
    st.params.at("centers") += lg.center_step;

    MetricsRow row{i, lg.loss.softmax_loss, lg.loss.center_loss, lr_r, lr_l,
                   static_cast<double>(lg.correct) / static_cast<double>(batch)};
    run.metrics.push_back(row);
    run.iteration = i + 1;
    if (on_step) on_step(row);
    if (cfg.checkpoint_every > 0 && (i + 1) % cfg.checkpoint_every == 0) {
      last = pipeline_checkpoint(st, detail::train_meta(run, i));
      run.checkpoints["last"] = last;
    }
  }
  run.checkpoints["final"] = pipeline_checkpoint(st, detail::train_meta(run, run.iteration - 1));
}

inline TrainRun train(const TrainConfig& cfg, const PipelineConfig& pcfg, const DatasetSplit& split,
                      const std::function<void(const MetricsRow&)>& on_step = {}) {
  TrainRun run = init_training(cfg, pcfg, split);
  continue_training(run, make_training_set(split, cfg.flip_augment), on_step);
  return run;
}

// ---------------------------------------------------------------------------
// Localization-network regression sweep
// ---------------------------------------------------------------------------

struct SweepConfig {
  int batch_size = 32;
  long iters = 800;
  double lr = 0.01;
  double momentum = 0.9;
  long decay_every = 400;
  double decay_factor = 0.1;
  std::uint64_t seed = 1;
  std::size_t workers = 1;
};

struct SweepRow {
  std::string name;
  LocNetSpec spec;
  std::size_t param_count = 0;
  double initial_mse = 0.0;  // held-out, before training
  double fit_mse = 0.0;      // held-out, after training
};

inline std::string architecture_name(const LocNetSpec& s) {
  return std::to_string(s.conv_blocks) + " Conv+Pool, " + std::to_string(s.fc_layers) + " FC";
}

/// The six architecture variants: 1-4 conv blocks with one FC layer, then 2 and 3
/// conv blocks with two FC layers. Other fields come from `base`.
inline std::vector<LocNetSpec> locnet_variants(const LocNetSpec& base) {
  std::vector<LocNetSpec> out;
  for (auto [conv, fc] : {std::pair{1, 1}, {2, 1}, {3, 1}, {4, 1}, {2, 2}, {3, 2}}) {
    LocNetSpec s = base;
    s.conv_blocks = conv;
    s.fc_layers = fc;
    out.push_back(s);
  }
  return out;
}

/// Regression target for an observation: the parameters that warp it back onto its canonical glyph.
inline std::vector<double> alignment_target(const Observation& o, TransformKind kind) {
  return to_vector(promote(invert(o.truth), kind));
}

namespace detail {

inline double regression_mse(const std::vector<Op>& ops, const ParamSet& params, const std::vector<Tensor>& inputs,
                             const std::vector<std::vector<double>>& targets, std::size_t workers) {
  std::vector<double> partial(std::max<std::size_t>(workers, 1), 0.0);
  parallel_chunks(inputs.size(), workers, [&](std::size_t w, std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const Tensor y = stack_forward(ops, params, inputs[i]);
      for (std::size_t k = 0; k < y.size(); ++k) partial[w] += (y[k] - targets[i][k]) * (y[k] - targets[i][k]);
    }
  });
  const double total = std::accumulate(partial.begin(), partial.end(), 0.0);
  return total / static_cast<double>(inputs.size() * targets.front().size());
}

}  // namespace detail

/**
 * Trains each localization architecture, supervised, to regress alignment_target
 * from the downsampled observation; reports held-out MSE on the test split.
 */
inline std::vector<SweepRow> locnet_regression_sweep(const std::vector<LocNetSpec>& archs, const DatasetSplit& split,
                                                     const SweepConfig& cfg,
                                                     const std::function<void(const SweepRow&)>& on_row = {}) {
  if (split.train.empty() || split.test.empty()) throw InputError("sweep needs train and test observations");
  if (cfg.batch_size <= 0 || cfg.iters < 0 || !(cfg.lr > 0.0)) throw InputError("invalid sweep config");
  std::vector<SweepRow> rows;
  for (const LocNetSpec& spec : archs) {
    spec.validate();
    const auto size = static_cast<std::size_t>(spec.input_size);
    auto prepare = [&](const std::vector<Observation>& obs, std::vector<Tensor>& in, std::vector<std::vector<double>>& tg) {
      for (const auto& o : obs) {
        in.push_back(area_downsample(o.image, size, size));
        tg.push_back(alignment_target(o, spec.kind));
      }
    };
    std::vector<Tensor> train_in, test_in;
    std::vector<std::vector<double>> train_tg, test_tg;
    prepare(split.train, train_in, train_tg);
    prepare(split.test, test_in, test_tg);

    std::mt19937_64 init_rng(derive_seed(cfg.seed, 0x10cULL));
    NetworkState net = build_locnet(spec, init_rng);
    SweepRow row;
    row.name = architecture_name(spec);
    row.spec = spec;
    row.param_count = count_params(net.params);
    row.initial_mse = detail::regression_mse(net.ops, net.params, test_in, test_tg, cfg.workers);

    std::mt19937_64 order_rng(derive_seed(cfg.seed, 0xba7cULL));
    std::uniform_int_distribution<std::size_t> pick(0, train_in.size() - 1);
    ParamSet velocity;
    const std::size_t width = spec.head_width();
    const auto batch = static_cast<std::size_t>(cfg.batch_size);
    for (long it = 0; it < cfg.iters; ++it) {
      std::vector<std::size_t> idx(batch);
      for (auto& k : idx) k = pick(order_rng);
      const std::size_t workers = std::max<std::size_t>(1, std::min(cfg.workers, batch));
      std::vector<ParamSet> partial(workers);
      parallel_chunks(batch, workers, [&](std::size_t w, std::size_t begin, std::size_t end) {
        for (std::size_t b = begin; b < end; ++b) {
          std::vector<OpCache> cache;
          const Tensor y = stack_forward(net.ops, net.params, train_in[idx[b]], &cache);
          Tensor g({1, width});
          for (std::size_t k = 0; k < width; ++k) {
            g[k] = 2.0 * (y[k] - train_tg[idx[b]][k]) / static_cast<double>(batch * width);
          }
          stack_backward(net.ops, net.params, cache, g, partial[w], false);
        }
      });
      ParamSet grads = std::move(partial[0]);
      for (std::size_t w = 1; w < workers; ++w)
        for (auto& [name, g] : partial[w]) detail::accumulate(grads, name, g);
      const double lr = cfg.lr * std::pow(cfg.decay_factor, static_cast<double>(it / std::max(cfg.decay_every, 1L)));
      for (const auto& [name, g] : grads) {
        Tensor& p = net.params.at(name);
        auto [vit, fresh] = velocity.try_emplace(name, Tensor(p.shape()));
        for (std::size_t k = 0; k < p.size(); ++k) {
          vit->second[k] = cfg.momentum * vit->second[k] + lr * g[k];
          p[k] -= vit->second[k];
        }
      }
    }
    row.fit_mse = detail::regression_mse(net.ops, net.params, test_in, test_tg, cfg.workers);
    if (!std::isfinite(row.fit_mse)) throw NumericError("sweep diverged for " + row.name);
    if (on_row) on_row(row);
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Transform-kind comparison
// ---------------------------------------------------------------------------

struct KindResult {
  TransformKind kind = TransformKind::identity;
  double accuracy = 0.0;
  double final_softmax = 0.0;
  std::size_t loc_params = 0;
  VerificationReport report;
};

/// One training run per kind on the same split and seed, each scored by verification.
inline std::vector<KindResult> compare_transform_kinds(const TrainConfig& cfg, const PipelineConfig& pcfg,
                                                       const DatasetSplit& split, const std::vector<TransformKind>& kinds,
                                                       std::size_t pca_dim = 0, std::size_t folds = 10) {
  std::vector<KindResult> out;
  for (TransformKind kind : kinds) {
    PipelineConfig p = pcfg;
    p.kind = kind;
    p.sync();
    TrainRun run = train(cfg, p, split);
    KindResult r;
    r.kind = kind;
    r.loc_params = count_params(run.state.params, "loc.");
    r.final_softmax = run.metrics.empty() ? 0.0 : run.metrics.back().loss_softmax;
    r.report = evaluate_verification(run.state, split, pca_dim == 0 ? default_pca_dim(run.state) : pca_dim, folds,
                                     cfg.workers);
    r.accuracy = r.report.accuracy;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace stnalign

#endif  // STNALIGN_TRAINING_HPP_
