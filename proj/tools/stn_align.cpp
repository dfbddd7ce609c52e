#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "stnalign/stnalign.hpp"

namespace fs = std::filesystem;
using namespace stnalign;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFail = 1;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EvalOptions {
  std::size_t pca_dim = 0;  // 0: min(feature width, 32)
  std::size_t folds = 10;
  int samples = 8;
};

/// Everything a command can be configured with. Each subcommand owns one,
/// seeded with its own defaults, then layered with --config and flags.
struct Settings {
  DatasetOptions data = desk_dataset();
  PipelineConfig pipe = desk_pipeline(TransformKind::similarity);
  TrainConfig train = desk_train();
  SweepConfig sweep = desk_sweep();
  LocNetSpec sweep_loc = desk_sweep_locnet();
  EvalOptions eval;
  std::string config_path;
  std::string out;
  int threads = 0;
  bool deterministic = false;

  std::size_t workers() const {
    if (deterministic) return 1;
    if (threads > 0) return static_cast<std::size_t>(threads);
    return default_workers();
  }
};

// ---------------------------------------------------------------------------
// Flag plumbing: flags bind to local copies whose initial values are the
// command defaults (so --help shows them) and override the config file only
// when given.
// ---------------------------------------------------------------------------

class Binder {
 public:
  template <typename T, typename Setter>
  CLI::Option* add(CLI::App* app, const std::string& name, const std::string& desc, T init, Setter set) {
    auto value = std::make_shared<T>(std::move(init));
    CLI::Option* opt = app->add_option(name, *value, desc)->capture_default_str();
    actions_.push_back([opt, value, set] {
      if (opt->count() > 0) set(*value);
    });
    return opt;
  }
  void apply() const {
    for (const auto& a : actions_) a();
  }

 private:
  std::vector<std::function<void()>> actions_;
};

std::vector<int> parse_int_list(const std::string& s) {
  KeyValues kv;
  kv.set("v", s);
  return kv.get("v", std::vector<int>{});
}

void add_common_flags(CLI::App* app, Settings& s, bool needs_out) {
  app->add_option("--config", s.config_path, "key=value config file (data.*, train.*, sweep.* and pipeline keys)")
      ->capture_default_str();
  auto* out = app->add_option("--out", s.out, "output directory; receives every artifact and a manifest");
  if (needs_out) out->required();
  app->add_option("--threads", s.threads, "worker threads (0: STN_ALIGN_THREADS or all cores)")->capture_default_str();
  app->add_flag("--deterministic", s.deterministic, "single worker; bitwise-reproducible outputs");
}

void add_dataset_flags(CLI::App* app, Binder& b, Settings& s, const std::string& seed_flag) {
  DatasetOptions& d = s.data;
  b.add(app, seed_flag, "dataset seed", static_cast<long>(d.seed), [&d](long v) {
    if (v < 0) throw UsageError("dataset seed must be non-negative");
    d.seed = static_cast<std::uint64_t>(v);
  });
  b.add(app, "--identities", "number of glyph identities", d.identities, [&d](int v) { d.identities = v; });
  b.add(app, "--obs-per-identity", "observations per identity", d.observations_per_identity,
        [&d](int v) { d.observations_per_identity = v; });
  b.add(app, "--image-size", "observation side length in pixels", d.image_size, [&d](int v) { d.image_size = v; });
  b.add(app, "--perturbation", "perturbation family: identity|similarity|affine|projective",
        std::string(kind_name(d.perturbation)), [&d](const std::string& v) { d.perturbation = parse_kind(v); });
  b.add(app, "--alpha", "rotation range, radians (+-)", d.ranges.alpha, [&d](double v) { d.ranges.alpha = v; });
  b.add(app, "--scale-min", "smallest scale", d.ranges.scale_min, [&d](double v) { d.ranges.scale_min = v; });
  b.add(app, "--scale-max", "largest scale", d.ranges.scale_max, [&d](double v) { d.ranges.scale_max = v; });
  b.add(app, "--shift", "translation range, normalized units (+-)", d.ranges.shift,
        [&d](double v) { d.ranges.shift = v; });
  b.add(app, "--shear", "affine shear/anisotropy range (+-)", d.ranges.shear, [&d](double v) { d.ranges.shear = v; });
  b.add(app, "--perspective", "projective G, H range (+-)", d.ranges.perspective,
        [&d](double v) { d.ranges.perspective = v; });
  b.add(app, "--noise", "additive Gaussian pixel noise std", d.noise, [&d](double v) { d.noise = v; });
  b.add(app, "--test-fraction", "share of identities held out for verification", d.test_fraction,
        [&d](double v) { d.test_fraction = v; });
  b.add(app, "--pairs", "verification pairs (even; half same-identity)", d.pairs, [&d](int v) { d.pairs = v; });
}

void add_pipeline_flags(CLI::App* app, Binder& b, Settings& s) {
  PipelineConfig& p = s.pipe;
  b.add(app, "--kind", "transform kind: identity|similarity|affine|projective", std::string(kind_name(p.kind)),
        [&p](const std::string& v) { p.kind = parse_kind(v); });
  b.add(app, "--loc-input-size", "localization network input side", p.loc_input_size,
        [&p](int v) { p.loc_input_size = v; });
  b.add(app, "--warp-size", "aligned output side", p.warp_size, [&p](int v) { p.warp_size = v; });
  b.add(app, "--loc-widths", "localization conv widths, comma separated", KeyValues::format(p.loc.conv_widths),
        [&p](const std::string& v) { p.loc.conv_widths = parse_int_list(v); });
  b.add(app, "--rec-widths", "recognition stage widths, comma separated", KeyValues::format(p.rec.stage_widths),
        [&p](const std::string& v) { p.rec.stage_widths = parse_int_list(v); });
  b.add(app, "--feature-width", "embedding width", p.rec.feature_width, [&p](int v) { p.rec.feature_width = v; });
}

void add_train_flags(CLI::App* app, Binder& b, Settings& s, const std::string& seed_flag) {
  TrainConfig& t = s.train;
  b.add(app, seed_flag, "training seed", static_cast<long>(t.seed), [&t](long v) {
    if (v < 0) throw UsageError("training seed must be non-negative");
    t.seed = static_cast<std::uint64_t>(v);
  });
  b.add(app, "--max-iters", "SGD iterations", t.max_iters, [&t](long v) { t.max_iters = v; });
  b.add(app, "--batch-size", "minibatch size", t.batch_size, [&t](int v) { t.batch_size = v; });
  b.add(app, "--base-lr", "initial recognition learning rate", t.base_lr, [&t](double v) { t.base_lr = v; });
  b.add(app, "--lr-decay-every", "iterations between learning-rate drops", t.lr_decay_every,
        [&t](long v) { t.lr_decay_every = v; });
  b.add(app, "--lr-decay-factor", "learning-rate drop factor", t.lr_decay_factor,
        [&t](double v) { t.lr_decay_factor = v; });
  b.add(app, "--loc-lr-ratio", "localization / recognition learning-rate ratio (0 freezes)", t.loc_lr_ratio,
        [&t](double v) { t.loc_lr_ratio = v; });
  b.add(app, "--center-loss-weight", "center-loss weight", t.center_loss_weight,
        [&t](double v) { t.center_loss_weight = v; });
  b.add(app, "--momentum", "SGD momentum", t.momentum, [&t](double v) { t.momentum = v; });
  b.add(app, "--reinit-at", "recognition redraw: auto (max_iters/2), none, or an iteration", t.reinit_at,
        [&t](const std::string& v) { t.reinit_at = v; });
  b.add(app, "--reinit-centers", "redraw class centers with the recognition network", t.reinit_centers,
        [&t](bool v) { t.reinit_centers = v; });
  b.add(app, "--flip-augment", "add mirrored training copies", t.flip_augment, [&t](bool v) { t.flip_augment = v; });
  b.add(app, "--checkpoint-every", "iterations between periodic snapshots (0: none)", t.checkpoint_every,
        [&t](long v) { t.checkpoint_every = v; });
}

// ---------------------------------------------------------------------------
// Config files
// ---------------------------------------------------------------------------

KeyValues section(const KeyValues& kv, const std::string& prefix) {
  KeyValues out;
  for (const auto& [k, v] : kv.entries())
    if (k.rfind(prefix, 0) == 0) out.set(k.substr(prefix.size()), v);
  return out;
}

KeyValues unprefixed(const KeyValues& kv, const std::vector<std::string>& prefixes) {
  KeyValues out;
  for (const auto& [k, v] : kv.entries()) {
    const bool claimed = std::any_of(prefixes.begin(), prefixes.end(),
                                     [&](const std::string& p) { return k.rfind(p, 0) == 0; });
    if (!claimed) out.set(k, v);
  }
  return out;
}

void read_sweep(SweepConfig& c, LocNetSpec& loc, const KeyValues& kv) {
  c.batch_size = kv.get("batch_size", c.batch_size);
  c.iters = kv.get("iters", c.iters);
  c.lr = kv.get("lr", c.lr);
  c.momentum = kv.get("momentum", c.momentum);
  c.decay_every = kv.get("decay_every", c.decay_every);
  c.decay_factor = kv.get("decay_factor", c.decay_factor);
  c.seed = static_cast<std::uint64_t>(kv.get("seed", static_cast<long>(c.seed)));
  loc.kind = parse_kind(kv.get("loc.kind", std::string(kind_name(loc.kind))));
  loc.input_size = kv.get("loc.input_size", loc.input_size);
  loc.read(kv, "loc.");
}

KeyValues sweep_kv(const SweepConfig& c, const LocNetSpec& loc) {
  KeyValues kv;
  kv.set("batch_size", std::to_string(c.batch_size));
  kv.set("iters", std::to_string(c.iters));
  kv.set("lr", KeyValues::format(c.lr));
  kv.set("momentum", KeyValues::format(c.momentum));
  kv.set("decay_every", std::to_string(c.decay_every));
  kv.set("decay_factor", KeyValues::format(c.decay_factor));
  kv.set("seed", std::to_string(c.seed));
  kv.set("loc.kind", kind_name(loc.kind));
  kv.set("loc.input_size", std::to_string(loc.input_size));
  loc.write(kv, "loc.");
  return kv;
}

void read_eval(EvalOptions& e, const KeyValues& kv) {
  e.pca_dim = static_cast<std::size_t>(kv.get("pca_dim", static_cast<long>(e.pca_dim)));
  e.folds = static_cast<std::size_t>(kv.get("folds", static_cast<long>(e.folds)));
  e.samples = kv.get("samples", e.samples);
}

/// Layers the config file under the flags. Keys that no section reads are rejected.
void load_config(Settings& s) {
  if (s.config_path.empty()) return;
  if (!fs::is_regular_file(s.config_path)) throw IoError("cannot open config file " + s.config_path);
  const KeyValues kv = KeyValues::load(s.config_path);
  const KeyValues data = section(kv, "data."), train = section(kv, "train."), sweep = section(kv, "sweep."),
                  eval = section(kv, "eval.");
  const KeyValues pipe = unprefixed(kv, {"data.", "train.", "sweep.", "eval."});
  s.data.read(data);
  s.train.read(train);
  read_sweep(s.sweep, s.sweep_loc, sweep);
  read_eval(s.eval, eval);
  s.pipe.read(pipe);
  std::vector<std::string> unknown;
  for (const auto& [prefix, sec] : std::vector<std::pair<std::string, const KeyValues*>>{
           {"data.", &data}, {"train.", &train}, {"sweep.", &sweep}, {"eval.", &eval}, {"", &pipe}}) {
    for (const auto& k : sec->unused()) unknown.push_back(prefix + k);
  }
  if (!unknown.empty()) {
    std::string msg = "unknown config keys in " + s.config_path + ":";
    for (const auto& k : unknown) msg += " " + k;
    throw UsageError(msg);
  }
}

KeyValues prefixed(const KeyValues& kv, const std::string& prefix) {
  KeyValues out;
  for (const auto& [k, v] : kv.entries()) out.set(prefix + k, v);
  return out;
}

void merge(KeyValues& into, const KeyValues& from) {
  for (const auto& [k, v] : from.entries()) into.set(k, v);
}

void print_resolved(const std::string& command, const KeyValues& kv, const Settings& s) {
  std::cout << "# stn_align " << command << " resolved configuration\n" << kv.to_text();
  std::cout << "# workers=" << s.workers() << (s.deterministic ? " (deterministic)" : "") << "\n" << std::flush;
}

// ---------------------------------------------------------------------------
// Output directory with manifest
// ---------------------------------------------------------------------------

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

class OutDir {
 public:
  explicit OutDir(std::string root) : root_(std::move(root)) {
    std::error_code ec;
    fs::create_directories(root_, ec);
    if (ec || !fs::is_directory(root_)) throw IoError("cannot create output directory " + root_);
  }

  std::string path(const std::string& rel) {
    const fs::path p = fs::path(root_) / rel;
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + p.parent_path().string());
    files_.push_back(rel);
    return p.string();
  }
  void text(const std::string& rel, const std::string& content) { write_text_file(path(rel), content); }

  /// manifest.txt: "<relative path> <bytes> <fnv1a64>" per artifact, sorted by path.
  void finish() {
    std::sort(files_.begin(), files_.end());
    files_.erase(std::unique(files_.begin(), files_.end()), files_.end());
    std::string m = "# path bytes fnv1a64\n";
    char buf[64];
    for (const auto& rel : files_) {
      const std::string bytes = read_text_file((fs::path(root_) / rel).string());
      std::snprintf(buf, sizeof buf, " %zu %016llx\n", bytes.size(), static_cast<unsigned long long>(fnv1a64(bytes)));
      m += rel + buf;
    }
    write_text_file((fs::path(root_) / "manifest.txt").string(), m);
  }

 private:
  std::string root_;
  std::vector<std::string> files_;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void sync_pipeline(Settings& s) {
  s.pipe.image_size = s.data.image_size;
  s.pipe.center_weight = s.train.center_loss_weight;
  s.pipe.sync();
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

struct GradcheckArgs {
  std::string module = "all";
  int trials = 100;
  std::optional<double> tolerance;
  long seed = 1;
};

int cmd_gradcheck(const GradcheckArgs& a, Settings& s) {
  KeyValues kv;
  kv.set("module", a.module);
  kv.set("trials", std::to_string(a.trials));
  kv.set("seed", std::to_string(a.seed));
  kv.set("tolerance", a.tolerance ? KeyValues::format(*a.tolerance) : "per-op default");
  print_resolved("gradcheck", kv, s);
  if (a.trials == 0) std::cerr << "warning: --trials 0 runs no checks; passing vacuously\n";
  const auto t0 = std::chrono::steady_clock::now();
  const GradCheckReport rep = run_gradcheck(a.module, a.trials, static_cast<std::uint64_t>(a.seed), a.tolerance);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::string table = "# op checks skipped worst_rel_err tolerance status\n";
  for (const auto& op : rep.ops) {
    table += op.op + " " + std::to_string(op.checks) + " " + std::to_string(op.skipped) + " " +
             fmt("%.3e", op.worst) + " " + fmt("%.1e", op.tolerance) + " " + (op.pass() ? "PASS" : "FAIL") + "\n";
  }
  std::cout << table << "elapsed " << fmt("%.2f", secs) << " s\n" << (rep.pass() ? "PASS" : "FAIL") << "\n";
  if (!s.out.empty()) {
    OutDir out(s.out);
    out.text("gradcheck.txt", table);
    out.finish();
  }
  return rep.pass() ? kExitOk : kExitFail;
}

std::string observations_table(const std::vector<Observation>& obs, const std::string& dir) {
  std::string t = "# obs_id label transform_record image_path\n";
  for (const auto& o : obs) {
    t += std::to_string(o.obs_id) + " " + std::to_string(o.label) + " " + to_inline_record(o.truth) + " " + dir + "/" +
         std::to_string(o.obs_id) + ".pgm\n";
  }
  return t;
}

int cmd_gen_data(Settings& s, bool flip) {
  KeyValues kv = prefixed(s.data.to_kv(), "data.");
  kv.set("flip", flip ? "true" : "false");
  print_resolved("gen-data", kv, s);
  DatasetSplit split = generate_dataset(s.data);
  if (flip) split = augment_flip(std::move(split));
  OutDir out(s.out);
  out.text("config.txt", prefixed(s.data.to_kv(), "data.").to_text());
  for (const auto& o : split.train) write_pgm(out.path("train/" + std::to_string(o.obs_id) + ".pgm"), o.image);
  for (const auto& o : split.test) write_pgm(out.path("test/" + std::to_string(o.obs_id) + ".pgm"), o.image);
  for (const auto& id : split.identities)
    write_pgm(out.path("canonical/" + std::to_string(id.id) + ".pgm"), id.canonical);
  out.text("train.txt", observations_table(split.train, "train"));
  out.text("test.txt", observations_table(split.test, "test"));
  std::string pairs = "# first_obs_id second_obs_id same\n";
  for (const auto& p : split.pairs) {
    pairs += std::to_string(split.test[p.first].obs_id) + " " + std::to_string(split.test[p.second].obs_id) + " " +
             (p.same ? "1" : "0") + "\n";
  }
  out.text("pairs.txt", pairs);
  std::map<int, LandmarkSet> truth;
  for (const auto& o : split.test)
    truth[o.obs_id] = LandmarkSet{observed_landmarks(o, canonical_landmarks()), LandmarkFrame::original, std::nullopt};
  out.text("test_landmarks.csv", format_landmark_csv(truth));
  out.finish();
  std::cout << "wrote " << split.train.size() << " training and " << split.test.size() << " test observations, "
            << split.pairs.size() << " pairs to " << s.out << "\n";
  return kExitOk;
}

KeyValues train_resolved(const Settings& s) {
  KeyValues kv = prefixed(s.data.to_kv(), "data.");
  merge(kv, prefixed(s.train.to_kv(), "train."));
  merge(kv, s.pipe.to_kv());
  return kv;
}

int cmd_train(Settings& s, long log_every) {
  sync_pipeline(s);
  s.train.workers = s.workers();
  const KeyValues resolved = train_resolved(s);
  print_resolved("train", resolved, s);
  s.train.validate();
  s.pipe.validate();
  const DatasetSplit split = generate_dataset(s.data);
  OutDir out(s.out);
  out.text("config.txt", resolved.to_text());
  auto write_checkpoints = [&](const TrainRun& run) {
    for (const auto& [name, ckpt] : run.checkpoints) save_checkpoint(out.path("checkpoints/" + name + ".ckpt"), ckpt);
  };
  TrainRun run = init_training(s.train, s.pipe, split);
  const TrainingSet data = make_training_set(split, s.train.flip_augment);
  try {
    continue_training(run, data, [&](const MetricsRow& r) {
      if (log_every > 0 && r.iter % log_every == 0) std::cout << format_metrics_row(r) << "\n" << std::flush;
    });
  } catch (const TrainingDiverged& e) {
    out.text("metrics.log", format_metrics_log(run.metrics));
    write_checkpoints(run);
    save_checkpoint(out.path("checkpoints/diverged_last.ckpt"), e.last_checkpoint());
    out.finish();
    std::cerr << "error: " << e.what() << "; last good checkpoint saved\n";
    return kExitFail;
  }
  out.text("metrics.log", format_metrics_log(run.metrics));
  write_checkpoints(run);
  out.finish();
  std::cout << "trained " << run.iteration << " iterations; checkpoints in " << s.out << "/checkpoints\n";
  return kExitOk;
}

PipelineState load_pipeline(const std::string& path) { return pipeline_from_checkpoint(load_checkpoint(path)); }

int cmd_eval(Settings& s, const std::string& checkpoint) {
  const PipelineState state = load_pipeline(checkpoint);
  if (state.config.image_size != s.data.image_size) {
    throw UsageError("checkpoint expects image_size " + std::to_string(state.config.image_size) + ", dataset has " +
                     std::to_string(s.data.image_size));
  }
  const std::size_t pca = s.eval.pca_dim == 0 ? default_pca_dim(state) : s.eval.pca_dim;
  KeyValues kv = prefixed(s.data.to_kv(), "data.");
  kv.set("checkpoint", checkpoint);
  kv.set("eval.pca_dim", std::to_string(pca));
  kv.set("eval.folds", std::to_string(s.eval.folds));
  kv.set("eval.samples", std::to_string(s.eval.samples));
  print_resolved("eval", kv, s);
  const DatasetSplit split = generate_dataset(s.data);
  const VerificationReport rep = evaluate_verification(state, split, pca, s.eval.folds, s.workers());
  OutDir out(s.out);
  std::string v = "accuracy " + KeyValues::format(rep.accuracy) + "\nthreshold " + KeyValues::format(rep.threshold) +
                  "\npca_dim " + std::to_string(rep.pca_dim) + "\n# fold accuracy threshold\n";
  for (std::size_t f = 0; f < rep.fold_accuracy.size(); ++f) {
    v += std::to_string(f) + " " + KeyValues::format(rep.fold_accuracy[f]) + " " +
         KeyValues::format(rep.fold_threshold[f]) + "\n";
  }
  out.text("verification.txt", v);
  std::string roc = "# fpr tpr threshold\n";
  for (const auto& p : rep.roc)
    roc += KeyValues::format(p.fpr) + " " + KeyValues::format(p.tpr) + " " + KeyValues::format(p.threshold) + "\n";
  out.text("roc.txt", roc);
  const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(std::max(s.eval.samples, 0)), split.test.size());
  if (n > 0) {
    std::vector<std::size_t> idx(n);
    for (std::size_t k = 0; k < n; ++k) idx[k] = k * split.test.size() / n;
    const PipelineForward fwd = forward_pipeline(state, stack_images(split.test, idx), 1);
    std::string params = "# obs_id transform_record\n";
    for (std::size_t k = 0; k < n; ++k) {
      const Observation& o = split.test[idx[k]];
      write_pgm(out.path("samples/" + std::to_string(o.obs_id) + "_input.pgm"), o.image);
      write_pgm(out.path("samples/" + std::to_string(o.obs_id) + "_aligned.pgm"), fwd.warped.item(k));
      params += std::to_string(o.obs_id) + " " +
                to_inline_record(fwd.predicted[k] ? *fwd.predicted[k] : TransformParams{IdentityTransform{}}) + "\n";
    }
    out.text("samples/params.txt", params);
  }
  out.finish();
  std::cout << "verification accuracy " << fmt("%.4f", rep.accuracy) << " over " << split.pairs.size() << " pairs\n";
  return kExitOk;
}

int cmd_sweep(Settings& s) {
  s.sweep.workers = s.workers();
  s.sweep_loc.kind = s.data.perturbation == TransformKind::identity ? s.sweep_loc.kind : s.data.perturbation;
  KeyValues kv = prefixed(s.data.to_kv(), "data.");
  merge(kv, prefixed(sweep_kv(s.sweep, s.sweep_loc), "sweep."));
  print_resolved("sweep-locnet", kv, s);
  if (s.data.image_size % s.sweep_loc.input_size != 0) {
    throw UsageError("image_size must be a multiple of the localization input size");
  }
  const DatasetSplit split = generate_dataset(s.data);
  OutDir out(s.out);
  out.text("config.txt", kv.to_text());
  std::string table = "# architecture | params | initial_mse | fit_mse\n";
  locnet_regression_sweep(locnet_variants(s.sweep_loc), split, s.sweep, [&](const SweepRow& r) {
    const std::string line = r.name + " | " + std::to_string(r.param_count) + " | " + KeyValues::format(r.initial_mse) +
                             " | " + KeyValues::format(r.fit_mse) + "\n";
    table += line;
    std::cout << line << std::flush;
  });
  out.text("sweep_table.txt", table);
  out.finish();
  return kExitOk;
}

int cmd_compare(Settings& s, const std::string& kinds_arg, int seeds) {
  sync_pipeline(s);
  s.train.workers = s.workers();
  std::vector<TransformKind> kinds;
  {
    std::stringstream ss(kinds_arg);
    std::string k;
    while (std::getline(ss, k, ',')) kinds.push_back(parse_kind(k));
  }
  if (kinds.empty()) throw UsageError("--kinds lists no transform kinds");
  if (seeds < 1) throw UsageError("--seeds must be >= 1");
  KeyValues kv = train_resolved(s);
  kv.set("kinds", kinds_arg);
  kv.set("seeds", std::to_string(seeds));
  print_resolved("compare-kinds", kv, s);
  s.train.validate();
  const DatasetSplit split = generate_dataset(s.data);
  std::map<TransformKind, std::vector<double>> acc;
  std::map<TransformKind, std::size_t> loc_params;
  for (int k = 0; k < seeds; ++k) {
    TrainConfig t = s.train;
    t.seed = s.train.seed + static_cast<std::uint64_t>(k);
    for (const auto& r : compare_transform_kinds(t, s.pipe, split, kinds, s.eval.pca_dim, s.eval.folds)) {
      acc[r.kind].push_back(r.accuracy);
      loc_params[r.kind] = r.loc_params;
      std::cout << kind_name(r.kind) << " seed " << t.seed << " accuracy " << fmt("%.4f", r.accuracy) << "\n"
                << std::flush;
    }
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  };
  const bool has_identity = acc.count(TransformKind::identity) > 0;
  const double base = has_identity ? median(acc[TransformKind::identity]) : 0.0;
  std::string table = "# kind loc_params";
  for (int k = 0; k < seeds; ++k) table += " acc_seed" + std::to_string(s.train.seed + static_cast<std::uint64_t>(k));
  table += " median margin_vs_identity_points\n";
  for (TransformKind kind : kinds) {
    table += std::string(kind_name(kind)) + " " + std::to_string(loc_params[kind]);
    for (double a : acc[kind]) table += " " + fmt("%.4f", a);
    const double m = median(acc[kind]);
    table += " " + fmt("%.4f", m) + " " + (has_identity ? fmt("%+.2f", 100.0 * (m - base)) : "n/a") + "\n";
  }
  OutDir out(s.out);
  out.text("config.txt", kv.to_text());
  out.text("kinds_table.txt", table);
  out.finish();
  std::cout << table;
  return kExitOk;
}

struct WarpArgs {
  std::string input;
  std::string params;
  std::string checkpoint;
  std::string output;
  std::string params_out;
  int size = 0;
};

int cmd_warp(const WarpArgs& a, Settings& s) {
  KeyValues kv;
  kv.set("input", a.input);
  kv.set(a.params.empty() ? "checkpoint" : "params", a.params.empty() ? a.checkpoint : a.params);
  kv.set("output", a.output);
  kv.set("size", a.size > 0 ? std::to_string(a.size) : "default");
  print_resolved("warp", kv, s);
  const Tensor image = read_pgm(a.input);
  if (!a.params.empty()) {
    const TransformParams p = parse_record(read_text_file(a.params));
    const std::size_t h = a.size > 0 ? static_cast<std::size_t>(a.size) : image.dim(2);
    const std::size_t w = a.size > 0 ? static_cast<std::size_t>(a.size) : image.dim(3);
    write_pgm(a.output, bilinear_sample(image, generate_grid(p, h, w)).image);
    return kExitOk;
  }
  const PipelineState state = load_pipeline(a.checkpoint);
  const auto is = static_cast<std::size_t>(state.config.image_size);
  if (image.dim(2) != is || image.dim(3) != is) {
    throw UsageError("checkpoint expects " + std::to_string(is) + "x" + std::to_string(is) + " inputs, got " +
                     shape_string(image.shape()));
  }
  const PipelineForward fwd = forward_pipeline(state, image, 1);
  const TransformParams p = fwd.predicted[0] ? *fwd.predicted[0] : TransformParams{IdentityTransform{}};
  if (fwd.degenerate[0]) std::cerr << "warning: predicted transform is degenerate; identity warp used\n";
  const std::size_t size = a.size > 0 ? static_cast<std::size_t>(a.size) : static_cast<std::size_t>(state.config.warp_size);
  const TransformParams used = fwd.degenerate[0] ? TransformParams{IdentityTransform{}} : p;
  write_pgm(a.output, bilinear_sample(image, generate_grid(used, size, size, state.config.divisor_floor)).image);
  write_text_file(a.params_out.empty() ? a.output + ".params.txt" : a.params_out, to_record(p));
  std::cout << to_inline_record(p) << "\n";
  return kExitOk;
}

struct RelocateArgs {
  std::string landmarks;
  std::string params;
  std::string output;
  bool experiment = false;
  int images = 200;
  std::string aligner = "truth";
  std::string checkpoint;
  double detector_noise = 0.01;
  double pose_bias = 0.5;
  double aligner_noise = 0.0;
  long seed = 1;
};

/// Per-image params file: one record for every image, or lines "image_id <inline record>".
std::map<int, TransformParams> read_params_table(const std::string& text, std::optional<TransformParams>& shared) {
  std::map<int, TransformParams> out;
  std::istringstream in(text);
  std::string line;
  bool table = false;
  while (std::getline(in, line)) {
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    table = std::isdigit(static_cast<unsigned char>(line[first])) || line[first] == '-';
    break;
  }
  if (!table) {
    shared = parse_record(text);
    return out;
  }
  in.clear();
  in.seekg(0);
  while (std::getline(in, line)) {
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    int id = 0;
    std::string record;
    if (!(ls >> id >> record)) throw InputError("params table line is not 'image_id record': " + line);
    out[id] = parse_record(record);
  }
  return out;
}

int cmd_relocate(const RelocateArgs& a, Settings& s) {
  if (!a.experiment) {
    if (a.landmarks.empty() || a.params.empty() || a.output.empty()) {
      throw UsageError("relocate needs --landmarks, --params and --output (or --experiment)");
    }
    KeyValues kv;
    kv.set("landmarks", a.landmarks);
    kv.set("params", a.params);
    kv.set("output", a.output);
    print_resolved("relocate", kv, s);
    const auto sets = parse_landmark_csv(read_text_file(a.landmarks));
    std::optional<TransformParams> shared;
    const auto table = read_params_table(read_text_file(a.params), shared);
    std::map<int, LandmarkSet> out;
    for (const auto& [id, set] : sets) {
      auto it = table.find(id);
      if (!shared && it == table.end()) throw InputError("no transform for image " + std::to_string(id));
      out[id] = relocate(set, shared ? *shared : it->second);
    }
    write_text_file(a.output, format_landmark_csv(out));
    return kExitOk;
  }
  if (s.out.empty()) throw UsageError("relocate --experiment needs --out");
  if (a.images < 1) throw UsageError("--images must be >= 1");
  if (a.aligner != "truth" && a.aligner != "checkpoint") throw UsageError("--aligner must be truth or checkpoint");
  if (a.aligner == "checkpoint" && a.checkpoint.empty()) throw UsageError("--aligner checkpoint needs --checkpoint");
  KeyValues kv = prefixed(s.data.to_kv(), "data.");
  kv.set("images", std::to_string(a.images));
  kv.set("aligner", a.aligner);
  if (!a.checkpoint.empty()) kv.set("checkpoint", a.checkpoint);
  kv.set("aligner_noise", KeyValues::format(a.aligner_noise));
  kv.set("detector_noise", KeyValues::format(a.detector_noise));
  kv.set("pose_bias", KeyValues::format(a.pose_bias));
  kv.set("seed", std::to_string(a.seed));
  print_resolved("relocate", kv, s);

  const DatasetSplit split = generate_dataset(s.data);
  if (split.test.size() < static_cast<std::size_t>(a.images)) {
    throw UsageError("dataset has only " + std::to_string(split.test.size()) + " test observations");
  }
  const std::vector<Observation> obs(split.test.begin(), split.test.begin() + a.images);
  std::map<int, TransformParams> aligned;
  if (a.aligner == "checkpoint") {
    const PipelineState state = load_pipeline(a.checkpoint);
    if (!state.has_locnet()) throw UsageError("checkpoint has no localization network");
    for (const auto& o : obs) {
      const PipelineForward f = forward_pipeline(state, o.image, 1);
      aligned[o.obs_id] = f.degenerate[0] ? TransformParams{IdentityTransform{}} : *f.predicted[0];
    }
  } else {
    std::mt19937_64 rng(derive_seed(static_cast<std::uint64_t>(a.seed), 0xa119ULL));
    std::normal_distribution<double> g(0.0, 1.0);
    for (const auto& o : obs) {
      std::vector<double> v = to_vector(promote(invert(o.truth), TransformKind::projective));
      if (a.aligner_noise > 0.0)
        for (std::size_t k = 0; k < 6; ++k) v[k] += a.aligner_noise * g(rng);
      aligned[o.obs_id] = from_vector(TransformKind::projective, v);
    }
  }
  const DetectorModel model{a.detector_noise, a.pose_bias};
  const RelocationExperiment ex = relocation_experiment(
      obs, [&](const Observation& o) { return aligned.at(o.obs_id); }, model, static_cast<std::uint64_t>(a.seed));
  OutDir out(s.out);
  out.text("ced_direct.txt", format_ced(ex.direct));
  out.text("ced_relocated.txt", format_ced(ex.relocated));
  std::string per = "# obs_id pose direct_error relocated_error normalizer\n";
  for (std::size_t i = 0; i < obs.size(); ++i) {
    const auto& t = ex.trials[i];
    per += std::to_string(obs[i].obs_id) + " " + KeyValues::format(t.pose) + " " + KeyValues::format(t.direct_error) +
           " " + KeyValues::format(t.relocated_error) + " " + KeyValues::format(t.normalizer) + "\n";
  }
  out.text("trials.txt", per);
  const std::string summary = "mean_direct " + KeyValues::format(ex.mean_direct) + "\nmean_relocated " +
                              KeyValues::format(ex.mean_relocated) + "\ndominance " +
                              KeyValues::format(ex.dominance) + "\n";
  out.text("summary.txt", summary);
  out.finish();
  std::cout << summary;
  return kExitOk;
}

int cmd_info(Settings& s) {
  print_resolved("info", KeyValues{}, s);
  std::cout << "transform kinds:";
  for (auto k : {TransformKind::identity, TransformKind::similarity, TransformKind::affine, TransformKind::projective})
    std::cout << " " << kind_name(k) << "(" << param_count(k) << ")";
  std::cout << "\nworkers available: " << default_workers() << "\n";
  std::mt19937_64 rng(0);
  for (auto kind : {TransformKind::identity, TransformKind::similarity}) {
    const PipelineState p = build_pipeline(desk_pipeline(kind), 0);
    std::cout << "desk pipeline (" << kind_name(kind) << "): loc " << count_params(p.params, "loc.") << " params, rec "
              << count_params(p.params, "rec.") << " params\n";
  }
  std::cout << "# localization variants (desk sweep network)\n";
  for (const auto& spec : locnet_variants(desk_sweep_locnet())) {
    const NetworkState n = build_locnet(spec, rng);
    std::cout << architecture_name(spec) << " | " << count_params(n.params) << "\n";
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatial-transformer alignment toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "stn_align 1.0");

  std::map<std::string, Settings> settings;
  Binder binder;

  GradcheckArgs gc;
  auto* c_gc = app.add_subcommand("gradcheck", "finite-difference checks of every analytic gradient");
  c_gc->add_option("--module", gc.module, "transforms|sampler|layers|pipeline|all")
      ->capture_default_str()
      ->check(CLI::IsMember(gradcheck_modules()));
  c_gc->add_option("--trials", gc.trials, "random instances per operation")->capture_default_str()->check(
      CLI::NonNegativeNumber);
  c_gc->add_option("--tolerance", gc.tolerance, "override every per-op relative-error tolerance (default: per op)");
  c_gc->add_option("--seed", gc.seed, "random seed")->capture_default_str();
  add_common_flags(c_gc, settings["gradcheck"], false);

  bool flip = false;
  auto* c_gen = app.add_subcommand("gen-data", "write a synthetic glyph dataset as PGM images plus manifests");
  add_common_flags(c_gen, settings["gen-data"], true);
  add_dataset_flags(c_gen, binder, settings["gen-data"], "--seed");
  c_gen->add_flag("--flip", flip, "also write mirrored copies of the training observations");

  long log_every = 100;
  auto* c_train = app.add_subcommand("train", "train an alignment + recognition pipeline");
  add_common_flags(c_train, settings["train"], true);
  add_dataset_flags(c_train, binder, settings["train"], "--data-seed");
  add_pipeline_flags(c_train, binder, settings["train"]);
  add_train_flags(c_train, binder, settings["train"], "--seed");
  c_train->add_option("--log-every", log_every, "print a metrics row every N iterations (0: quiet)")
      ->capture_default_str();

  std::string eval_ckpt;
  auto* c_eval = app.add_subcommand("eval", "verification accuracy of a checkpoint on the held-out identities");
  add_common_flags(c_eval, settings["eval"], true);
  add_dataset_flags(c_eval, binder, settings["eval"], "--data-seed");
  c_eval->add_option("--checkpoint", eval_ckpt, "pipeline checkpoint")->required();
  {
    EvalOptions& e = settings["eval"].eval;
    binder.add(c_eval, "--pca-dim", "PCA dimension (0: min(feature width, 32))", e.pca_dim,
               [&e](std::size_t v) { e.pca_dim = v; });
    binder.add(c_eval, "--folds", "cross-validation folds", e.folds, [&e](std::size_t v) { e.folds = v; });
    binder.add(c_eval, "--samples", "aligned sample images to write", e.samples, [&e](int v) { e.samples = v; });
  }

  Settings& sw = settings["sweep-locnet"];
  sw.data = desk_sweep_dataset();
  auto* c_sweep = app.add_subcommand("sweep-locnet", "supervised regression sweep over six localization networks");
  add_common_flags(c_sweep, sw, true);
  add_dataset_flags(c_sweep, binder, sw, "--data-seed");
  binder.add(c_sweep, "--seed", "initialization and batch-order seed", static_cast<long>(sw.sweep.seed),
             [&sw](long v) { sw.sweep.seed = static_cast<std::uint64_t>(v); });
  binder.add(c_sweep, "--iters", "SGD iterations per architecture", sw.sweep.iters, [&sw](long v) { sw.sweep.iters = v; });
  binder.add(c_sweep, "--batch-size", "minibatch size", sw.sweep.batch_size, [&sw](int v) { sw.sweep.batch_size = v; });
  binder.add(c_sweep, "--lr", "initial learning rate", sw.sweep.lr, [&sw](double v) { sw.sweep.lr = v; });
  binder.add(c_sweep, "--decay-every", "iterations between learning-rate drops", sw.sweep.decay_every,
             [&sw](long v) { sw.sweep.decay_every = v; });
  binder.add(c_sweep, "--loc-input-size", "localization input side", sw.sweep_loc.input_size,
             [&sw](int v) { sw.sweep_loc.input_size = v; });
  binder.add(c_sweep, "--loc-widths", "conv widths, comma separated", KeyValues::format(sw.sweep_loc.conv_widths),
             [&sw](const std::string& v) { sw.sweep_loc.conv_widths = parse_int_list(v); });
  binder.add(c_sweep, "--loc-kernels", "conv kernel sizes, comma separated", KeyValues::format(sw.sweep_loc.kernel_sizes),
             [&sw](const std::string& v) { sw.sweep_loc.kernel_sizes = parse_int_list(v); });
  binder.add(c_sweep, "--fc-width", "hidden FC width", sw.sweep_loc.fc_width, [&sw](int v) { sw.sweep_loc.fc_width = v; });

  std::string kinds = "identity,similarity,affine,projective";
  int seeds = 1;
  auto* c_cmp = app.add_subcommand("compare-kinds", "train one pipeline per transform kind and tabulate accuracy");
  add_common_flags(c_cmp, settings["compare-kinds"], true);
  add_dataset_flags(c_cmp, binder, settings["compare-kinds"], "--data-seed");
  add_pipeline_flags(c_cmp, binder, settings["compare-kinds"]);
  add_train_flags(c_cmp, binder, settings["compare-kinds"], "--seed");
  c_cmp->add_option("--kinds", kinds, "comma-separated transform kinds")->capture_default_str();
  c_cmp->add_option("--seeds", seeds, "training seeds per kind (seed, seed+1, ...); the table reports the median")
      ->capture_default_str();

  WarpArgs wa;
  auto* c_warp = app.add_subcommand("warp", "warp an image by a transform record or a checkpoint's prediction");
  add_common_flags(c_warp, settings["warp"], false);
  c_warp->add_option("--input", wa.input, "input PGM")->required();
  auto* o_params = c_warp->add_option("--params", wa.params, "transform record file");
  auto* o_ckpt = c_warp->add_option("--checkpoint", wa.checkpoint, "pipeline checkpoint; predicts the transform");
  o_params->excludes(o_ckpt);
  c_warp->add_option("--output", wa.output, "output PGM")->required();
  c_warp->add_option("--params-out", wa.params_out, "predicted record file (default: <output>.params.txt)");
  c_warp->add_option("--size", wa.size, "output side (0: input size, or warp_size with --checkpoint)")
      ->capture_default_str();

  RelocateArgs ra;
  auto* c_rel = app.add_subcommand("relocate", "map aligned-frame landmarks back to the original frame");
  add_common_flags(c_rel, settings["relocate"], false);
  add_dataset_flags(c_rel, binder, settings["relocate"], "--data-seed");
  c_rel->add_option("--landmarks", ra.landmarks, "landmark CSV in the normalized_image frame");
  c_rel->add_option("--params", ra.params, "transform record, or lines 'image_id <inline record>'");
  c_rel->add_option("--output", ra.output, "relocated landmark CSV");
  c_rel->add_flag("--experiment", ra.experiment, "run the synthetic relocation experiment and write CED curves");
  c_rel->add_option("--images", ra.images, "experiment: test observations used")->capture_default_str();
  c_rel->add_option("--aligner", ra.aligner, "experiment: truth (inverse truth transform) or checkpoint")
      ->capture_default_str();
  c_rel->add_option("--checkpoint", ra.checkpoint, "experiment: pipeline checkpoint for --aligner checkpoint");
  c_rel->add_option("--aligner-noise", ra.aligner_noise, "experiment: std added to truth-aligner parameters")
      ->capture_default_str();
  c_rel->add_option("--detector-noise", ra.detector_noise, "experiment: detector noise std")->capture_default_str();
  c_rel->add_option("--pose-bias", ra.pose_bias, "experiment: detector pull toward the upright template")
      ->capture_default_str();
  c_rel->add_option("--seed", ra.seed, "experiment: detector seed")->capture_default_str();

  auto* c_info = app.add_subcommand("info", "build, worker and model-size summary");
  add_common_flags(c_info, settings["info"], false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    const std::string name = app.get_subcommands().front()->get_name();
    Settings& s = settings[name];
    load_config(s);
    binder.apply();
    if (name == "gradcheck") return cmd_gradcheck(gc, s);
    if (name == "gen-data") return cmd_gen_data(s, flip);
    if (name == "train") return cmd_train(s, log_every);
    if (name == "eval") return cmd_eval(s, eval_ckpt);
    if (name == "sweep-locnet") return cmd_sweep(s);
    if (name == "compare-kinds") return cmd_compare(s, kinds, seeds);
    if (name == "warp") {
      if (wa.params.empty() && wa.checkpoint.empty()) throw UsageError("warp needs --params or --checkpoint");
      return cmd_warp(wa, s);
    }
    if (name == "relocate") return cmd_relocate(ra, s);
    if (name == "info") return cmd_info(s);
    throw UsageError("unknown command " + name);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::invalid_argument& e) {  // InputError, DimensionError
    std::cerr << "invalid input: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DegeneracyError& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFail;
  }
}
