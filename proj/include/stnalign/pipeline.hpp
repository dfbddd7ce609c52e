#ifndef STNALIGN_PIPELINE_HPP_
#define STNALIGN_PIPELINE_HPP_

#include <cmath>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "stnalign/config.hpp"
#include "stnalign/layers.hpp"
#include "stnalign/networks.hpp"
#include "stnalign/parallel.hpp"
#include "stnalign/sampler.hpp"
#include "stnalign/seeding.hpp"
#include "stnalign/transforms.hpp"

namespace stnalign {

/**
 * Alignment + recognition pipeline: the localization network predicts transform
 * parameters from a downsampled copy of the input, the sampler warps the full
 * input into a `warp_size` square, and the recognition network embeds the result.
 * With kind == identity there is no localization network and the warp is the
 * fixed center resample.
 */
struct PipelineConfig {
  TransformKind kind = TransformKind::similarity;
  int image_size = 128;
  int channels = 1;
  int loc_input_size = 64;
  int warp_size = 32;
  LocNetSpec loc;
  RecNetSpec rec;
  double center_weight = 0.008;
  double center_damping = 0.5;
  double degeneracy_weight = 10.0;
  double divisor_floor = kDefaultDivisorFloor;

  /// Copies kind, sizes and channel count into the sub-network specs.
  void sync() {
    loc.kind = kind;
    loc.input_size = loc_input_size;
    loc.channels = channels;
    rec.input_size = warp_size;
    rec.channels = channels;
  }

  void validate() const {
    if (image_size <= 0 || warp_size <= 0 || loc_input_size <= 0 || channels <= 0) {
      throw InputError("pipeline extents must be positive");
    }
    if (image_size % loc_input_size != 0) {
      throw InputError("image_size must be an integer multiple of loc_input_size");
    }
    if (center_weight < 0.0 || degeneracy_weight < 0.0 || divisor_floor <= 0.0) {
      throw InputError("pipeline loss weights must be non-negative");
    }
    if (kind != TransformKind::identity) loc.validate();
    rec.validate();
  }

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("kind", kind_name(kind));
    kv.set("image_size", std::to_string(image_size));
    kv.set("channels", std::to_string(channels));
    kv.set("loc_input_size", std::to_string(loc_input_size));
    kv.set("warp_size", std::to_string(warp_size));
    kv.set("class_count", std::to_string(rec.class_count));
    kv.set("center_weight", KeyValues::format(center_weight));
    kv.set("center_damping", KeyValues::format(center_damping));
    kv.set("degeneracy_weight", KeyValues::format(degeneracy_weight));
    kv.set("divisor_floor", KeyValues::format(divisor_floor));
    loc.write(kv, "loc.");
    rec.write(kv, "rec.");
    return kv;
  }

  /// Reads pipeline keys from `kv`, leaving absent keys at their current values.
  void read(const KeyValues& kv) {
    kind = parse_kind(kv.get("kind", std::string(kind_name(kind))));
    image_size = kv.get("image_size", image_size);
    channels = kv.get("channels", channels);
    loc_input_size = kv.get("loc_input_size", loc_input_size);
    warp_size = kv.get("warp_size", warp_size);
    rec.class_count = kv.get("class_count", rec.class_count);
    center_weight = kv.get("center_weight", center_weight);
    center_damping = kv.get("center_damping", center_damping);
    degeneracy_weight = kv.get("degeneracy_weight", degeneracy_weight);
    divisor_floor = kv.get("divisor_floor", divisor_floor);
    loc.read(kv, "loc.");
    rec.read(kv, "rec.");
    sync();
  }
};

struct PipelineState {
  PipelineConfig config;
  ParamSet params;  // "loc.*", "rec.*" and "centers"
  std::vector<Op> loc_ops;
  std::vector<Op> rec_ops;
  std::vector<Op> classifier_ops;
  bool loc_frozen = false;
  bool rec_frozen = false;

  bool has_locnet() const { return config.kind != TransformKind::identity; }
};

/// Rebuilds the op lists from the config (parameters untouched).
inline void rebuild_ops(PipelineState& state) {
  state.loc_ops = state.has_locnet() ? locnet_ops(state.config.loc) : std::vector<Op>{};
  state.rec_ops = recnet_ops(state.config.rec);
  state.classifier_ops = {classifier_op()};
}

template <typename Rng>
void reinitialize_recognition(PipelineState& state, Rng& rng) {
  for (auto it = state.params.begin(); it != state.params.end();) {
    if (it->first.rfind("rec.", 0) == 0 || it->first == "centers") it = state.params.erase(it);
    else ++it;
  }
  NetworkState rec = build_recnet(state.config.rec, rng);
  state.params.merge(rec.params);
  state.params["centers"] = Tensor({static_cast<std::size_t>(state.config.rec.class_count),
                                    static_cast<std::size_t>(state.config.rec.feature_width)});
}

/**
 * Localization and recognition parameters draw from separate streams derived
 * from `seed`, so the recognition init is the same for every transform kind.
 */
inline PipelineState build_pipeline(PipelineConfig config, std::uint64_t seed) {
  config.sync();
  config.validate();
  PipelineState state;
  state.config = config;
  if (state.has_locnet()) {
    std::mt19937_64 loc_rng(derive_seed(seed, 0x10cULL));
    NetworkState loc = build_locnet(config.loc, loc_rng);
    state.params.merge(loc.params);
  }
  std::mt19937_64 rec_rng(derive_seed(seed, 0x5ecULL));
  reinitialize_recognition(state, rec_rng);
  rebuild_ops(state);
  return state;
}

/// Identity-grid resample of the whole input to `size` x `size`.
inline Tensor center_resample(const Tensor& image, std::size_t size) {
  const SamplingGrid grid = generate_grid(IdentityTransform{}, size, size);
  return bilinear_sample(image, grid).image;
}

struct SampleTrace {
  Tensor image;
  std::vector<OpCache> loc_cache;
  TransformParams params = IdentityTransform{};
  bool degenerate = false;
  double min_divisor = 1.0;
  std::size_t min_pixel = 0;
  SamplingGrid grid;
  std::vector<OpCache> rec_cache;
  std::vector<OpCache> cls_cache;
};

struct PipelineForward {
  Tensor features;  // (N, feature_width)
  Tensor logits;    // (N, class_count)
  Tensor warped;    // (N, C, warp, warp)
  std::vector<std::optional<TransformParams>> predicted;  // empty optionals for the identity kind
  std::vector<bool> degenerate;
  double penalty = 0.0;  // mean degeneracy penalty over the batch
  std::vector<SampleTrace> traces;
};

namespace detail {

inline double degeneracy_penalty(const PipelineConfig& c, double min_divisor) {
  const double gap = c.divisor_floor - min_divisor;
  return c.degeneracy_weight * gap * gap;
}

struct SampleResult {
  SampleTrace trace;
  Tensor warped;
  Tensor features;
  Tensor logits;
};

inline SampleResult run_sample(const PipelineState& state, Tensor image, bool keep) {
  const auto& cfg = state.config;
  const auto ws = static_cast<std::size_t>(cfg.warp_size);
  SampleResult r;
  SampleTrace& t = r.trace;
  if (state.has_locnet()) {
    const auto ls = static_cast<std::size_t>(cfg.loc_input_size);
    Tensor head = stack_forward(state.loc_ops, state.params, area_downsample(image, ls, ls),
                                keep ? &t.loc_cache : nullptr);
    t.params = from_vector(cfg.kind, head.values());
    t.min_divisor = min_abs_divisor(t.params, ws, ws, &t.min_pixel);
    t.degenerate = t.min_divisor < cfg.divisor_floor;
  }
  const bool identity_warp = t.degenerate || !state.has_locnet();
  t.grid = generate_grid(identity_warp ? TransformParams{IdentityTransform{}} : t.params, ws, ws, cfg.divisor_floor);
  r.warped = bilinear_sample(image, t.grid).image;
  if (keep) t.image = std::move(image);
  r.features = stack_forward(state.rec_ops, state.params, r.warped, keep ? &t.rec_cache : nullptr);
  r.logits = stack_forward(state.classifier_ops, state.params, r.features, keep ? &t.cls_cache : nullptr);
  return r;
}

}  // namespace detail

/// Forward pass over a (N, C, S, S) batch. Keeps per-sample traces when `keep_trace`.
inline PipelineForward forward_pipeline(const PipelineState& state, const Tensor& images, std::size_t workers = 1,
                                        bool keep_trace = false) {
  const auto& cfg = state.config;
  if (images.rank() != 4 || images.dim(1) != static_cast<std::size_t>(cfg.channels) ||
      images.dim(2) != static_cast<std::size_t>(cfg.image_size) ||
      images.dim(3) != static_cast<std::size_t>(cfg.image_size)) {
    throw DimensionError("forward_pipeline: images " + shape_string(images.shape()) + " do not match config");
  }
  const std::size_t batch = images.dim(0);
  const auto ws = static_cast<std::size_t>(cfg.warp_size);
  const auto fw = static_cast<std::size_t>(cfg.rec.feature_width);
  const auto classes = static_cast<std::size_t>(cfg.rec.class_count);
  PipelineForward out;
  out.features = Tensor({batch, fw});
  out.logits = Tensor({batch, classes});
  out.warped = Tensor({batch, static_cast<std::size_t>(cfg.channels), ws, ws});
  out.predicted.resize(batch);
  out.degenerate.assign(batch, false);
  out.traces.resize(batch);
  std::vector<double> penalties(batch, 0.0);
  parallel_chunks(batch, workers, [&](std::size_t, std::size_t begin, std::size_t end) {
    for (std::size_t n = begin; n < end; ++n) {
      auto r = detail::run_sample(state, images.item(n), keep_trace);
      std::copy(r.logits.storage().begin(), r.logits.storage().end(), out.logits.data() + n * classes);
      std::copy(r.features.storage().begin(), r.features.storage().end(), out.features.data() + n * fw);
      std::copy(r.warped.storage().begin(), r.warped.storage().end(), out.warped.data() + n * r.warped.size());
      SampleTrace& t = r.trace;
      if (state.has_locnet()) out.predicted[n] = t.params;
      out.degenerate[n] = t.degenerate;
      if (t.degenerate) penalties[n] = detail::degeneracy_penalty(cfg, t.min_divisor);
      if (keep_trace) out.traces[n] = std::move(t);
    }
  });
  if (!keep_trace) out.traces.clear();
  for (double p : penalties) out.penalty += p;
  out.penalty /= static_cast<double>(std::max<std::size_t>(batch, 1));
  require_finite(out.logits, "forward_pipeline logits");
  return out;
}

struct LossGrads {
  LossBundle loss;
  double penalty = 0.0;
  double objective = 0.0;  // loss.total + penalty
  Tensor grad_logits;
  Tensor grad_features;  // center-loss term, already weighted
  Tensor center_step;
  std::size_t correct = 0;
};

inline LossGrads pipeline_loss(const PipelineState& state, const PipelineForward& fwd, std::span<const int> labels) {
  const auto& cfg = state.config;
  auto xent = softmax_xent(fwd.logits, labels);
  auto center = center_loss(fwd.features, labels, detail::param(state.params, "centers"), cfg.center_damping);
  LossGrads r;
  r.loss = make_loss_bundle(xent.loss, center.loss, cfg.center_weight);
  r.penalty = fwd.penalty;
  r.objective = r.loss.total + r.penalty;
  r.grad_logits = std::move(xent.grad_logits);
  r.grad_features = std::move(center.grad_features);
  r.grad_features *= cfg.center_weight;
  r.center_step = std::move(center.center_step);
  r.correct = xent.correct;
  return r;
}

/**
 * Gradients of the objective w.r.t. every "loc." and "rec." parameter. Needs a
 * forward pass run with keep_trace. The localization path chains recognition
 * backward -> sampler coordinate gradients -> transform Jacobian -> loc-net.
 */
inline ParamSet backward_pipeline(const PipelineState& state, const PipelineForward& fwd, const LossGrads& lg,
                                  std::size_t workers = 1) {
  const auto& cfg = state.config;
  const std::size_t batch = fwd.logits.dim(0);
  if (fwd.traces.size() != batch) throw InputError("backward_pipeline: forward pass did not keep traces");
  const auto fw = static_cast<std::size_t>(cfg.rec.feature_width);
  const auto classes = static_cast<std::size_t>(cfg.rec.class_count);
  const bool train_loc = state.has_locnet() && !state.loc_frozen;
  workers = std::max<std::size_t>(1, std::min(workers, batch));
  std::vector<ParamSet> partial(workers);
  parallel_chunks(batch, workers, [&](std::size_t w, std::size_t begin, std::size_t end) {
    ParamSet& grads = partial[w];
    for (std::size_t n = begin; n < end; ++n) {
      const SampleTrace& t = fwd.traces[n];
      Tensor g_logits({1, classes}, std::vector<double>(lg.grad_logits.data() + n * classes,
                                                        lg.grad_logits.data() + (n + 1) * classes));
      Tensor g_feat = stack_backward(state.classifier_ops, state.params, t.cls_cache, g_logits, grads);
      for (std::size_t d = 0; d < fw; ++d) g_feat[d] += lg.grad_features[n * fw + d];
      const bool need_warp_grad = train_loc && !t.degenerate;
      Tensor g_warped = stack_backward(state.rec_ops, state.params, t.rec_cache, g_feat, grads, need_warp_grad);
      if (!train_loc) continue;
      std::vector<double> head_grad(param_count(cfg.kind), 0.0);
      if (t.degenerate) {
        const auto& p = std::get<ProjectiveTransform>(t.params);
        const auto ws = static_cast<std::size_t>(cfg.warp_size);
        const double x = normalized_coord(t.min_pixel % ws, ws), y = normalized_coord(t.min_pixel / ws, ws);
        const double z = p.g * x + p.h * y + 1.0;
        const double sgn = z > 0.0 ? 1.0 : (z < 0.0 ? -1.0 : 0.0);
        const double coef = -2.0 * cfg.degeneracy_weight * (cfg.divisor_floor - std::abs(z)) * sgn /
                            static_cast<double>(batch);
        head_grad[6] = coef * x;
        head_grad[7] = coef * y;
      } else {
        auto sg = bilinear_backward(g_warped, t.image, t.grid, false);
        head_grad = param_jacobian(t.params, t.grid, sg.coords[0].dxs, sg.coords[0].dys).values;
      }
      const std::size_t width = head_grad.size();
      Tensor g_head({1, width}, std::move(head_grad));
      stack_backward(state.loc_ops, state.params, t.loc_cache, g_head, grads, false);
    }
  });
  ParamSet total = std::move(partial[0]);
  for (std::size_t w = 1; w < workers; ++w)
    for (auto& [name, g] : partial[w]) detail::accumulate(total, name, g);
  return total;
}

/// Embedding of one (1, C, S, S) image; with `mirror_average`, the mean of the
/// image's and its horizontal mirror's embeddings.
inline std::vector<double> extract_embedding(const PipelineState& state, const Tensor& image, bool mirror_average) {
  auto single = [&](const Tensor& img) {
    return forward_pipeline(state, img).features.to_vector();
  };
  std::vector<double> f = single(image);
  if (mirror_average) {
    const std::vector<double> m = single(flip_horizontal(image));
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = 0.5 * (f[i] + m[i]);
  }
  return f;
}

}  // namespace stnalign

#endif  // STNALIGN_PIPELINE_HPP_
