#ifndef STNALIGN_NETWORKS_HPP_
#define STNALIGN_NETWORKS_HPP_

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "stnalign/config.hpp"
#include "stnalign/layers.hpp"
#include "stnalign/tensor.hpp"
#include "stnalign/transforms.hpp"

namespace stnalign {

/// Named learnable tensors. Names are dotted paths ("loc.conv0.w", "rec.embed.b", "centers").
using ParamSet = std::map<std::string, Tensor>;

inline std::size_t count_params(const ParamSet& params, const std::string& prefix = "") {
  std::size_t n = 0;
  for (const auto& [name, t] : params)
    if (name.compare(0, prefix.size(), prefix) == 0) n += t.size();
  return n;
}

inline ParamSet zeros_like(const ParamSet& params) {
  ParamSet z;
  for (const auto& [name, t] : params) z.emplace(name, Tensor(t.shape()));
  return z;
}

// ---------------------------------------------------------------------------
// Layer stacks
// ---------------------------------------------------------------------------

enum class OpKind { conv, prelu, maxpool, fc, residual };

/// One layer of a stack. conv/fc read `<name>.w` and `<name>.b`; prelu reads `<name>`.
/// A residual op computes x + body(x).
struct Op {
  Op() = default;
  Op(OpKind k, std::string n, int s = 1, int p = 0) : kind(k), name(std::move(n)), stride(s), pad(p) {}

  OpKind kind = OpKind::conv;
  std::string name;
  int stride = 1;
  int pad = 0;
  std::vector<Op> body;
};

struct OpCache {
  Tensor input;
  std::vector<std::size_t> argmax;
  std::vector<OpCache> body;
};

namespace detail {
inline const Tensor& param(const ParamSet& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end()) throw InputError("missing parameter '" + name + "'");
  return it->second;
}
inline void accumulate(ParamSet& grads, const std::string& name, const Tensor& g) {
  auto it = grads.find(name);
  if (it == grads.end()) grads.emplace(name, g);
  else it->second += g;
}
}  // namespace detail

/// Runs the stack; when `caches` is non-null, records what backward needs.
inline Tensor stack_forward(const std::vector<Op>& ops, const ParamSet& params, Tensor x,
                            std::vector<OpCache>* caches = nullptr) {
  if (caches) caches->assign(ops.size(), OpCache{});
  for (std::size_t i = 0; i < ops.size(); ++i) {
    const Op& op = ops[i];
    OpCache* cache = caches ? &(*caches)[i] : nullptr;
    Tensor y;
    switch (op.kind) {
      case OpKind::conv:
        y = conv2d_forward(x, detail::param(params, op.name + ".w"), detail::param(params, op.name + ".b"), op.stride,
                           op.pad);
        break;
      case OpKind::prelu:
        y = prelu_forward(x, detail::param(params, op.name));
        break;
      case OpKind::maxpool: {
        auto pooled = maxpool2x2_forward(x);
        y = std::move(pooled.output);
        if (cache) cache->argmax = std::move(pooled.argmax);
        break;
      }
      case OpKind::fc:
        y = fc_forward(x, detail::param(params, op.name + ".w"), detail::param(params, op.name + ".b"));
        break;
      case OpKind::residual:
        y = stack_forward(op.body, params, x, cache ? &cache->body : nullptr);
        y += x;
        break;
    }
    if (cache) cache->input = std::move(x);
    x = std::move(y);
  }
  return x;
}

/// Accumulates parameter gradients into `grads`; returns the gradient w.r.t. the stack input
/// (empty when `need_input_grad` is false).
inline Tensor stack_backward(const std::vector<Op>& ops, const ParamSet& params, const std::vector<OpCache>& caches,
                             Tensor grad, ParamSet& grads, bool need_input_grad = true) {
  for (std::size_t k = ops.size(); k-- > 0;) {
    const Op& op = ops[k];
    const OpCache& cache = caches[k];
    const bool want_input = need_input_grad || k > 0;
    switch (op.kind) {
      case OpKind::conv: {
        auto g = conv2d_backward(grad, cache.input, detail::param(params, op.name + ".w"), op.stride, op.pad,
                                 want_input);
        detail::accumulate(grads, op.name + ".w", g.weights);
        detail::accumulate(grads, op.name + ".b", g.bias);
        grad = std::move(g.input);
        break;
      }
      case OpKind::prelu: {
        auto g = prelu_backward(grad, cache.input, detail::param(params, op.name));
        detail::accumulate(grads, op.name, g.slope);
        grad = std::move(g.input);
        break;
      }
      case OpKind::maxpool:
        grad = maxpool2x2_backward(grad, cache.argmax, cache.input.shape());
        break;
      case OpKind::fc: {
        auto g = fc_backward(grad, cache.input, detail::param(params, op.name + ".w"), want_input);
        detail::accumulate(grads, op.name + ".w", g.weights);
        detail::accumulate(grads, op.name + ".b", g.bias);
        if (want_input) grad = std::move(g.input).reshaped(cache.input.shape());
        else grad = Tensor();
        break;
      }
      case OpKind::residual: {
        Tensor through = stack_backward(op.body, params, cache.body, grad, grads, true);
        grad += through;
        break;
      }
    }
  }
  return grad;
}

namespace detail {

template <typename Rng>
void add_conv(ParamSet& p, const std::string& name, int in_c, int out_c, int k, Rng& rng) {
  Tensor w({static_cast<std::size_t>(out_c), static_cast<std::size_t>(in_c), static_cast<std::size_t>(k),
            static_cast<std::size_t>(k)});
  xavier_uniform(w, static_cast<std::size_t>(in_c * k * k), static_cast<std::size_t>(out_c * k * k), rng);
  p[name + ".w"] = std::move(w);
  p[name + ".b"] = Tensor({static_cast<std::size_t>(out_c)});
}

template <typename Rng>
void add_fc(ParamSet& p, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
  Tensor w({out, in});
  xavier_uniform(w, in, out, rng);
  p[name + ".w"] = std::move(w);
  p[name + ".b"] = Tensor({out});
}

inline void add_prelu(ParamSet& p, const std::string& name, std::size_t channels) {
  p[name] = Tensor({channels}, 0.25);
}

}  // namespace detail

struct NetworkState {
  std::vector<Op> ops;
  ParamSet params;
};

// ---------------------------------------------------------------------------
// Localization network
// ---------------------------------------------------------------------------

/**
 * Localization network: `conv_blocks` x (conv + PReLU + 2x2 max-pool), then
 * `fc_layers` x (fc + PReLU) of width `fc_width`, then a linear regression head
 * with one output per transform parameter.
 */
struct LocNetSpec {
  int conv_blocks = 3;
  int fc_layers = 1;
  int fc_width = 64;
  TransformKind kind = TransformKind::affine;
  int input_size = 64;
  int channels = 1;
  std::vector<int> conv_widths = {16, 32, 64, 64};
  std::vector<int> kernel_sizes = {5, 3, 3, 3};

  std::size_t head_width() const { return param_count(kind); }

  /// Spatial extent after the conv blocks; throws if a block does not fit.
  int final_extent() const {
    int s = input_size;
    for (int i = 0; i < conv_blocks; ++i) {
      if (s < kernel_sizes[i]) {
        throw DimensionError("localization block " + std::to_string(i) + ": extent " + std::to_string(s) +
                             " smaller than kernel " + std::to_string(kernel_sizes[i]));
      }
      s = (s - kernel_sizes[i] + 1 + 1) / 2;
    }
    return s;
  }

  void validate() const {
    if (conv_blocks < 1 || conv_blocks > 4) throw InputError("localization conv_blocks must be 1..4");
    if (fc_layers < 1 || fc_layers > 2) throw InputError("localization fc_layers must be 1..2");
    if (fc_width <= 0 || input_size <= 0 || channels <= 0) throw InputError("localization extents must be positive");
    if (static_cast<int>(conv_widths.size()) < conv_blocks || static_cast<int>(kernel_sizes.size()) < conv_blocks) {
      throw InputError("localization spec lists fewer widths/kernels than conv blocks");
    }
    for (int i = 0; i < conv_blocks; ++i)
      if (conv_widths[i] <= 0 || kernel_sizes[i] <= 0) throw InputError("localization widths must be positive");
    if (kind == TransformKind::identity) throw InputError("identity transforms have no localization network");
    final_extent();
  }

  void write(KeyValues& kv, const std::string& prefix) const {
    kv.set(prefix + "conv_blocks", std::to_string(conv_blocks));
    kv.set(prefix + "fc_layers", std::to_string(fc_layers));
    kv.set(prefix + "fc_width", std::to_string(fc_width));
    kv.set(prefix + "conv_widths", KeyValues::format(conv_widths));
    kv.set(prefix + "kernel_sizes", KeyValues::format(kernel_sizes));
  }
  void read(const KeyValues& kv, const std::string& prefix) {
    conv_blocks = kv.get(prefix + "conv_blocks", conv_blocks);
    fc_layers = kv.get(prefix + "fc_layers", fc_layers);
    fc_width = kv.get(prefix + "fc_width", fc_width);
    conv_widths = kv.get(prefix + "conv_widths", conv_widths);
    kernel_sizes = kv.get(prefix + "kernel_sizes", kernel_sizes);
  }
};

inline std::vector<Op> locnet_ops(const LocNetSpec& spec) {
  std::vector<Op> ops;
  for (int i = 0; i < spec.conv_blocks; ++i) {
    const std::string n = "loc.conv" + std::to_string(i);
    ops.push_back({OpKind::conv, n});
    ops.push_back({OpKind::prelu, n + ".prelu"});
    ops.push_back({OpKind::maxpool, ""});
  }
  for (int j = 0; j < spec.fc_layers; ++j) {
    const std::string n = "loc.fc" + std::to_string(j);
    ops.push_back({OpKind::fc, n});
    ops.push_back({OpKind::prelu, n + ".prelu"});
  }
  ops.push_back({OpKind::fc, "loc.head"});
  return ops;
}

/// Head weights start at zero with the identity parameters as bias, so the
/// untrained network predicts the identity transform for any input.
template <typename Rng>
NetworkState build_locnet(const LocNetSpec& spec, Rng& rng) {
  spec.validate();
  NetworkState net{locnet_ops(spec), {}};
  int in_c = spec.channels;
  for (int i = 0; i < spec.conv_blocks; ++i) {
    const std::string n = "loc.conv" + std::to_string(i);
    detail::add_conv(net.params, n, in_c, spec.conv_widths[i], spec.kernel_sizes[i], rng);
    detail::add_prelu(net.params, n + ".prelu", spec.conv_widths[i]);
    in_c = spec.conv_widths[i];
  }
  const int s = spec.final_extent();
  std::size_t width = static_cast<std::size_t>(s * s * in_c);
  for (int j = 0; j < spec.fc_layers; ++j) {
    const std::string n = "loc.fc" + std::to_string(j);
    detail::add_fc(net.params, n, width, static_cast<std::size_t>(spec.fc_width), rng);
    detail::add_prelu(net.params, n + ".prelu", static_cast<std::size_t>(spec.fc_width));
    width = static_cast<std::size_t>(spec.fc_width);
  }
  const auto identity = to_vector(identity_params(spec.kind));
  net.params["loc.head.w"] = Tensor({spec.head_width(), width});
  net.params["loc.head.b"] = Tensor({spec.head_width()}, identity);
  return net;
}

// ---------------------------------------------------------------------------
// Recognition network
// ---------------------------------------------------------------------------

/**
 * Residual recognition network. Each stage is a valid 3x3 conv + PReLU + 2x2 pool
 * followed by residual blocks x + PReLU(conv(PReLU(conv(x)))) with padded 3x3
 * convs. `residual_blocks` are spread over the stages, earlier stages first.
 * A linear layer produces the `feature_width` embedding; a classifier maps it to
 * `class_count` logits.
 */
struct RecNetSpec {
  int input_size = 32;
  int channels = 1;
  std::vector<int> stage_widths = {8, 16, 32};
  int residual_blocks = 3;
  int feature_width = 64;
  int class_count = 10;

  int blocks_in_stage(int s) const {
    const int stages = static_cast<int>(stage_widths.size());
    return residual_blocks / stages + (s < residual_blocks % stages ? 1 : 0);
  }

  int final_extent() const {
    int e = input_size;
    for (std::size_t s = 0; s < stage_widths.size(); ++s) {
      if (e < 3) throw DimensionError("recognition stage " + std::to_string(s) + " input smaller than 3x3 kernel");
      e = (e - 3 + 1 + 1) / 2;
    }
    return e;
  }

  void validate() const {
    if (stage_widths.empty()) throw InputError("recognition network needs at least one stage");
    for (int w : stage_widths)
      if (w <= 0) throw InputError("recognition stage widths must be positive");
    if (residual_blocks < 0) throw InputError("residual_blocks must be >= 0");
    if (feature_width < 2) throw InputError("feature_width must be >= 2");
    if (class_count < 2) throw InputError("class_count must be >= 2");
    if (input_size <= 0 || channels <= 0) throw InputError("recognition extents must be positive");
    final_extent();
  }

  void write(KeyValues& kv, const std::string& prefix) const {
    kv.set(prefix + "stage_widths", KeyValues::format(stage_widths));
    kv.set(prefix + "residual_blocks", std::to_string(residual_blocks));
    kv.set(prefix + "feature_width", std::to_string(feature_width));
  }
  void read(const KeyValues& kv, const std::string& prefix) {
    stage_widths = kv.get(prefix + "stage_widths", stage_widths);
    residual_blocks = kv.get(prefix + "residual_blocks", residual_blocks);
    feature_width = kv.get(prefix + "feature_width", feature_width);
  }
};

inline std::vector<Op> recnet_ops(const RecNetSpec& spec) {
  std::vector<Op> ops;
  for (std::size_t s = 0; s < spec.stage_widths.size(); ++s) {
    const std::string stage = "rec.stage" + std::to_string(s);
    ops.push_back({OpKind::conv, stage + ".conv"});
    ops.push_back({OpKind::prelu, stage + ".prelu"});
    ops.push_back({OpKind::maxpool, ""});
    for (int b = 0; b < spec.blocks_in_stage(static_cast<int>(s)); ++b) {
      const std::string blk = stage + ".block" + std::to_string(b);
      Op res{OpKind::residual, blk};
      res.body = {{OpKind::conv, blk + ".conv1", 1, 1},
                  {OpKind::prelu, blk + ".prelu1"},
                  {OpKind::conv, blk + ".conv2", 1, 1},
                  {OpKind::prelu, blk + ".prelu2"}};
      ops.push_back(std::move(res));
    }
  }
  ops.push_back({OpKind::fc, "rec.embed"});
  return ops;
}

inline Op classifier_op() { return {OpKind::fc, "rec.classifier"}; }

/// Parameters of the embedding stack and the classifier (names under "rec.").
template <typename Rng>
NetworkState build_recnet(const RecNetSpec& spec, Rng& rng) {
  spec.validate();
  NetworkState net{recnet_ops(spec), {}};
  int in_c = spec.channels;
  for (std::size_t s = 0; s < spec.stage_widths.size(); ++s) {
    const std::string stage = "rec.stage" + std::to_string(s);
    const int w = spec.stage_widths[s];
    detail::add_conv(net.params, stage + ".conv", in_c, w, 3, rng);
    detail::add_prelu(net.params, stage + ".prelu", static_cast<std::size_t>(w));
    for (int b = 0; b < spec.blocks_in_stage(static_cast<int>(s)); ++b) {
      const std::string blk = stage + ".block" + std::to_string(b);
      detail::add_conv(net.params, blk + ".conv1", w, w, 3, rng);
      detail::add_prelu(net.params, blk + ".prelu1", static_cast<std::size_t>(w));
      detail::add_conv(net.params, blk + ".conv2", w, w, 3, rng);
      detail::add_prelu(net.params, blk + ".prelu2", static_cast<std::size_t>(w));
    }
    in_c = w;
  }
  const int e = spec.final_extent();
  const auto flat = static_cast<std::size_t>(e * e * in_c);
  detail::add_fc(net.params, "rec.embed", flat, static_cast<std::size_t>(spec.feature_width), rng);
  detail::add_fc(net.params, "rec.classifier", static_cast<std::size_t>(spec.feature_width),
                 static_cast<std::size_t>(spec.class_count), rng);
  return net;
}

}  // namespace stnalign

#endif  // STNALIGN_NETWORKS_HPP_
