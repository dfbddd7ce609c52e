#ifndef STNALIGN_TESTS_FIXTURES_HPP_
#define STNALIGN_TESTS_FIXTURES_HPP_

#include <random>

#include "stnalign/stnalign.hpp"

namespace fixture {

using namespace stnalign;

/// A dataset small enough to train on inside a unit test.
inline DatasetOptions tiny_dataset(TransformKind perturbation = TransformKind::similarity) {
  DatasetOptions o;
  o.seed = 11;
  o.identities = 8;
  o.observations_per_identity = 6;
  o.image_size = 16;
  o.perturbation = perturbation;
  o.pairs = 20;
  return o;
}

inline PipelineConfig tiny_pipeline(TransformKind kind) {
  PipelineConfig p;
  p.kind = kind;
  p.image_size = 16;
  p.loc_input_size = 8;
  p.warp_size = 12;
  p.loc.conv_blocks = 1;
  p.loc.fc_layers = 1;
  p.loc.fc_width = 8;
  p.loc.conv_widths = {4};
  p.loc.kernel_sizes = {3};
  p.rec.stage_widths = {4, 8};
  p.rec.residual_blocks = 1;
  p.rec.feature_width = 8;
  p.sync();
  return p;
}

inline TrainConfig tiny_train(long iters = 20) {
  TrainConfig t;
  t.batch_size = 8;
  t.max_iters = iters;
  t.lr_decay_every = 8;
  t.checkpoint_every = 5;
  t.seed = 3;
  return t;
}

template <typename Rng>
Tensor random_image(std::size_t c, std::size_t h, std::size_t w, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor t({1, c, h, w});
  for (auto& v : t.storage()) v = u(rng);
  return t;
}

/// Smooth, band-limited test image in [0, 1].
inline Tensor smooth_image(std::size_t h, std::size_t w) {
  Tensor t({1, 1, h, w});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double y = normalized_coord(i, h), x = normalized_coord(j, w);
      t[i * w + j] = 0.5 + 0.25 * std::sin(2.0 * x + 1.0) * std::cos(1.5 * y) + 0.2 * x * y;
    }
  return t;
}

}  // namespace fixture

#endif  // STNALIGN_TESTS_FIXTURES_HPP_
