#ifndef STNALIGN_PRESETS_HPP_
#define STNALIGN_PRESETS_HPP_

#include <numbers>
#include <string>

#include "stnalign/pipeline.hpp"
#include "stnalign/synth_data.hpp"
#include "stnalign/training.hpp"

namespace stnalign {

// Sizes that make the experiments fit a single desktop core. The full-scale
// recipe (128 px inputs, 64 px localization input, batch 100) is still reachable
// through config files.

/// The standard split: 50 identities x 40 observations, similarity perturbations.
inline DatasetOptions desk_dataset(std::uint64_t seed = 1000) {
  DatasetOptions o;
  o.seed = seed;
  o.identities = 50;
  o.observations_per_identity = 40;
  o.image_size = 64;
  o.perturbation = TransformKind::similarity;
  o.ranges.alpha = std::numbers::pi / 6.0;
  o.ranges.scale_min = 0.8;
  o.ranges.scale_max = 1.25;
  o.ranges.shift = 0.2;
  return o;
}

/// Same identities, projective perturbations at the largest perspective range.
inline DatasetOptions desk_projective_dataset(std::uint64_t seed = 1000) {
  DatasetOptions o = desk_dataset(seed);
  o.perturbation = TransformKind::projective;
  o.ranges.perspective = 0.2;
  return o;
}

/// Affine perturbations for the localization-network regression sweep.
inline DatasetOptions desk_sweep_dataset(std::uint64_t seed = 1000) {
  DatasetOptions o = desk_dataset(seed);
  o.perturbation = TransformKind::affine;
  return o;
}

inline PipelineConfig desk_pipeline(TransformKind kind) {
  PipelineConfig p;
  p.kind = kind;
  p.image_size = 64;
  p.loc_input_size = 32;
  p.warp_size = 32;
  p.sync();
  return p;
}

/// 3000 iterations at batch 32; the learning rate drops once, after the recognition
/// network has been redrawn at iteration 1500 and has had time to recover.
inline TrainConfig desk_train(std::uint64_t seed = 1) {
  TrainConfig t;
  t.batch_size = 32;
  t.max_iters = 3000;
  t.lr_decay_every = 2000;
  t.seed = seed;
  return t;
}

inline SweepConfig desk_sweep(std::uint64_t seed = 1) {
  SweepConfig s;
  s.seed = seed;
  return s;
}

/// The localization network used in the sweep: 64 px input regressing affine parameters.
inline LocNetSpec desk_sweep_locnet() {
  LocNetSpec s;
  s.kind = TransformKind::affine;
  s.input_size = 64;
  return s;
}

}  // namespace stnalign

#endif  // STNALIGN_PRESETS_HPP_
