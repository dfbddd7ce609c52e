#ifndef STNALIGN_STNALIGN_HPP_
#define STNALIGN_STNALIGN_HPP_

#include "stnalign/config.hpp"
#include "stnalign/gradcheck.hpp"
#include "stnalign/io.hpp"
#include "stnalign/landmarks.hpp"
#include "stnalign/layers.hpp"
#include "stnalign/networks.hpp"
#include "stnalign/parallel.hpp"
#include "stnalign/pipeline.hpp"
#include "stnalign/presets.hpp"
#include "stnalign/sampler.hpp"
#include "stnalign/seeding.hpp"
#include "stnalign/synth_data.hpp"
#include "stnalign/tensor.hpp"
#include "stnalign/training.hpp"
#include "stnalign/transforms.hpp"
#include "stnalign/verification.hpp"

#endif  // STNALIGN_STNALIGN_HPP_
