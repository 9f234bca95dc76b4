#pragma once

// Supervised warm-up that turns a randomly initialized backbone into a frozen
// feature extractor with localized attention, standing in for ImageNet
// pretraining at desk scale.

#include <cstddef>
#include <cstdint>

#include "fedsim/vit.hpp"

namespace fedsim::pretrain {

struct Options {
  std::size_t steps = 600;
  std::size_t batch_size = 32;
  std::size_t pool = 4096;  // pretext images, cycled through in shuffled order
  std::size_t sectors = 8;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

// Trains the transformer blocks and final norm on blob-sector classification;
// patch and position embeddings keep their random values. Deterministic in
// (config, options).
vit::FrozenBackbone pretrain_backbone(const vit::ViTConfig& config, const Options& options);

}  // namespace fedsim::pretrain
