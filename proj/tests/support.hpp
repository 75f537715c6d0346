#pragma once

// Shared fixtures for the test suites: a micro model configuration small
// enough for finite-difference sweeps, and random image helpers.

#include <random>
#include <vector>

#include "vitrm/model.hpp"

namespace testsupport {

// d=8, K=2, L_x=4 (8x8 image, 4x4 patches), one block layer.
inline vitrm::ModelConfig micro_config() {
  vitrm::ModelConfig cfg;
  cfg.image_h = 8;
  cfg.image_w = 8;
  cfg.patch_size = 4;
  cfg.embed_dim = 8;
  cfg.latent_tokens = 2;
  cfg.num_heads = 2;
  cfg.ffn_hidden = 16;
  cfg.block_depth = 1;
  cfg.num_classes = 3;
  cfg.recursion_steps = 1;
  cfg.latent_steps = 2;
  return cfg;
}

inline std::vector<float> random_images(std::size_t batch,
                                        const vitrm::ModelConfig& cfg,
                                        std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<float> out(batch * cfg.channels * cfg.image_h * cfg.image_w);
  for (auto& v : out) v = static_cast<float>(dist(rng));
  return out;
}

}  // namespace testsupport
