#pragma once

#include <cstdint>

#include "peft/tensor.hpp"

namespace peft {

struct NoiseConfig {
  double alpha = 0.3;
  std::uint64_t seed = 0;
};

// Training-only embedding perturbation: entries i.i.d. Uniform(-1, 1)
// scaled by alpha / sqrt(L * d) for an [L, d] input, which bounds the
// Frobenius norm of the perturbation by alpha. Eval mode or alpha == 0
// returns the input unchanged. The counter selects an independent
// substream of config.seed, so distinct counters give fresh noise and the
// whole scheme stays deterministic and order-independent.
Tensor inject_noise(const Tensor& embeddings, const NoiseConfig& config,
                    Mode mode, std::uint64_t counter);

// Counter wrapper used by the training loop: every train-mode call draws
// from the next substream (freshness), eval calls pass through untouched.
class NoiseStream {
 public:
  explicit NoiseStream(NoiseConfig config) : config_(config) {}

  Tensor apply(const Tensor& embeddings, Mode mode) {
    if (mode != Mode::kTrain) return embeddings;
    return inject_noise(embeddings, config_, mode, counter_++);
  }

  const NoiseConfig& config() const { return config_; }
  std::uint64_t counter() const { return counter_; }

 private:
  NoiseConfig config_;
  std::uint64_t counter_ = 0;
};

}  // namespace peft
