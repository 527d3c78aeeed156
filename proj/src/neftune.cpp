#include "peft/neftune.hpp"

#include <cmath>
#include <stdexcept>

#include "peft/rng.hpp"

namespace peft {

Tensor inject_noise(const Tensor& embeddings, const NoiseConfig& config,
                    Mode mode, std::uint64_t counter) {
  if (config.alpha < 0.0) {
    throw std::runtime_error("noise: alpha must be non-negative, got " +
                             std::to_string(config.alpha));
  }
  if (mode != Mode::kTrain || config.alpha == 0.0) return embeddings;
  if (embeddings.shape().size() != 2) {
    throw std::runtime_error("noise: expected [seq, d_model] embeddings, got " +
                             shape_str(embeddings.shape()));
  }
  const double scale =
      config.alpha / std::sqrt(static_cast<double>(embeddings.size()));
  Rng rng(config.seed, counter);
  Tensor noise(embeddings.shape());
  double* p = noise.data();
  for (std::size_t i = 0; i < noise.size(); ++i) {
    p[i] = scale * rng.uniform_signed();
  }
  // The perturbation is a constant w.r.t. the graph, so gradients flow
  // through the add untouched.
  return add(embeddings, noise);
}

}  // namespace peft
