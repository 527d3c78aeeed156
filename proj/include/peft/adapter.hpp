#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "peft/model.hpp"
#include "peft/rng.hpp"
#include "peft/tensor.hpp"

namespace peft {

enum class LoraScheme { kLora, kRslora };

// The seven adaptable projection sites of a decoder layer.
enum class TargetProj { kQ, kK, kV, kO, kGate, kUp, kDown };

struct AdapterConfig {
  std::size_t rank = 8;
  // 0 means "2 * rank" (resolved at init); the conventional default since
  // no adapter alpha is published alongside rank 8.
  double alpha = 0.0;
  LoraScheme scheme = LoraScheme::kRslora;
  double dropout_p = 0.1;
  std::vector<TargetProj> targets = {TargetProj::kQ, TargetProj::kK,
                                     TargetProj::kV, TargetProj::kO};

  double resolved_alpha() const {
    return alpha > 0.0 ? alpha : 2.0 * static_cast<double>(rank);
  }
};

// Trainable low-rank pair around one frozen base matrix. Only a and b carry
// requires_grad; `base` aliases the projection weight it wraps.
struct LoraAdapter {
  Tensor a;      // [d_in, rank], Normal(0, 0.02) at init
  Tensor b;      // [rank, d_out], zero at init so the branch starts silent
  Tensor base;   // frozen W0, [d_in, d_out]
  double gamma = 0.0;  // cached adapter_scale result
  std::size_t rank = 0;
  double dropout_p = 0.0;
  Rng dropout_rng{0};  // per-site stream; advances only on train-mode calls
};

// lora: alpha / r.  rslora: alpha / sqrt(r) — the rank-stabilized rule.
double adapter_scale(std::size_t rank, double alpha, LoraScheme scheme);

// `base` is wrapped, not copied; pass the projection weight to adapt.
LoraAdapter init_adapter(const Tensor& base, const AdapterConfig& config,
                         std::uint64_t seed);

// x.W0 + gamma * (drop(x).a).b with dropout live only in train mode.
Tensor adapter_forward(LoraAdapter& adapter, const Tensor& x, Mode mode);

// W0 + gamma * a.b as a plain (untracked) matrix.
Tensor merge_adapter(const LoraAdapter& adapter);

// Installs a fresh adapter on every targeted projection of every layer and
// freezes every base parameter; afterwards trainable_parameters(model)
// enumerates exactly the adapter factors. Adapter init streams derive from
// (seed, site ordinal), so each site gets independent randomness.
void attach_adapters(Model& model, const AdapterConfig& config,
                     std::uint64_t seed);

}  // namespace peft
