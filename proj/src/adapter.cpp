#include "peft/adapter.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace peft {

double adapter_scale(std::size_t rank, double alpha, LoraScheme scheme) {
  if (rank == 0) {
    throw std::runtime_error("adapter: rank must be positive");
  }
  const double r = static_cast<double>(rank);
  return scheme == LoraScheme::kLora ? alpha / r : alpha / std::sqrt(r);
}

LoraAdapter init_adapter(const Tensor& base, const AdapterConfig& config,
                         std::uint64_t seed) {
  if (base.shape().size() != 2) {
    throw std::runtime_error("adapter: base must be a matrix, got " +
                             shape_str(base.shape()));
  }
  if (config.rank == 0 ||
      config.rank > std::min(base.dim(0), base.dim(1))) {
    throw std::runtime_error(
        "adapter: rank " + std::to_string(config.rank) +
        " not in [1, min(d_in, d_out)] for base " + shape_str(base.shape()));
  }
  if (config.dropout_p < 0.0 || config.dropout_p >= 1.0) {
    throw std::runtime_error("adapter: dropout_p must lie in [0, 1), got " +
                             std::to_string(config.dropout_p));
  }
  LoraAdapter ad;
  Rng init_rng(seed, 0);
  ad.a = Tensor::randn({base.dim(0), config.rank}, init_rng, 0.0, 0.02, true);
  ad.b = Tensor::full({config.rank, base.dim(1)}, 0.0, true);
  ad.base = base;  // aliases the projection weight
  ad.gamma = adapter_scale(config.rank, config.resolved_alpha(), config.scheme);
  ad.rank = config.rank;
  ad.dropout_p = config.dropout_p;
  ad.dropout_rng = Rng(seed, 1);
  return ad;
}

Tensor adapter_forward(LoraAdapter& adapter, const Tensor& x, Mode mode) {
  Tensor branch_in = x;
  if (mode == Mode::kTrain && adapter.dropout_p > 0.0) {
    // Dropout lives on the adapter branch only; the frozen path below sees
    // the untouched activations.
    branch_in = dropout(x, adapter.dropout_p, adapter.dropout_rng);
  }
  Tensor low_rank = matmul(matmul(branch_in, adapter.a), adapter.b);
  return add(matmul(x, adapter.base), scale(low_rank, adapter.gamma));
}

Tensor merge_adapter(const LoraAdapter& adapter) {
  NoGradGuard guard;
  return add(adapter.base, scale(matmul(adapter.a, adapter.b), adapter.gamma));
}

namespace {

Projection& site(Layer& layer, TargetProj target) {
  switch (target) {
    case TargetProj::kQ: return layer.q;
    case TargetProj::kK: return layer.k;
    case TargetProj::kV: return layer.v;
    case TargetProj::kO: return layer.o;
    case TargetProj::kGate: return layer.gate;
    case TargetProj::kUp: return layer.up;
    case TargetProj::kDown: return layer.down;
  }
  throw std::runtime_error("adapter: unknown target projection");
}

bool targeted(const AdapterConfig& config, TargetProj target) {
  for (TargetProj t : config.targets) {
    if (t == target) return true;
  }
  return false;
}

}  // namespace

void attach_adapters(Model& model, const AdapterConfig& config,
                     std::uint64_t seed) {
  if (model.adapters_attached) {
    throw std::runtime_error("adapter: model already has adapters attached");
  }
  if (config.targets.empty()) {
    throw std::runtime_error("adapter: no target projections selected");
  }
  for (auto& [name, tensor] : named_parameters(model)) {
    tensor.set_requires_grad(false);
  }
  // Sites are numbered by model position (layer-major, canonical projection
  // order), not by the order targets were listed, so the same seed always
  // assigns the same stream to the same site.
  constexpr TargetProj kCanonical[] = {
      TargetProj::kQ,  TargetProj::kK,  TargetProj::kV,   TargetProj::kO,
      TargetProj::kGate, TargetProj::kUp, TargetProj::kDown};
  std::uint64_t ordinal = 0;
  for (Layer& layer : model.layers) {
    for (TargetProj target : kCanonical) {
      if (!targeted(config, target)) continue;
      Projection& proj = site(layer, target);
      const std::uint64_t site_seed = Rng(seed, ordinal++).next_u64();
      proj.adapter =
          std::make_shared<LoraAdapter>(init_adapter(proj.weight, config,
                                                     site_seed));
    }
  }
  model.adapters_attached = true;
  model.adapter_config = std::make_shared<const AdapterConfig>(config);
  model.adapter_seed = seed;
}

}  // namespace peft
