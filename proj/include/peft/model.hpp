#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "peft/tensor.hpp"

namespace peft {

struct LoraAdapter;
struct AdapterConfig;
class NoiseStream;

// Architecture record. head_dim is explicit rather than derived so the
// invariant n_heads * head_dim == d_model is checkable instead of silently
// assumed.
struct ModelConfig {
  std::size_t n_layers = 0;
  std::size_t d_model = 0;
  std::size_t n_heads = 0;
  std::size_t n_kv_heads = 0;
  std::size_t head_dim = 0;
  std::size_t d_ff = 0;
  std::size_t vocab_size = 0;
  std::size_t max_context = 0;
  double rope_base = 10000.0;
  double rmsnorm_eps = 1e-6;
  double dropout_p = 0.0;  // base-model dropout: zero in all experiments
};

// Throws naming the violated invariant.
void validate_config(const ModelConfig& config);

// The 8B shape preset, parse/validate-only: never instantiated in tests
// (the embedding alone would be ~776M doubles). head_dim comes from the
// d_model / n_heads invariant since the published table does not list it.
ModelConfig qwen3_8b_preset();

// Closed-form parameter count of build_model's output.
std::size_t estimate_param_count(const ModelConfig& config);

// One projection site: a frozen-able base matrix plus an optional low-rank
// adapter installed by attach_adapters.
struct Projection {
  Tensor weight;  // [d_in, d_out]
  std::shared_ptr<LoraAdapter> adapter;
};

struct Layer {
  Tensor attn_norm;  // [d_model]
  Projection q, k, v, o;
  Tensor ffn_norm;  // [d_model]
  Projection gate, up, down;
};

struct Model {
  ModelConfig config;
  std::uint64_t seed = 0;  // init provenance, recorded in checkpoints
  Tensor embedding;        // [vocab_size, d_model]
  std::vector<Layer> layers;
  Tensor final_norm;  // [d_model]
  Tensor head;        // [d_model, vocab_size]
  bool adapters_attached = false;
  // Attach provenance, recorded so a checkpoint can rebuild the adapter
  // layout (and an adapter-only checkpoint can re-attach onto a fresh base).
  std::shared_ptr<const AdapterConfig> adapter_config;
  std::uint64_t adapter_seed = 0;
};

// Deterministic initialization: projections ~ Normal(0, 0.02) from per-site
// substreams of `seed`, norm weights 1. A fresh model is fully trainable;
// attach_adapters later freezes the base.
Model build_model(const ModelConfig& config, std::uint64_t seed);

// Every parameter in declaration order as (name, tensor) pairs — base
// weights and, when attached, adapter factors (".lora_A" / ".lora_B"
// suffixes). The checkpoint blob manifest uses exactly these names.
std::vector<std::pair<std::string, Tensor>> named_parameters(
    const Model& model);

// The subset of named_parameters that carries requires_grad.
std::vector<Tensor> trainable_parameters(const Model& model);

// Standard rotary embedding: consecutive value pairs (x_2i, x_2i+1) rotated
// by angle pos * base^(-2i / head_dim). Norm-preserving per pair; scores
// between rotated q and k depend only on relative position.
Tensor rope_apply(const Tensor& x /*[seq, heads, head_dim]*/,
                  const std::vector<std::size_t>& positions, double base);

// x / sqrt(mean(x^2) + eps) * weight over the trailing axis.
Tensor rmsnorm(const Tensor& x, const Tensor& weight, double eps);

// (silu(x.gate) ⊙ (x.up)) . down
Tensor swiglu_ffn(const Tensor& x, const Tensor& gate, const Tensor& up,
                  const Tensor& down);

struct KernelOptions {
  bool streaming = true;
  std::size_t block_size = 64;
};

// Full causal decoder pass over one token sequence -> [seq, vocab] logits.
// In train mode, `noise` (if any) perturbs the embeddings and adapter
// dropout is live; in eval mode the pass is deterministic. The model is
// non-const because train-mode dropout advances per-adapter streams.
Tensor forward(Model& model, const std::vector<int>& tokens, Mode mode,
               NoiseStream* noise = nullptr, const KernelOptions& kernel = {});

}  // namespace peft
