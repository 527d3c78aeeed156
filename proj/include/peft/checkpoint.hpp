#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "peft/adapter.hpp"
#include "peft/model.hpp"
#include "peft/tensor.hpp"

namespace peft {

// On-disk layout: magic "PFT1", a little-endian u64 header length, that many
// bytes of UTF-8 JSON (version, kind, config, seeds, blob manifest with
// name/shape/offset), then the blob region — raw little-endian doubles,
// back to back in manifest order. Loading validates the manifest against
// the actual bytes before any tensor is built.
struct Checkpoint {
  int version = 1;
  bool adapter_only = false;
  ModelConfig config;
  std::uint64_t seed = 0;          // build_model provenance
  bool has_adapter = false;        // adapter_config/adapter_seed meaningful
  AdapterConfig adapter;
  std::uint64_t adapter_seed = 0;  // attach_adapters provenance
  std::vector<std::pair<std::string, Tensor>> blobs;
};

// adapter_only=true stores just the lora_A/lora_B factors (plus enough
// provenance to re-attach them onto a matching base); it requires an
// adapted model. adapter_only=false stores every named parameter.
void save_checkpoint(const Model& model, const std::string& path,
                     bool adapter_only = false);

Checkpoint load_checkpoint(const std::string& path);

// Full checkpoint -> a model whose forward is bit-identical to the saved
// one. Rejects adapter-only checkpoints.
Model restore_model(const Checkpoint& ckpt);

// Adapter-only checkpoint onto a freshly built matching base: re-attaches
// with the recorded adapter config/seed, then overwrites the factors.
// Rejects a base whose architecture differs from the recorded config.
void restore_adapters(Model& base, const Checkpoint& ckpt);

}  // namespace peft
