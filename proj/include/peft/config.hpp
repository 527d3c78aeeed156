#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "peft/data.hpp"
#include "peft/model.hpp"
#include "peft/trainer.hpp"

namespace peft {

// A desk-scale decoder that trains in minutes on one core yet still holds
// the byte tokenizer's 259 ids: 2 layers, d_model 128, 4 heads over 2 kv
// heads, FFN 256, context 512.
ModelConfig default_desk_model();

// Everything a flat `key = value` config file can declare: the published
// hyperparameter names (batch_size, grad_accum, learning_rate, epochs,
// max_tokens, lora_rank, lora_alpha, lora_dropout, lora_scheme,
// neftune_alpha, streaming_attention, seed), model architecture keys, and
// an optional inline task (labels = [...], instruction = "...").
struct FileConfig {
  TrainConfig train;
  ModelConfig model = default_desk_model();
  std::optional<TaskSpec> task;
};

// Strict parser: `#` comments and blank lines allowed, every other line
// must be `key = value` with a known key, else an error naming the line
// and key. Values: integers, reals, booleans (true/false), bare or quoted
// strings, and [a, b, c] lists.
FileConfig parse_config_text(const std::string& text);
FileConfig parse_config_file(const std::string& path);

// The PEFT_SEED environment variable, when set, overrides any configured
// seed; a non-integer value is an error.
std::uint64_t effective_seed(std::uint64_t configured);

}  // namespace peft
