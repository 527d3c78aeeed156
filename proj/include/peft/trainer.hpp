#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "peft/adapter.hpp"
#include "peft/data.hpp"
#include "peft/model.hpp"
#include "peft/tensor.hpp"

namespace peft {

// The published fine-tuning recipe, as defaults: micro-batch 3 with 4-step
// gradient accumulation (effective batch 12), Adam at 5e-5 for 3 epochs,
// 360-token cap, rank-8 rank-stabilized adapters with dropout 0.1, noise
// alpha 0.3, streaming attention on.
struct TrainConfig {
  std::size_t micro_batch = 3;
  std::size_t grad_accum = 4;
  double learning_rate = 5e-5;
  std::size_t epochs = 3;
  std::size_t max_tokens = 360;
  AdapterConfig adapter;
  double neftune_alpha = 0.3;
  bool use_streaming_attention = true;
  std::size_t attention_block = 64;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  // Ablation switches, both off by default: loss over every position
  // instead of just the assistant span, and max-norm gradient clipping
  // (0 disables).
  bool full_sequence_loss = false;
  double clip_norm = 0.0;
  bool no_think = true;  // template prefix on rendered user turns
};

void validate_train_config(const TrainConfig& config);

// Bias-corrected Adam. Buffers are indexed in the order the parameter list
// was first presented; `step` counts completed optimizer steps.
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t step = 0;
};

AdamState init_adam(const std::vector<Tensor>& params);

// One standard bias-corrected Adam update from the gradients currently on
// `params`; parameters without a gradient buffer are treated as zero-grad.
// Gradients are left in place (callers clear them between steps).
void adam_step(std::vector<Tensor>& params, AdamState& state, double lr,
               double beta1, double beta2, double eps);

struct TrainReport {
  std::vector<double> step_losses;      // one entry per optimizer step
  std::vector<double> epoch_mean_loss;  // mean of step losses per epoch
  std::vector<double> epoch_seconds;    // wall-clock per epoch
  std::size_t steps_per_epoch = 0;
  std::size_t trainable_params = 0;
};

// One accumulation window: forward + backward over each micro-batch with
// the window loss scaled by 1/(number of micro-batches), then a single
// optimizer step. Returns the mean of the micro-batch losses. `noise` may
// be null; params/state must enumerate the model's trainable parameters.
double accumulate_and_step(Model& model,
                           const std::vector<std::vector<InstructionExample>>&
                               micro_batches,
                           const TrainConfig& config,
                           std::vector<Tensor>& params, AdamState& state,
                           NoiseStream* noise);

// Full fine-tuning loop: encodes every record up front (over-length input
// fails before any step runs), attaches adapters if the model has none,
// then runs epochs x ceil(N / (micro x accum)) optimizer steps with a
// seeded per-epoch shuffle. The final partial window is processed at its
// true size. Only adapter parameters change; fully deterministic in
// config.seed.
TrainReport train(Model& model, const std::vector<RawRecord>& records,
                  const TaskSpec& task, const TrainConfig& config);

}  // namespace peft
