#include "peft/trainer.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "peft/neftune.hpp"
#include "peft/rng.hpp"

namespace peft {

void validate_train_config(const TrainConfig& config) {
  if (config.micro_batch < 1) {
    throw std::runtime_error("train config: micro_batch must be >= 1");
  }
  if (config.grad_accum < 1) {
    throw std::runtime_error("train config: grad_accum must be >= 1");
  }
  if (config.learning_rate <= 0.0) {
    throw std::runtime_error("train config: learning_rate must be positive");
  }
  if (config.epochs < 1) {
    throw std::runtime_error("train config: epochs must be >= 1");
  }
  if (config.max_tokens < 3) {
    // A minimal example is one user byte + separator + end marker.
    throw std::runtime_error("train config: max_tokens too small to encode "
                             "any example");
  }
  if (config.neftune_alpha < 0.0) {
    throw std::runtime_error("train config: neftune_alpha must be >= 0");
  }
  if (config.clip_norm < 0.0) {
    throw std::runtime_error("train config: clip_norm must be >= 0");
  }
}

AdamState init_adam(const std::vector<Tensor>& params) {
  AdamState state;
  state.m.reserve(params.size());
  state.v.reserve(params.size());
  for (const Tensor& p : params) {
    state.m.emplace_back(p.size(), 0.0);
    state.v.emplace_back(p.size(), 0.0);
  }
  return state;
}

void adam_step(std::vector<Tensor>& params, AdamState& state, double lr,
               double beta1, double beta2, double eps) {
  if (params.size() != state.m.size()) {
    throw std::runtime_error("adam: state tracks " +
                             std::to_string(state.m.size()) +
                             " parameters, got " +
                             std::to_string(params.size()));
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(beta1, t);
  const double correction2 = 1.0 - std::pow(beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (state.m[i].size() != p.size()) {
      throw std::runtime_error("adam: buffer " + std::to_string(i) +
                               " shape-mismatches its parameter");
    }
    const double* g = p.has_grad() ? p.grad_data() : nullptr;
    double* m = state.m[i].data();
    double* v = state.v[i].data();
    double* w = p.data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g ? g[j] : 0.0;
      m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
      v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
      const double m_hat = m[j] / correction1;
      const double v_hat = v[j] / correction2;
      w[j] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

namespace {

KernelOptions kernel_options(const TrainConfig& config) {
  KernelOptions k;
  k.streaming = config.use_streaming_attention;
  k.block_size = config.attention_block;
  return k;
}

// Mean masked cross-entropy over one example's own sequence.
Tensor example_loss(Model& model, const InstructionExample& ex,
                    const TrainConfig& config, NoiseStream* noise) {
  Tensor logits = forward(model, ex.tokens, Mode::kTrain, noise,
                          kernel_options(config));
  // Next-token objective: logits at position t predict token t+1, so a
  // mask bit on token t+1 selects position t. The final position predicts
  // beyond the sequence and is always masked out (its target is a dummy).
  const std::size_t len = ex.tokens.size();
  std::vector<int> targets(len, 0);
  Mask mask(len, 0);
  for (std::size_t t = 0; t + 1 < len; ++t) {
    targets[t] = ex.tokens[t + 1];
    mask[t] = config.full_sequence_loss ? 1 : ex.loss_mask[t + 1];
  }
  return cross_entropy(logits, targets, mask);
}

}  // namespace

double accumulate_and_step(
    Model& model,
    const std::vector<std::vector<InstructionExample>>& micro_batches,
    const TrainConfig& config, std::vector<Tensor>& params, AdamState& state,
    NoiseStream* noise) {
  if (micro_batches.empty()) {
    throw std::runtime_error("train: accumulation window has no micro-batches");
  }
  const double window = static_cast<double>(micro_batches.size());
  double loss_sum = 0.0;
  for (const Tensor& p : params) p.clear_grad();
  for (const auto& micro : micro_batches) {
    if (micro.empty()) {
      throw std::runtime_error("train: empty micro-batch");
    }
    // Micro-batch loss = mean example loss; window scaling 1/k applied so
    // gradients match one big batch over the window's examples.
    Tensor micro_loss = Tensor::scalar(0.0);
    for (const InstructionExample& ex : micro) {
      micro_loss = add(micro_loss, example_loss(model, ex, config, noise));
    }
    micro_loss = scale(micro_loss, 1.0 / static_cast<double>(micro.size()));
    loss_sum += micro_loss.item();
    backward(scale(micro_loss, 1.0 / window));
  }
  if (config.clip_norm > 0.0) {
    double norm_sq = 0.0;
    for (const Tensor& p : params) {
      if (!p.has_grad()) continue;
      const double* g = p.grad_data();
      for (std::size_t j = 0; j < p.size(); ++j) norm_sq += g[j] * g[j];
    }
    const double norm = std::sqrt(norm_sq);
    if (norm > config.clip_norm) {
      const double shrink = config.clip_norm / norm;
      for (const Tensor& p : params) {
        if (!p.has_grad()) continue;
        double* g = p.grad_data();
        for (std::size_t j = 0; j < p.size(); ++j) g[j] *= shrink;
      }
    }
  }
  adam_step(params, state, config.learning_rate, config.adam_beta1,
            config.adam_beta2, config.adam_eps);
  for (const Tensor& p : params) p.clear_grad();
  return loss_sum / window;
}

TrainReport train(Model& model, const std::vector<RawRecord>& records,
                  const TaskSpec& task, const TrainConfig& config) {
  validate_train_config(config);
  validate_task(task);
  if (records.empty()) {
    throw std::runtime_error("train: dataset is empty");
  }
  if (model.config.vocab_size < kMinVocab) {
    throw std::runtime_error(
        "train: model vocab_size " + std::to_string(model.config.vocab_size) +
        " cannot hold the byte tokenizer's " + std::to_string(kMinVocab) +
        " ids");
  }
  std::vector<InstructionExample> examples;
  examples.reserve(records.size());
  for (const RawRecord& r : records) {
    examples.push_back(
        encode_example(r, task, config.max_tokens, config.no_think));
    if (examples.back().tokens.size() > model.config.max_context) {
      throw std::runtime_error("train: record \"" + r.text.substr(0, 40) +
                               "\" exceeds the model's max_context");
    }
  }
  if (!model.adapters_attached) {
    attach_adapters(model, config.adapter, config.seed);
  }
  std::vector<Tensor> params = trainable_parameters(model);
  AdamState state = init_adam(params);
  NoiseStream noise(NoiseConfig{config.neftune_alpha, config.seed});

  const std::size_t window_size = config.micro_batch * config.grad_accum;
  const std::size_t n = examples.size();
  const std::size_t steps_per_epoch = (n + window_size - 1) / window_size;

  TrainReport report;
  report.steps_per_epoch = steps_per_epoch;
  for (const Tensor& p : params) report.trainable_params += p.size();

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    // Per-epoch permutation from its own substream of the run seed.
    Rng shuffle_rng(config.seed, 0x5Du * 1000 + epoch);
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += window_size) {
      const std::size_t end = std::min(n, start + window_size);
      std::vector<std::vector<InstructionExample>> window;
      for (std::size_t b = start; b < end; b += config.micro_batch) {
        std::vector<InstructionExample> micro;
        for (std::size_t i = b; i < std::min(end, b + config.micro_batch);
             ++i) {
          micro.push_back(examples[order[i]]);
        }
        window.push_back(std::move(micro));
      }
      const double loss =
          accumulate_and_step(model, window, config, params, state, &noise);
      if (!std::isfinite(loss)) {
        std::string ids;
        for (std::size_t i = start; i < end; ++i) {
          ids += (ids.empty() ? "" : ",") + std::to_string(order[i]);
        }
        throw std::runtime_error(
            "train: non-finite loss at optimizer step " +
            std::to_string(state.step) + " (examples " + ids + ")");
      }
      report.step_losses.push_back(loss);
      epoch_loss += loss;
    }
    report.epoch_mean_loss.push_back(epoch_loss /
                                     static_cast<double>(steps_per_epoch));
    report.epoch_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                      epoch_start)
            .count());
  }
  return report;
}

}  // namespace peft
