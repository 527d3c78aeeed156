// Tests for the Adam optimizer, gradient accumulation, and the fine-tuning
// loop.  Optimizer traces are checked against hand-unrolled values frozen
// in comments; accumulation is checked against the algebraic identity that
// splitting a batch into micro-batches must not change the update.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "peft/adapter.hpp"
#include "peft/data.hpp"
#include "peft/model.hpp"
#include "peft/tensor.hpp"
#include "peft/trainer.hpp"

namespace {

// One attention layer over a byte-sized vocabulary; small enough that a
// dozen optimizer steps take well under a second.
peft::ModelConfig tiny_byte_model() {
  peft::ModelConfig c;
  c.n_layers = 1;
  c.d_model = 32;
  c.n_heads = 4;
  c.n_kv_heads = 2;
  c.head_dim = 8;
  c.d_ff = 64;
  c.vocab_size = peft::kMinVocab + 1;  // 260
  c.max_context = 64;
  return c;
}

// Three-way signal task whose label is fully determined by a keyword.
peft::TaskSpec signal_task() {
  peft::TaskSpec t;
  t.name = "signal";
  t.labels = {"up", "down", "flat"};
  t.instruction = "Signal:";
  return t;
}

std::vector<peft::RawRecord> signal_records(std::size_t n) {
  const char* keywords[] = {"bull", "bear", "calm"};
  const char* labels[] = {"up", "down", "flat"};
  std::vector<peft::RawRecord> records;
  for (std::size_t i = 0; i < n; ++i) {
    records.push_back({"day " + std::to_string(i) + " " + keywords[i % 3],
                       labels[i % 3]});
  }
  return records;
}

std::vector<peft::InstructionExample> encode_all(
    const std::vector<peft::RawRecord>& records, const peft::TaskSpec& task) {
  std::vector<peft::InstructionExample> out;
  for (const auto& r : records) {
    out.push_back(peft::encode_example(r, task, 360, true));
  }
  return out;
}

// Snapshot of every named parameter's raw values.
std::vector<double> values_of(const peft::Tensor& t) {
  return std::vector<double>(t.data(), t.data() + t.size());
}

std::vector<std::vector<double>> snapshot(const peft::Model& model) {
  std::vector<std::vector<double>> out;
  for (const auto& [name, tensor] : peft::named_parameters(model)) {
    out.push_back(values_of(tensor));
  }
  return out;
}

double max_abs_diff(const std::vector<std::vector<double>>& a,
                    const std::vector<std::vector<double>>& b) {
  REQUIRE(a.size() == b.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].size() == b[i].size());
    for (std::size_t j = 0; j < a[i].size(); ++j) {
      worst = std::max(worst, std::abs(a[i][j] - b[i][j]));
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("train config validation names the offending knob") {
  peft::TrainConfig config;
  CHECK_NOTHROW(peft::validate_train_config(config));

  auto expect_reject = [](peft::TrainConfig bad, const char* needle) {
    CHECK_THROWS_WITH_AS(peft::validate_train_config(bad),
                         doctest::Contains(needle), std::runtime_error);
  };
  peft::TrainConfig c;
  c.micro_batch = 0;
  expect_reject(c, "micro");
  c = peft::TrainConfig{};
  c.grad_accum = 0;
  expect_reject(c, "accum");
  c = peft::TrainConfig{};
  c.learning_rate = 0.0;
  expect_reject(c, "learning_rate");
  c = peft::TrainConfig{};
  c.epochs = 0;
  expect_reject(c, "epochs");
  c = peft::TrainConfig{};
  c.max_tokens = 2;
  expect_reject(c, "max_tokens");
  c = peft::TrainConfig{};
  c.neftune_alpha = -0.1;
  expect_reject(c, "neftune");
  c = peft::TrainConfig{};
  c.clip_norm = -1.0;
  expect_reject(c, "clip");
}

TEST_CASE("adam leaves parameters with zero gradient untouched") {
  std::vector<peft::Tensor> params = {
      peft::Tensor::full({3}, 1.25, /*requires_grad=*/true)};
  peft::AdamState state = peft::init_adam(params);
  REQUIRE(state.m.size() == 1);
  REQUIRE(state.m[0].size() == 3);

  peft::adam_step(params, state, 0.1, 0.9, 0.999, 1e-8);
  for (double v : values_of(params[0])) CHECK(v == 1.25);
  CHECK(state.step == 1);
}

TEST_CASE("adam matches a hand-unrolled two-step trace") {
  // Two coordinates with independent gradient histories; expected values
  // unrolled by hand from the bias-corrected update rule with lr 0.01,
  // beta1 0.9, beta2 0.999, eps 1e-8:
  //   x0 = 0.5,  g = (0.3, -0.2) -> 0.4900000003333333, 0.48855479509285965
  //   x0 = -1.0, g = (-0.5, 0.5) -> -0.9900000002,      -0.9905263159789474
  std::vector<peft::Tensor> params = {
      peft::Tensor::from({2}, {0.5, -1.0}, /*requires_grad=*/true)};
  peft::AdamState state = peft::init_adam(params);

  auto put_grad = [&](double g0, double g1) {
    params[0].ensure_grad();
    params[0].grad_data()[0] = g0;
    params[0].grad_data()[1] = g1;
  };
  put_grad(0.3, -0.5);
  peft::adam_step(params, state, 0.01, 0.9, 0.999, 1e-8);
  CHECK(params[0].data()[0] == doctest::Approx(0.4900000003333333)
                                   .epsilon(1e-14));
  CHECK(params[0].data()[1] == doctest::Approx(-0.9900000002)
                                   .epsilon(1e-14));

  put_grad(-0.2, 0.5);
  peft::adam_step(params, state, 0.01, 0.9, 0.999, 1e-8);
  CHECK(params[0].data()[0] == doctest::Approx(0.48855479509285965)
                                   .epsilon(1e-14));
  CHECK(params[0].data()[1] == doctest::Approx(-0.9905263159789474)
                                   .epsilon(1e-14));
  CHECK(state.step == 2);
}

TEST_CASE("adam rejects a state built for a different parameter list") {
  std::vector<peft::Tensor> params = {
      peft::Tensor::full({4}, 0.0, /*requires_grad=*/true)};
  std::vector<peft::Tensor> other = {
      peft::Tensor::full({5}, 0.0, /*requires_grad=*/true)};
  peft::AdamState state = peft::init_adam(other);
  CHECK_THROWS_AS(peft::adam_step(params, state, 0.01, 0.9, 0.999, 1e-8),
                  std::runtime_error);
}

TEST_CASE("splitting a window into micro-batches does not change the step") {
  const peft::TaskSpec task = signal_task();
  const auto examples = encode_all(signal_records(12), task);

  peft::TrainConfig config;
  config.adapter.dropout_p = 0.0;  // dropout would decorrelate the layouts
  config.neftune_alpha = 0.0;
  config.learning_rate = 1e-3;
  config.attention_block = 16;

  auto run_layout =
      [&](const std::vector<std::vector<peft::InstructionExample>>& layout) {
        peft::Model model = peft::build_model(tiny_byte_model(), 21);
        peft::attach_adapters(model, config.adapter, 77);
        std::vector<peft::Tensor> params = peft::trainable_parameters(model);
        peft::AdamState state = peft::init_adam(params);
        const double loss = peft::accumulate_and_step(
            model, layout, config, params, state, /*noise=*/nullptr);
        return std::make_pair(loss, snapshot(model));
      };

  // Layout A: four micro-batches of three.  Layout B: one batch of twelve.
  std::vector<std::vector<peft::InstructionExample>> four_by_three;
  for (std::size_t w = 0; w < 4; ++w) {
    four_by_three.emplace_back(examples.begin() + 3 * w,
                               examples.begin() + 3 * (w + 1));
  }
  std::vector<std::vector<peft::InstructionExample>> one_by_twelve = {
      examples};

  const auto [loss_a, params_a] = run_layout(four_by_three);
  const auto [loss_b, params_b] = run_layout(one_by_twelve);

  CHECK(std::abs(loss_a - loss_b) <= 1e-10);
  CHECK(max_abs_diff(params_a, params_b) <= 1e-8);

  // A partial window (fewer micro-batches than grad_accum) is scaled by
  // its true size: two singletons must equal one pair.
  std::vector<std::vector<peft::InstructionExample>> two_singletons = {
      {examples[0]}, {examples[1]}};
  std::vector<std::vector<peft::InstructionExample>> one_pair = {
      {examples[0], examples[1]}};
  const auto [loss_c, params_c] = run_layout(two_singletons);
  const auto [loss_d, params_d] = run_layout(one_pair);
  CHECK(std::abs(loss_c - loss_d) <= 1e-10);
  CHECK(max_abs_diff(params_c, params_d) <= 1e-8);
}

TEST_CASE("accumulate_and_step rejects empty windows and micro-batches") {
  peft::Model model = peft::build_model(tiny_byte_model(), 21);
  peft::TrainConfig config;
  peft::attach_adapters(model, config.adapter, 77);
  std::vector<peft::Tensor> params = peft::trainable_parameters(model);
  peft::AdamState state = peft::init_adam(params);

  std::vector<std::vector<peft::InstructionExample>> empty_window;
  CHECK_THROWS_AS(peft::accumulate_and_step(model, empty_window, config,
                                            params, state, nullptr),
                  std::runtime_error);
  std::vector<std::vector<peft::InstructionExample>> empty_micro = {{}};
  CHECK_THROWS_AS(peft::accumulate_and_step(model, empty_micro, config,
                                            params, state, nullptr),
                  std::runtime_error);
}

TEST_CASE("train is bit-identical across reruns with the same seed") {
  const auto records = signal_records(18);
  const peft::TaskSpec task = signal_task();

  peft::TrainConfig config;
  config.micro_batch = 3;
  config.grad_accum = 2;
  config.epochs = 2;
  config.learning_rate = 1e-3;
  config.neftune_alpha = 0.1;   // noise on: determinism must survive it
  config.adapter.dropout_p = 0.1;  // dropout on, same reason
  config.seed = 5;
  config.attention_block = 16;

  peft::Model first = peft::build_model(tiny_byte_model(), 33);
  peft::Model second = peft::build_model(tiny_byte_model(), 33);
  const peft::TrainReport report_a = peft::train(first, records, task, config);
  const peft::TrainReport report_b =
      peft::train(second, records, task, config);

  REQUIRE(report_a.step_losses.size() == report_b.step_losses.size());
  for (std::size_t i = 0; i < report_a.step_losses.size(); ++i) {
    CHECK(report_a.step_losses[i] == report_b.step_losses[i]);
  }
  CHECK(max_abs_diff(snapshot(first), snapshot(second)) == 0.0);

  // Report bookkeeping: 18 records / (3 x 2) = 3 steps per epoch.
  CHECK(report_a.steps_per_epoch == 3);
  CHECK(report_a.step_losses.size() == 6);
  REQUIRE(report_a.epoch_mean_loss.size() == 2);
  CHECK(report_a.epoch_seconds.size() == 2);
  CHECK(report_a.trainable_params > 0);
  for (double loss : report_a.step_losses) {
    CHECK(std::isfinite(loss));
    CHECK(loss > 0.0);
  }
  // Epoch means really are the means of that epoch's step losses.
  const double mean_0 = (report_a.step_losses[0] + report_a.step_losses[1] +
                         report_a.step_losses[2]) /
                        3.0;
  CHECK(report_a.epoch_mean_loss[0] == doctest::Approx(mean_0).epsilon(1e-15));

  // A different seed must change the trajectory.
  peft::TrainConfig other = config;
  other.seed = 6;
  peft::Model third = peft::build_model(tiny_byte_model(), 33);
  const peft::TrainReport report_c = peft::train(third, records, task, other);
  bool any_diff = false;
  for (std::size_t i = 0; i < report_a.step_losses.size(); ++i) {
    any_diff = any_diff || report_a.step_losses[i] != report_c.step_losses[i];
  }
  CHECK(any_diff);
}

TEST_CASE("train touches only adapter parameters") {
  const auto records = signal_records(24);
  const peft::TaskSpec task = signal_task();

  peft::Model model = peft::build_model(tiny_byte_model(), 9);
  const auto base_before = snapshot(model);  // adapters not attached yet

  peft::TrainConfig config;
  config.micro_batch = 3;
  config.grad_accum = 2;
  config.epochs = 1;
  config.learning_rate = 1e-3;
  config.seed = 2;
  const peft::TrainReport report = peft::train(model, records, task, config);
  CHECK(report.step_losses.size() == 4);

  // Base weights are bit-identical to the pre-training snapshot.
  std::size_t base_idx = 0;
  bool lora_a_changed = false, lora_b_changed = false;
  for (const auto& [name, tensor] : peft::named_parameters(model)) {
    if (name.find(".lora_A") != std::string::npos) {
      // Fresh factors come from the attach seed; compare against zero-grad
      // instead of the pre-attach snapshot (they did not exist back then).
      lora_a_changed = true;  // existence; value movement checked via B below
      continue;
    }
    if (name.find(".lora_B") != std::string::npos) {
      for (double v : values_of(tensor)) {
        if (v != 0.0) lora_b_changed = true;
      }
      continue;
    }
    REQUIRE(base_idx < base_before.size());
    const auto now = values_of(tensor);
    REQUIRE(now.size() == base_before[base_idx].size());
    for (std::size_t j = 0; j < now.size(); ++j) {
      CHECK(now[j] == base_before[base_idx][j]);
    }
    ++base_idx;
  }
  CHECK(base_idx == base_before.size());
  CHECK(lora_a_changed);
  CHECK(lora_b_changed);  // training moved the zero-initialized factor
}

TEST_CASE("loss falls over epochs on a learnable keyword task") {
  const auto records = signal_records(24);
  const peft::TaskSpec task = signal_task();

  peft::TrainConfig config;
  config.micro_batch = 3;
  config.grad_accum = 2;
  config.epochs = 3;
  config.learning_rate = 2e-3;
  config.neftune_alpha = 0.0;  // keep the loss signal clean
  config.adapter.dropout_p = 0.0;
  config.seed = 11;

  peft::Model model = peft::build_model(tiny_byte_model(), 13);
  const peft::TrainReport report = peft::train(model, records, task, config);
  REQUIRE(report.epoch_mean_loss.size() == 3);
  CHECK(report.epoch_mean_loss[2] < report.epoch_mean_loss[0]);
}

TEST_CASE("streaming and naive attention train to the same parameters") {
  const auto records = signal_records(12);
  const peft::TaskSpec task = signal_task();

  auto run = [&](bool streaming) {
    peft::TrainConfig config;
    config.micro_batch = 3;
    config.grad_accum = 2;
    config.epochs = 1;
    config.learning_rate = 1e-3;
    config.neftune_alpha = 0.1;
    config.seed = 4;
    config.use_streaming_attention = streaming;
    config.attention_block = 7;  // forces several blocks per sequence
    peft::Model model = peft::build_model(tiny_byte_model(), 55);
    peft::train(model, records, task, config);
    return snapshot(model);
  };

  CHECK(max_abs_diff(run(true), run(false)) <= 1e-8);
}

TEST_CASE("train reports a ragged tail window as a full step") {
  // 9 records with window size 4 -> ceil(9/4) = 3 steps, tail of size 1.
  const auto records = signal_records(9);
  peft::TrainConfig config;
  config.micro_batch = 2;
  config.grad_accum = 2;
  config.epochs = 2;
  config.learning_rate = 1e-3;
  config.seed = 3;

  peft::Model model = peft::build_model(tiny_byte_model(), 77);
  const peft::TrainReport report =
      peft::train(model, records, signal_task(), config);
  CHECK(report.steps_per_epoch == 3);
  CHECK(report.step_losses.size() == 6);
  for (double loss : report.step_losses) CHECK(std::isfinite(loss));
}

TEST_CASE("train rejects bad inputs before running any step") {
  peft::Model model = peft::build_model(tiny_byte_model(), 1);
  const peft::TaskSpec task = signal_task();
  peft::TrainConfig config;

  CHECK_THROWS_AS(peft::train(model, {}, task, config), std::runtime_error);

  // A vocabulary too small for the reserved marker ids is caught up front.
  peft::ModelConfig small = tiny_byte_model();
  small.vocab_size = 128;
  peft::Model small_model = peft::build_model(small, 1);
  CHECK_THROWS_WITH_AS(peft::train(small_model, signal_records(6), task,
                                   config),
                       doctest::Contains("vocab"), std::runtime_error);

  // Over-length records fail during up-front encoding, not mid-epoch.
  peft::TrainConfig tight = config;
  tight.max_tokens = 10;
  CHECK_THROWS_WITH_AS(peft::train(model, signal_records(6), task, tight),
                       doctest::Contains("over the 10"), std::runtime_error);
}
