// Command-line front end: train, eval, inspect, preset.
//
// Exit codes: 0 success; 1 with a one-line diagnostic on stderr for any
// runtime failure (bad data, unreadable checkpoint, ...); 2 with usage text
// for unknown flags or subcommands. All stdout is deterministic for a
// fixed invocation and seed except lines prefixed '#', which carry timing.
#include <chrono>
#include <cstdio>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "peft/adapter.hpp"
#include "peft/checkpoint.hpp"
#include "peft/config.hpp"
#include "peft/data.hpp"
#include "peft/eval.hpp"
#include "peft/model.hpp"
#include "peft/trainer.hpp"

namespace {

// Resolves the task: an inline task in the config file wins; otherwise the
// --task preset name. topic20 has no built-in label list, so it is only
// reachable through a config file that supplies one.
peft::TaskSpec resolve_task(const peft::FileConfig& config,
                            const std::string& preset_name) {
  if (config.task.has_value()) return *config.task;
  if (preset_name == "sentiment3") return peft::sentiment3_preset();
  if (preset_name == "topic20") {
    throw std::runtime_error(
        "task topic20 needs its 20 labels from a config file (labels = "
        "[...] plus instruction = \"...\")");
  }
  throw std::runtime_error("unknown task preset \"" + preset_name +
                           "\" (try sentiment3, or define labels in the "
                           "config file)");
}

peft::FileConfig load_file_config(const std::string& path) {
  if (path.empty()) return peft::FileConfig{};
  return peft::parse_config_file(path);
}

int run_train(const std::string& config_path, const std::string& data_path,
              const std::string& task_name, const std::string& out_path,
              const std::string& loss_csv) {
  peft::FileConfig config = load_file_config(config_path);
  config.train.seed = peft::effective_seed(config.train.seed);
  const peft::TaskSpec task = resolve_task(config, task_name);
  const peft::LoadResult data = peft::load_dataset(data_path, task);

  std::printf("task %s: %zu records", task.name.c_str(),
              data.records.size());
  for (std::size_t i = 0; i < task.labels.size(); ++i) {
    std::printf("%s%s=%zu", i == 0 ? " (" : ", ", task.labels[i].c_str(),
                data.histogram[i]);
  }
  std::printf(")\n");

  peft::Model model = peft::build_model(config.model, config.train.seed);
  const peft::TrainReport report =
      peft::train(model, data.records, task, config.train);

  std::printf("trained %zu steps (%zu per epoch), %zu trainable params\n",
              report.step_losses.size(), report.steps_per_epoch,
              report.trainable_params);
  for (std::size_t e = 0; e < report.epoch_mean_loss.size(); ++e) {
    std::printf("epoch %zu: mean loss %.6f\n", e + 1,
                report.epoch_mean_loss[e]);
    std::printf("# epoch %zu wall time %.1fs\n", e + 1,
                report.epoch_seconds[e]);
  }

  peft::save_checkpoint(model, out_path);
  std::printf("checkpoint written to %s\n", out_path.c_str());
  if (!loss_csv.empty()) {
    peft::export_loss_curve(report, loss_csv);
    std::printf("loss curve written to %s\n", loss_csv.c_str());
  }
  return 0;
}

int run_eval(const std::string& ckpt_path, const std::string& data_path,
             const std::string& config_path, const std::string& task_name,
             bool as_json, bool constrained) {
  const peft::FileConfig config = load_file_config(config_path);
  const peft::TaskSpec task = resolve_task(config, task_name);

  const peft::Checkpoint ckpt = peft::load_checkpoint(ckpt_path);
  peft::Model model = [&] {
    if (!ckpt.adapter_only) return peft::restore_model(ckpt);
    // Adapter-only file: rebuild the recorded base, then re-attach.
    peft::Model base = peft::build_model(ckpt.config, ckpt.seed);
    peft::restore_adapters(base, ckpt);
    return base;
  }();

  const peft::LoadResult data = peft::load_dataset(data_path, task);
  peft::EvalOptions options;
  options.constrained = constrained;
  const auto start = std::chrono::steady_clock::now();
  const peft::EvalReport report =
      peft::evaluate(model, data.records, task, options);
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();

  if (as_json) {
    std::printf("%s\n", peft::report_to_json(report).c_str());
  } else {
    std::printf("%s", peft::format_report(report).c_str());
  }
  std::printf("# evaluated %zu records in %.1fs\n", report.total, seconds);
  return 0;
}

int run_inspect(const std::string& ckpt_path) {
  const peft::Checkpoint ckpt = peft::load_checkpoint(ckpt_path);
  const peft::ModelConfig& m = ckpt.config;
  std::printf("checkpoint: %s (format v%d)\n",
              ckpt.adapter_only ? "adapter-only" : "full model",
              ckpt.version);
  std::printf("model: layers=%zu d_model=%zu heads=%zu kv_heads=%zu "
              "head_dim=%zu d_ff=%zu vocab=%zu context=%zu\n",
              m.n_layers, m.d_model, m.n_heads, m.n_kv_heads, m.head_dim,
              m.d_ff, m.vocab_size, m.max_context);
  std::printf("base params (closed form): %zu\n",
              static_cast<std::size_t>(peft::estimate_param_count(m)));
  std::printf("build seed: %llu\n",
              static_cast<unsigned long long>(ckpt.seed));
  if (ckpt.has_adapter) {
    const peft::AdapterConfig& a = ckpt.adapter;
    std::printf("adapter: rank=%zu alpha=%g scheme=%s dropout=%g "
                "targets=%zu seed=%llu\n",
                a.rank, a.resolved_alpha(),
                a.scheme == peft::LoraScheme::kRslora ? "rslora" : "lora",
                a.dropout_p, a.targets.size(),
                static_cast<unsigned long long>(ckpt.adapter_seed));
  }
  std::size_t blob_elems = 0;
  for (const auto& [name, tensor] : ckpt.blobs) blob_elems += tensor.size();
  std::printf("stored blobs: %zu tensors, %zu values\n", ckpt.blobs.size(),
              blob_elems);
  return 0;
}

int run_preset(const std::string& name) {
  if (name != "qwen3-8b") {
    throw std::runtime_error("unknown preset \"" + name +
                             "\" (available: qwen3-8b)");
  }
  const peft::ModelConfig m = peft::qwen3_8b_preset();
  std::printf("qwen3-8b:\n");
  std::printf("  layers        %zu\n", m.n_layers);
  std::printf("  d_model       %zu\n", m.d_model);
  std::printf("  q heads       %zu\n", m.n_heads);
  std::printf("  kv heads      %zu\n", m.n_kv_heads);
  std::printf("  head dim      %zu\n", m.head_dim);
  std::printf("  ffn dim       %zu\n", m.d_ff);
  std::printf("  vocab         %zu\n", m.vocab_size);
  std::printf("  context       %zu\n", m.max_context);
  std::printf("  params (closed form) %zu\n",
              static_cast<std::size_t>(peft::estimate_param_count(m)));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Byte-level instruction fine-tuning with low-rank adapters"};
  app.require_subcommand(1);

  std::string config_path, data_path, out_path, loss_csv, ckpt_path;
  std::string task_name = "sentiment3";
  std::string preset_name;
  bool as_json = false, constrained = false;

  CLI::App* train = app.add_subcommand("train", "Fine-tune on a JSONL dataset");
  train->add_option("--config", config_path, "Flat key = value config file");
  train->add_option("--data", data_path, "JSONL dataset")->required();
  train->add_option("--task", task_name, "Task preset (default sentiment3)");
  train->add_option("--out", out_path, "Checkpoint output path")->required();
  train->add_option("--loss-csv", loss_csv, "Write per-step loss curve CSV");

  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--ckpt", ckpt_path, "Checkpoint path")->required();
  eval->add_option("--data", data_path, "JSONL dataset")->required();
  eval->add_option("--config", config_path, "Config file (for inline tasks)");
  eval->add_option("--task", task_name, "Task preset (default sentiment3)");
  eval->add_flag("--json", as_json, "Print the report as JSON");
  eval->add_flag("--constrained", constrained,
                 "Constrain decoding to the label set");

  CLI::App* inspect = app.add_subcommand("inspect", "Describe a checkpoint");
  inspect->add_option("--ckpt", ckpt_path, "Checkpoint path")->required();

  CLI::App* preset = app.add_subcommand("preset", "Print a model preset");
  preset->add_option("name", preset_name, "Preset name")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // CLI11 prints --help itself with exit code 0; everything else is a
    // usage problem and exits 2 per the contract.
    if (e.get_exit_code() == 0) return app.exit(e);
    app.exit(e);
    return 2;
  }

  try {
    if (train->parsed()) {
      return run_train(config_path, data_path, task_name, out_path, loss_csv);
    }
    if (eval->parsed()) {
      return run_eval(ckpt_path, data_path, config_path, task_name, as_json,
                      constrained);
    }
    if (inspect->parsed()) return run_inspect(ckpt_path);
    if (preset->parsed()) return run_preset(preset_name);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;  // unreachable: require_subcommand guarantees one parsed
}
