// Acceptance suite: one [PASS]/[FAIL] line per criterion, timed, with the
// binary's exit status equal to the number of failed criteria.
//
// Criterion 1 records why published-scale accuracy numbers are out of reach
// at desk scale and what stands in for them. Criterion 7 runs the shipped
// CLI end to end on a synthetic keyword task with the published recipe; its
// accuracy bars are expected to fail at this scale (see the line's note and
// README), and a clearly-labeled diagnostic rerun shows the pipeline itself
// learns when only the learning rate is raised.
#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "peft/adapter.hpp"
#include "peft/attention.hpp"
#include "peft/checkpoint.hpp"
#include "peft/data.hpp"
#include "peft/eval.hpp"
#include "peft/model.hpp"
#include "peft/neftune.hpp"
#include "peft/rng.hpp"
#include "peft/tensor.hpp"
#include "peft/trainer.hpp"
#include "support/finite_diff.hpp"

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

double frobenius(const peft::Tensor& t) {
  double sum = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) sum += t.data()[i] * t.data()[i];
  return std::sqrt(sum);
}

double max_abs_diff(const peft::Tensor& a, const peft::Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
  }
  return worst;
}

std::string fmt(const char* format, ...) {
  va_list args;
  va_start(args, format);
  char buffer[512];
  std::vsnprintf(buffer, sizeof(buffer), format, args);
  va_end(args);
  return buffer;
}

// ---- criterion 1: scale statement -----------------------------------------

Outcome criterion_scale_statement() {
  return {true,
          "published-scale accuracies need the pretrained 8B base model and "
          "the full benchmark datasets (both out of scope); criteria 2-9 "
          "substitute property-based checks on desk-scale models"};
}

// ---- criterion 2: gradient suite -------------------------------------------

Outcome criterion_gradients() {
  peft::ModelConfig c;
  c.n_layers = 1;
  c.d_model = 32;
  c.n_heads = 2;
  c.n_kv_heads = 1;
  c.head_dim = 16;
  c.d_ff = 48;
  c.vocab_size = 64;
  c.max_context = 16;
  peft::Model model = peft::build_model(c, 2024);

  peft::AdapterConfig acfg;
  acfg.rank = 4;
  acfg.targets = {peft::TargetProj::kQ,    peft::TargetProj::kK,
                  peft::TargetProj::kV,    peft::TargetProj::kO,
                  peft::TargetProj::kGate, peft::TargetProj::kUp,
                  peft::TargetProj::kDown};
  peft::attach_adapters(model, acfg, 4);

  // Give the zero-initialized B factors values so their upstream gradients
  // are exercised too.
  peft::Rng brng(31, 0);
  for (auto& [name, p] : peft::named_parameters(model)) {
    if (name.find(".lora_B") != std::string::npos) {
      for (std::size_t i = 0; i < p.size(); ++i) {
        p.data()[i] = brng.normal(0.0, 0.02);
      }
    }
  }

  const std::vector<int> tokens = {5, 61, 0, 33, 17, 17, 48, 9, 22, 41};
  const std::vector<int> targets = {61, 0, 33, 17, 17, 48, 9, 22, 41, 2};
  const peft::Mask mask = {0, 0, 1, 1, 0, 1, 1, 1, 1, 1};
  auto loss = [&] {
    return peft::cross_entropy(
        peft::forward(model, tokens, peft::Mode::kEval), targets, mask);
  };

  peft::Tensor l = loss();
  peft::backward(l);

  double worst = 0.0;
  std::size_t coords = 0;
  for (auto& [name, p] : peft::named_parameters(model)) {
    if (!p.requires_grad()) continue;
    if (!p.has_grad()) return {false, "no gradient on " + name};
    worst = std::max(worst, testsupport::max_grad_error(
                                [&] { return loss().item(); }, p, 1e-5));
    coords += p.size();
  }
  return {worst < 1e-4,
          fmt("worst relative error %.2e across %zu trainable coordinates "
              "(analytic vs central differences, h=1e-5; bound 1e-4)",
              worst, coords)};
}

// ---- criterion 3: kernel equivalence ---------------------------------------

Outcome criterion_kernels() {
  peft::Rng rng(7000, 0);
  double worst_fwd = 0.0, worst_grad = 0.0;
  for (int draw = 0; draw < 200; ++draw) {
    const std::size_t seq_q = 1 + rng.next_u64() % 24;
    const bool causal = draw % 2 == 0;
    // Causal queries may also be a suffix of a longer key sequence.
    const std::size_t seq_k = seq_q + (draw % 4 == 1 ? rng.next_u64() % 8 : 0);
    const std::size_t hd = 1 + rng.next_u64() % 12;
    const std::size_t block = 1 + rng.next_u64() % (seq_k + 3);

    std::vector<double> qv(seq_q * hd), kv(seq_k * hd), vv(seq_k * hd),
        wv(seq_q * hd);
    for (auto* vec : {&qv, &kv, &vv, &wv}) {
      for (double& x : *vec) x = rng.normal(0.0, 1.0);
    }

    auto run = [&](bool streaming) {
      peft::AttentionInputs in;
      in.q = peft::Tensor::from({seq_q, hd}, qv, true);
      in.k = peft::Tensor::from({seq_k, hd}, kv, true);
      in.v = peft::Tensor::from({seq_k, hd}, vv, true);
      in.mask = causal ? peft::AttnMask::kCausal : peft::AttnMask::kNone;
      peft::Tensor out = streaming
                             ? peft::streaming_attention(in, block)
                             : peft::naive_attention(in);
      const peft::Tensor w = peft::Tensor::from({seq_q, hd}, wv, false);
      peft::backward(peft::sum(peft::mul(out, w)));
      std::vector<std::vector<double>> grads;
      for (const peft::Tensor& leaf : {in.q, in.k, in.v}) {
        grads.emplace_back(leaf.grad_data(),
                           leaf.grad_data() + leaf.size());
      }
      return std::make_pair(
          std::vector<double>(out.data(), out.data() + out.size()), grads);
    };

    const auto [out_n, grads_n] = run(false);
    const auto [out_s, grads_s] = run(true);
    for (std::size_t i = 0; i < out_n.size(); ++i) {
      worst_fwd = std::max(worst_fwd, std::abs(out_n[i] - out_s[i]));
    }
    for (std::size_t g = 0; g < 3; ++g) {
      for (std::size_t i = 0; i < grads_n[g].size(); ++i) {
        worst_grad =
            std::max(worst_grad, std::abs(grads_n[g][i] - grads_s[g][i]));
      }
    }
  }

  const std::size_t naive_peak = peft::peak_score_storage(
      360, 360, 16, 32, peft::AttentionKernel::kNaive);
  const std::size_t stream_peak = peft::peak_score_storage(
      360, 360, 16, 32, peft::AttentionKernel::kStreaming);
  const bool pass = worst_fwd <= 1e-10 && worst_grad <= 1e-10 &&
                    naive_peak == 129600 &&
                    stream_peak * 10 < naive_peak;
  return {pass,
          fmt("200 draws: worst forward gap %.2e, worst gradient gap %.2e "
              "(bound 1e-10); peak score storage at seq 360, block 32: "
              "%zu vs naive %zu elements (need < 10%%)",
              worst_fwd, worst_grad, stream_peak, naive_peak)};
}

// ---- criterion 4: adapter algebra ------------------------------------------

Outcome criterion_adapters() {
  const std::size_t d = 64;
  peft::Rng xrng(4100, 0);
  const peft::Tensor x = peft::Tensor::randn({5, d}, xrng, 0.0, 1.0, false);

  double worst_zero = 0.0, worst_merge = 0.0, worst_ratio = 0.0;
  for (const std::size_t r : {std::size_t{1}, std::size_t{4}, std::size_t{8},
                              std::size_t{64}}) {
    peft::Rng wrng(4200, r);
    const peft::Tensor base =
        peft::Tensor::randn({d, d}, wrng, 0.0, 0.05, false);

    peft::AdapterConfig lcfg;
    lcfg.rank = r;
    lcfg.alpha = 16.0;
    lcfg.dropout_p = 0.0;
    lcfg.scheme = peft::LoraScheme::kLora;
    peft::AdapterConfig rcfg = lcfg;
    rcfg.scheme = peft::LoraScheme::kRslora;

    peft::LoraAdapter plain = peft::init_adapter(base, lcfg, 4300 + r);
    peft::LoraAdapter stabilized = peft::init_adapter(base, rcfg, 4300 + r);

    // Zero-init transparency must be exact (bitwise), B being zero.
    const peft::Tensor base_out = peft::matmul(x, base);
    worst_zero = std::max(
        worst_zero,
        max_abs_diff(peft::adapter_forward(plain, x, peft::Mode::kEval),
                     base_out));

    // Same nonzero B on both schemes.
    peft::Rng brng(4400 + r, 0);
    for (std::size_t i = 0; i < plain.b.size(); ++i) {
      const double v = brng.normal(0.0, 0.02);
      plain.b.data()[i] = v;
      stabilized.b.data()[i] = v;
    }

    // Merge equivalence: merged-weight forward vs live-branch forward.
    const peft::Tensor live =
        peft::adapter_forward(plain, x, peft::Mode::kEval);
    const peft::Tensor merged_out =
        peft::matmul(x, peft::merge_adapter(plain));
    worst_merge = std::max(worst_merge, max_abs_diff(live, merged_out));

    // Branch ratio: rslora branch / lora branch == sqrt(r).
    const peft::Tensor branch_l = peft::sub(live, base_out);
    const peft::Tensor branch_r = peft::sub(
        peft::adapter_forward(stabilized, x, peft::Mode::kEval), base_out);
    const double ratio = frobenius(branch_r) / frobenius(branch_l);
    worst_ratio = std::max(
        worst_ratio,
        std::abs(ratio - std::sqrt(static_cast<double>(r))) /
            std::sqrt(static_cast<double>(r)));
  }

  // Magnitude families across 100 seeds, both factors Normal(0, 0.02),
  // alpha fixed at 16: the plain branch fits c/sqrt(r) and the
  // rank-stabilized branch is rank-invariant, i.e. it grows like sqrt(r)
  // *relative to the plain rule* — the only self-consistent form of the
  // sqrt(r) growth claim, since at fixed (A, B, alpha) the scheme ratio is
  // identically sqrt(r).
  const std::vector<std::size_t> ranks = {1, 4, 8, 64};
  std::vector<double> lora_mean(ranks.size(), 0.0), rs_mean(ranks.size(), 0.0);
  for (std::size_t ri = 0; ri < ranks.size(); ++ri) {
    for (int seed = 0; seed < 100; ++seed) {
      peft::Rng rng(5000 + seed, ranks[ri]);
      const peft::Tensor a =
          peft::Tensor::randn({d, ranks[ri]}, rng, 0.0, 0.02, false);
      const peft::Tensor b =
          peft::Tensor::randn({ranks[ri], d}, rng, 0.0, 0.02, false);
      const double ab = frobenius(peft::matmul(a, b));
      lora_mean[ri] +=
          peft::adapter_scale(ranks[ri], 16.0, peft::LoraScheme::kLora) * ab;
      rs_mean[ri] +=
          peft::adapter_scale(ranks[ri], 16.0, peft::LoraScheme::kRslora) *
          ab;
    }
    lora_mean[ri] /= 100.0;
    rs_mean[ri] /= 100.0;
  }
  double worst_fit = 0.0;
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    const double root = std::sqrt(static_cast<double>(ranks[i]));
    worst_fit = std::max(
        worst_fit, testsupport::relative_error(lora_mean[i] * root,
                                               lora_mean[0]));
    worst_fit = std::max(worst_fit,
                         testsupport::relative_error(rs_mean[i], rs_mean[0]));
  }

  const bool pass = worst_zero == 0.0 && worst_merge <= 1e-10 &&
                    worst_ratio <= 1e-10 && worst_fit < 0.25;
  return {pass,
          fmt("zero-init gap %.1e (exact), merge gap %.2e (<=1e-10), "
              "scheme ratio off sqrt(r) by %.2e (<=1e-10) for r in "
              "{1,4,8,64}; magnitude families across 100 seeds: worst fit "
              "error %.3f (<0.25) — plain ~ 1/sqrt(r), rank-stabilized "
              "rank-invariant (= sqrt(r) growth relative to plain; the "
              "absolute reading is unsatisfiable at fixed alpha)",
              worst_zero, worst_merge, worst_ratio, worst_fit)};
}

// ---- criterion 5: embedding noise bounds -----------------------------------

Outcome criterion_noise() {
  peft::NoiseConfig ncfg;
  ncfg.alpha = 0.3;
  ncfg.seed = 60;
  peft::Rng shape_rng(61, 0);
  peft::NoiseStream stream(ncfg);  // counters advance across draws
  double worst_frob = 0.0, worst_entry_excess = 0.0;
  for (int draw = 0; draw < 100; ++draw) {
    const std::size_t rows = 1 + shape_rng.next_u64() % 50;
    const std::size_t cols = 1 + shape_rng.next_u64() % 64;
    peft::Rng erng(62, draw);
    const peft::Tensor emb =
        peft::Tensor::randn({rows, cols}, erng, 0.0, 1.0, false);

    const peft::Tensor noisy =
        stream.apply(emb, peft::Mode::kTrain);
    const double bound =
        0.3 / std::sqrt(static_cast<double>(rows * cols));
    double frob = 0.0;
    for (std::size_t i = 0; i < emb.size(); ++i) {
      const double eps = noisy.data()[i] - emb.data()[i];
      frob += eps * eps;
      worst_entry_excess =
          std::max(worst_entry_excess, std::abs(eps) - bound);
    }
    worst_frob = std::max(worst_frob, std::sqrt(frob));

    const peft::Tensor same = stream.apply(emb, peft::Mode::kEval);
    if (max_abs_diff(same, emb) != 0.0) {
      return {false, "eval-mode noise is not the identity"};
    }
  }
  const bool pass = worst_frob <= 0.3 + 1e-12 && worst_entry_excess <= 1e-15;
  return {pass,
          fmt("100 shapes at alpha 0.3: max Frobenius norm %.6f (<= 0.3), "
              "max entrywise excess over alpha/sqrt(L*d) = %.1e; eval-mode "
              "pass-through exact",
              worst_frob, worst_entry_excess)};
}

// ---- criterion 6: accumulation equivalence ---------------------------------

Outcome criterion_accumulation() {
  peft::ModelConfig c;
  c.n_layers = 1;
  c.d_model = 32;
  c.n_heads = 4;
  c.n_kv_heads = 2;
  c.head_dim = 8;
  c.d_ff = 64;
  c.vocab_size = peft::kMinVocab + 1;
  c.max_context = 64;

  peft::TaskSpec task;
  task.name = "signal";
  task.labels = {"up", "down", "flat"};
  task.instruction = "Signal:";
  std::vector<peft::InstructionExample> examples;
  const char* kw[] = {"bull", "bear", "calm"};
  for (int i = 0; i < 12; ++i) {
    peft::RawRecord rec{"case " + std::to_string(i) + " " + kw[i % 3],
                        task.labels[i % 3]};
    examples.push_back(peft::encode_example(rec, task, 360, true));
  }

  peft::TrainConfig tcfg;
  tcfg.neftune_alpha = 0.0;   // noise and dropout off per the criterion
  tcfg.adapter.dropout_p = 0.0;
  tcfg.learning_rate = 1e-3;

  auto run = [&](const std::vector<std::vector<peft::InstructionExample>>&
                     layout) {
    peft::Model model = peft::build_model(c, 600);
    peft::attach_adapters(model, tcfg.adapter, 601);
    std::vector<peft::Tensor> params = peft::trainable_parameters(model);
    peft::AdamState state = peft::init_adam(params);
    const double loss = peft::accumulate_and_step(model, layout, tcfg,
                                                  params, state, nullptr);
    std::vector<double> flat;
    for (const peft::Tensor& p : params) {
      flat.insert(flat.end(), p.data(), p.data() + p.size());
    }
    return std::make_pair(loss, flat);
  };

  std::vector<std::vector<peft::InstructionExample>> micro_layout;
  for (int w = 0; w < 4; ++w) {
    micro_layout.emplace_back(examples.begin() + 3 * w,
                              examples.begin() + 3 * (w + 1));
  }
  const auto [loss_micro, params_micro] = run(micro_layout);
  const auto [loss_full, params_full] = run({examples});

  double worst = std::abs(loss_micro - loss_full);
  for (std::size_t i = 0; i < params_micro.size(); ++i) {
    worst = std::max(worst, std::abs(params_micro[i] - params_full[i]));
  }
  return {worst <= 1e-8,
          fmt("micro 3 x accum 4 vs one batch of 12: max difference %.2e "
              "across the loss and every updated parameter (bound 1e-8)",
              worst)};
}

// ---- criterion 7: end-to-end convergence through the CLI -------------------

struct CliResult {
  int exit_code = -1;
  std::string output;
};

CliResult run_cli(const std::string& args) {
  const std::string out_path = "/tmp/peft_acceptance_cli_out.txt";
  const std::string command =
      std::string(PEFT_CLI_PATH) + " " + args + " > " + out_path + " 2>&1";
  const int status = std::system(command.c_str());
  CliResult result;
  result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(out_path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  result.output = buffer.str();
  return result;
}

void write_keyword_dataset(const std::string& path, std::size_t count,
                           std::uint64_t seed) {
  const char* keywords[] = {"bull", "bear", "calm"};
  const char* labels[] = {"up", "down", "flat"};
  const char* filler[] = {"market", "session", "traders", "closed", "index",
                          "volume", "note", "report", "morning", "midday",
                          "quiet", "heavy"};
  peft::Rng rng(seed, 0);
  std::ofstream out(path, std::ios::trunc);
  for (std::size_t i = 0; i < count; ++i) {
    std::string text;
    const std::size_t n_fill = 2 + rng.next_u64() % 3;
    for (std::size_t w = 0; w < n_fill; ++w) {
      text += filler[rng.next_u64() % 12];
      text += ' ';
    }
    text += keywords[i % 3];  // the label-bearing keyword, always last
    out << R"({"text": ")" << text << R"(", "label": ")" << labels[i % 3]
        << "\"}\n";
  }
}

double accuracy_from_json_eval(const std::string& cli_output) {
  // The report JSON is followed by a '#'-prefixed timing line.
  std::string json_text;
  std::istringstream lines(cli_output);
  std::string line;
  while (std::getline(lines, line)) {
    if (!line.empty() && line[0] == '#') continue;
    json_text += line;
    json_text += '\n';
  }
  return nlohmann::json::parse(json_text).at("accuracy").get<double>();
}

struct ConvergenceRun {
  bool ran = false;
  double train_acc = 0.0;
  double holdout_acc = 0.0;
  bool monotone = false;
  std::string error;
};

ConvergenceRun convergence_run(const std::string& tag,
                               const std::string& extra_config) {
  ConvergenceRun r;
  const std::string dir = "/tmp/peft_acceptance_";
  const std::string cfg = dir + tag + ".cfg";
  const std::string ckpt = dir + tag + ".ckpt";
  const std::string csv = dir + tag + "_loss.csv";
  {
    std::ofstream out(cfg, std::ios::trunc);
    out << "seed = 0\n"
        << "labels = [up, down, flat]\n"
        << "instruction = \"Signal:\"\n"
        << "task_name = signal\n"
        << extra_config;
  }
  const CliResult train = run_cli("train --config " + cfg + " --data " + dir +
                                  "train.jsonl --out " + ckpt +
                                  " --loss-csv " + csv);
  if (train.exit_code != 0) {
    r.error = "train exited " + std::to_string(train.exit_code);
    return r;
  }
  const CliResult on_train = run_cli("eval --ckpt " + ckpt + " --config " +
                                     cfg + " --data " + dir +
                                     "train.jsonl --json");
  const CliResult on_holdout = run_cli("eval --ckpt " + ckpt + " --config " +
                                       cfg + " --data " + dir +
                                       "holdout.jsonl --json");
  if (on_train.exit_code != 0 || on_holdout.exit_code != 0) {
    r.error = "eval exited nonzero";
    return r;
  }
  r.train_acc = accuracy_from_json_eval(on_train.output);
  r.holdout_acc = accuracy_from_json_eval(on_holdout.output);

  const peft::LossCurve curve = peft::parse_loss_curve(csv);
  std::vector<double> epoch_means;
  for (std::size_t e = 0; e < curve.epoch_boundaries.size(); ++e) {
    const std::size_t begin = curve.epoch_boundaries[e];
    const std::size_t end = e + 1 < curve.epoch_boundaries.size()
                                ? curve.epoch_boundaries[e + 1]
                                : curve.losses.size();
    double mean = 0.0;
    for (std::size_t i = begin; i < end; ++i) mean += curve.losses[i];
    epoch_means.push_back(mean / static_cast<double>(end - begin));
  }
  r.monotone = epoch_means.size() >= 2;
  for (std::size_t e = 1; e < epoch_means.size(); ++e) {
    r.monotone = r.monotone && epoch_means[e] < epoch_means[e - 1];
  }
  r.ran = true;
  return r;
}

std::string g_deferred_info;  // printed by main after the criterion's line

Outcome criterion_convergence() {
  unsetenv("PEFT_SEED");  // the seed under test comes from the config files
  write_keyword_dataset("/tmp/peft_acceptance_train.jsonl", 600, 8800);
  write_keyword_dataset("/tmp/peft_acceptance_holdout.jsonl", 120, 8801);

  // Faithful run: the published recipe verbatim (all defaults: micro 3 x
  // accum 4, lr 5e-5, 3 epochs, rank-8 rank-stabilized adapters, dropout
  // 0.1, noise 0.3, streaming attention) on the 2-layer desk model.
  const ConvergenceRun faithful = convergence_run("faithful", "");
  if (!faithful.ran) return {false, "faithful run failed: " + faithful.error};

  const bool bars = faithful.train_acc >= 0.95 && faithful.holdout_acc >= 0.90;
  const bool pass = bars && faithful.monotone;

  std::string detail = fmt(
      "published recipe on the keyword task: train accuracy %.4f (need >= "
      "0.95), held-out %.4f (need >= 0.90), epoch-mean loss monotone: %s",
      faithful.train_acc, faithful.holdout_acc,
      faithful.monotone ? "yes" : "NO");
  if (!bars) {
    detail +=
        " — expected at this scale: 150 optimizer steps at rate 5e-5 move "
        "each adapter coordinate at most ~7.5e-3, far too little to steer "
        "the frozen random head (see README)";
  }

  // Diagnostic rerun, clearly not part of the criterion: the single change
  // is the learning rate, which isolates the recipe's rate as the blocker.
  const ConvergenceRun diag =
      convergence_run("diagnostic", "learning_rate = 2e-3\n");
  if (diag.ran) {
    g_deferred_info = fmt(
        "  [info] diagnostic rerun (learning_rate 2e-3, only change): "
        "train %.4f, held-out %.4f, monotone %s — the pipeline learns; "
        "the published rate is the blocker at this scale",
        diag.train_acc, diag.holdout_acc, diag.monotone ? "yes" : "NO");
  } else {
    g_deferred_info = "  [info] diagnostic rerun failed to execute: " +
                      diag.error;
  }
  return {pass, detail};
}

// ---- criterion 8: determinism & persistence --------------------------------

Outcome criterion_determinism() {
  peft::ModelConfig c;
  c.n_layers = 1;
  c.d_model = 32;
  c.n_heads = 4;
  c.n_kv_heads = 2;
  c.head_dim = 8;
  c.d_ff = 64;
  c.vocab_size = peft::kMinVocab + 1;
  c.max_context = 64;

  peft::TaskSpec task;
  task.name = "signal";
  task.labels = {"up", "down", "flat"};
  task.instruction = "Signal:";
  std::vector<peft::RawRecord> records;
  const char* kw[] = {"bull", "bear", "calm"};
  for (int i = 0; i < 12; ++i) {
    records.push_back({"case " + std::to_string(i) + " " + kw[i % 3],
                       task.labels[i % 3]});
  }
  peft::TrainConfig tcfg;
  tcfg.micro_batch = 3;
  tcfg.grad_accum = 2;
  tcfg.epochs = 2;
  tcfg.learning_rate = 1e-3;
  tcfg.seed = 12;

  auto run = [&] {
    peft::Model model = peft::build_model(c, 700);
    const peft::TrainReport report =
        peft::train(model, records, task, tcfg);
    return std::make_pair(std::move(model), report);
  };
  auto [model_a, report_a] = run();
  auto [model_b, report_b] = run();

  bool identical = report_a.step_losses == report_b.step_losses;
  const auto params_a = peft::named_parameters(model_a);
  const auto params_b = peft::named_parameters(model_b);
  for (std::size_t i = 0; i < params_a.size() && identical; ++i) {
    identical = max_abs_diff(params_a[i].second, params_b[i].second) == 0.0;
  }

  // Checkpoint roundtrip: bit-identical logits.
  const std::vector<int> probe = {72, 105, 256, 33, 9};
  auto logits = [&](peft::Model& m) {
    peft::NoGradGuard guard;
    return peft::forward(m, probe, peft::Mode::kEval);
  };
  const std::string full_path = "/tmp/peft_acceptance_full.ckpt";
  peft::save_checkpoint(model_a, full_path);
  peft::Model restored = peft::restore_model(peft::load_checkpoint(full_path));
  const double roundtrip_gap = max_abs_diff(logits(model_a), logits(restored));

  // Adapter-only checkpoint onto a fresh matching base.
  const std::string ao_path = "/tmp/peft_acceptance_adapter.ckpt";
  peft::save_checkpoint(model_a, ao_path, /*adapter_only=*/true);
  peft::Model fresh = peft::build_model(c, 700);
  peft::restore_adapters(fresh, peft::load_checkpoint(ao_path));
  const double reattach_gap = max_abs_diff(logits(model_a), logits(fresh));

  const bool pass =
      identical && roundtrip_gap == 0.0 && reattach_gap <= 1e-12;
  return {pass,
          fmt("two seeded runs %s; checkpoint roundtrip logit gap %.1e "
              "(bitwise); adapter-only re-attach gap %.2e (<=1e-12)",
              identical ? "bit-identical" : "DIFFER", roundtrip_gap,
              reattach_gap)};
}

// ---- criterion 9: template fidelity ----------------------------------------

Outcome criterion_template() {
  const peft::TaskSpec task = peft::sentiment3_preset();
  peft::RawRecord record;
  record.text = "Shares fell 3%";
  record.label = "Negative";
  const peft::RenderedTurns turns = peft::render_example(record, task, true);
  const bool user_ok =
      turns.user ==
      "\\no_think Do sentiment classification for financial text. "
      "Shares fell 3%";
  const bool assistant_ok = turns.assistant == "Negative";

  const bool parse_ok = peft::parse_label("Neutral", task) == 0 &&
                        peft::parse_label("positive", task) == 1 &&
                        peft::parse_label(" NEGATIVE \n", task) == 2 &&
                        !peft::parse_label("Positively good", task) &&
                        !peft::parse_label("", task);
  return {user_ok && assistant_ok && parse_ok,
          fmt("rendered user turn byte-for-byte %s, assistant turn %s; "
              "label parsing over normalized spellings %s",
              user_ok ? "ok" : "WRONG", assistant_ok ? "ok" : "WRONG",
              parse_ok ? "ok" : "WRONG")};
}

}  // namespace

int main() {
  struct Row {
    int number;
    const char* name;
    std::function<Outcome()> run;
    double budget_seconds;  // 0 = untimed
  };
  const std::vector<Row> rows = {
      {1, "scale statement", criterion_scale_statement, 0},
      {2, "gradient suite", criterion_gradients, 120},
      {3, "kernel equivalence", criterion_kernels, 60},
      {4, "adapter algebra", criterion_adapters, 120},
      {5, "embedding noise bounds", criterion_noise, 30},
      {6, "accumulation equivalence", criterion_accumulation, 0},
      {7, "end-to-end convergence", criterion_convergence, 600},
      {8, "determinism & persistence", criterion_determinism, 0},
      {9, "template fidelity", criterion_template, 0},
  };

  int failures = 0;
  for (const Row& row : rows) {
    const auto start = Clock::now();
    const Outcome outcome = row.run();
    const double elapsed = seconds_since(start);
    const bool in_budget =
        row.budget_seconds == 0 || elapsed < row.budget_seconds;
    const bool pass = outcome.pass && in_budget;
    if (!pass) ++failures;
    std::printf("[%s] criterion %d (%s): %s (%.1fs%s)\n",
                pass ? "PASS" : "FAIL", row.number, row.name,
                outcome.detail.c_str(), elapsed,
                in_budget ? ""
                          : fmt(", OVER the %.0fs budget",
                                row.budget_seconds)
                                .c_str());
    if (!g_deferred_info.empty()) {
      std::printf("%s\n", g_deferred_info.c_str());
      g_deferred_info.clear();
    }
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria failed\n", failures, rows.size());
  return failures;
}
