#include "peft/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace peft {

namespace {

// Logits row for the last position of `tokens`, eval mode, no tape.
std::vector<double> last_logits(Model& model, const std::vector<int>& tokens,
                                const KernelOptions& kernel) {
  NoGradGuard guard;
  Tensor logits = forward(model, tokens, Mode::kEval, nullptr, kernel);
  const std::size_t vocab = model.config.vocab_size;
  const double* row = logits.data() + (tokens.size() - 1) * vocab;
  return std::vector<double>(row, row + vocab);
}

std::vector<int> prompt_tokens(const TaskSpec& task, const std::string& text,
                               bool no_think) {
  RawRecord record{text, task.labels.front()};  // label unused by the prompt
  const RenderedTurns turns = render_example(record, task, no_think);
  std::vector<int> tokens = tokenize(turns.user);
  tokens.push_back(kSepId);
  return tokens;
}

std::string generate_greedy(Model& model, const TaskSpec& task,
                            const std::string& text,
                            const EvalOptions& options) {
  std::vector<int> tokens = prompt_tokens(task, text, options.no_think);
  std::string out;
  for (std::size_t step = 0; step < options.max_new_tokens; ++step) {
    if (tokens.size() >= model.config.max_context) break;
    const std::vector<double> row = last_logits(model, tokens, options.kernel);
    const std::size_t next = static_cast<std::size_t>(
        std::max_element(row.begin(), row.end()) - row.begin());
    if (next > 255) break;  // end marker or any other reserved id
    out.push_back(static_cast<char>(static_cast<unsigned char>(next)));
    tokens.push_back(static_cast<int>(next));
  }
  return out;
}

// Constrained decoding: the candidate set starts as the full label list and
// shrinks at each byte position by keeping the labels whose next byte has
// the highest logit (several labels may share that byte and all survive).
// The result is always a label, spelled exactly.
std::string generate_constrained(Model& model, const TaskSpec& task,
                                 const std::string& text,
                                 const EvalOptions& options) {
  std::vector<int> tokens = prompt_tokens(task, text, options.no_think);
  std::vector<std::size_t> alive(task.labels.size());
  for (std::size_t i = 0; i < alive.size(); ++i) alive[i] = i;
  std::size_t pos = 0;
  while (alive.size() > 1 && tokens.size() < model.config.max_context) {
    const std::vector<double> row = last_logits(model, tokens, options.kernel);
    // Candidates that already ended compete with the end marker's logit.
    double best = -1e300;
    int best_byte = -1;  // -1 encodes "stop here"
    for (std::size_t idx : alive) {
      const std::string& label = task.labels[idx];
      const bool ended = pos >= label.size();
      const int byte = ended ? kEndId
                             : static_cast<unsigned char>(label[pos]);
      const double score = row[static_cast<std::size_t>(byte)];
      if (score > best) {
        best = score;
        best_byte = ended ? -1 : byte;
      }
    }
    if (best_byte < 0) {
      // The highest-scoring continuation is "stop": keep the (unique,
      // because labels are unique) label that ends at this position.
      std::vector<std::size_t> survivors;
      for (std::size_t idx : alive) {
        if (pos >= task.labels[idx].size()) survivors.push_back(idx);
      }
      alive = survivors;
      break;
    }
    std::vector<std::size_t> survivors;
    for (std::size_t idx : alive) {
      if (pos < task.labels[idx].size() &&
          static_cast<unsigned char>(task.labels[idx][pos]) == best_byte) {
        survivors.push_back(idx);
      }
    }
    alive = survivors;
    tokens.push_back(best_byte);
    ++pos;
  }
  return alive.empty() ? std::string() : task.labels[alive.front()];
}

}  // namespace

std::string generate_label(Model& model, const TaskSpec& task,
                           const std::string& text,
                           const EvalOptions& options) {
  validate_task(task);
  return options.constrained
             ? generate_constrained(model, task, text, options)
             : generate_greedy(model, task, text, options);
}

EvalReport evaluate(Model& model, const std::vector<RawRecord>& records,
                    const TaskSpec& task, const EvalOptions& options) {
  validate_task(task);
  EvalReport report;
  report.labels = task.labels;
  const std::size_t n = task.labels.size();
  report.confusion.assign(n * (n + 1), 0);
  for (const RawRecord& record : records) {
    const auto truth = parse_label(record.label, task);
    if (!truth) {
      throw std::runtime_error("evaluate: record label \"" + record.label +
                               "\" is outside the task's label set");
    }
    const std::string generated = generate_label(model, task, record.text,
                                                 options);
    const auto predicted = parse_label(generated, task);
    ++report.total;
    if (predicted) {
      ++report.confusion[*truth * (n + 1) + *predicted];
      if (*predicted == *truth) ++report.correct;
    } else {
      ++report.confusion[*truth * (n + 1) + n];
      ++report.no_match;
    }
  }
  report.accuracy = report.total == 0
                        ? 0.0
                        : static_cast<double>(report.correct) /
                              static_cast<double>(report.total);
  report.precision.assign(n, 0.0);
  report.recall.assign(n, 0.0);
  report.f1.assign(n, 0.0);
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t predicted_c = 0, true_c = 0;
    for (std::size_t r = 0; r < n; ++r) predicted_c += report.at(r, c);
    for (std::size_t col = 0; col < n + 1; ++col) true_c += report.at(c, col);
    const std::size_t hit = report.at(c, c);
    report.precision[c] = predicted_c == 0 ? 0.0
                                           : static_cast<double>(hit) /
                                                 static_cast<double>(predicted_c);
    report.recall[c] = true_c == 0 ? 0.0
                                   : static_cast<double>(hit) /
                                         static_cast<double>(true_c);
    const double pr = report.precision[c] + report.recall[c];
    report.f1[c] = pr == 0.0 ? 0.0
                             : 2.0 * report.precision[c] * report.recall[c] / pr;
    report.macro_f1 += report.f1[c];
  }
  report.macro_f1 /= n == 0 ? 1.0 : static_cast<double>(n);
  return report;
}

void export_loss_curve(const TrainReport& report, const std::string& path) {
  if (report.step_losses.empty()) {
    throw std::runtime_error("loss curve: report has no steps");
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw std::runtime_error("loss curve: cannot write " + path);
  }
  out << "# epoch boundaries:";
  for (std::size_t e = 0; e * report.steps_per_epoch < report.step_losses.size();
       ++e) {
    out << (e == 0 ? " " : ",") << e * report.steps_per_epoch;
  }
  out << "\nstep,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < report.step_losses.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", i, report.step_losses[i]);
    out << buf;
  }
  out.flush();
  if (!out) {
    throw std::runtime_error("loss curve: write to " + path + " failed");
  }
}

LossCurve parse_loss_curve(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("loss curve: cannot open " + path);
  }
  LossCurve curve;
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("# epoch boundaries:", 0) == 0) {
      std::stringstream ss(line.substr(std::string("# epoch boundaries:").size()));
      std::string item;
      while (std::getline(ss, item, ',')) {
        if (!item.empty()) curve.epoch_boundaries.push_back(std::stoull(item));
      }
      continue;
    }
    if (line.empty() || line[0] == '#' || line.rfind("step,", 0) == 0) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) {
      throw std::runtime_error("loss curve: malformed row \"" + line + "\"");
    }
    curve.losses.push_back(std::stod(line.substr(comma + 1)));
  }
  return curve;
}

std::string format_report(const EvalReport& report) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof(line), "accuracy  %.4f  (%zu/%zu correct)\n",
                report.accuracy, report.correct, report.total);
  out << line;
  std::snprintf(line, sizeof(line), "macro-F1  %.4f   no-match  %zu\n\n",
                report.macro_f1, report.no_match);
  out << line;

  std::size_t width = 8;  // room for "(none)"
  for (const std::string& label : report.labels) {
    width = std::max(width, label.size() + 2);
  }
  auto pad = [&](const std::string& s) {
    out << s << std::string(width > s.size() ? width - s.size() : 1, ' ');
  };
  pad("");
  out << "precision  recall  f1\n";
  for (std::size_t c = 0; c < report.labels.size(); ++c) {
    pad(report.labels[c]);
    std::snprintf(line, sizeof(line), "%9.4f  %6.4f  %6.4f\n",
                  report.precision[c], report.recall[c], report.f1[c]);
    out << line;
  }
  out << "\nconfusion (rows = true, cols = predicted):\n";
  pad("");
  for (const std::string& label : report.labels) pad(label);
  pad("(none)");
  out << "\n";
  for (std::size_t r = 0; r < report.labels.size(); ++r) {
    pad(report.labels[r]);
    for (std::size_t c = 0; c < report.cols(); ++c) {
      pad(std::to_string(report.at(r, c)));
    }
    out << "\n";
  }
  return out.str();
}

std::string report_to_json(const EvalReport& report) {
  nlohmann::json confusion = nlohmann::json::array();
  for (std::size_t r = 0; r < report.labels.size(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t c = 0; c < report.cols(); ++c) row.push_back(report.at(r, c));
    confusion.push_back(row);
  }
  nlohmann::json j = {
      {"accuracy", report.accuracy}, {"correct", report.correct},
      {"total", report.total},       {"no_match", report.no_match},
      {"macro_f1", report.macro_f1}, {"labels", report.labels},
      {"precision", report.precision}, {"recall", report.recall},
      {"f1", report.f1},             {"confusion", confusion},
  };
  return j.dump(2);
}

}  // namespace peft
