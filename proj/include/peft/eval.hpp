#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "peft/data.hpp"
#include "peft/model.hpp"
#include "peft/trainer.hpp"

namespace peft {

struct EvalOptions {
  std::size_t max_new_tokens = 24;
  // Constrained decoding: instead of free greedy generation, walk the label
  // set byte by byte, at each divergence point keeping the candidates whose
  // next byte scores highest. Guarantees the output is a label verbatim.
  bool constrained = false;
  bool no_think = true;
  KernelOptions kernel;
};

// Rows are true labels; columns are predicted labels plus a trailing
// "(none)" column for generations that match no label, so the matrix mass
// always equals the record count and accuracy is trace / total.
struct EvalReport {
  std::vector<std::string> labels;
  std::vector<std::size_t> confusion;  // row-major, labels x (labels + 1)
  std::size_t total = 0;
  std::size_t correct = 0;
  std::size_t no_match = 0;
  double accuracy = 0.0;
  std::vector<double> precision;  // per label; 0 when the class is never predicted
  std::vector<double> recall;
  std::vector<double> f1;
  double macro_f1 = 0.0;  // secondary metric; accuracy is the headline

  std::size_t cols() const { return labels.size() + 1; }
  std::size_t at(std::size_t true_label, std::size_t predicted) const {
    return confusion[true_label * cols() + predicted];
  }
};

// Greedy argmax decoding from the end of the rendered user turn until the
// end marker, any reserved id, or max_new_tokens. Deterministic; ties
// break toward the lower token id.
std::string generate_label(Model& model, const TaskSpec& task,
                           const std::string& text,
                           const EvalOptions& options = {});

// generate -> parse -> compare per record; no-match counts as incorrect.
EvalReport evaluate(Model& model, const std::vector<RawRecord>& records,
                    const TaskSpec& task, const EvalOptions& options = {});

// Two-column CSV `step,loss` (one row per optimizer step, full double
// precision) preceded by a `# epoch boundaries:` comment listing the first
// step index of each epoch.
void export_loss_curve(const TrainReport& report, const std::string& path);

// Reads back an export_loss_curve file: losses in step order, plus the
// epoch-boundary indices from the comment.
struct LossCurve {
  std::vector<double> losses;
  std::vector<std::size_t> epoch_boundaries;
};
LossCurve parse_loss_curve(const std::string& path);

std::string format_report(const EvalReport& report);
std::string report_to_json(const EvalReport& report);

}  // namespace peft
