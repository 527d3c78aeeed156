#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "peft/tensor.hpp"

namespace peft {

// The tokenizer is byte-level: every UTF-8 byte maps to its own id, and the
// ids above the byte range are reserved markers. Any model trained on
// encoded examples therefore needs vocab_size >= kMinVocab.
inline constexpr int kSepId = 256;  // closes the user turn
inline constexpr int kEndId = 257;  // closes the assistant turn
inline constexpr int kPadId = 258;  // reserved; sequences are never padded
inline constexpr std::size_t kMinVocab = 259;

struct RawRecord {
  std::string text;
  std::string label;
};

struct TaskSpec {
  std::string name;                 // "sentiment", "topic", or "custom"
  std::vector<std::string> labels;  // ordered; unique after case-folding
  std::string instruction;
};

// Throws unless the spec has >= 2 labels, unique after case-folding, and a
// non-empty instruction.
void validate_task(const TaskSpec& task);

// Three-way financial sentiment task with its published instruction line.
TaskSpec sentiment3_preset();

// Twenty-way topic task; the category names are not published, so the
// caller must supply exactly 20 labels from their copy of the dataset.
TaskSpec topic20_preset(std::vector<std::string> labels);

struct InstructionExample {
  std::vector<int> tokens;  // user bytes, separator, assistant bytes, end
  Mask loss_mask;           // true exactly on assistant bytes + end marker
  int label_index = -1;
};

struct LoadResult {
  std::vector<RawRecord> records;             // file order preserved
  std::vector<std::size_t> histogram;         // per task label, same order
};

// JSON-lines ingestion: one object per line with string fields `text` and
// `label`. Labels outside the task's set and malformed lines are rejected
// with their line number.
LoadResult load_dataset(const std::string& path, const TaskSpec& task);

// CSV adapter for the Kaggle-style topic file: header row required, with
// `text` and `label` columns located by name (case-insensitive); standard
// double-quote escaping.
LoadResult load_dataset_csv(const std::string& path, const TaskSpec& task);

struct RenderedTurns {
  std::string user;
  std::string assistant;
};

// Two-turn template: user = ["\no_think " prefix if requested] +
// instruction + " " + text; assistant = the label verbatim. Pure.
RenderedTurns render_example(const RawRecord& record, const TaskSpec& task,
                             bool no_think);

// Byte-level: UTF-8 bytes map to ids 0..255; detokenize rejects any id
// outside the byte range (the reserved markers are not text).
std::vector<int> tokenize(const std::string& text);
std::string detokenize(const std::vector<int>& ids);

// Renders, tokenizes, and masks one record. The sequence is
// [user bytes..., kSepId, assistant bytes..., kEndId]; the loss mask is
// true exactly on the assistant bytes and the end marker. Over-length
// input is an error naming the record — never silent truncation.
InstructionExample encode_example(const RawRecord& record,
                                  const TaskSpec& task,
                                  std::size_t max_tokens, bool no_think);

// Trim + ASCII case-fold + exact match against the task labels. No-match
// is a countable value (std::nullopt), not an error.
std::optional<std::size_t> parse_label(const std::string& generated,
                                       const TaskSpec& task);

// Deterministic stratified 90/10 split: within each label bucket (file
// order), a seeded shuffle sends floor(n/10) records to validation.
std::pair<std::vector<RawRecord>, std::vector<RawRecord>> stratified_split(
    const std::vector<RawRecord>& records, const TaskSpec& task,
    std::uint64_t seed);

}  // namespace peft
