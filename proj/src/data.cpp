#include "peft/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <stdexcept>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "peft/rng.hpp"

namespace peft {

namespace {

std::string fold(const std::string& s) {
  std::string out = s;
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) {
    return static_cast<char>(std::tolower(c));
  });
  return out;
}

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n\f\v");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r\n\f\v");
  return s.substr(begin, end - begin + 1);
}

// First ~40 characters of a record's text, for error messages.
std::string snippet(const std::string& text) {
  if (text.size() <= 40) return text;
  return text.substr(0, 40) + "...";
}

std::optional<std::size_t> label_index(const TaskSpec& task,
                                       const std::string& label) {
  const std::string needle = fold(trim(label));
  for (std::size_t i = 0; i < task.labels.size(); ++i) {
    if (fold(task.labels[i]) == needle) return i;
  }
  return std::nullopt;
}

void validate_record(const RawRecord& record, const TaskSpec& task,
                     std::size_t line_no) {
  if (trim(record.text).empty()) {
    throw std::runtime_error("line " + std::to_string(line_no) +
                             ": empty text field");
  }
  if (!label_index(task, record.label)) {
    throw std::runtime_error("line " + std::to_string(line_no) +
                             ": unknown label \"" + record.label +
                             "\" for task " + task.name);
  }
}

LoadResult finalize(std::vector<RawRecord> records, const TaskSpec& task) {
  LoadResult out;
  out.histogram.assign(task.labels.size(), 0);
  for (const RawRecord& r : records) {
    ++out.histogram[*label_index(task, r.label)];
  }
  out.records = std::move(records);
  return out;
}

}  // namespace

void validate_task(const TaskSpec& task) {
  if (task.labels.size() < 2) {
    throw std::runtime_error("task: needs at least 2 labels, got " +
                             std::to_string(task.labels.size()));
  }
  for (std::size_t i = 0; i < task.labels.size(); ++i) {
    if (trim(task.labels[i]).empty()) {
      throw std::runtime_error("task: label " + std::to_string(i) +
                               " is empty");
    }
    for (std::size_t j = i + 1; j < task.labels.size(); ++j) {
      if (fold(task.labels[i]) == fold(task.labels[j])) {
        throw std::runtime_error("task: labels \"" + task.labels[i] +
                                 "\" and \"" + task.labels[j] +
                                 "\" collide after case-folding");
      }
    }
  }
  if (task.instruction.empty()) {
    throw std::runtime_error("task: instruction must be non-empty");
  }
}

TaskSpec sentiment3_preset() {
  TaskSpec t;
  t.name = "sentiment";
  t.labels = {"Neutral", "Positive", "Negative"};
  t.instruction = "Do sentiment classification for financial text.";
  return t;
}

TaskSpec topic20_preset(std::vector<std::string> labels) {
  if (labels.size() != 20) {
    throw std::runtime_error(
        "task: the topic preset needs exactly 20 user-supplied labels, got " +
        std::to_string(labels.size()));
  }
  TaskSpec t;
  t.name = "topic";
  t.labels = std::move(labels);
  t.instruction = "Do topic classification for financial news.";
  validate_task(t);
  return t;
}

LoadResult load_dataset(const std::string& path, const TaskSpec& task) {
  validate_task(task);
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("dataset: cannot open " + path);
  }
  std::vector<RawRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;  // tolerate blank lines
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("line " + std::to_string(line_no) +
                               ": malformed JSON (" + std::string(e.what()) +
                               ")");
    }
    if (!obj.is_object() || !obj.contains("text") || !obj.contains("label") ||
        !obj["text"].is_string() || !obj["label"].is_string()) {
      throw std::runtime_error(
          "line " + std::to_string(line_no) +
          ": expected an object with string fields \"text\" and \"label\"");
    }
    RawRecord r{obj["text"].get<std::string>(),
                obj["label"].get<std::string>()};
    validate_record(r, task, line_no);
    records.push_back(std::move(r));
  }
  return finalize(std::move(records), task);
}

namespace {

// One CSV record, honoring double-quote escaping; may span multiple
// physical lines when a quoted field contains newlines.
bool read_csv_row(std::istream& in, std::vector<std::string>& fields,
                  std::size_t& line_no) {
  fields.clear();
  std::string field;
  bool in_quotes = false;
  bool any = false;
  char c;
  while (in.get(c)) {
    any = true;
    if (in_quotes) {
      if (c == '"') {
        if (in.peek() == '"') {
          in.get();
          field.push_back('"');
        } else {
          in_quotes = false;
        }
      } else {
        if (c == '\n') ++line_no;
        field.push_back(c);
      }
    } else if (c == '"') {
      in_quotes = true;
    } else if (c == ',') {
      fields.push_back(field);
      field.clear();
    } else if (c == '\n') {
      ++line_no;
      break;
    } else if (c != '\r') {
      field.push_back(c);
    }
  }
  if (!any) return false;
  fields.push_back(field);
  return true;
}

}  // namespace

LoadResult load_dataset_csv(const std::string& path, const TaskSpec& task) {
  validate_task(task);
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("dataset: cannot open " + path);
  }
  std::vector<std::string> fields;
  std::size_t line_no = 0;
  if (!read_csv_row(in, fields, line_no)) {
    throw std::runtime_error("dataset: " + path + " is empty (header row "
                             "with text and label columns required)");
  }
  std::size_t text_col = fields.size(), label_col = fields.size();
  for (std::size_t i = 0; i < fields.size(); ++i) {
    const std::string name = fold(trim(fields[i]));
    if (name == "text") text_col = i;
    if (name == "label") label_col = i;
  }
  if (text_col == fields.size() || label_col == fields.size()) {
    throw std::runtime_error(
        "dataset: header must name both a text and a label column");
  }
  const std::size_t width = fields.size();
  std::vector<RawRecord> records;
  while (read_csv_row(in, fields, line_no)) {
    if (fields.size() == 1 && trim(fields[0]).empty()) continue;
    if (fields.size() != width) {
      throw std::runtime_error("line " + std::to_string(line_no) + ": row has " +
                               std::to_string(fields.size()) +
                               " fields, header has " + std::to_string(width));
    }
    RawRecord r{fields[text_col], fields[label_col]};
    validate_record(r, task, line_no);
    records.push_back(std::move(r));
  }
  return finalize(std::move(records), task);
}

RenderedTurns render_example(const RawRecord& record, const TaskSpec& task,
                             bool no_think) {
  RenderedTurns out;
  out.user = (no_think ? std::string("\\no_think ") : std::string()) +
             task.instruction + " " + record.text;
  out.assistant = record.label;
  return out;
}

std::vector<int> tokenize(const std::string& text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (unsigned char byte : text) ids.push_back(static_cast<int>(byte));
  return ids;
}

std::string detokenize(const std::vector<int>& ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id > 255) {
      throw std::runtime_error("detokenize: id " + std::to_string(id) +
                               " is not a byte");
    }
    out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

InstructionExample encode_example(const RawRecord& record,
                                  const TaskSpec& task,
                                  std::size_t max_tokens, bool no_think) {
  const auto idx = label_index(task, record.label);
  if (!idx) {
    throw std::runtime_error("encode: unknown label \"" + record.label +
                             "\" on record \"" + snippet(record.text) + "\"");
  }
  const RenderedTurns turns = render_example(record, task, no_think);
  const std::vector<int> user = tokenize(turns.user);
  const std::vector<int> assistant = tokenize(turns.assistant);
  const std::size_t total = user.size() + 1 + assistant.size() + 1;
  if (total > max_tokens) {
    throw std::runtime_error(
        "encode: record \"" + snippet(record.text) + "\" needs " +
        std::to_string(total) + " tokens, over the " +
        std::to_string(max_tokens) + " limit");
  }
  InstructionExample ex;
  ex.tokens.reserve(total);
  ex.loss_mask.reserve(total);
  for (int id : user) {
    ex.tokens.push_back(id);
    ex.loss_mask.push_back(0);
  }
  ex.tokens.push_back(kSepId);
  ex.loss_mask.push_back(0);
  for (int id : assistant) {
    ex.tokens.push_back(id);
    ex.loss_mask.push_back(1);
  }
  ex.tokens.push_back(kEndId);
  ex.loss_mask.push_back(1);
  ex.label_index = static_cast<int>(*idx);
  return ex;
}

std::optional<std::size_t> parse_label(const std::string& generated,
                                       const TaskSpec& task) {
  return label_index(task, generated);
}

std::pair<std::vector<RawRecord>, std::vector<RawRecord>> stratified_split(
    const std::vector<RawRecord>& records, const TaskSpec& task,
    std::uint64_t seed) {
  validate_task(task);
  std::vector<std::vector<std::size_t>> buckets(task.labels.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto idx = label_index(task, records[i].label);
    if (!idx) {
      throw std::runtime_error("split: unknown label \"" + records[i].label +
                               "\" at record " + std::to_string(i));
    }
    buckets[*idx].push_back(i);
  }
  std::vector<RawRecord> train, val;
  for (std::size_t b = 0; b < buckets.size(); ++b) {
    // Per-bucket substream: the split of one class is independent of how
    // many records the other classes have.
    Rng rng(seed, b);
    rng.shuffle(buckets[b]);
    const std::size_t n_val = buckets[b].size() / 10;
    for (std::size_t i = 0; i < buckets[b].size(); ++i) {
      (i < n_val ? val : train).push_back(records[buckets[b][i]]);
    }
  }
  return {std::move(train), std::move(val)};
}

}  // namespace peft
