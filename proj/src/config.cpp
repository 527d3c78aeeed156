#include "peft/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace peft {

ModelConfig default_desk_model() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 128;
  c.n_heads = 4;
  c.n_kv_heads = 2;
  c.head_dim = 32;
  c.d_ff = 256;
  c.vocab_size = 260;  // byte ids 0-255 + reserved markers, rounded up
  c.max_context = 512;
  return c;
}

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

std::string unquote(const std::string& s) {
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') {
    return s.substr(1, s.size() - 2);
  }
  return s;
}

class LineParser {
 public:
  LineParser(std::size_t line_no, const std::string& key,
             const std::string& raw)
      : line_no_(line_no), key_(key), raw_(trim(raw)) {}

  [[noreturn]] void fail(const std::string& what) const {
    throw std::runtime_error("config line " + std::to_string(line_no_) +
                             ": " + key_ + " " + what + " (got \"" + raw_ +
                             "\")");
  }

  std::uint64_t integer() const {
    try {
      std::size_t used = 0;
      const std::uint64_t v = std::stoull(raw_, &used);
      if (used != raw_.size()) fail("expects an integer");
      return v;
    } catch (const std::logic_error&) {
      fail("expects an integer");
    }
  }

  double real() const {
    try {
      std::size_t used = 0;
      const double v = std::stod(raw_, &used);
      if (used != raw_.size()) fail("expects a number");
      return v;
    } catch (const std::logic_error&) {
      fail("expects a number");
    }
  }

  bool boolean() const {
    if (raw_ == "true") return true;
    if (raw_ == "false") return false;
    fail("expects true or false");
  }

  std::string text() const { return unquote(raw_); }

  std::vector<std::string> list() const {
    if (raw_.size() < 2 || raw_.front() != '[' || raw_.back() != ']') {
      fail("expects a [a, b, c] list");
    }
    std::vector<std::string> items;
    std::stringstream ss(raw_.substr(1, raw_.size() - 2));
    std::string item;
    while (std::getline(ss, item, ',')) {
      const std::string cleaned = unquote(trim(item));
      if (!cleaned.empty()) items.push_back(cleaned);
    }
    if (items.empty()) fail("expects a non-empty list");
    return items;
  }

 private:
  std::size_t line_no_;
  std::string key_;
  std::string raw_;
};

TargetProj target_from_name(const LineParser& p, const std::string& name) {
  if (name == "q") return TargetProj::kQ;
  if (name == "k") return TargetProj::kK;
  if (name == "v") return TargetProj::kV;
  if (name == "o") return TargetProj::kO;
  if (name == "gate") return TargetProj::kGate;
  if (name == "up") return TargetProj::kUp;
  if (name == "down") return TargetProj::kDown;
  p.fail("knows only targets q, k, v, o, gate, up, down");
}

}  // namespace

FileConfig parse_config_text(const std::string& text) {
  FileConfig out;
  std::string labels_raw, instruction_raw, task_name = "custom";
  bool has_labels = false, has_instruction = false;

  std::istringstream stream(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(stream, line)) {
    ++line_no;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error("config line " + std::to_string(line_no) +
                               ": expected key = value, got \"" + stripped +
                               "\"");
    }
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = stripped.substr(eq + 1);
    LineParser p(line_no, key, value);

    // Published hyperparameter names.
    if (key == "batch_size") {
      out.train.micro_batch = p.integer();
    } else if (key == "grad_accum") {
      out.train.grad_accum = p.integer();
    } else if (key == "learning_rate") {
      out.train.learning_rate = p.real();
    } else if (key == "epochs") {
      out.train.epochs = p.integer();
    } else if (key == "max_tokens") {
      out.train.max_tokens = p.integer();
    } else if (key == "lora_rank") {
      out.train.adapter.rank = p.integer();
    } else if (key == "lora_alpha") {
      out.train.adapter.alpha = p.real();
    } else if (key == "lora_dropout") {
      out.train.adapter.dropout_p = p.real();
    } else if (key == "lora_scheme") {
      const std::string scheme = p.text();
      if (scheme == "lora") {
        out.train.adapter.scheme = LoraScheme::kLora;
      } else if (scheme == "rslora") {
        out.train.adapter.scheme = LoraScheme::kRslora;
      } else {
        p.fail("expects lora or rslora");
      }
    } else if (key == "lora_targets") {
      out.train.adapter.targets.clear();
      for (const std::string& name : p.list()) {
        out.train.adapter.targets.push_back(target_from_name(p, name));
      }
    } else if (key == "neftune_alpha") {
      out.train.neftune_alpha = p.real();
    } else if (key == "streaming_attention") {
      out.train.use_streaming_attention = p.boolean();
    } else if (key == "attention_block") {
      out.train.attention_block = p.integer();
    } else if (key == "seed") {
      out.train.seed = p.integer();
    } else if (key == "no_think") {
      out.train.no_think = p.boolean();
    } else if (key == "full_sequence_loss") {
      out.train.full_sequence_loss = p.boolean();
    } else if (key == "clip_norm") {
      out.train.clip_norm = p.real();
      // Model architecture.
    } else if (key == "n_layers") {
      out.model.n_layers = p.integer();
    } else if (key == "d_model") {
      out.model.d_model = p.integer();
    } else if (key == "n_heads") {
      out.model.n_heads = p.integer();
    } else if (key == "n_kv_heads") {
      out.model.n_kv_heads = p.integer();
    } else if (key == "head_dim") {
      out.model.head_dim = p.integer();
    } else if (key == "d_ff") {
      out.model.d_ff = p.integer();
    } else if (key == "vocab_size") {
      out.model.vocab_size = p.integer();
    } else if (key == "max_context") {
      out.model.max_context = p.integer();
    } else if (key == "rope_base") {
      out.model.rope_base = p.real();
    } else if (key == "rmsnorm_eps") {
      out.model.rmsnorm_eps = p.real();
      // Inline task declaration.
    } else if (key == "labels") {
      labels_raw = trim(value);
      has_labels = true;
    } else if (key == "instruction") {
      instruction_raw = unquote(trim(value));
      has_instruction = true;
    } else if (key == "task_name") {
      task_name = p.text();
    } else {
      throw std::runtime_error("config line " + std::to_string(line_no) +
                               ": unknown key \"" + key + "\"");
    }
    if (key == "labels") {
      // Parse eagerly so a malformed list is reported with its line.
      (void)p.list();
    }
  }

  if (has_labels != has_instruction) {
    throw std::runtime_error(
        "config: an inline task needs both labels and instruction");
  }
  if (has_labels) {
    TaskSpec task;
    task.name = task_name;
    task.instruction = instruction_raw;
    LineParser p(0, "labels", labels_raw);
    task.labels = p.list();
    validate_task(task);
    out.task = task;
  }
  validate_train_config(out.train);
  validate_config(out.model);
  return out;
}

FileConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("config: cannot open " + path);
  }
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config_text(buffer.str());
}

std::uint64_t effective_seed(std::uint64_t configured) {
  const char* env = std::getenv("PEFT_SEED");
  if (env == nullptr || *env == '\0') return configured;
  try {
    std::size_t used = 0;
    const std::uint64_t v = std::stoull(env, &used);
    if (env[used] != '\0') throw std::invalid_argument("trailing");
    return v;
  } catch (const std::logic_error&) {
    throw std::runtime_error(
        std::string("PEFT_SEED must be an integer, got \"") + env + "\"");
  }
}

}  // namespace peft
