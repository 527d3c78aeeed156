#include "peft/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <unordered_map>

#include <nlohmann/json.hpp>

namespace peft {

namespace {

constexpr char kMagic[4] = {'P', 'F', 'T', '1'};
constexpr int kVersion = 1;

void write_u64_le(std::ostream& out, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(bytes, 8);
}

std::uint64_t read_u64_le(std::istream& in, const char* what) {
  unsigned char bytes[8];
  if (!in.read(reinterpret_cast<char*>(bytes), 8)) {
    throw std::runtime_error(std::string("checkpoint: truncated while reading ") +
                             what);
  }
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

void write_doubles_le(std::ostream& out, const double* data, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    write_u64_le(out, std::bit_cast<std::uint64_t>(data[i]));
  }
}

void read_doubles_le(std::istream& in, double* data, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    data[i] = std::bit_cast<double>(read_u64_le(in, "blob data"));
  }
}

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},       {"d_model", c.d_model},
          {"n_heads", c.n_heads},         {"n_kv_heads", c.n_kv_heads},
          {"head_dim", c.head_dim},       {"d_ff", c.d_ff},
          {"vocab_size", c.vocab_size},   {"max_context", c.max_context},
          {"rope_base", c.rope_base},     {"rmsnorm_eps", c.rmsnorm_eps},
          {"dropout_p", c.dropout_p}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.n_kv_heads = j.at("n_kv_heads").get<std::size_t>();
  c.head_dim = j.at("head_dim").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_context = j.at("max_context").get<std::size_t>();
  c.rope_base = j.at("rope_base").get<double>();
  c.rmsnorm_eps = j.at("rmsnorm_eps").get<double>();
  c.dropout_p = j.at("dropout_p").get<double>();
  return c;
}

const char* target_name(TargetProj t) {
  switch (t) {
    case TargetProj::kQ: return "q";
    case TargetProj::kK: return "k";
    case TargetProj::kV: return "v";
    case TargetProj::kO: return "o";
    case TargetProj::kGate: return "gate";
    case TargetProj::kUp: return "up";
    case TargetProj::kDown: return "down";
  }
  throw std::runtime_error("checkpoint: unknown target projection");
}

TargetProj target_from_name(const std::string& name) {
  if (name == "q") return TargetProj::kQ;
  if (name == "k") return TargetProj::kK;
  if (name == "v") return TargetProj::kV;
  if (name == "o") return TargetProj::kO;
  if (name == "gate") return TargetProj::kGate;
  if (name == "up") return TargetProj::kUp;
  if (name == "down") return TargetProj::kDown;
  throw std::runtime_error("checkpoint: unknown adapter target \"" + name +
                           "\"");
}

nlohmann::json adapter_to_json(const AdapterConfig& a) {
  nlohmann::json targets = nlohmann::json::array();
  for (TargetProj t : a.targets) targets.push_back(target_name(t));
  return {{"rank", a.rank},
          {"alpha", a.alpha},
          {"scheme", a.scheme == LoraScheme::kLora ? "lora" : "rslora"},
          {"dropout_p", a.dropout_p},
          {"targets", targets}};
}

AdapterConfig adapter_from_json(const nlohmann::json& j) {
  AdapterConfig a;
  a.rank = j.at("rank").get<std::size_t>();
  a.alpha = j.at("alpha").get<double>();
  const std::string scheme = j.at("scheme").get<std::string>();
  if (scheme != "lora" && scheme != "rslora") {
    throw std::runtime_error("checkpoint: unknown adapter scheme \"" + scheme +
                             "\"");
  }
  a.scheme = scheme == "lora" ? LoraScheme::kLora : LoraScheme::kRslora;
  a.dropout_p = j.at("dropout_p").get<double>();
  a.targets.clear();
  for (const auto& t : j.at("targets")) {
    a.targets.push_back(target_from_name(t.get<std::string>()));
  }
  return a;
}

}  // namespace

void save_checkpoint(const Model& model, const std::string& path,
                     bool adapter_only) {
  if (adapter_only && !model.adapters_attached) {
    throw std::runtime_error(
        "checkpoint: adapter-only save requires an adapted model");
  }
  std::vector<std::pair<std::string, Tensor>> blobs;
  for (auto& [name, tensor] : named_parameters(model)) {
    if (adapter_only && name.find(".lora_") == std::string::npos) continue;
    blobs.emplace_back(name, tensor);
  }

  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (auto& [name, tensor] : blobs) {
    manifest.push_back({{"name", name},
                        {"shape", tensor.shape()},
                        {"offset", offset}});
    offset += tensor.size() * sizeof(double);
  }
  nlohmann::json header = {
      {"version", kVersion},
      {"kind", adapter_only ? "adapter" : "full"},
      {"seed", model.seed},
      {"config", config_to_json(model.config)},
      {"blobs", manifest},
  };
  if (model.adapters_attached && model.adapter_config) {
    header["adapter_config"] = adapter_to_json(*model.adapter_config);
    header["adapter_seed"] = model.adapter_seed;
  }
  const std::string header_text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw std::runtime_error("checkpoint: cannot write " + path);
  }
  out.write(kMagic, 4);
  write_u64_le(out, header_text.size());
  out.write(header_text.data(),
            static_cast<std::streamsize>(header_text.size()));
  for (auto& [name, tensor] : blobs) {
    write_doubles_le(out, tensor.data(), tensor.size());
  }
  out.flush();
  if (!out) {
    throw std::runtime_error("checkpoint: write to " + path + " failed");
  }
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("checkpoint: cannot open " + path);
  }
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("checkpoint: " + path +
                             " does not start with the PFT1 magic");
  }
  const std::uint64_t header_len = read_u64_le(in, "header length");
  std::string header_text(header_len, '\0');
  if (!in.read(header_text.data(), static_cast<std::streamsize>(header_len))) {
    throw std::runtime_error("checkpoint: truncated header (declared " +
                             std::to_string(header_len) + " bytes)");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_text);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("checkpoint: header is not valid JSON (" +
                             std::string(e.what()) + ")");
  }

  Checkpoint ckpt;
  ckpt.version = header.at("version").get<int>();
  if (ckpt.version != kVersion) {
    throw std::runtime_error("checkpoint: unsupported version " +
                             std::to_string(ckpt.version));
  }
  const std::string kind = header.at("kind").get<std::string>();
  if (kind != "full" && kind != "adapter") {
    throw std::runtime_error("checkpoint: unknown kind \"" + kind + "\"");
  }
  ckpt.adapter_only = kind == "adapter";
  ckpt.seed = header.at("seed").get<std::uint64_t>();
  ckpt.config = config_from_json(header.at("config"));
  if (header.contains("adapter_config")) {
    ckpt.has_adapter = true;
    ckpt.adapter = adapter_from_json(header.at("adapter_config"));
    ckpt.adapter_seed = header.at("adapter_seed").get<std::uint64_t>();
  } else if (ckpt.adapter_only) {
    throw std::runtime_error(
        "checkpoint: adapter-only file lacks its adapter_config");
  }

  std::uint64_t expected_offset = 0;
  for (const auto& entry : header.at("blobs")) {
    const std::string name = entry.at("name").get<std::string>();
    const Shape shape = entry.at("shape").get<Shape>();
    const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
    if (offset != expected_offset) {
      throw std::runtime_error("checkpoint: blob \"" + name +
                               "\" declares offset " + std::to_string(offset) +
                               ", expected " + std::to_string(expected_offset));
    }
    std::size_t count = 1;
    for (std::size_t d : shape) count *= d;
    if (shape.empty() || count == 0) {
      throw std::runtime_error("checkpoint: blob \"" + name +
                               "\" has an empty shape");
    }
    Tensor t{shape};
    read_doubles_le(in, t.data(), count);
    if (!in) {
      throw std::runtime_error("checkpoint: truncated in blob \"" + name +
                               "\"");
    }
    ckpt.blobs.emplace_back(name, t);
    expected_offset += count * sizeof(double);
  }
  return ckpt;
}

namespace {

void copy_blob_into(const Tensor& blob, Tensor& param,
                    const std::string& name) {
  if (blob.shape() != param.shape()) {
    throw std::runtime_error("checkpoint: blob \"" + name + "\" has shape " +
                             shape_str(blob.shape()) +
                             " but the model expects " +
                             shape_str(param.shape()));
  }
  std::memcpy(param.data(), blob.data(), blob.size() * sizeof(double));
}

}  // namespace

Model restore_model(const Checkpoint& ckpt) {
  if (ckpt.adapter_only) {
    throw std::runtime_error(
        "checkpoint: adapter-only file cannot restore a full model; "
        "load it onto a base with restore_adapters");
  }
  Model model = build_model(ckpt.config, ckpt.seed);
  if (ckpt.has_adapter) {
    attach_adapters(model, ckpt.adapter, ckpt.adapter_seed);
  }
  std::unordered_map<std::string, Tensor> by_name;
  for (auto& [name, tensor] : named_parameters(model)) {
    by_name.emplace(name, tensor);
  }
  if (by_name.size() != ckpt.blobs.size()) {
    throw std::runtime_error(
        "checkpoint: blob count " + std::to_string(ckpt.blobs.size()) +
        " does not cover the model's " + std::to_string(by_name.size()) +
        " parameters");
  }
  for (auto& [name, blob] : ckpt.blobs) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw std::runtime_error("checkpoint: blob \"" + name +
                               "\" names no model parameter");
    }
    copy_blob_into(blob, it->second, name);
  }
  return model;
}

void restore_adapters(Model& base, const Checkpoint& ckpt) {
  if (!ckpt.adapter_only) {
    throw std::runtime_error(
        "checkpoint: restore_adapters needs an adapter-only file");
  }
  const nlohmann::json want = config_to_json(ckpt.config);
  const nlohmann::json have = config_to_json(base.config);
  if (want != have) {
    throw std::runtime_error(
        "checkpoint: adapter was trained on a different architecture (" +
        want.dump() + " vs " + have.dump() + ")");
  }
  if (base.adapters_attached) {
    throw std::runtime_error(
        "checkpoint: base already has adapters attached");
  }
  attach_adapters(base, ckpt.adapter, ckpt.adapter_seed);
  std::unordered_map<std::string, Tensor> by_name;
  for (auto& [name, tensor] : named_parameters(base)) {
    if (name.find(".lora_") != std::string::npos) by_name.emplace(name, tensor);
  }
  if (by_name.size() != ckpt.blobs.size()) {
    throw std::runtime_error(
        "checkpoint: adapter blob count " + std::to_string(ckpt.blobs.size()) +
        " does not match the " + std::to_string(by_name.size()) +
        " factors the config attaches");
  }
  for (auto& [name, blob] : ckpt.blobs) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw std::runtime_error("checkpoint: blob \"" + name +
                               "\" names no adapter factor");
    }
    copy_blob_into(blob, it->second, name);
  }
}

}  // namespace peft
