#include "peft/model.hpp"

#include <cmath>
#include <stdexcept>

#include "peft/adapter.hpp"
#include "peft/attention.hpp"
#include "peft/neftune.hpp"
#include "peft/rng.hpp"

namespace peft {

void validate_config(const ModelConfig& c) {
  if (c.n_heads == 0 || c.n_kv_heads == 0 || c.n_heads % c.n_kv_heads != 0) {
    throw std::runtime_error(
        "config: n_heads must be a positive multiple of n_kv_heads (" +
        std::to_string(c.n_heads) + " vs " + std::to_string(c.n_kv_heads) +
        ")");
  }
  if (c.n_heads * c.head_dim != c.d_model) {
    throw std::runtime_error(
        "config: n_heads * head_dim must equal d_model (" +
        std::to_string(c.n_heads) + " * " + std::to_string(c.head_dim) +
        " != " + std::to_string(c.d_model) + ")");
  }
  if (c.max_context < 1) {
    throw std::runtime_error("config: max_context must be at least 1");
  }
  if (c.vocab_size < 2) {
    throw std::runtime_error("config: vocab_size must be at least 2");
  }
  if (c.d_ff == 0) {
    throw std::runtime_error("config: d_ff must be positive");
  }
  if (c.head_dim % 2 != 0) {
    throw std::runtime_error("config: head_dim must be even for rotation (" +
                             std::to_string(c.head_dim) + ")");
  }
  if (c.rope_base <= 0.0 || c.rmsnorm_eps <= 0.0) {
    throw std::runtime_error(
        "config: rope_base and rmsnorm_eps must be positive");
  }
}

ModelConfig qwen3_8b_preset() {
  ModelConfig c;
  c.n_layers = 36;
  c.d_model = 5120;
  c.n_heads = 32;
  c.n_kv_heads = 8;
  c.head_dim = 160;  // 5120 / 32, per the d_model decomposition invariant
  c.d_ff = 13696;
  c.vocab_size = 151552;
  c.max_context = 32768;
  return c;
}

std::size_t estimate_param_count(const ModelConfig& c) {
  const std::size_t q_out = c.n_heads * c.head_dim;
  const std::size_t kv_out = c.n_kv_heads * c.head_dim;
  const std::size_t per_layer = c.d_model                    // attn norm
                                + c.d_model * q_out          // q
                                + 2 * c.d_model * kv_out     // k, v
                                + q_out * c.d_model          // o
                                + c.d_model                  // ffn norm
                                + 2 * c.d_model * c.d_ff     // gate, up
                                + c.d_ff * c.d_model;        // down
  return c.vocab_size * c.d_model + c.n_layers * per_layer + c.d_model +
         c.d_model * c.vocab_size;
}

namespace {

// All init randomness flows through per-site substreams so that adding or
// reordering sites can never shift another site's draw.
Tensor init_matrix(Shape shape, std::uint64_t seed, std::uint64_t site) {
  Rng rng(seed, site);
  return Tensor::randn(std::move(shape), rng, 0.0, 0.02, true);
}

}  // namespace

Model build_model(const ModelConfig& config, std::uint64_t seed) {
  validate_config(config);
  Model m;
  m.config = config;
  m.seed = seed;
  const std::size_t d = config.d_model;
  const std::size_t q_out = config.n_heads * config.head_dim;
  const std::size_t kv_out = config.n_kv_heads * config.head_dim;
  std::uint64_t site = 0;
  m.embedding = init_matrix({config.vocab_size, d}, seed, site++);
  m.layers.resize(config.n_layers);
  for (Layer& layer : m.layers) {
    layer.attn_norm = Tensor::full({d}, 1.0, true);
    layer.q.weight = init_matrix({d, q_out}, seed, site++);
    layer.k.weight = init_matrix({d, kv_out}, seed, site++);
    layer.v.weight = init_matrix({d, kv_out}, seed, site++);
    layer.o.weight = init_matrix({q_out, d}, seed, site++);
    layer.ffn_norm = Tensor::full({d}, 1.0, true);
    layer.gate.weight = init_matrix({d, config.d_ff}, seed, site++);
    layer.up.weight = init_matrix({d, config.d_ff}, seed, site++);
    layer.down.weight = init_matrix({config.d_ff, d}, seed, site++);
  }
  m.final_norm = Tensor::full({d}, 1.0, true);
  m.head = init_matrix({d, config.vocab_size}, seed, site++);
  return m;
}

namespace {

void push_projection(std::vector<std::pair<std::string, Tensor>>& out,
                     const std::string& prefix, const Projection& p) {
  out.emplace_back(prefix + ".weight", p.weight);
  if (p.adapter) {
    out.emplace_back(prefix + ".lora_A", p.adapter->a);
    out.emplace_back(prefix + ".lora_B", p.adapter->b);
  }
}

}  // namespace

std::vector<std::pair<std::string, Tensor>> named_parameters(
    const Model& model) {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("embedding", model.embedding);
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const Layer& layer = model.layers[i];
    const std::string base = "layers." + std::to_string(i);
    out.emplace_back(base + ".attn_norm", layer.attn_norm);
    push_projection(out, base + ".q", layer.q);
    push_projection(out, base + ".k", layer.k);
    push_projection(out, base + ".v", layer.v);
    push_projection(out, base + ".o", layer.o);
    out.emplace_back(base + ".ffn_norm", layer.ffn_norm);
    push_projection(out, base + ".gate", layer.gate);
    push_projection(out, base + ".up", layer.up);
    push_projection(out, base + ".down", layer.down);
  }
  out.emplace_back("final_norm", model.final_norm);
  out.emplace_back("head", model.head);
  return out;
}

std::vector<Tensor> trainable_parameters(const Model& model) {
  std::vector<Tensor> out;
  for (auto& [name, tensor] : named_parameters(model)) {
    if (tensor.requires_grad()) out.push_back(tensor);
  }
  return out;
}

Tensor rope_apply(const Tensor& x, const std::vector<std::size_t>& positions,
                  double base) {
  if (x.shape().size() != 3) {
    throw std::runtime_error("rope: expected [seq, heads, head_dim], got " +
                             shape_str(x.shape()));
  }
  const std::size_t seq = x.dim(0), heads = x.dim(1), hd = x.dim(2);
  if (hd % 2 != 0) {
    throw std::runtime_error("rope: head_dim must be even, got " +
                             std::to_string(hd));
  }
  if (positions.size() != seq) {
    throw std::runtime_error("rope: " + std::to_string(positions.size()) +
                             " positions for sequence length " +
                             std::to_string(seq));
  }
  // Pair i rotates by pos * base^(-2i / head_dim); precompute the frequency
  // ladder once, angles per (position, pair).
  std::vector<double> inv_freq(hd / 2);
  for (std::size_t i = 0; i < hd / 2; ++i) {
    inv_freq[i] =
        std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
  }
  // Captures by value: the backward closure outlives this stack frame.
  auto rotate = [positions, inv_freq, seq, heads, hd](
                    const double* src, double* dst, double direction) {
    for (std::size_t t = 0; t < seq; ++t) {
      const double pos = static_cast<double>(positions[t]);
      for (std::size_t h = 0; h < heads; ++h) {
        const double* in_row = src + (t * heads + h) * hd;
        double* out_row = dst + (t * heads + h) * hd;
        for (std::size_t i = 0; i < hd / 2; ++i) {
          const double angle = direction * pos * inv_freq[i];
          const double c = std::cos(angle), s = std::sin(angle);
          const double x0 = in_row[2 * i], x1 = in_row[2 * i + 1];
          out_row[2 * i] = x0 * c - x1 * s;
          out_row[2 * i + 1] = x0 * s + x1 * c;
        }
      }
    }
  };
  Tensor out(x.shape());
  rotate(x.data(), out.data(), 1.0);
  if (grad_enabled() && x.requires_grad()) {
    const_cast<Tensor&>(out).set_requires_grad(true);
    tape_record([x, out, rotate] {
      if (!out.has_grad()) return;
      x.ensure_grad();
      // Rotation is orthogonal: the adjoint rotates gradients back by the
      // negated angle. Accumulate via a scratch buffer.
      std::vector<double> scratch(x.size());
      rotate(out.grad_data(), scratch.data(), -1.0);
      double* gx = x.grad_data();
      for (std::size_t i = 0; i < scratch.size(); ++i) gx[i] += scratch[i];
    });
  }
  return out;
}

Tensor rmsnorm(const Tensor& x, const Tensor& weight, double eps) {
  if (weight.shape().size() != 1 ||
      x.shape().back() != weight.dim(0)) {
    throw std::runtime_error("rmsnorm: trailing dimension of " +
                             shape_str(x.shape()) + " must match weight " +
                             shape_str(weight.shape()));
  }
  const std::size_t d = weight.dim(0);
  const std::size_t rows = x.size() / d;
  Tensor out(x.shape());
  std::vector<double> inv_rms(rows);
  const double* px = x.data();
  const double* pw = weight.data();
  double* po = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = px + r * d;
    double ms = 0.0;
    for (std::size_t j = 0; j < d; ++j) ms += row[j] * row[j];
    ms = ms / static_cast<double>(d) + eps;
    inv_rms[r] = 1.0 / std::sqrt(ms);
    for (std::size_t j = 0; j < d; ++j) {
      po[r * d + j] = row[j] * inv_rms[r] * pw[j];
    }
  }
  if (grad_enabled() && (x.requires_grad() || weight.requires_grad())) {
    const_cast<Tensor&>(out).set_requires_grad(true);
    auto saved_inv_rms = std::make_shared<std::vector<double>>(
        std::move(inv_rms));
    tape_record([x, weight, out, saved_inv_rms, rows, d] {
      if (!out.has_grad()) return;
      const double* go = out.grad_data();
      const double* px2 = x.data();
      const double* pw2 = weight.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const double s = (*saved_inv_rms)[r];
        const double* row = px2 + r * d;
        const double* grow = go + r * d;
        if (weight.requires_grad()) {
          weight.ensure_grad();
          double* gw = weight.grad_data();
          for (std::size_t j = 0; j < d; ++j) gw[j] += grow[j] * row[j] * s;
        }
        if (x.requires_grad()) {
          x.ensure_grad();
          double* gx = x.grad_data() + r * d;
          // d/dx of x * inv_rms: the inv_rms itself depends on every entry
          // of the row through the mean of squares.
          double dot = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            dot += grow[j] * pw2[j] * row[j];
          }
          const double correction = dot * s * s / static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) {
            gx[j] += s * (grow[j] * pw2[j] - row[j] * correction);
          }
        }
      }
    });
  }
  return out;
}

Tensor swiglu_ffn(const Tensor& x, const Tensor& gate, const Tensor& up,
                  const Tensor& down) {
  return matmul(mul(silu(matmul(x, gate)), matmul(x, up)), down);
}

namespace {

Tensor project(Projection& p, const Tensor& x, Mode mode) {
  if (p.adapter) return adapter_forward(*p.adapter, x, mode);
  return matmul(x, p.weight);
}

}  // namespace

Tensor forward(Model& model, const std::vector<int>& tokens, Mode mode,
               NoiseStream* noise, const KernelOptions& kernel) {
  const ModelConfig& c = model.config;
  if (tokens.empty()) {
    throw std::runtime_error("forward: empty token sequence");
  }
  if (tokens.size() > c.max_context) {
    throw std::runtime_error("forward: sequence length " +
                             std::to_string(tokens.size()) +
                             " exceeds max_context " +
                             std::to_string(c.max_context));
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 ||
        static_cast<std::size_t>(tokens[i]) >= c.vocab_size) {
      throw std::runtime_error("forward: token " + std::to_string(tokens[i]) +
                               " at position " + std::to_string(i) +
                               " outside vocabulary " +
                               std::to_string(c.vocab_size));
    }
  }
  const std::size_t seq = tokens.size();
  const std::size_t group = c.n_heads / c.n_kv_heads;
  const double attn_scale =
      1.0 / std::sqrt(static_cast<double>(c.head_dim));
  std::vector<std::size_t> positions(seq);
  for (std::size_t i = 0; i < seq; ++i) positions[i] = i;

  Tensor x = embedding(model.embedding, tokens);
  if (noise != nullptr) x = noise->apply(x, mode);

  for (Layer& layer : model.layers) {
    Tensor h = rmsnorm(x, layer.attn_norm, c.rmsnorm_eps);
    Tensor q3 = reshape(project(layer.q, h, mode), {seq, c.n_heads, c.head_dim});
    Tensor k3 =
        reshape(project(layer.k, h, mode), {seq, c.n_kv_heads, c.head_dim});
    Tensor v3 =
        reshape(project(layer.v, h, mode), {seq, c.n_kv_heads, c.head_dim});
    Tensor qr = rope_apply(q3, positions, c.rope_base);
    Tensor kr = rope_apply(k3, positions, c.rope_base);
    std::vector<Tensor> head_outputs;
    head_outputs.reserve(c.n_heads);
    for (std::size_t head = 0; head < c.n_heads; ++head) {
      AttentionInputs in;
      in.q = head_slice(qr, head);
      in.k = head_slice(kr, head / group);  // shared kv head for the group
      in.v = head_slice(v3, head / group);
      in.mask = AttnMask::kCausal;
      in.scale = attn_scale;
      head_outputs.push_back(kernel.streaming
                                 ? streaming_attention(in, kernel.block_size)
                                 : naive_attention(in));
    }
    x = add(x, project(layer.o, concat_cols(head_outputs), mode));
    Tensor h2 = rmsnorm(x, layer.ffn_norm, c.rmsnorm_eps);
    Tensor gated = mul(silu(project(layer.gate, h2, mode)),
                       project(layer.up, h2, mode));
    x = add(x, project(layer.down, gated, mode));
  }
  return matmul(rmsnorm(x, model.final_norm, c.rmsnorm_eps), model.head);
}

}  // namespace peft
