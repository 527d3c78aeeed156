#include "peft/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

namespace peft {

struct Tensor::State {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty means "not populated"
};

namespace {

std::size_t shape_numel(const Shape& shape) {
  if (shape.empty()) {
    throw std::runtime_error("tensor: shape must have at least one dimension");
  }
  std::size_t n = 1;
  for (std::size_t d : shape) {
    if (d == 0) {
      throw std::runtime_error("tensor: zero dimension in shape " +
                               shape_str(shape));
    }
    n *= d;
  }
  return n;
}

thread_local bool g_grad_enabled = true;
thread_local std::vector<std::function<void()>> g_tape;

}  // namespace

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape shape, bool requires_grad) {
  state_ = std::make_shared<State>();
  state_->data.assign(shape_numel(shape), 0.0);
  state_->shape = std::move(shape);
  state_->requires_grad = requires_grad;
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  for (double& x : t.state_->data) x = value;
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values,
                    bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw std::runtime_error("tensor: " + std::to_string(values.size()) +
                             " values cannot fill shape " + shape_str(shape));
  }
  Tensor t;
  t.state_ = std::make_shared<State>();
  t.state_->shape = std::move(shape);
  t.state_->data = std::move(values);
  t.state_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

Tensor Tensor::randn(Shape shape, Rng& rng, double mean, double stddev,
                     bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  for (double& x : t.state_->data) x = rng.normal(mean, stddev);
  return t;
}

const Shape& Tensor::shape() const { return state_->shape; }
std::size_t Tensor::size() const { return state_->data.size(); }

std::size_t Tensor::dim(std::size_t i) const {
  if (i >= state_->shape.size()) {
    throw std::runtime_error("tensor: dimension index " + std::to_string(i) +
                             " out of range for " + shape_str(state_->shape));
  }
  return state_->shape[i];
}

const double* Tensor::data() const { return state_->data.data(); }
double* Tensor::data() { return state_->data.data(); }

double Tensor::item() const {
  if (size() != 1) {
    throw std::runtime_error("tensor: item() on non-scalar " +
                             shape_str(state_->shape));
  }
  return state_->data[0];
}

bool Tensor::requires_grad() const { return state_ && state_->requires_grad; }

void Tensor::set_requires_grad(bool value) { state_->requires_grad = value; }

bool Tensor::has_grad() const { return state_ && !state_->grad.empty(); }

void Tensor::ensure_grad() const {
  if (state_->grad.empty()) state_->grad.assign(state_->data.size(), 0.0);
}

double* Tensor::grad_data() const {
  if (!has_grad()) {
    throw std::runtime_error("tensor: gradient not populated");
  }
  return state_->grad.data();
}

void Tensor::clear_grad() const { state_->grad.clear(); }

// ---- gradient mode ---------------------------------------------------------

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
  g_grad_enabled = false;
}
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---- tape ------------------------------------------------------------------

void tape_record(std::function<void()> step) {
  if (g_grad_enabled) g_tape.push_back(std::move(step));
}

std::size_t tape_size() { return g_tape.size(); }

void tape_clear() { g_tape.clear(); }

void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw std::runtime_error("backward: loss must be scalar, got " +
                             shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw std::runtime_error(
        "backward: loss was not produced through taped operations");
  }
  loss.ensure_grad();
  loss.grad_data()[0] += 1.0;
  for (std::size_t i = g_tape.size(); i > 0; --i) {
    g_tape[i - 1]();
  }
  g_tape.clear();
}

// ---- operations ------------------------------------------------------------

namespace {

// Records the closure and marks the output as gradient-carrying whenever any
// input takes part in differentiation. Every op funnels through this.
void track(const Tensor& out, bool any_input_tracked,
           std::function<void()> step) {
  if (g_grad_enabled && any_input_tracked) {
    const_cast<Tensor&>(out).set_requires_grad(true);
    g_tape.push_back(std::move(step));
  }
}

void check_2d(const Tensor& t, const char* op) {
  if (t.shape().size() != 2) {
    throw std::runtime_error(std::string(op) + ": expected 2-d tensor, got " +
                             shape_str(t.shape()));
  }
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::runtime_error(std::string(op) + ": shape mismatch (" +
                             shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()) + ")");
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw std::runtime_error("matmul: inner dimensions mismatch (" +
                             shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()) + ")");
  }
  Tensor out(Shape{m, n});
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = pa[i * k + kk];
      const double* brow = pb + kk * n;
      double* orow = po + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  track(out, a.requires_grad() || b.requires_grad(), [a, b, out, m, k, n] {
    if (!out.has_grad()) return;
    const double* go = out.grad_data();
    if (a.requires_grad()) {
      a.ensure_grad();
      double* ga = a.grad_data();
      const double* pb2 = b.data();
      // dA = dC . B^T
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
          double acc = 0.0;
          const double* grow = go + i * n;
          const double* brow = pb2 + kk * n;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          ga[i * k + kk] += acc;
        }
      }
    }
    if (b.requires_grad()) {
      b.ensure_grad();
      double* gb = b.grad_data();
      const double* pa2 = a.data();
      // dB = A^T . dC
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = go + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
          const double aik = pa2[i * k + kk];
          double* gbrow = gb + kk * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += aik * grow[j];
        }
      }
    }
  });
  return out;
}

Tensor transpose(const Tensor& a) {
  check_2d(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out(Shape{n, m});
  const double* pa = a.data();
  double* po = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) po[j * m + i] = pa[i * n + j];
  }
  track(out, a.requires_grad(), [a, out, m, n] {
    if (!out.has_grad()) return;
    a.ensure_grad();
    const double* go = out.grad_data();
    double* ga = a.grad_data();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += go[j * m + i];
    }
  });
  return out;
}

namespace {

template <typename Fwd, typename Bwd>
Tensor elementwise_binary(const Tensor& a, const Tensor& b, const char* op,
                          Fwd fwd, Bwd bwd) {
  check_same_shape(a, b, op);
  Tensor out(a.shape());
  const std::size_t n = a.size();
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (std::size_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
  track(out, a.requires_grad() || b.requires_grad(), [a, b, out, n, bwd] {
    if (!out.has_grad()) return;
    const double* go = out.grad_data();
    for (std::size_t i = 0; i < n; ++i) {
      auto [da, db] = bwd(a.data()[i], b.data()[i], go[i]);
      if (a.requires_grad()) {
        a.ensure_grad();
        a.grad_data()[i] += da;
      }
      if (b.requires_grad()) {
        b.ensure_grad();
        b.grad_data()[i] += db;
      }
    }
  });
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double g) { return std::pair{g, g}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double g) { return std::pair{g, -g}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double x, double y, double g) { return std::pair{g * y, g * x}; });
}

Tensor scale(const Tensor& a, double c) {
  Tensor out(a.shape());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
  track(out, a.requires_grad(), [a, out, n, c] {
    if (!out.has_grad()) return;
    a.ensure_grad();
    const double* go = out.grad_data();
    double* ga = a.grad_data();
    for (std::size_t i = 0; i < n; ++i) ga[i] += c * go[i];
  });
  return out;
}

Tensor silu(const Tensor& a) {
  Tensor out(a.shape());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = a.data()[i];
    out.data()[i] = x / (1.0 + std::exp(-x));
  }
  track(out, a.requires_grad(), [a, out, n] {
    if (!out.has_grad()) return;
    a.ensure_grad();
    const double* go = out.grad_data();
    double* ga = a.grad_data();
    for (std::size_t i = 0; i < n; ++i) {
      const double x = a.data()[i];
      const double s = 1.0 / (1.0 + std::exp(-x));
      ga[i] += go[i] * s * (1.0 + x * (1.0 - s));
    }
  });
  return out;
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a.data()[i];
  Tensor out = Tensor::scalar(acc);
  track(out, a.requires_grad(), [a, out] {
    if (!out.has_grad()) return;
    a.ensure_grad();
    const double g = out.grad_data()[0];
    double* ga = a.grad_data();
    for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g;
  });
  return out;
}

Tensor softmax(const Tensor& a, std::size_t axis) {
  if (axis >= a.shape().size()) {
    throw std::runtime_error("softmax: axis " + std::to_string(axis) +
                             " out of range for " + shape_str(a.shape()));
  }
  std::size_t outer = 1, inner = 1;
  const std::size_t len = a.shape()[axis];
  for (std::size_t i = 0; i < axis; ++i) outer *= a.shape()[i];
  for (std::size_t i = axis + 1; i < a.shape().size(); ++i) {
    inner *= a.shape()[i];
  }
  Tensor out(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = pa[base];
      for (std::size_t t = 1; t < len; ++t) {
        mx = std::max(mx, pa[base + t * inner]);
      }
      double denom = 0.0;
      for (std::size_t t = 0; t < len; ++t) {
        const double e = std::exp(pa[base + t * inner] - mx);
        po[base + t * inner] = e;
        denom += e;
      }
      for (std::size_t t = 0; t < len; ++t) po[base + t * inner] /= denom;
    }
  }
  track(out, a.requires_grad(), [a, out, outer, inner, len] {
    if (!out.has_grad()) return;
    a.ensure_grad();
    const double* y = out.data();
    const double* go = out.grad_data();
    double* ga = a.grad_data();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t t = 0; t < len; ++t) {
          dot += go[base + t * inner] * y[base + t * inner];
        }
        for (std::size_t t = 0; t < len; ++t) {
          const std::size_t idx = base + t * inner;
          ga[idx] += y[idx] * (go[idx] - dot);
        }
      }
    }
  });
  return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const Mask& mask) {
  check_2d(logits, "cross_entropy");
  const std::size_t n = logits.dim(0), v = logits.dim(1);
  if (targets.size() != n || mask.size() != n) {
    throw std::runtime_error(
        "cross_entropy: expected " + std::to_string(n) +
        " targets and mask entries, got " + std::to_string(targets.size()) +
        " / " + std::to_string(mask.size()));
  }
  std::size_t n_masked = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    ++n_masked;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v) {
      throw std::runtime_error("cross_entropy: target " +
                               std::to_string(targets[i]) + " at position " +
                               std::to_string(i) + " outside vocabulary " +
                               std::to_string(v));
    }
  }
  if (n_masked == 0) {
    throw std::runtime_error(
        "cross_entropy: mask selects no positions, loss undefined");
  }
  const double* pl = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    const double* row = pl + i * v;
    double mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
    const double lse = mx + std::log(denom);
    total += lse - row[targets[i]];
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(n_masked));
  track(out, logits.requires_grad(), [logits, out, targets, mask, n, v,
                                      n_masked] {
    if (!out.has_grad()) return;
    logits.ensure_grad();
    const double g = out.grad_data()[0] / static_cast<double>(n_masked);
    const double* pl2 = logits.data();
    double* gl = logits.grad_data();
    for (std::size_t i = 0; i < n; ++i) {
      if (!mask[i]) continue;
      const double* row = pl2 + i * v;
      double* grow = gl + i * v;
      double mx = row[0];
      for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
      double denom = 0.0;
      for (std::size_t j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
      for (std::size_t j = 0; j < v; ++j) {
        const double p = std::exp(row[j] - mx) / denom;
        grow[j] += g * (p - (static_cast<std::size_t>(targets[i]) == j));
      }
    }
  });
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  std::size_t numel = 1;
  for (std::size_t d : shape) numel *= d;
  if (shape.empty() || numel != a.size()) {
    throw std::runtime_error("reshape: cannot view " + shape_str(a.shape()) +
                             " as " + shape_str(shape));
  }
  Tensor out = Tensor::from(
      std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
  track(out, a.requires_grad(), [a, out] {
    if (!out.has_grad()) return;
    a.ensure_grad();
    const double* go = out.grad_data();
    double* ga = a.grad_data();
    for (std::size_t i = 0; i < a.size(); ++i) ga[i] += go[i];
  });
  return out;
}

Tensor head_slice(const Tensor& a, std::size_t head) {
  if (a.shape().size() != 3) {
    throw std::runtime_error("head_slice: expected 3-d tensor, got " +
                             shape_str(a.shape()));
  }
  const std::size_t seq = a.dim(0), heads = a.dim(1), width = a.dim(2);
  if (head >= heads) {
    throw std::runtime_error("head_slice: head " + std::to_string(head) +
                             " out of range for " + shape_str(a.shape()));
  }
  Tensor out(Shape{seq, width});
  const double* pa = a.data();
  double* po = out.data();
  for (std::size_t t = 0; t < seq; ++t) {
    const double* src = pa + (t * heads + head) * width;
    for (std::size_t j = 0; j < width; ++j) po[t * width + j] = src[j];
  }
  track(out, a.requires_grad(), [a, out, head, seq, heads, width] {
    if (!out.has_grad()) return;
    a.ensure_grad();
    const double* go = out.grad_data();
    double* ga = a.grad_data();
    for (std::size_t t = 0; t < seq; ++t) {
      double* dst = ga + (t * heads + head) * width;
      for (std::size_t j = 0; j < width; ++j) dst[j] += go[t * width + j];
    }
  });
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) {
    throw std::runtime_error("concat_cols: no tensors to concatenate");
  }
  const std::size_t rows = parts[0].dim(0);
  std::size_t total = 0;
  bool tracked = false;
  for (const Tensor& p : parts) {
    check_2d(p, "concat_cols");
    if (p.dim(0) != rows) {
      throw std::runtime_error("concat_cols: row mismatch (" +
                               shape_str(parts[0].shape()) + " vs " +
                               shape_str(p.shape()) + ")");
    }
    total += p.dim(1);
    tracked = tracked || p.requires_grad();
  }
  Tensor out(Shape{rows, total});
  std::size_t col = 0;
  for (const Tensor& p : parts) {
    const std::size_t w = p.dim(1);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* src = p.data() + r * w;
      double* dst = out.data() + r * total + col;
      for (std::size_t j = 0; j < w; ++j) dst[j] = src[j];
    }
    col += w;
  }
  track(out, tracked, [parts, out, rows, total] {
    if (!out.has_grad()) return;
    const double* go = out.grad_data();
    std::size_t col2 = 0;
    for (const Tensor& p : parts) {
      const std::size_t w = p.dim(1);
      if (p.requires_grad()) {
        p.ensure_grad();
        double* gp = p.grad_data();
        for (std::size_t r = 0; r < rows; ++r) {
          const double* src = go + r * total + col2;
          for (std::size_t j = 0; j < w; ++j) gp[r * w + j] += src[j];
        }
      }
      col2 += w;
    }
  });
  return out;
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  check_2d(table, "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  if (ids.empty()) {
    throw std::runtime_error("embedding: empty id sequence");
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw std::runtime_error("embedding: id " + std::to_string(ids[i]) +
                               " at position " + std::to_string(i) +
                               " outside vocabulary " + std::to_string(vocab));
    }
  }
  Tensor out(Shape{ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const double* src = table.data() + static_cast<std::size_t>(ids[i]) * d;
    double* dst = out.data() + i * d;
    for (std::size_t j = 0; j < d; ++j) dst[j] = src[j];
  }
  track(out, table.requires_grad(), [table, out, ids, d] {
    if (!out.has_grad()) return;
    table.ensure_grad();
    const double* go = out.grad_data();
    double* gt = table.grad_data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      double* dst = gt + static_cast<std::size_t>(ids[i]) * d;
      const double* src = go + i * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
  return out;
}

Tensor dropout(const Tensor& a, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) {
    throw std::runtime_error("dropout: probability " + std::to_string(p) +
                             " outside [0, 1)");
  }
  if (p == 0.0) return a;
  const std::size_t n = a.size();
  // Kept entries carry 1/(1-p); the mask is captured for the backward pass.
  auto mask_scale = std::make_shared<std::vector<double>>(n);
  const double inv_keep = 1.0 / (1.0 - p);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < n; ++i) {
    (*mask_scale)[i] = rng.uniform() < p ? 0.0 : inv_keep;
    out.data()[i] = a.data()[i] * (*mask_scale)[i];
  }
  track(out, a.requires_grad(), [a, out, mask_scale, n] {
    if (!out.has_grad()) return;
    a.ensure_grad();
    const double* go = out.grad_data();
    double* ga = a.grad_data();
    for (std::size_t i = 0; i < n; ++i) ga[i] += go[i] * (*mask_scale)[i];
  });
  return out;
}

}  // namespace peft
