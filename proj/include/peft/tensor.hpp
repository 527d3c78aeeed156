#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "peft/rng.hpp"

namespace peft {

using Shape = std::vector<std::size_t>;
using Mask = std::vector<std::uint8_t>;

// Training-time behavior (dropout, embedding noise) is gated on this
// everywhere; evaluation is deterministic by contract.
enum class Mode { kTrain, kEval };

// Dense row-major 64-bit float tensor with reverse-mode autodiff.
//
// A Tensor is a cheap handle onto shared storage: copies alias the same
// buffer, which is how tape closures keep their operands alive. Values are
// immutable after an operation produces them, with two sanctioned
// exceptions — the gradient buffer, and the optimizer's exclusive-access
// parameter update.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);

  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value);
  static Tensor randn(Shape shape, Rng& rng, double mean, double stddev,
                      bool requires_grad = false);

  bool defined() const { return static_cast<bool>(state_); }
  const Shape& shape() const;
  std::size_t size() const;
  std::size_t dim(std::size_t i) const;

  const double* data() const;
  double* data();  // exclusive-access mutation (optimizer step, test setup)
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);

  // The gradient buffer lives in the shared state and is mutable through
  // const handles: accumulation happens via by-value captures in tape
  // closures. Absent until backward reaches this tensor.
  bool has_grad() const;
  void ensure_grad() const;       // allocate zeros if absent
  double* grad_data() const;      // throws if absent
  void clear_grad() const;

 private:
  struct State;
  std::shared_ptr<State> state_;
};

std::string shape_str(const Shape& shape);

// ---- gradient mode -------------------------------------------------------

// Thread-local switch: while disabled, no operation records onto the tape
// and outputs never require grad (used for evaluation and finite-difference
// probes).
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---- tape ----------------------------------------------------------------

// The tape is a thread-confined, append-only list of backward closures in
// execution order; backward() replays it in reverse and then clears it.
// Custom operations (attention kernels, RoPE, ...) register through
// tape_record, which is a no-op while gradients are disabled.
void tape_record(std::function<void()> step);
std::size_t tape_size();
void tape_clear();

// Seeds d(loss)/d(loss) = 1 and runs the chain rule across the tape,
// accumulating into .grad of every tensor that requires grad. The loss must
// be a scalar produced by taped operations. Consumes the tape.
void backward(const Tensor& loss);

// ---- operations ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor silu(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor softmax(const Tensor& a, std::size_t axis);

// Mean over masked positions of -log softmax(logits)[target]. Targets are
// token ids per row; the mask selects which rows contribute.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const Mask& mask);

Tensor reshape(const Tensor& a, Shape shape);

// [seq, heads, width] -> [seq, width] for one head index.
Tensor head_slice(const Tensor& a, std::size_t head);

// [n, w_0], [n, w_1], ... -> [n, w_0 + w_1 + ...]
Tensor concat_cols(const std::vector<Tensor>& parts);

// Row gather: [vocab, d] table and n token ids -> [n, d].
Tensor embedding(const Tensor& table, const std::vector<int>& ids);

// Inverted dropout: keeps with probability 1-p and rescales by 1/(1-p) so
// the expectation is the identity. Caller gates on training mode; the mask
// comes from the supplied stream, keeping runs deterministic.
Tensor dropout(const Tensor& a, double p, Rng& rng);

}  // namespace peft
