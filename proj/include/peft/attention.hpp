#pragma once

#include <cstddef>

#include "peft/tensor.hpp"

namespace peft {

enum class AttnMask { kNone, kCausal };
enum class AttentionKernel { kNaive, kStreaming };

// One attention head's operands. With a causal mask the query block is
// treated as the suffix of the key sequence (query row i sees keys
// j <= i + seq_k - seq_q), which requires seq_k >= seq_q; the everyday case
// is seq_q == seq_k.
struct AttentionInputs {
  Tensor q;  // [seq_q, head_dim]
  Tensor k;  // [seq_k, head_dim]
  Tensor v;  // [seq_k, head_dim]
  AttnMask mask = AttnMask::kNone;
  double scale = 0.0;  // 0 means the default 1/sqrt(head_dim)
};

// Reference kernel: materializes the full seq_q x seq_k score matrix and
// composes taped primitives, so its gradients come straight from the
// autodiff engine. The oracle the streaming kernel is held to.
Tensor naive_attention(const AttentionInputs& in);

// Online-softmax kernel: walks K/V in blocks keeping a running row maximum,
// normalizer, and output accumulator, so at most one seq_q x block_size
// score tile is ever live. Mathematically identical to naive_attention. The
// backward pass recomputes block scores from the saved output and
// log-sum-exp instead of storing probabilities (recompute-over-store).
Tensor streaming_attention(const AttentionInputs& in, std::size_t block_size);

// Instrumented accounting: runs the chosen kernel (forward and, for the
// streaming kernel, backward) on synthetic inputs of the given shape and
// reports the peak number of transient score-buffer elements live at once.
// The naive kernel measures exactly seq_q * seq_k; the streaming kernel
// stays within seq_q * block_size.
std::size_t peak_score_storage(std::size_t seq_q, std::size_t seq_k,
                               std::size_t head_dim, std::size_t block_size,
                               AttentionKernel kernel);

// Direct access to the thread-local meter for callers composing their own
// measurements: reset clears current and peak counts.
void score_meter_reset();
std::size_t score_meter_peak();

}  // namespace peft
