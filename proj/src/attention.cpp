#include "peft/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>
#include <vector>

#include "peft/rng.hpp"

namespace peft {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Additive pre-softmax penalty for masked score entries. Finite on purpose:
// after max subtraction the exponent underflows to exactly 0.0 without ever
// producing inf-inf = NaN in intermediate arithmetic.
constexpr double kMaskPenalty = -1e30;

struct ScoreMeter {
  std::size_t current = 0;
  std::size_t peak = 0;
  void alloc(std::size_t n) {
    current += n;
    peak = std::max(peak, current);
  }
  void release(std::size_t n) { current -= n; }
};

thread_local ScoreMeter g_meter;

double resolve_scale(const AttentionInputs& in) {
  return in.scale != 0.0
             ? in.scale
             : 1.0 / std::sqrt(static_cast<double>(in.q.dim(1)));
}

void validate(const AttentionInputs& in) {
  for (const Tensor* t : {&in.q, &in.k, &in.v}) {
    if (t->shape().size() != 2) {
      throw std::runtime_error("attention: operands must be 2-d, got " +
                               shape_str(t->shape()));
    }
  }
  if (in.q.dim(1) != in.k.dim(1) || in.k.shape() != in.v.shape()) {
    throw std::runtime_error("attention: operand shape mismatch (Q " +
                             shape_str(in.q.shape()) + ", K " +
                             shape_str(in.k.shape()) + ", V " +
                             shape_str(in.v.shape()) + ")");
  }
  if (in.mask == AttnMask::kCausal && in.k.dim(0) < in.q.dim(0)) {
    throw std::runtime_error(
        "attention: causal mask requires seq_k >= seq_q (Q " +
        shape_str(in.q.shape()) + ", K " + shape_str(in.k.shape()) + ")");
  }
}

}  // namespace

void score_meter_reset() { g_meter = ScoreMeter{}; }
std::size_t score_meter_peak() { return g_meter.peak; }

Tensor naive_attention(const AttentionInputs& in) {
  validate(in);
  const double sc = resolve_scale(in);
  const std::size_t seq_q = in.q.dim(0), seq_k = in.k.dim(0);

  // Canonical accounting: one full score matrix lives for the duration of
  // the kernel (probabilities overwrite it logically).
  g_meter.alloc(seq_q * seq_k);
  Tensor scores = scale(matmul(in.q, transpose(in.k)), sc);
  if (in.mask == AttnMask::kCausal) {
    Tensor penalty(Shape{seq_q, seq_k});
    const std::size_t offset = seq_k - seq_q;
    for (std::size_t i = 0; i < seq_q; ++i) {
      for (std::size_t j = i + offset + 1; j < seq_k; ++j) {
        penalty.data()[i * seq_k + j] = kMaskPenalty;
      }
    }
    scores = add(scores, penalty);
  }
  Tensor out = matmul(softmax(scores, 1), in.v);
  g_meter.release(seq_q * seq_k);
  return out;
}

Tensor streaming_attention(const AttentionInputs& in, std::size_t block_size) {
  validate(in);
  if (block_size == 0) {
    throw std::runtime_error("attention: block_size must be positive");
  }
  const double sc = resolve_scale(in);
  const std::size_t seq_q = in.q.dim(0), seq_k = in.k.dim(0);
  const std::size_t hd = in.q.dim(1);
  const bool causal = in.mask == AttnMask::kCausal;
  const std::size_t offset = causal ? seq_k - seq_q : 0;
  const double* pq = in.q.data();
  const double* pk = in.k.data();
  const double* pv = in.v.data();

  Tensor out(Shape{seq_q, hd});
  double* po = out.data();
  // Per-row running state: maximum, normalizer, and the log-sum-exp that the
  // backward pass reconstructs probabilities from.
  std::vector<double> row_max(seq_q, kNegInf);
  std::vector<double> row_norm(seq_q, 0.0);
  auto lse = std::make_shared<std::vector<double>>(seq_q, kNegInf);

  std::vector<double> tile;
  for (std::size_t b0 = 0; b0 < seq_k; b0 += block_size) {
    const std::size_t bw = std::min(block_size, seq_k - b0);
    g_meter.alloc(seq_q * bw);
    tile.assign(seq_q * bw, 0.0);
    for (std::size_t i = 0; i < seq_q; ++i) {
      const std::size_t visible_end =
          causal ? std::min(b0 + bw, i + offset + 1) : b0 + bw;
      if (causal && visible_end <= b0) {
        // Entire block is masked for this row; running state unchanged.
        for (std::size_t j = 0; j < bw; ++j) tile[i * bw + j] = kNegInf;
        continue;
      }
      double block_max = kNegInf;
      for (std::size_t j = 0; j < bw; ++j) {
        double s = kNegInf;
        if (b0 + j < visible_end) {
          const double* qrow = pq + i * hd;
          const double* krow = pk + (b0 + j) * hd;
          double dot = 0.0;
          for (std::size_t d = 0; d < hd; ++d) dot += qrow[d] * krow[d];
          s = sc * dot;
          block_max = std::max(block_max, s);
        }
        tile[i * bw + j] = s;
      }
      const double new_max = std::max(row_max[i], block_max);
      // exp(old_max - new_max) rescales the running sums; 1 on the first
      // visible block (old state is empty), guarded against -inf - -inf.
      const double rescale =
          row_max[i] == kNegInf ? 0.0 : std::exp(row_max[i] - new_max);
      row_norm[i] *= rescale;
      double* orow = po + i * hd;
      for (std::size_t d = 0; d < hd; ++d) orow[d] *= rescale;
      for (std::size_t j = 0; j < bw; ++j) {
        const double s = tile[i * bw + j];
        if (s == kNegInf) continue;
        const double p = std::exp(s - new_max);
        row_norm[i] += p;
        const double* vrow = pv + (b0 + j) * hd;
        for (std::size_t d = 0; d < hd; ++d) orow[d] += p * vrow[d];
      }
      row_max[i] = new_max;
    }
    g_meter.release(seq_q * bw);
  }
  for (std::size_t i = 0; i < seq_q; ++i) {
    if (row_norm[i] == 0.0) {
      throw std::runtime_error("attention: row " + std::to_string(i) +
                               " has no visible keys");
    }
    double* orow = po + i * hd;
    for (std::size_t d = 0; d < hd; ++d) orow[d] /= row_norm[i];
    (*lse)[i] = row_max[i] + std::log(row_norm[i]);
  }

  const Tensor q = in.q, k = in.k, v = in.v;
  const bool tracked =
      q.requires_grad() || k.requires_grad() || v.requires_grad();
  if (grad_enabled() && tracked) {
    const_cast<Tensor&>(out).set_requires_grad(true);
    tape_record([q, k, v, out, lse, sc, causal, offset, block_size, seq_q,
                 seq_k, hd] {
      if (!out.has_grad()) return;
      const double* go = out.grad_data();
      const double* po2 = out.data();
      const double* pq2 = q.data();
      const double* pk2 = k.data();
      const double* pv2 = v.data();
      if (q.requires_grad()) q.ensure_grad();
      if (k.requires_grad()) k.ensure_grad();
      if (v.requires_grad()) v.ensure_grad();

      // D_i = <dO_i, O_i> replaces the probability-row dot product in the
      // softmax backward, so probabilities never need storing.
      std::vector<double> row_dot(seq_q, 0.0);
      for (std::size_t i = 0; i < seq_q; ++i) {
        double acc = 0.0;
        for (std::size_t d = 0; d < hd; ++d) {
          acc += go[i * hd + d] * po2[i * hd + d];
        }
        row_dot[i] = acc;
      }

      std::vector<double> tile;
      for (std::size_t b0 = 0; b0 < seq_k; b0 += block_size) {
        const std::size_t bw = std::min(block_size, seq_k - b0);
        g_meter.alloc(seq_q * bw);
        tile.assign(seq_q * bw, 0.0);
        // Recompute probabilities for this block from Q, K and the saved
        // log-sum-exp: p_ij = exp(scale * <q_i, k_j> - lse_i).
        for (std::size_t i = 0; i < seq_q; ++i) {
          const std::size_t visible_end =
              causal ? std::min(b0 + bw, i + offset + 1) : b0 + bw;
          for (std::size_t j = 0; j < bw; ++j) {
            double p = 0.0;
            if (b0 + j < visible_end) {
              const double* qrow = pq2 + i * hd;
              const double* krow = pk2 + (b0 + j) * hd;
              double dot = 0.0;
              for (std::size_t d = 0; d < hd; ++d) dot += qrow[d] * krow[d];
              p = std::exp(sc * dot - (*lse)[i]);
            }
            tile[i * bw + j] = p;
          }
        }
        if (v.requires_grad()) {
          double* gv = v.grad_data();
          for (std::size_t j = 0; j < bw; ++j) {
            double* gvrow = gv + (b0 + j) * hd;
            for (std::size_t i = 0; i < seq_q; ++i) {
              const double p = tile[i * bw + j];
              if (p == 0.0) continue;
              const double* grow = go + i * hd;
              for (std::size_t d = 0; d < hd; ++d) gvrow[d] += p * grow[d];
            }
          }
        }
        // dS_ij = p_ij * (<dO_i, v_j> - D_i), written over the tile so only
        // one score-sized buffer is ever live.
        for (std::size_t i = 0; i < seq_q; ++i) {
          for (std::size_t j = 0; j < bw; ++j) {
            const double p = tile[i * bw + j];
            if (p == 0.0) continue;
            const double* grow = go + i * hd;
            const double* vrow = pv2 + (b0 + j) * hd;
            double dp = 0.0;
            for (std::size_t d = 0; d < hd; ++d) dp += grow[d] * vrow[d];
            tile[i * bw + j] = p * (dp - row_dot[i]);
          }
        }
        if (q.requires_grad()) {
          double* gq = q.grad_data();
          for (std::size_t i = 0; i < seq_q; ++i) {
            double* gqrow = gq + i * hd;
            for (std::size_t j = 0; j < bw; ++j) {
              const double ds = tile[i * bw + j];
              if (ds == 0.0) continue;
              const double* krow = pk2 + (b0 + j) * hd;
              for (std::size_t d = 0; d < hd; ++d) {
                gqrow[d] += sc * ds * krow[d];
              }
            }
          }
        }
        if (k.requires_grad()) {
          double* gk = k.grad_data();
          for (std::size_t j = 0; j < bw; ++j) {
            double* gkrow = gk + (b0 + j) * hd;
            for (std::size_t i = 0; i < seq_q; ++i) {
              const double ds = tile[i * bw + j];
              if (ds == 0.0) continue;
              const double* qrow = pq2 + i * hd;
              for (std::size_t d = 0; d < hd; ++d) {
                gkrow[d] += sc * ds * qrow[d];
              }
            }
          }
        }
        g_meter.release(seq_q * bw);
      }
    });
  }
  return out;
}

std::size_t peak_score_storage(std::size_t seq_q, std::size_t seq_k,
                               std::size_t head_dim, std::size_t block_size,
                               AttentionKernel kernel) {
  if (seq_q == 0 || seq_k == 0 || head_dim == 0 || block_size == 0) {
    throw std::runtime_error("peak_score_storage: arguments must be positive");
  }
  Rng rng(1234);
  AttentionInputs in;
  in.q = Tensor::randn({seq_q, head_dim}, rng, 0.0, 1.0);
  in.k = Tensor::randn({seq_k, head_dim}, rng, 0.0, 1.0);
  in.v = Tensor::randn({seq_k, head_dim}, rng, 0.0, 1.0);
  score_meter_reset();
  if (kernel == AttentionKernel::kNaive) {
    NoGradGuard guard;
    naive_attention(in);
  } else {
    // The streaming memory claim covers training too: measure across a
    // taped forward plus the recomputing backward.
    in.q.set_requires_grad(true);
    in.k.set_requires_grad(true);
    in.v.set_requires_grad(true);
    backward(sum(streaming_attention(in, block_size)));
  }
  return score_meter_peak();
}

}  // namespace peft
