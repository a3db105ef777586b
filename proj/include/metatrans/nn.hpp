#pragma once

// Neural building blocks: sinusoidal positional embeddings, multi-head
// self-attention, pre/post-normalized encoder blocks with a row-wise
// feed-forward network, and two-layer MLP heads.
//
// Attention, normalization and the FFN all act on (T x d) sequences as row
// maps or row-mixing ops that commute with row permutations, which is what
// the permutation checks in verify.hpp exercise.

#include <cmath>
#include <random>
#include <vector>

#include "metatrans/tensor.hpp"

namespace metatrans {

// Sinusoidal table: table[pos, 2i] = sin(pos / 10000^(2i/d)),
// table[pos, 2i+1] = cos(pos / 10000^(2i/d)). Values lie in [-1, 1].
inline Tensor positional_embedding(int t, int d) {
  if (t < 1) throw DimensionError("positional_embedding: T must be >= 1");
  if (d < 2 || d % 2 != 0) {
    throw DimensionError("positional_embedding: d must be even and >= 2");
  }
  std::vector<double> table(std::size_t(t) * d);
  for (int pos = 0; pos < t; ++pos) {
    for (int i = 0; i < d / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * i / d);
      table[std::size_t(pos) * d + 2 * i] = std::sin(pos * freq);
      table[std::size_t(pos) * d + 2 * i + 1] = std::cos(pos * freq);
    }
  }
  return Tensor({t, d}, std::move(table));
}

// Precomputed positional table. Not trainable. Accesses are counted so the
// static-stream structural audit can assert the table is never consulted.
class PositionalEmbedding {
 public:
  PositionalEmbedding() = default;
  PositionalEmbedding(int t_max, int d)
      : t_max_(t_max), d_(d), table_(positional_embedding(t_max, d)) {}
  // Explicit table (fixtures, negative controls).
  explicit PositionalEmbedding(Tensor table)
      : t_max_(table.rows()), d_(table.cols()), table_(std::move(table)) {}

  int t_max() const { return t_max_; }

  // First T rows as a constant (detached) tensor.
  Tensor prefix(int t) const {
    if (t < 1 || t > t_max_) {
      throw DimensionError("positional table covers 1.." +
                           std::to_string(t_max_) + " frames, got " +
                           std::to_string(t));
    }
    ++touches_;
    const auto& full = table_.data();
    std::vector<double> rows(full.begin(), full.begin() + std::size_t(t) * d_);
    return Tensor({t, d_}, std::move(rows));
  }

  long touch_count() const { return touches_; }

 private:
  int t_max_ = 0;
  int d_ = 0;
  Tensor table_;
  mutable long touches_ = 0;
};

// ---------------------------------------------------------------------------
// Parameters.

struct AttentionHeadParams {
  Tensor wq, wk, wv;  // d x d_head each
};

struct EncoderBlockParams {
  std::vector<AttentionHeadParams> heads;
  Tensor w_o;                  // (H * d_head) x d
  Tensor ln1_gain, ln1_bias;   // post-attention-residual norm, length d
  Tensor ln2_gain, ln2_bias;   // post-ffn-residual norm, length d
  Tensor ffn_w1, ffn_b1;       // d x d_ff, 1 x d_ff
  Tensor ffn_w2, ffn_b2;       // d_ff x d, 1 x d
};

struct MlpParams {
  Tensor w1, b1;  // in x hidden, 1 x hidden
  Tensor w2, b2;  // hidden x out, 1 x out
};

namespace init {

inline Tensor linear_weight(int fan_in, int fan_out, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Tensor::uniform(fan_in, fan_out, -bound, bound, rng, true);
}

inline MlpParams mlp(int in, int hidden, int out, std::mt19937_64& rng) {
  MlpParams p;
  p.w1 = linear_weight(in, hidden, rng);
  p.b1 = Tensor::zeros(1, hidden, true);
  p.w2 = linear_weight(hidden, out, rng);
  p.b2 = Tensor::zeros(1, out, true);
  return p;
}

inline EncoderBlockParams encoder_block(int d, int n_heads, int d_head,
                                        int d_ff, std::mt19937_64& rng) {
  EncoderBlockParams p;
  p.heads.resize(n_heads);
  for (auto& h : p.heads) {
    h.wq = linear_weight(d, d_head, rng);
    h.wk = linear_weight(d, d_head, rng);
    h.wv = linear_weight(d, d_head, rng);
  }
  p.w_o = linear_weight(n_heads * d_head, d, rng);
  p.ln1_gain = Tensor::full(1, d, 1.0, true);
  p.ln1_bias = Tensor::zeros(1, d, true);
  p.ln2_gain = Tensor::full(1, d, 1.0, true);
  p.ln2_bias = Tensor::zeros(1, d, true);
  p.ffn_w1 = linear_weight(d, d_ff, rng);
  p.ffn_b1 = Tensor::zeros(1, d_ff, true);
  p.ffn_w2 = linear_weight(d_ff, d, rng);
  p.ffn_b2 = Tensor::zeros(1, d, true);
  return p;
}

}  // namespace init

// ---------------------------------------------------------------------------
// Blocks.

// Scaled dot-product self-attention of one head over the T rows. No masking,
// no positional information.
inline Tensor single_head_attention(const Tensor& x, const Tensor& wq,
                                    const Tensor& wk, const Tensor& wv) {
  Tensor q = matmul(x, wq);
  Tensor k = matmul(x, wk);
  Tensor v = matmul(x, wv);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(wq.cols()));
  Tensor attn = softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt));
  return matmul(attn, v);
}

// Concatenated per-head outputs projected by w_o.
inline Tensor multi_head_attention(const Tensor& x,
                                   const EncoderBlockParams& p) {
  std::vector<Tensor> outs;
  outs.reserve(p.heads.size());
  for (const auto& h : p.heads) {
    outs.push_back(single_head_attention(x, h.wq, h.wk, h.wv));
  }
  return matmul(concat_cols(outs), p.w_o);
}

// Parameter-free row standardization (unit gain, zero bias). The constant
// gain/bias rows are cached per width.
inline Tensor standardize_rows(const Tensor& x, double eps) {
  const int d = x.cols();
  thread_local std::vector<std::pair<Tensor, Tensor>> cache;  // indexed by d
  if (static_cast<int>(cache.size()) <= d) cache.resize(d + 1);
  auto& [gain, bias] = cache[d];
  if (!gain.defined()) {
    gain = Tensor::full(1, d, 1.0);
    bias = Tensor::zeros(1, d);
  }
  return layer_norm_feature(x, gain, bias, eps);
}

// Row-wise affine -> ReLU -> affine, shared across time.
inline Tensor feed_forward(const Tensor& x, const EncoderBlockParams& p) {
  Tensor h = relu(add(matmul(x, p.ffn_w1), p.ffn_b1));
  return add(matmul(h, p.ffn_w2), p.ffn_b2);
}

// y = LN(x + MHA(LN(x))); out = LN(y + FFN(LN(y))). The normalizations that
// feed the sublayers are parameter-free; the two trainable gain/bias pairs
// act after the residual additions.
inline Tensor encoder_block(const Tensor& x, const EncoderBlockParams& p,
                            double eps) {
  Tensor attn = multi_head_attention(standardize_rows(x, eps), p);
  Tensor y = layer_norm_feature(add(x, attn), p.ln1_gain, p.ln1_bias, eps);
  Tensor f = feed_forward(standardize_rows(y, eps), p);
  return layer_norm_feature(add(y, f), p.ln2_gain, p.ln2_bias, eps);
}

// Two-layer head; applies row-wise, so (1 x d) inputs give (1 x C) logits and
// (T x d) inputs give per-frame logits.
inline Tensor mlp_head(const Tensor& x, const MlpParams& p) {
  Tensor h = relu(add(matmul(x, p.w1), p.b1));
  return add(matmul(h, p.w2), p.b2);
}

// ---------------------------------------------------------------------------
// Temporal permutations (value-level; used by tests and the verifier).

inline std::vector<int> random_permutation(int t, std::mt19937_64& rng) {
  std::vector<int> perm(t);
  for (int i = 0; i < t; ++i) perm[i] = i;
  for (int i = t - 1; i > 0; --i) {
    std::uniform_int_distribution<int> dist(0, i);
    std::swap(perm[i], perm[dist(rng)]);
  }
  return perm;
}

// Row i of the result is row perm[i] of x. Returns a detached tensor.
inline Tensor permute_rows(const Tensor& x, const std::vector<int>& perm) {
  const int t = x.rows(), d = x.cols();
  if (static_cast<int>(perm.size()) != t) {
    throw DimensionError("permute_rows: permutation length != row count");
  }
  std::vector<double> out(x.numel());
  const auto& xv = x.data();
  for (int i = 0; i < t; ++i) {
    const int src = perm[i];
    if (src < 0 || src >= t) throw ContractError("permute_rows: bad index");
    for (int j = 0; j < d; ++j)
      out[std::size_t(i) * d + j] = xv[std::size_t(src) * d + j];
  }
  return Tensor({t, d}, std::move(out));
}

}  // namespace metatrans
