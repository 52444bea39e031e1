#pragma once

// Masked pre-norm transformer encoder over concatenated per-task tokens.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "tgk/nn.hpp"

namespace tgk {

struct TokenSequence {
  Tensor tokens;  // N x D
  std::vector<double> positions;
  std::vector<int> stages;  // backbone stage index per token
  std::vector<int> task_of_token;

  void validate() const {
    const std::size_t n = tokens.rows();
    if (positions.size() != n || stages.size() != n || task_of_token.size() != n)
      throw ShapeError("token sequence: per-token fields must match token count");
    for (double p : positions)
      if (!std::isfinite(p)) throw std::invalid_argument("token sequence: non-finite position");
  }
};

// A[i][j] = 1 iff |pe_i - pe_j| <= 2^{l_i}; the diagonal is always 1.
inline std::vector<std::uint8_t> build_mask(const std::vector<double>& positions, const std::vector<int>& stages) {
  if (positions.size() != stages.size()) throw ShapeError("build_mask: positions and stages differ in length");
  const std::size_t n = positions.size();
  std::vector<std::uint8_t> a(n * n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = std::ldexp(1.0, stages[i]);
    for (std::size_t j = 0; j < n; ++j) a[i * n + j] = (i == j || std::abs(positions[i] - positions[j]) <= r) ? 1 : 0;
  }
  return a;
}

struct EncoderLayer {
  Linear q, k, v, o, ff1, ff2;
};

struct EncoderParams {
  std::size_t heads = 4;
  std::vector<EncoderLayer> layers;

  EncoderParams() = default;
  EncoderParams(const std::string& name, std::size_t dim, int num_layers, std::size_t num_heads, Rng& rng,
                std::size_t ff_mult = 2)
      : heads(num_heads) {
    if (num_heads == 0 || dim % num_heads != 0) throw std::invalid_argument("encoder: dim must be divisible by heads");
    for (int l = 0; l < num_layers; ++l) {
      const std::string p = name + ".l" + std::to_string(l);
      layers.push_back({Linear(p + ".q", dim, dim, rng), Linear(p + ".k", dim, dim, rng), Linear(p + ".v", dim, dim, rng),
                        Linear(p + ".o", dim, dim, rng), Linear(p + ".ff1", dim, ff_mult * dim, rng),
                        Linear(p + ".ff2", ff_mult * dim, dim, rng)});
    }
  }

  void collect(ParamList& out) {
    for (auto& l : layers)
      for (Linear* x : {&l.q, &l.k, &l.v, &l.o, &l.ff1, &l.ff2}) x->collect(out);
  }
};

// Multi-head attention with excluded entries removed before the softmax.
inline Var masked_attention(Tape& t, const Var& x, EncoderLayer& L, std::size_t heads,
                            const std::vector<std::uint8_t>& mask) {
  const std::size_t d = x.cols(), dh = d / heads;
  Var q = L.q(t, x), k = L.k(t, x), v = L.v(t, x);
  std::vector<Var> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = ops::slice_cols(q, h * dh, (h + 1) * dh);
    Var kh = ops::slice_cols(k, h * dh, (h + 1) * dh);
    Var vh = ops::slice_cols(v, h * dh, (h + 1) * dh);
    Var scores = ops::scale(ops::matmul(qh, ops::transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
    outs.push_back(ops::matmul(ops::masked_row_softmax(scores, mask), vh));
  }
  return L.o(t, ops::concat_cols(outs));
}

// x <- x + attn(LN x); x <- x + FF(LN x), per layer.
inline Var masked_encoder_forward(Tape& t, Var x, EncoderParams& p, const std::vector<std::uint8_t>& mask) {
  const std::size_t n = x.rows();
  if (mask.size() != n * n) throw ShapeError("encoder: mask must be N x N");
  for (auto& L : p.layers) {
    if (x.cols() != L.q.in_dim()) throw ShapeError("encoder: token dim does not match parameters");
    x = ops::add(x, masked_attention(t, ops::layer_norm_rows(x), L, p.heads, mask));
    x = ops::add(x, L.ff2(t, ops::relu(L.ff1(t, ops::layer_norm_rows(x)))));
  }
  return x;
}

inline Tensor masked_encoder_forward(const TokenSequence& seq, EncoderParams& p) {
  seq.validate();
  Tape t;
  return masked_encoder_forward(t, t.constant(seq.tokens), p, build_mask(seq.positions, seq.stages)).value();
}

}  // namespace tgk
