// Building blocks: embedding lookup, GRU cell, bidirectional GRU encoder
// and a two-layer MLP. Per-step states are 1xN row vectors; weights are
// stored input-major so a step is x . W.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cvaekd/tensor.hpp"

namespace cvaekd {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

struct EmbeddingTable {
  Tensor weight;  // V x d_emb; the pad row is frozen at zeros
  int pad_id = 0;
  bool trainable = true;

  static EmbeddingTable init(std::size_t vocab_size, std::size_t dim,
                             int pad_id, Rng& rng, double scale = 0.1) {
    EmbeddingTable t;
    t.weight = uniform_init(vocab_size, dim, scale, rng);
    t.pad_id = pad_id;
    for (std::size_t j = 0; j < dim; ++j)
      t.weight.at(static_cast<std::size_t>(pad_id), j) = 0.0;
    return t;
  }

  void collect(std::vector<NamedParam>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
  }
};

inline Tensor embed(const std::vector<int>& ids, const EmbeddingTable& table) {
  Tensor rows = embedding_lookup(table.weight, ids, table.pad_id);
  if (!table.trainable) rows.set_requires_grad(false);
  return rows;
}

struct GruCellParams {
  Tensor W_c, U_c, b_c;  // update gate
  Tensor W_r, U_r, b_r;  // reset gate
  Tensor W, U, b;        // candidate
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;

  static GruCellParams init(std::size_t input_dim, std::size_t hidden_dim,
                            Rng& rng) {
    GruCellParams p;
    p.input_dim = input_dim;
    p.hidden_dim = hidden_dim;
    p.W_c = glorot_init(input_dim, hidden_dim, rng);
    p.U_c = glorot_init(hidden_dim, hidden_dim, rng);
    p.b_c = zeros_param(1, hidden_dim);
    p.W_r = glorot_init(input_dim, hidden_dim, rng);
    p.U_r = glorot_init(hidden_dim, hidden_dim, rng);
    p.b_r = zeros_param(1, hidden_dim);
    p.W = glorot_init(input_dim, hidden_dim, rng);
    p.U = glorot_init(hidden_dim, hidden_dim, rng);
    p.b = zeros_param(1, hidden_dim);
    return p;
  }

  void collect(std::vector<NamedParam>& out, const std::string& prefix) const {
    out.push_back({prefix + ".W_c", W_c});
    out.push_back({prefix + ".U_c", U_c});
    out.push_back({prefix + ".b_c", b_c});
    out.push_back({prefix + ".W_r", W_r});
    out.push_back({prefix + ".U_r", U_r});
    out.push_back({prefix + ".b_r", b_r});
    out.push_back({prefix + ".W", W});
    out.push_back({prefix + ".U", U});
    out.push_back({prefix + ".b", b});
  }
};

// One GRU step. The interpolation keeps the published convention
// h = (1 - c) * h_prev + c * h_candidate.
inline Tensor gru_cell(const Tensor& x, const Tensor& h_prev,
                       const GruCellParams& p) {
  Tensor c = sigmoid(add(add(matmul(x, p.W_c), matmul(h_prev, p.U_c)), p.b_c));
  Tensor r = sigmoid(add(add(matmul(x, p.W_r), matmul(h_prev, p.U_r)), p.b_r));
  Tensor cand =
      tanh(add(add(matmul(x, p.W), matmul(mul(r, h_prev), p.U)), p.b));
  Tensor keep = add_scalar(neg(c), 1.0);  // 1 - c
  return add(mul(keep, h_prev), mul(c, cand));
}

struct BiGruOutput {
  Tensor states;  // T x 2H; rows at and beyond len are zero
  Tensor final;   // 1 x 2H: [forward at len-1 ; backward at 0]
};

// Both directions run over the first len rows only, so pad content beyond
// len can never leak into the states.
inline BiGruOutput bigru_encode(const Tensor& seq, std::size_t len,
                                const GruCellParams& fwd,
                                const GruCellParams& bwd) {
  if (len == 0) throw ShapeError("bigru_encode: len == 0");
  if (len > seq.rows()) throw ShapeError("bigru_encode: len exceeds rows");
  const std::size_t H = fwd.hidden_dim;
  if (bwd.hidden_dim != H)
    throw ShapeError("bigru_encode: direction widths differ");

  std::vector<Tensor> h_f(len), h_b(len);
  Tensor h = Tensor(1, H);
  for (std::size_t t = 0; t < len; ++t) {
    h = gru_cell(row(seq, t), h, fwd);
    h_f[t] = h;
  }
  h = Tensor(1, H);
  for (std::size_t i = 0; i < len; ++i) {
    const std::size_t t = len - 1 - i;
    h = gru_cell(row(seq, t), h, bwd);
    h_b[t] = h;
  }

  std::vector<Tensor> rows;
  rows.reserve(seq.rows());
  for (std::size_t t = 0; t < len; ++t)
    rows.push_back(concat_cols(h_f[t], h_b[t]));
  if (len < seq.rows()) {
    Tensor zero(1, 2 * H);
    for (std::size_t t = len; t < seq.rows(); ++t) rows.push_back(zero);
  }

  BiGruOutput out;
  out.states = stack_rows(rows);
  out.final = concat_cols(h_f[len - 1], h_b[0]);
  return out;
}

struct MlpParams {
  Tensor W1, b1, W2, b2;
  std::size_t input_dim = 0, hidden_dim = 0, output_dim = 0;

  static MlpParams init(std::size_t input_dim, std::size_t hidden_dim,
                        std::size_t output_dim, Rng& rng) {
    MlpParams p;
    p.input_dim = input_dim;
    p.hidden_dim = hidden_dim;
    p.output_dim = output_dim;
    p.W1 = glorot_init(input_dim, hidden_dim, rng);
    p.b1 = zeros_param(1, hidden_dim);
    p.W2 = glorot_init(hidden_dim, output_dim, rng);
    p.b2 = zeros_param(1, output_dim);
    return p;
  }

  void collect(std::vector<NamedParam>& out, const std::string& prefix) const {
    out.push_back({prefix + ".W1", W1});
    out.push_back({prefix + ".b1", b1});
    out.push_back({prefix + ".W2", W2});
    out.push_back({prefix + ".b2", b2});
  }
};

inline Tensor mlp2(const Tensor& x, const MlpParams& p) {
  return add(matmul(tanh(add(matmul(x, p.W1), p.b1)), p.W2), p.b2);
}

// Masked mean over the first len rows, as a constant-weight matmul.
inline Tensor mean_first_rows(const Tensor& m, std::size_t len) {
  if (len == 0 || len > m.rows())
    throw ShapeError("mean_first_rows: bad len");
  Tensor w(1, m.rows());
  for (std::size_t t = 0; t < len; ++t)
    w.at(0, t) = 1.0 / static_cast<double>(len);
  return matmul(w, m);
}

}  // namespace cvaekd
