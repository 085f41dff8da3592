#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "tpred/tensor.hpp"

namespace tpred {

// Gated cross-attention block: one d-dim query feature attends over K context
// rows, the result is gated against the query, normalized, pushed through a
// small MLP, and added back residually. With an empty context the block is the
// identity, which keeps downstream refinement well-defined when a pool or
// group comes back empty.

struct AttentionConfig {
  int d = 128;
  int heads = 4;
  double dropout_rate = 0.1;
  int phi_hidden = 0;  // 0 => use d

  int head_dim() const {
    if (d <= 0 || heads <= 0 || d % heads != 0) {
      throw ValidationError("attention: d must be a positive multiple of heads");
    }
    return d / heads;
  }
};

// Weights for one block under `prefix`: projections wq/wk/wv, gate weights
// w_input/w_hidden/w_gate (all bias-free), layer-norm affine, and the
// post-norm MLP phi.
inline void init_gated_attention(ParameterStore& store, const std::string& prefix,
                                 const AttentionConfig& cfg) {
  cfg.head_dim();  // validates divisibility
  const int d = cfg.d;
  store.create(prefix + ".wq", {d, d}, Init::kXavier);
  store.create(prefix + ".wk", {d, d}, Init::kXavier);
  store.create(prefix + ".wv", {d, d}, Init::kXavier);
  store.create(prefix + ".w_input", {d, d}, Init::kXavier);
  store.create(prefix + ".w_hidden", {d, d}, Init::kXavier);
  store.create(prefix + ".w_gate", {d, d}, Init::kXavier);
  store.create(prefix + ".ln_gain", {d}, Init::kOnes);
  store.create(prefix + ".ln_bias", {d}, Init::kZeros);
  const int hidden = cfg.phi_hidden > 0 ? cfg.phi_hidden : d;
  init_mlp(store, prefix + ".phi", {d, hidden, d});
}

struct GatedAttentionResult {
  Tensor output;                     // [1, d]
  Tensor gate;                       // [1, d] lambda values; undefined when K = 0
  std::vector<Tensor> head_weights;  // per head [1, K] softmax rows; empty when K = 0
  bool passthrough = false;          // true iff K = 0
};

// query [1,d], context [K,d]. Pass an undefined Tensor as context for K = 0.
inline GatedAttentionResult gated_cross_attention_full(const Tensor& query, const Tensor& context,
                                                       const ParameterStore& store,
                                                       const std::string& prefix,
                                                       const AttentionConfig& cfg, bool training,
                                                       Rng& rng) {
  const int d = cfg.d;
  if (query.rank() != 2 || query.dim(0) != 1 || query.dim(1) != d) {
    throw ValidationError("gated_cross_attention: query must be [1," + std::to_string(d) + "]");
  }
  GatedAttentionResult res;
  if (!context.defined() || context.dim(0) == 0) {
    res.output = query;
    res.passthrough = true;
    return res;
  }
  if (context.rank() != 2 || context.dim(1) != d) {
    throw ValidationError("gated_cross_attention: context width must be " + std::to_string(d));
  }

  const Tensor q = matmul(query, store.at(prefix + ".wq"));    // [1,d]
  const Tensor k = matmul(context, store.at(prefix + ".wk"));  // [K,d]
  const Tensor v = matmul(context, store.at(prefix + ".wv"));  // [K,d]

  const int dk = cfg.head_dim();
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<Tensor> head_outs;
  head_outs.reserve(static_cast<std::size_t>(cfg.heads));
  for (int h = 0; h < cfg.heads; ++h) {
    const Tensor qh = slice_cols(q, h * dk, dk);
    const Tensor kh = slice_cols(k, h * dk, dk);
    const Tensor vh = slice_cols(v, h * dk, dk);
    const Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dk);  // [1,K]
    Tensor weights = softmax(scores, -1);
    res.head_weights.push_back(weights);
    weights = dropout(weights, cfg.dropout_rate, training, rng);
    head_outs.push_back(matmul(weights, vh));  // [1,dk]
  }
  const Tensor attended = cfg.heads == 1 ? head_outs.front() : concat(head_outs);  // [1,d]

  const Tensor gate = sigmoid(add(matmul(query, store.at(prefix + ".w_input")),
                                  matmul(attended, store.at(prefix + ".w_hidden"))));
  res.gate = gate;
  const Tensor fused = add(mul(gate, matmul(query, store.at(prefix + ".w_gate"))),
                           mul(rsub_const(1.0, gate), attended));
  const Tensor normed =
      layer_norm(fused, store.at(prefix + ".ln_gain"), store.at(prefix + ".ln_bias"));
  Tensor phi = mlp_forward(normed, store, prefix + ".phi");
  phi = dropout(phi, cfg.dropout_rate, training, rng);
  res.output = add(query, phi);
  return res;
}

inline Tensor gated_cross_attention(const Tensor& query, const Tensor& context,
                                    const ParameterStore& store, const std::string& prefix,
                                    const AttentionConfig& cfg, bool training, Rng& rng) {
  return gated_cross_attention_full(query, context, store, prefix, cfg, training, rng).output;
}

// Zeroes the final phi layer of one block so the residual branch vanishes and
// the block becomes the identity regardless of context.
inline void zero_attention_output(ParameterStore& store, const std::string& prefix) {
  const int layers = mlp_layer_count(store, prefix + ".phi");
  if (layers == 0) throw ValidationError("zero_attention_output: no phi layers under '" + prefix + "'");
  const std::string last = std::to_string(layers - 1);
  Tensor w = store.at(prefix + ".phi.w" + last);
  Tensor b = store.at(prefix + ".phi.b" + last);
  std::fill(w.data().begin(), w.data().end(), 0.0);
  std::fill(b.data().begin(), b.data().end(), 0.0);
}

}  // namespace tpred
