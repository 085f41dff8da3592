#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "tpred/attention.hpp"
#include "tpred/core.hpp"
#include "tpred/tensor.hpp"

namespace tpred {

// First-stage network: per agent, a recurrent history encoder, gated
// cross-attention over nearby scene vectors and over the other agents'
// history features, then M decoder heads emitting cumulative-offset
// trajectories plus a shared confidence head. Every agent is encoded in its
// own agent-centric frame; trajectories are re-expressed in the scenario's
// common frame before returning so downstream grouping can compare agents.

struct ProposerConfig {
  int d = 128;
  int M = 6;
  int history_layers = 1;
  double scene_radius = 50.0;
  int heads = 4;
  double dropout_rate = 0.1;
  int decoder_hidden = 0;  // 0 => d

  void validate() const {
    if (d <= 0 || heads <= 0 || d % heads != 0) {
      throw ValidationError("proposer: d must be a positive multiple of heads");
    }
    if (M < 1) throw ValidationError("proposer: M must be >= 1");
    if (history_layers < 1) throw ValidationError("proposer: history_layers must be >= 1");
    if (scene_radius < 0.0) throw ValidationError("proposer: scene_radius must be >= 0");
  }

  AttentionConfig attention() const {
    AttentionConfig a;
    a.d = d;
    a.heads = heads;
    a.dropout_rate = dropout_rate;
    return a;
  }
};

// One agent's slice of a ProposalSet. Trajectories and nodes live in the
// scenario's common frame; features are frame-free d-vectors.
struct AgentProposals {
  std::vector<std::vector<Vec2>> trajectories;  // M x F waypoints
  std::vector<double> confidences;              // M, sums to 1
  std::vector<Tensor> traj_nodes;               // M graph handles, each [F,2]
  Tensor conf_node;                             // [1,M]
  std::vector<Tensor> features;                 // M graph handles, each [1,d]
};

struct ProposalSet {
  std::vector<AgentProposals> agents;
  int modes = 0;
  int horizon = 0;
};

// --- parameter initialization -------------------------------------------

namespace detail {

inline constexpr int kStepInputDim = 2 + 3;   // (dx, dy) + one-hot semantic
inline constexpr int kSceneInputDim = 2 + 3;  // (x, y) + one-hot attribute
inline constexpr int kRelPoseDim = 4;         // (dx, dy, cos dtheta, sin dtheta)

inline void init_gru_layer(ParameterStore& store, const std::string& prefix, int in_dim, int d) {
  for (const char* gate : {"z", "r", "n"}) {
    store.create(prefix + ".wx" + gate, {in_dim, d}, Init::kXavier);
    store.create(prefix + ".wh" + gate, {d, d}, Init::kXavier);
    store.create(prefix + ".b" + gate, {d}, Init::kZeros);
  }
}

}  // namespace detail

inline void init_proposer(ParameterStore& store, const ProposerConfig& cfg, int F) {
  cfg.validate();
  if (F < 1) throw ValidationError("proposer: F must be >= 1");
  const int d = cfg.d;
  init_mlp(store, "pro.in_proj", {detail::kStepInputDim, d});
  for (int l = 0; l < cfg.history_layers; ++l) {
    detail::init_gru_layer(store, "pro.gru" + std::to_string(l), d, d);
  }
  init_mlp(store, "pro.scene_proj", {detail::kSceneInputDim, d});
  init_mlp(store, "pro.rel_proj", {detail::kRelPoseDim, d});
  init_gated_attention(store, "pro.scene_att", cfg.attention());
  init_gated_attention(store, "pro.social_att", cfg.attention());
  const int hidden = cfg.decoder_hidden > 0 ? cfg.decoder_hidden : d;
  for (int m = 0; m < cfg.M; ++m) {
    const std::string head = "pro.dec" + std::to_string(m);
    init_mlp(store, head + ".feat", {d, d});
    init_mlp(store, head + ".out", {d, hidden, F * 2});
  }
  init_mlp(store, "pro.conf", {d, hidden, 1});
}

// --- sub-encoders -------------------------------------------------------

namespace detail {

inline Tensor one_hot(int code, int size) {
  std::vector<double> v(static_cast<std::size_t>(size), 0.0);
  if (code < 0 || code >= size) throw ValidationError("one_hot: code out of vocabulary");
  v[static_cast<std::size_t>(code)] = 1.0;
  return constant({1, size}, std::move(v));
}

inline Tensor gru_cell(const Tensor& x, const Tensor& h, const ParameterStore& store,
                       const std::string& prefix) {
  const Tensor z = sigmoid(add_bias(add(matmul(x, store.at(prefix + ".wxz")),
                                        matmul(h, store.at(prefix + ".whz"))),
                                    store.at(prefix + ".bz")));
  const Tensor r = sigmoid(add_bias(add(matmul(x, store.at(prefix + ".wxr")),
                                        matmul(h, store.at(prefix + ".whr"))),
                                    store.at(prefix + ".br")));
  const Tensor n = tanh_op(add_bias(add(matmul(x, store.at(prefix + ".wxn")),
                                        matmul(mul(r, h), store.at(prefix + ".whn"))),
                                    store.at(prefix + ".bn")));
  return add(mul(z, h), mul(rsub_const(1.0, z), n));
}

}  // namespace detail

// Encodes a past track (in the agent's own frame) from per-step displacements
// plus the semantic code; the result is the final hidden state of the
// recurrent stack. Displacement inputs make the encoding translation
// invariant by construction.
inline Tensor encode_history(const AgentTrack& track, const ParameterStore& store,
                             const ProposerConfig& cfg) {
  if (track.past.size() < 2) {
    throw ValidationError("encode_history: history shorter than 2 states");
  }
  const int d = cfg.d;
  std::vector<Tensor> hidden(static_cast<std::size_t>(cfg.history_layers), zeros({1, d}));
  for (std::size_t k = 1; k < track.past.size(); ++k) {
    const double dx = track.past[k].x - track.past[k - 1].x;
    const double dy = track.past[k].y - track.past[k - 1].y;
    const Tensor step = concat(constant({1, 2}, {dx, dy}), detail::one_hot(track.past[k].semantic, 3));
    Tensor x = mlp_forward(step, store, "pro.in_proj");
    for (int l = 0; l < cfg.history_layers; ++l) {
      hidden[static_cast<std::size_t>(l)] =
          detail::gru_cell(x, hidden[static_cast<std::size_t>(l)], store, "pro.gru" + std::to_string(l));
      x = hidden[static_cast<std::size_t>(l)];
    }
  }
  return hidden.back();
}

// Keeps scene vectors with position norm strictly inside the radius and
// embeds each as an affine map of (x, y, one-hot attribute). Returns an
// undefined tensor when nothing survives the filter.
inline Tensor encode_scene_global(const std::vector<SceneVector>& scene, double radius,
                                  const ParameterStore& store) {
  std::vector<Tensor> rows;
  for (const SceneVector& v : scene) {
    if (std::hypot(v.x, v.y) >= radius) continue;
    const Tensor in = concat(constant({1, 2}, {v.x, v.y}), detail::one_hot(v.attribute, 3));
    rows.push_back(mlp_forward(in, store, "pro.scene_proj"));
  }
  if (rows.empty()) return Tensor();
  return stack_rows(rows);
}

// --- propose ------------------------------------------------------------

// Rigid map of a [F,2] trajectory node out of `frame` into its parent:
// row-vector convention, world = local * R^T + t.
inline Tensor trajectory_from_frame(const Tensor& traj, const Pose2& frame) {
  const double c = std::cos(frame.heading);
  const double s = std::sin(frame.heading);
  const Tensor rot = constant({2, 2}, {c, s, -s, c});
  const Tensor t = constant({2}, {frame.x, frame.y});
  return add_bias(matmul(traj, rot), t);
}

inline Tensor trajectory_to_frame(const Tensor& traj, const Pose2& frame) {
  const double c = std::cos(frame.heading);
  const double s = std::sin(frame.heading);
  const Tensor rot = constant({2, 2}, {c, -s, s, c});
  Tensor centered = add_bias(traj, constant({2}, {-frame.x, -frame.y}));
  return matmul(centered, rot);
}

inline ProposalSet propose(const Scenario& scenario, const ParameterStore& store,
                           const ProposerConfig& cfg, bool training, Rng& rng) {
  cfg.validate();
  validate_scenario(scenario);
  const int n_agents = static_cast<int>(scenario.agents.size());

  // Pass 1: per-agent frames and history features, each in its own frame.
  std::vector<Scenario> agent_frames;
  std::vector<Pose2> anchors;
  std::vector<Tensor> histories;
  agent_frames.reserve(static_cast<std::size_t>(n_agents));
  for (int i = 0; i < n_agents; ++i) {
    anchors.push_back(derive_pose(scenario.agents[static_cast<std::size_t>(i)].past).pose);
    agent_frames.push_back(to_agent_frame(scenario, static_cast<std::size_t>(i)));
    histories.push_back(
        encode_history(agent_frames.back().agents[static_cast<std::size_t>(i)], store, cfg));
  }

  ProposalSet out;
  out.modes = cfg.M;
  out.agents.reserve(static_cast<std::size_t>(n_agents));

  const AttentionConfig att = cfg.attention();
  for (int i = 0; i < n_agents; ++i) {
    const Scenario& local = agent_frames[static_cast<std::size_t>(i)];
    const Tensor scene_emb = encode_scene_global(local.scene, cfg.scene_radius, store);
    const Tensor with_scene =
        gated_cross_attention(histories[static_cast<std::size_t>(i)], scene_emb, store,
                              "pro.scene_att", att, training, rng);

    // Social context: neighbor history features tagged with the neighbor's
    // pose relative to this agent. Row order follows agent index, but the
    // attention itself is permutation invariant over rows.
    std::vector<Tensor> social_rows;
    for (int j = 0; j < n_agents; ++j) {
      if (j == i) continue;
      const Vec2 rel = parent_to_frame({anchors[static_cast<std::size_t>(j)].x,
                                        anchors[static_cast<std::size_t>(j)].y},
                                       anchors[static_cast<std::size_t>(i)]);
      const double dth = anchors[static_cast<std::size_t>(j)].heading -
                         anchors[static_cast<std::size_t>(i)].heading;
      const Tensor rel_feat = constant({1, detail::kRelPoseDim},
                                       {rel.x, rel.y, std::cos(dth), std::sin(dth)});
      social_rows.push_back(add(histories[static_cast<std::size_t>(j)],
                                mlp_forward(rel_feat, store, "pro.rel_proj")));
    }
    const Tensor social_ctx = social_rows.empty() ? Tensor() : stack_rows(social_rows);
    const Tensor fused =
        gated_cross_attention(with_scene, social_ctx, store, "pro.social_att", att, training, rng);

    AgentProposals ap;
    ap.trajectories.reserve(static_cast<std::size_t>(cfg.M));
    ap.traj_nodes.reserve(static_cast<std::size_t>(cfg.M));
    ap.features.reserve(static_cast<std::size_t>(cfg.M));
    std::vector<Tensor> logits;
    int horizon = 0;
    for (int m = 0; m < cfg.M; ++m) {
      const std::string head = "pro.dec" + std::to_string(m);
      const Tensor feat = relu(mlp_forward(fused, store, head + ".feat"));
      const Tensor offsets = mlp_forward(feat, store, head + ".out");  // [1, F*2]
      horizon = static_cast<int>(offsets.numel()) / 2;
      const Tensor local_traj = cumsum_rows(reshape(offsets, {horizon, 2}));
      const Tensor common_traj =
          trajectory_from_frame(local_traj, anchors[static_cast<std::size_t>(i)]);
      ap.features.push_back(feat);
      ap.traj_nodes.push_back(common_traj);
      ap.trajectories.push_back(tensor_points(common_traj));
      logits.push_back(mlp_forward(feat, store, "pro.conf"));
    }
    out.horizon = horizon;
    Tensor logit_row = logits.size() == 1 ? reshape(logits[0], {1, 1})
                                          : reshape(concat(logits), {1, cfg.M});
    ap.conf_node = softmax(logit_row, -1);
    ap.confidences.assign(ap.conf_node.data().begin(), ap.conf_node.data().end());
    out.agents.push_back(std::move(ap));
  }
  return out;
}

}  // namespace tpred
