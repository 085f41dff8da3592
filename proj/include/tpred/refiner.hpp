#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "tpred/attention.hpp"
#include "tpred/core.hpp"
#include "tpred/proposer.hpp"
#include "tpred/tensor.hpp"

namespace tpred {

// Second-stage refinement: every proposal is refined independently by
// attending over the scene vectors inside its tubular region and over nearby
// confident neighbor proposals, then a regression branch turns the fused
// feature into mean offsets plus positive scales and a classification branch
// re-scores the modes.

struct RefinerConfig {
  double tube_radius = 20.0;      // tau: waypoint disk radius for scene pooling
  double group_distance = 10.0;   // D: trajectory min-distance bound
  double group_confidence = 0.1;  // script-T: neighbor confidence floor
  int d = 128;
  int heads = 4;
  double dropout_rate = 0.1;
  int reg_hidden = 0;  // 0 => d

  void validate() const {
    if (tube_radius <= 0.0) throw ValidationError("refiner: tube_radius must be > 0");
    if (group_distance <= 0.0) throw ValidationError("refiner: group_distance must be > 0");
    if (group_confidence < 0.0 || group_confidence >= 1.0) {
      throw ValidationError("refiner: group_confidence must be in [0,1)");
    }
    if (d <= 0 || heads <= 0 || d % heads != 0) {
      throw ValidationError("refiner: d must be a positive multiple of heads");
    }
  }

  AttentionConfig attention() const {
    AttentionConfig a;
    a.d = d;
    a.heads = heads;
    a.dropout_rate = dropout_rate;
    return a;
  }
};

struct SceneEmbeddings {
  Tensor psi;                       // [L,d]; undefined when empty
  std::vector<SceneVector> source;  // positionally aligned with psi rows

  std::size_t size() const { return source.size(); }
};

struct TubePool {
  std::vector<int> member_indices;  // strictly increasing rows of the embeddings
  int proposal_mode = 0;
};

struct ProposalGroupRef {
  int agent_index = 0;
  int mode = 0;
};

struct ProposalGroup {
  std::vector<Tensor> member_features;        // [1,d] each
  std::vector<ProposalGroupRef> member_refs;  // ascending (agent, mode)
};

struct RefinedMode {
  std::vector<Vec2> mean;   // F waypoints, target frame
  std::vector<Vec2> scale;  // F per-axis Laplace scales, all > 1e-3
  double confidence = 0.0;
  Tensor mean_node;   // [F,2]
  Tensor scale_node;  // [F,2]
};

struct RefinedPrediction {
  std::vector<RefinedMode> modes;
  Tensor conf_node;  // [1,M]
  Pose2 anchor;      // pose of the target frame within the proposal set's frame
  std::vector<TubePool> pools;                        // per-mode provenance
  std::vector<std::vector<ProposalGroupRef>> groups;  // per-mode provenance
};

// --- parameters ---------------------------------------------------------

inline void init_refiner(ParameterStore& store, const RefinerConfig& cfg, int F, int M) {
  cfg.validate();
  if (F < 1 || M < 1) throw ValidationError("refiner: F and M must be >= 1");
  const int d = cfg.d;
  init_mlp(store, "ref.scene_proj", {detail::kSceneInputDim, d});
  init_gated_attention(store, "ref.tube_att", cfg.attention());
  init_gated_attention(store, "ref.nbr_att", cfg.attention());
  const int hidden = cfg.reg_hidden > 0 ? cfg.reg_hidden : d;
  init_mlp(store, "ref.reg", {2 * d, hidden, F * 4});  // F x (2 offsets + 2 scale preacts)
  init_mlp(store, "ref.cls", {2 * d * M, hidden, M});
}

// Zeroes the final layers feeding refinement outputs: the regression MLP (so
// mean offsets and scale pre-activations vanish) and both attention blocks'
// phi tails (so attention becomes the identity). After this, refined means
// equal the proposals they anchor to.
inline void zero_refiner_outputs(ParameterStore& store) {
  for (const char* prefix : {"ref.tube_att", "ref.nbr_att"}) zero_attention_output(store, prefix);
  const int layers = mlp_layer_count(store, "ref.reg");
  const std::string last = std::to_string(layers - 1);
  Tensor w = store.at("ref.reg.w" + last);
  Tensor b = store.at("ref.reg.b" + last);
  std::fill(w.data().begin(), w.data().end(), 0.0);
  std::fill(b.data().begin(), b.data().end(), 0.0);
}

// --- scene embedding and pooling ----------------------------------------

// Linear projection of every scene vector into d dims. The scene must already
// be expressed in the target's frame.
inline SceneEmbeddings embed_scene(const std::vector<SceneVector>& scene, const ParameterStore& store) {
  SceneEmbeddings out;
  out.source = scene;
  if (scene.empty()) return out;
  std::vector<Tensor> rows;
  rows.reserve(scene.size());
  for (const SceneVector& v : scene) {
    const Tensor in = concat(constant({1, 2}, {v.x, v.y}), detail::one_hot(v.attribute, 3));
    rows.push_back(mlp_forward(in, store, "ref.scene_proj"));
  }
  out.psi = stack_rows(rows);
  return out;
}

// Tubular region pooling: the union of strict tau-disks around every waypoint
// of one proposal, with set semantics. Distances use scene positions only.
inline TubePool tubular_region_pooling(const std::vector<Vec2>& proposal,
                                       const SceneEmbeddings& embeddings, double tau) {
  if (tau <= 0.0) throw ValidationError("tubular_region_pooling: tau must be > 0");
  TubePool pool;
  for (std::size_t l = 0; l < embeddings.source.size(); ++l) {
    const Vec2 p{embeddings.source[l].x, embeddings.source[l].y};
    for (const Vec2& w : proposal) {
      if (dist(p, w) < tau) {
        pool.member_indices.push_back(static_cast<int>(l));
        break;
      }
    }
  }
  return pool;
}

// Minimum over time-aligned steps of the per-step Euclidean distance. This is
// not a closest-pair search: step f is only compared with step f.
inline double trajectory_min_distance(const std::vector<Vec2>& a, const std::vector<Vec2>& b) {
  if (a.size() != b.size()) {
    throw ValidationError("trajectory_min_distance: length mismatch " + std::to_string(a.size()) +
                          " vs " + std::to_string(b.size()));
  }
  if (a.empty()) throw ValidationError("trajectory_min_distance: empty trajectories");
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t f = 0; f < a.size(); ++f) best = std::min(best, dist(a[f], b[f]));
  return best;
}

// Distance-wise proposal grouping: walks the other agents' modes in ascending
// (agent, mode) order and keeps those that are confident enough and whose
// trajectory passes close enough to the queried proposal. The target's own
// modes are never candidates.
inline ProposalGroup distance_proposal_grouping(int target_mode, const ProposalSet& proposals,
                                                double group_distance, double group_confidence,
                                                int target_agent = 0) {
  if (proposals.agents.empty()) throw ValidationError("grouping: empty proposal set");
  if (target_agent < 0 || target_agent >= static_cast<int>(proposals.agents.size())) {
    throw ValidationError("grouping: target agent out of range");
  }
  const AgentProposals& target = proposals.agents[static_cast<std::size_t>(target_agent)];
  if (target_mode < 0 || target_mode >= static_cast<int>(target.trajectories.size())) {
    throw ValidationError("grouping: target mode out of range");
  }
  const std::vector<Vec2>& query = target.trajectories[static_cast<std::size_t>(target_mode)];
  ProposalGroup group;
  for (int i = 0; i < static_cast<int>(proposals.agents.size()); ++i) {
    if (i == target_agent) continue;
    const AgentProposals& agent = proposals.agents[static_cast<std::size_t>(i)];
    for (int m = 0; m < static_cast<int>(agent.trajectories.size()); ++m) {
      if (agent.confidences[static_cast<std::size_t>(m)] <= group_confidence) continue;
      if (trajectory_min_distance(query, agent.trajectories[static_cast<std::size_t>(m)]) >=
          group_distance) {
        continue;
      }
      group.member_features.push_back(agent.features[static_cast<std::size_t>(m)]);
      group.member_refs.push_back({i, m});
    }
  }
  return group;
}

// --- refinement ---------------------------------------------------------

namespace detail {

inline std::vector<SceneVector> scene_to_frame(const std::vector<SceneVector>& scene,
                                               const Pose2& frame) {
  std::vector<SceneVector> out;
  out.reserve(scene.size());
  for (const SceneVector& v : scene) {
    const Vec2 p = parent_to_frame({v.x, v.y}, frame);
    out.push_back({p.x, p.y, v.attribute});
  }
  return out;
}

inline std::vector<Vec2> points_to_frame(const std::vector<Vec2>& pts, const Pose2& frame) {
  std::vector<Vec2> out;
  out.reserve(pts.size());
  for (const Vec2& p : pts) out.push_back(parent_to_frame(p, frame));
  return out;
}

inline bool is_identity(const Pose2& p) { return p.x == 0.0 && p.y == 0.0 && p.heading == 0.0; }

}  // namespace detail

// Refines every mode of `target_agent` once. The scenario and the proposal
// set share one frame; the refinement itself runs in the target's own frame
// (anchor), which is the identity when the target is agent 0 of a scenario
// already expressed target-centrically.
inline RefinedPrediction refine(const Scenario& scenario, const ProposalSet& proposals,
                                const ParameterStore& store, const RefinerConfig& cfg, bool training,
                                Rng& rng, int target_agent = 0) {
  cfg.validate();
  if (scenario.agents.size() != proposals.agents.size()) {
    throw ValidationError("refine: scenario and proposal set disagree on agent count");
  }
  if (target_agent < 0 || target_agent >= static_cast<int>(proposals.agents.size())) {
    throw ValidationError("refine: target agent out of range");
  }
  const int M = static_cast<int>(proposals.agents[static_cast<std::size_t>(target_agent)].trajectories.size());
  if (M < 1) throw ValidationError("refine: target has no proposals");

  const Pose2 anchor = target_agent == 0
                           ? Pose2{0.0, 0.0, 0.0}
                           : derive_pose(scenario.agents[static_cast<std::size_t>(target_agent)].past).pose;
  const bool identity = detail::is_identity(anchor);

  const std::vector<SceneVector> scene =
      identity ? scenario.scene : detail::scene_to_frame(scenario.scene, anchor);
  const SceneEmbeddings embeddings = embed_scene(scene, store);

  const AgentProposals& target = proposals.agents[static_cast<std::size_t>(target_agent)];
  const AttentionConfig att = cfg.attention();

  RefinedPrediction out;
  out.anchor = anchor;
  out.modes.resize(static_cast<std::size_t>(M));
  std::vector<Tensor> joints(static_cast<std::size_t>(M));
  for (int m = 0; m < M; ++m) {
    const std::vector<Vec2> traj_local =
        identity ? target.trajectories[static_cast<std::size_t>(m)]
                 : detail::points_to_frame(target.trajectories[static_cast<std::size_t>(m)], anchor);

    TubePool pool = tubular_region_pooling(traj_local, embeddings, cfg.tube_radius);
    pool.proposal_mode = m;
    const Tensor tube_ctx =
        pool.member_indices.empty() ? Tensor() : gather_rows(embeddings.psi, pool.member_indices);

    ProposalGroup group = distance_proposal_grouping(m, proposals, cfg.group_distance,
                                                     cfg.group_confidence, target_agent);
    const Tensor group_ctx =
        group.member_features.empty() ? Tensor() : stack_rows(group.member_features);

    const Tensor query = target.features[static_cast<std::size_t>(m)];
    const Tensor t_feat = gated_cross_attention(query, tube_ctx, store, "ref.tube_att", att, training, rng);
    const Tensor p_feat = gated_cross_attention(query, group_ctx, store, "ref.nbr_att", att, training, rng);
    joints[static_cast<std::size_t>(m)] = concat(t_feat, p_feat);  // [1, 2d]

    const Tensor reg = mlp_forward(joints[static_cast<std::size_t>(m)], store, "ref.reg");  // [1, F*4]
    const int F = static_cast<int>(reg.numel()) / 4;
    const Tensor offsets = reshape(slice_flat(reshape(reg, {F * 4}), 0, F * 2), {F, 2});
    const Tensor scale_pre = reshape(slice_flat(reshape(reg, {F * 4}), F * 2, F * 2), {F, 2});

    const Tensor proposal_node =
        identity ? target.traj_nodes[static_cast<std::size_t>(m)]
                 : trajectory_to_frame(target.traj_nodes[static_cast<std::size_t>(m)], anchor);
    RefinedMode& mode = out.modes[static_cast<std::size_t>(m)];
    mode.mean_node = add(proposal_node, offsets);
    mode.scale_node = add_scalar(softplus(scale_pre), 1e-3);
    mode.mean = tensor_points(mode.mean_node);
    mode.scale = tensor_points(mode.scale_node);
    out.pools.push_back(std::move(pool));
    out.groups.push_back(std::move(group.member_refs));
  }

  const Tensor cls_in = M == 1 ? joints[0] : concat(joints);
  out.conf_node = softmax(mlp_forward(cls_in, store, "ref.cls"), -1);
  for (int m = 0; m < M; ++m) {
    out.modes[static_cast<std::size_t>(m)].confidence = out.conf_node.data()[static_cast<std::size_t>(m)];
  }
  return out;
}

// Refines every agent as its own target with shared weights. Entry a is agent
// a's refinement in agent a's frame (see RefinedPrediction::anchor).
inline std::vector<RefinedPrediction> refine_all(const Scenario& scenario,
                                                 const ProposalSet& proposals,
                                                 const ParameterStore& store, const RefinerConfig& cfg,
                                                 bool training, Rng& rng) {
  std::vector<RefinedPrediction> out;
  out.reserve(proposals.agents.size());
  for (int a = 0; a < static_cast<int>(proposals.agents.size()); ++a) {
    out.push_back(refine(scenario, proposals, store, cfg, training, rng, a));
  }
  return out;
}

}  // namespace tpred
