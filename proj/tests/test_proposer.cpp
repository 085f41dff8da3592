#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "tpred/proposer.hpp"
#include "tpred/synthgen.hpp"

using namespace tpred;

namespace {

AgentTrack make_track(const std::string& id, std::vector<TrajState> past) {
  AgentTrack t;
  t.agent_id = id;
  t.past = std::move(past);
  t.current_pose = derive_pose(t.past).pose;
  return t;
}

Scenario single_agent_scenario() {
  Scenario sc;
  sc.id = "solo";
  sc.frame = Pose2{0.0, 0.0, 0.0};
  sc.agents.push_back(make_track("a", {{0.0, 0.0, 0}, {1.0, 0.1, 0}, {2.0, 0.2, 0}}));
  return sc;
}

Scenario generated(std::uint64_t seed, int index, int agents_min = 2, int agents_max = 4) {
  GeneratorConfig g;
  g.rng_seed = seed;
  g.agents_min = agents_min;
  g.agents_max = agents_max;
  return generate_scenario(g, index);
}

}  // namespace

TEST_CASE("proposals honor the N x M x F shape contract") {
  ProposerConfig cfg;
  cfg.d = 32;
  cfg.M = 4;
  cfg.heads = 4;
  const int F = 6;
  ParameterStore store(11);
  init_proposer(store, cfg, F);
  Rng rng(0);

  const Scenario sc = generated(101, 2);
  const ProposalSet ps = propose(sc, store, cfg, false, rng);
  REQUIRE(ps.agents.size() == sc.agents.size());
  REQUIRE(ps.modes == cfg.M);
  REQUIRE(ps.horizon == F);
  for (const AgentProposals& ap : ps.agents) {
    REQUIRE(ap.trajectories.size() == static_cast<std::size_t>(cfg.M));
    REQUIRE(ap.confidences.size() == static_cast<std::size_t>(cfg.M));
    REQUIRE(ap.traj_nodes.size() == static_cast<std::size_t>(cfg.M));
    REQUIRE(ap.features.size() == static_cast<std::size_t>(cfg.M));
    REQUIRE(ap.conf_node.shape() == ShapeDims{1, cfg.M});
    double total = 0.0;
    for (double c : ap.confidences) {
      REQUIRE(c >= 0.0);
      REQUIRE(std::isfinite(c));
      total += c;
    }
    REQUIRE_THAT(total, Catch::Matchers::WithinAbs(1.0, 1e-6));
    for (int m = 0; m < cfg.M; ++m) {
      REQUIRE(ap.trajectories[static_cast<std::size_t>(m)].size() == static_cast<std::size_t>(F));
      REQUIRE(ap.traj_nodes[static_cast<std::size_t>(m)].shape() == ShapeDims{F, 2});
      REQUIRE(ap.features[static_cast<std::size_t>(m)].shape() == ShapeDims{1, cfg.d});
      for (const Vec2& p : ap.trajectories[static_cast<std::size_t>(m)]) {
        REQUIRE(std::isfinite(p.x));
        REQUIRE(std::isfinite(p.y));
      }
    }
  }
}

TEST_CASE("decoder heads produce distinct modes") {
  ProposerConfig cfg;
  cfg.d = 32;
  cfg.M = 5;
  ParameterStore store(13);
  init_proposer(store, cfg, 8);
  Rng rng(0);
  const ProposalSet ps = propose(generated(7, 0), store, cfg, false, rng);
  const auto& trajs = ps.agents[0].trajectories;
  for (std::size_t a = 0; a < trajs.size(); ++a) {
    for (std::size_t b = a + 1; b < trajs.size(); ++b) {
      double gap = 0.0;
      for (std::size_t k = 0; k < trajs[a].size(); ++k) gap = std::max(gap, dist(trajs[a][k], trajs[b][k]));
      REQUIRE(gap > 1e-9);
    }
  }
}

TEST_CASE("agent outputs ignore the ordering of other agents") {
  ProposerConfig cfg;
  cfg.d = 32;
  cfg.M = 3;
  ParameterStore store(17);
  init_proposer(store, cfg, 5);
  Rng rng(0);

  const Scenario base = generated(55, 1, 3, 3);
  REQUIRE(base.agents.size() == 3);
  Scenario swapped = base;
  std::swap(swapped.agents[1], swapped.agents[2]);

  const ProposalSet pa = propose(base, store, cfg, false, rng);
  const ProposalSet pb = propose(swapped, store, cfg, false, rng);
  for (int m = 0; m < cfg.M; ++m) {
    for (int f = 0; f < 5; ++f) {
      const Vec2 u = pa.agents[0].trajectories[static_cast<std::size_t>(m)][static_cast<std::size_t>(f)];
      const Vec2 v = pb.agents[0].trajectories[static_cast<std::size_t>(m)][static_cast<std::size_t>(f)];
      REQUIRE_THAT(u.x, Catch::Matchers::WithinAbs(v.x, 1e-9));
      REQUIRE_THAT(u.y, Catch::Matchers::WithinAbs(v.y, 1e-9));
    }
    REQUIRE_THAT(pa.agents[0].confidences[static_cast<std::size_t>(m)],
                 Catch::Matchers::WithinAbs(pb.agents[0].confidences[static_cast<std::size_t>(m)], 1e-9));
  }
  // Agents 1 and 2 swap slots but keep their own predictions.
  for (int f = 0; f < 5; ++f) {
    const Vec2 u = pa.agents[1].trajectories[0][static_cast<std::size_t>(f)];
    const Vec2 v = pb.agents[2].trajectories[0][static_cast<std::size_t>(f)];
    REQUIRE_THAT(u.x, Catch::Matchers::WithinAbs(v.x, 1e-9));
    REQUIRE_THAT(u.y, Catch::Matchers::WithinAbs(v.y, 1e-9));
  }
}

TEST_CASE("history encoding is exactly translation invariant") {
  ProposerConfig cfg;
  cfg.d = 16;
  cfg.heads = 2;
  ParameterStore store(19);
  init_proposer(store, cfg, 4);

  // Dyadic coordinates and a dyadic shift keep the displacements bit-identical.
  const AgentTrack a =
      make_track("a", {{0.0, 0.0, 0}, {0.5, 0.25, 0}, {1.0, 0.5, 0}, {1.75, 0.75, 0}});
  const AgentTrack b = make_track(
      "b", {{128.5, -64.25, 0}, {129.0, -64.0, 0}, {129.5, -63.75, 0}, {130.25, -63.5, 0}});
  const Tensor ha = encode_history(a, store, cfg);
  const Tensor hb = encode_history(b, store, cfg);
  REQUIRE(ha.data() == hb.data());
}

TEST_CASE("a lone agent with no scene passes attention unchanged") {
  ProposerConfig cfg;
  cfg.d = 16;
  cfg.M = 2;
  cfg.heads = 2;
  ParameterStore store(23);
  init_proposer(store, cfg, 3);
  Rng rng(0);
  const Scenario sc = single_agent_scenario();
  const ProposalSet ps = propose(sc, store, cfg, false, rng);
  REQUIRE(ps.agents.size() == 1);
  for (const auto& traj : ps.agents[0].trajectories) {
    for (const Vec2& p : traj) {
      REQUIRE(std::isfinite(p.x));
      REQUIRE(std::isfinite(p.y));
    }
  }
  REQUIRE_THAT(ps.agents[0].confidences[0] + ps.agents[0].confidences[1],
               Catch::Matchers::WithinAbs(1.0, 1e-9));
}

TEST_CASE("scene vectors sit strictly inside the radius") {
  ProposerConfig cfg;
  cfg.d = 16;
  cfg.heads = 2;
  ParameterStore store(29);
  init_proposer(store, cfg, 3);

  const std::vector<SceneVector> scene = {{3.0, 4.0, 0}};  // norm exactly 5
  REQUIRE_FALSE(encode_scene_global(scene, 5.0, store).defined());
  const Tensor in = encode_scene_global(scene, 5.0 + 1e-9, store);
  REQUIRE(in.defined());
  REQUIRE(in.shape() == ShapeDims{1, cfg.d});
  // A vector at the origin is still excluded by a zero radius.
  REQUIRE_FALSE(encode_scene_global({{0.0, 0.0, 0}}, 0.0, store).defined());
}

TEST_CASE("history encoder gradients match finite differences") {
  ProposerConfig cfg;
  cfg.d = 8;
  cfg.heads = 2;
  ParameterStore store(31);
  init_proposer(store, cfg, 2);
  const AgentTrack track =
      make_track("a", {{0.0, 0.0, 0}, {0.9, 0.2, 0}, {1.7, 0.5, 1}, {2.4, 0.9, 0}});
  const double err =
      grad_check([&] { return sum(encode_history(track, store, cfg)); }, store, 1e-5);
  REQUIRE(err < 1e-4);
}

TEST_CASE("full proposer gradients reach every consumed parameter") {
  ProposerConfig cfg;
  cfg.d = 8;
  cfg.M = 2;
  cfg.heads = 2;
  ParameterStore store(37);
  init_proposer(store, cfg, 3);
  Rng rng(0);
  const Scenario sc = generated(9, 0);
  store.zero_grads();
  Tensor loss;
  {
    const ProposalSet ps = propose(sc, store, cfg, false, rng);
    std::vector<Tensor> parts;
    for (const AgentProposals& ap : ps.agents) {
      for (const Tensor& t : ap.traj_nodes) parts.push_back(sum(t));
      parts.push_back(sum(ap.conf_node));
    }
    loss = sum(concat(parts));
  }
  backward(loss);
  for (const auto& [name, t] : store.items()) {
    INFO(name);
    REQUIRE(t.has_grad());
  }
}
