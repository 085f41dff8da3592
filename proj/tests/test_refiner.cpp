#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "tpred/refiner.hpp"
#include "tpred/synthgen.hpp"

using namespace tpred;

namespace {

// --- straight-line re-implementation of the gated attention block --------
// Plain std::vector math, no graph: row-vector matmul, per-head softmax
// attention, sigmoid gate, layer norm (population variance, eps 1e-5 inside
// the root), two-layer phi with ReLU, residual add.

using Row = std::vector<double>;

Row matvec(const Row& x, const std::vector<double>& w, int in, int out) {
  Row y(static_cast<std::size_t>(out), 0.0);
  for (int k = 0; k < in; ++k) {
    for (int j = 0; j < out; ++j) {
      y[static_cast<std::size_t>(j)] +=
          x[static_cast<std::size_t>(k)] * w[static_cast<std::size_t>(k) * out + j];
    }
  }
  return y;
}

double ref_sigmoid(double v) {
  return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

struct OracleResult {
  Row output;
  Row gate;
  std::vector<Row> head_weights;
};

OracleResult oracle_attention(const Row& query, const std::vector<Row>& context,
                              const ParameterStore& store, const std::string& prefix, int d,
                              int heads) {
  auto w = [&](const std::string& name) { return store.at(prefix + "." + name).data(); };
  const int dk = d / heads;
  const int K = static_cast<int>(context.size());

  const Row q = matvec(query, w("wq"), d, d);
  std::vector<Row> k(context.size()), v(context.size());
  for (int i = 0; i < K; ++i) {
    k[static_cast<std::size_t>(i)] = matvec(context[static_cast<std::size_t>(i)], w("wk"), d, d);
    v[static_cast<std::size_t>(i)] = matvec(context[static_cast<std::size_t>(i)], w("wv"), d, d);
  }

  OracleResult res;
  Row attended(static_cast<std::size_t>(d), 0.0);
  for (int h = 0; h < heads; ++h) {
    Row scores(static_cast<std::size_t>(K), 0.0);
    for (int i = 0; i < K; ++i) {
      double s = 0.0;
      for (int c = 0; c < dk; ++c) {
        s += q[static_cast<std::size_t>(h * dk + c)] *
             k[static_cast<std::size_t>(i)][static_cast<std::size_t>(h * dk + c)];
      }
      scores[static_cast<std::size_t>(i)] = s / std::sqrt(static_cast<double>(dk));
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (double s : scores) mx = std::max(mx, s);
    Row weights(static_cast<std::size_t>(K));
    double denom = 0.0;
    for (int i = 0; i < K; ++i) {
      weights[static_cast<std::size_t>(i)] = std::exp(scores[static_cast<std::size_t>(i)] - mx);
      denom += weights[static_cast<std::size_t>(i)];
    }
    for (double& x : weights) x /= denom;
    res.head_weights.push_back(weights);
    for (int c = 0; c < dk; ++c) {
      double acc = 0.0;
      for (int i = 0; i < K; ++i) {
        acc += weights[static_cast<std::size_t>(i)] *
               v[static_cast<std::size_t>(i)][static_cast<std::size_t>(h * dk + c)];
      }
      attended[static_cast<std::size_t>(h * dk + c)] = acc;
    }
  }

  const Row gi = matvec(query, w("w_input"), d, d);
  const Row gh = matvec(attended, w("w_hidden"), d, d);
  res.gate.resize(static_cast<std::size_t>(d));
  for (int j = 0; j < d; ++j) {
    res.gate[static_cast<std::size_t>(j)] =
        ref_sigmoid(gi[static_cast<std::size_t>(j)] + gh[static_cast<std::size_t>(j)]);
  }
  const Row gq = matvec(query, w("w_gate"), d, d);
  Row fused(static_cast<std::size_t>(d));
  for (int j = 0; j < d; ++j) {
    const double lam = res.gate[static_cast<std::size_t>(j)];
    fused[static_cast<std::size_t>(j)] = lam * gq[static_cast<std::size_t>(j)] +
                                         (1.0 - lam) * attended[static_cast<std::size_t>(j)];
  }

  double mu = 0.0;
  for (double x : fused) mu += x;
  mu /= static_cast<double>(d);
  double var = 0.0;
  for (double x : fused) var += (x - mu) * (x - mu);
  var /= static_cast<double>(d);
  const double inv_sigma = 1.0 / std::sqrt(var + 1e-5);
  Row normed(static_cast<std::size_t>(d));
  const Row& gain = w("ln_gain");
  const Row& bias = w("ln_bias");
  for (int j = 0; j < d; ++j) {
    normed[static_cast<std::size_t>(j)] = (fused[static_cast<std::size_t>(j)] - mu) * inv_sigma *
                                              gain[static_cast<std::size_t>(j)] +
                                          bias[static_cast<std::size_t>(j)];
  }

  Row h0 = matvec(normed, w("phi.w0"), d, d);
  const Row& b0 = w("phi.b0");
  for (int j = 0; j < d; ++j) {
    h0[static_cast<std::size_t>(j)] += b0[static_cast<std::size_t>(j)];
    if (h0[static_cast<std::size_t>(j)] < 0.0) h0[static_cast<std::size_t>(j)] = 0.0;
  }
  Row phi = matvec(h0, w("phi.w1"), d, d);
  const Row& b1 = w("phi.b1");
  res.output.resize(static_cast<std::size_t>(d));
  for (int j = 0; j < d; ++j) {
    res.output[static_cast<std::size_t>(j)] =
        query[static_cast<std::size_t>(j)] +
        (phi[static_cast<std::size_t>(j)] + b1[static_cast<std::size_t>(j)]);
  }
  return res;
}

Tensor row_tensor(const Row& r) {
  return constant({1, static_cast<int>(r.size())}, std::vector<double>(r));
}

std::vector<Vec2> line(Vec2 start, Vec2 step, int n) {
  std::vector<Vec2> out;
  for (int i = 0; i < n; ++i) out.push_back({start.x + step.x * i, start.y + step.y * i});
  return out;
}

// Minimal proposal set carrying only what pooling/grouping consume.
ProposalSet stub_proposals(const std::vector<std::vector<std::vector<Vec2>>>& trajs,
                           const std::vector<std::vector<double>>& confs) {
  ProposalSet ps;
  ps.modes = static_cast<int>(trajs[0].size());
  ps.horizon = static_cast<int>(trajs[0][0].size());
  for (std::size_t a = 0; a < trajs.size(); ++a) {
    AgentProposals ap;
    ap.trajectories = trajs[a];
    ap.confidences = confs[a];
    for (std::size_t m = 0; m < trajs[a].size(); ++m) {
      ap.features.push_back(constant({1, 4}, {static_cast<double>(a), static_cast<double>(m), 0.0, 1.0}));
    }
    ps.agents.push_back(std::move(ap));
  }
  return ps;
}

}  // namespace

TEST_CASE("gated attention matches a straight-line reimplementation") {
  const int d = 8;
  const int heads = 2;
  AttentionConfig cfg;
  cfg.d = d;
  cfg.heads = heads;
  Rng data_rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    ParameterStore store(100 + static_cast<std::uint64_t>(trial));
    init_gated_attention(store, "att", cfg);
    const int K = 1 + trial % 5;
    Row query(static_cast<std::size_t>(d));
    for (double& x : query) x = data_rng.normal();
    std::vector<Row> context(static_cast<std::size_t>(K), Row(static_cast<std::size_t>(d)));
    for (Row& r : context) {
      for (double& x : r) x = data_rng.normal();
    }
    std::vector<Tensor> ctx_rows;
    for (const Row& r : context) ctx_rows.push_back(row_tensor(r));
    Rng rng(0);
    const GatedAttentionResult got = gated_cross_attention_full(
        row_tensor(query), stack_rows(ctx_rows), store, "att", cfg, false, rng);
    const OracleResult want = oracle_attention(query, context, store, "att", d, heads);

    REQUIRE_FALSE(got.passthrough);
    for (int j = 0; j < d; ++j) {
      REQUIRE_THAT(got.output.data()[static_cast<std::size_t>(j)],
                   Catch::Matchers::WithinAbs(want.output[static_cast<std::size_t>(j)], 1e-12));
      REQUIRE_THAT(got.gate.data()[static_cast<std::size_t>(j)],
                   Catch::Matchers::WithinAbs(want.gate[static_cast<std::size_t>(j)], 1e-12));
    }
    REQUIRE(got.head_weights.size() == static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      double total = 0.0;
      for (int i = 0; i < K; ++i) {
        const double wv = got.head_weights[static_cast<std::size_t>(h)].data()[static_cast<std::size_t>(i)];
        REQUIRE_THAT(wv, Catch::Matchers::WithinAbs(
                             want.head_weights[static_cast<std::size_t>(h)][static_cast<std::size_t>(i)],
                             1e-12));
        total += wv;
      }
      REQUIRE_THAT(total, Catch::Matchers::WithinAbs(1.0, 1e-12));
    }
    for (double g : got.gate.data()) {
      REQUIRE(g > 0.0);
      REQUIRE(g < 1.0);
    }
  }
}

TEST_CASE("empty context turns attention into the identity") {
  AttentionConfig cfg;
  cfg.d = 8;
  cfg.heads = 2;
  ParameterStore store(5);
  init_gated_attention(store, "att", cfg);
  const Tensor query = constant({1, 8}, {1, -2, 3, -4, 5, -6, 7, -8});
  Rng rng(0);
  const GatedAttentionResult res =
      gated_cross_attention_full(query, Tensor(), store, "att", cfg, false, rng);
  REQUIRE(res.passthrough);
  REQUIRE(res.output.data() == query.data());
  REQUIRE_FALSE(res.gate.defined());
  REQUIRE(res.head_weights.empty());
}

TEST_CASE("tube pooling equals a brute-force union of disks") {
  ParameterStore store(41);
  RefinerConfig rc;
  rc.d = 8;
  rc.heads = 2;
  init_refiner(store, rc, 4, 2);

  Rng rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<SceneVector> scene;
    const int L = 1 + static_cast<int>(rng.uniform() * 40);
    for (int l = 0; l < L; ++l) {
      scene.push_back({rng.uniform() * 60 - 30, rng.uniform() * 60 - 30, l % 3});
    }
    std::vector<Vec2> proposal;
    const int F = 2 + static_cast<int>(rng.uniform() * 8);
    for (int f = 0; f < F; ++f) proposal.push_back({rng.uniform() * 40 - 20, rng.uniform() * 40 - 20});
    const double tau = 2.0 + rng.uniform() * 10.0;

    const SceneEmbeddings emb = embed_scene(scene, store);
    const TubePool pool = tubular_region_pooling(proposal, emb, tau);

    std::vector<int> expected;
    for (int l = 0; l < L; ++l) {
      bool inside = false;
      for (const Vec2& wpt : proposal) {
        if (dist({scene[static_cast<std::size_t>(l)].x, scene[static_cast<std::size_t>(l)].y}, wpt) <
            tau) {
          inside = true;
        }
      }
      if (inside) expected.push_back(l);
    }
    REQUIRE(pool.member_indices == expected);
  }
}

TEST_CASE("tube membership is strict and deduplicated") {
  ParameterStore store(43);
  RefinerConfig rc;
  rc.d = 8;
  rc.heads = 2;
  init_refiner(store, rc, 4, 2);
  // One point exactly tau from its nearest waypoint, one inside the disks of
  // two waypoints.
  const std::vector<SceneVector> scene = {{3.0, 4.0, 0}, {0.5, 0.0, 1}};
  const SceneEmbeddings emb = embed_scene(scene, store);
  const std::vector<Vec2> proposal = {{0.0, 0.0}, {-1.0, 0.0}};
  const TubePool at_tau = tubular_region_pooling(proposal, emb, 5.0);
  REQUIRE(at_tau.member_indices == std::vector<int>{1});
  const TubePool past_tau = tubular_region_pooling(proposal, emb, 5.0 + 1e-9);
  REQUIRE(past_tau.member_indices == std::vector<int>{0, 1});
  REQUIRE_THROWS_AS(tubular_region_pooling(proposal, emb, 0.0), ValidationError);
}

TEST_CASE("aligned trajectory distance is not a closest-pair search") {
  const std::vector<Vec2> a = {{0.0, 0.0}, {10.0, 0.0}};
  const std::vector<Vec2> b = {{10.0, 0.0}, {0.0, 0.0}};
  // The trajectories cross, but aligned steps stay 10 apart.
  REQUIRE(trajectory_min_distance(a, b) == 10.0);
  REQUIRE(trajectory_min_distance(a, a) == 0.0);
  const std::vector<Vec2> c = {{0.0, 3.0}, {10.0, 4.0}};
  REQUIRE(trajectory_min_distance(a, c) == 3.0);
  REQUIRE_THROWS_MATCHES(trajectory_min_distance(a, {{0.0, 0.0}}), ValidationError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("length mismatch")));
  REQUIRE_THROWS_AS(trajectory_min_distance({}, {}), ValidationError);
}

TEST_CASE("proposal grouping equals an exhaustive scan") {
  // Agent 0 runs along y=0; neighbors run parallel at varying offsets.
  const std::vector<std::vector<std::vector<Vec2>>> trajs = {
      {line({0, 0}, {1, 0}, 5), line({0, 1}, {1, 0}, 5)},
      {line({0, 4}, {1, 0}, 5), line({0, 30}, {1, 0}, 5)},
      {line({0, 9.5}, {1, 0}, 5), line({0, 10.0}, {1, 0}, 5)},
  };
  const std::vector<std::vector<double>> confs = {
      {0.6, 0.4}, {0.2, 0.8}, {0.100000001, 0.9}};
  const ProposalSet ps = stub_proposals(trajs, confs);

  for (int target_agent = 0; target_agent < 3; ++target_agent) {
    for (int mode = 0; mode < 2; ++mode) {
      const ProposalGroup got = distance_proposal_grouping(mode, ps, 10.0, 0.1, target_agent);
      std::vector<ProposalGroupRef> want;
      for (int i = 0; i < 3; ++i) {
        if (i == target_agent) continue;
        for (int m = 0; m < 2; ++m) {
          if (confs[static_cast<std::size_t>(i)][static_cast<std::size_t>(m)] <= 0.1) continue;
          const double md = trajectory_min_distance(
              trajs[static_cast<std::size_t>(target_agent)][static_cast<std::size_t>(mode)],
              trajs[static_cast<std::size_t>(i)][static_cast<std::size_t>(m)]);
          if (md >= 10.0) continue;
          want.push_back({i, m});
        }
      }
      REQUIRE(got.member_refs.size() == want.size());
      REQUIRE(got.member_features.size() == want.size());
      for (std::size_t i = 0; i < want.size(); ++i) {
        REQUIRE(got.member_refs[i].agent_index == want[i].agent_index);
        REQUIRE(got.member_refs[i].mode == want[i].mode);
      }
    }
  }

  // Spot-check the boundary semantics for agent 0, mode 0 (query along y=0):
  // agent 1 mode 0 passes (dist 4), agent 1 mode 1 too far (30), agent 2
  // mode 0 close enough (9.5) and barely confident enough, agent 2 mode 1 at
  // exactly the distance bound and excluded.
  const ProposalGroup g = distance_proposal_grouping(0, ps, 10.0, 0.1, 0);
  REQUIRE(g.member_refs.size() == 2);
  REQUIRE(g.member_refs[0].agent_index == 1);
  REQUIRE(g.member_refs[0].mode == 0);
  REQUIRE(g.member_refs[1].agent_index == 2);
  REQUIRE(g.member_refs[1].mode == 0);
}

TEST_CASE("grouping excludes neighbors at exactly the confidence floor") {
  const auto trajs = std::vector<std::vector<std::vector<Vec2>>>{
      {line({0, 0}, {1, 0}, 4)}, {line({0, 1}, {1, 0}, 4)}};
  ProposalSet ps = stub_proposals(trajs, {{1.0}, {0.1}});
  REQUIRE(distance_proposal_grouping(0, ps, 10.0, 0.1, 0).member_refs.empty());
  ps.agents[1].confidences[0] = 0.1 + 1e-12;
  REQUIRE(distance_proposal_grouping(0, ps, 10.0, 0.1, 0).member_refs.size() == 1);
  REQUIRE_THROWS_AS(distance_proposal_grouping(5, ps, 10.0, 0.1, 0), ValidationError);
  REQUIRE_THROWS_AS(distance_proposal_grouping(0, ps, 10.0, 0.1, 9), ValidationError);
}

namespace {

struct RefineFixture {
  ProposerConfig pro;
  RefinerConfig ref;
  ParameterStore store{51};
  Scenario sc;
  ProposalSet ps;
  Rng rng{0};

  explicit RefineFixture(std::uint64_t scenario_seed = 71) {
    pro.d = 16;
    pro.M = 3;
    pro.heads = 2;
    ref.d = 16;
    ref.heads = 2;
    GeneratorConfig g;
    g.rng_seed = scenario_seed;
    g.agents_min = 3;
    g.agents_max = 3;
    sc = generate_scenario(g, 0);
    init_proposer(store, pro, 6);
    init_refiner(store, ref, 6, pro.M);
    ps = propose(sc, store, pro, false, rng);
  }
};

}  // namespace

TEST_CASE("zeroed refinement heads reproduce the proposals exactly") {
  RefineFixture fx;
  zero_refiner_outputs(fx.store);
  const RefinedPrediction rp = refine(fx.sc, fx.ps, fx.store, fx.ref, false, fx.rng);
  REQUIRE(rp.modes.size() == 3);
  REQUIRE(rp.anchor.x == 0.0);
  REQUIRE(rp.anchor.y == 0.0);
  REQUIRE(rp.anchor.heading == 0.0);
  const double base_scale = std::log1p(std::exp(0.0)) + 1e-3;
  for (int m = 0; m < 3; ++m) {
    const RefinedMode& mode = rp.modes[static_cast<std::size_t>(m)];
    const auto& proposal = fx.ps.agents[0].trajectories[static_cast<std::size_t>(m)];
    REQUIRE(mode.mean.size() == proposal.size());
    for (std::size_t f = 0; f < proposal.size(); ++f) {
      REQUIRE(mode.mean[f].x == proposal[f].x);
      REQUIRE(mode.mean[f].y == proposal[f].y);
      REQUIRE(mode.scale[f].x == base_scale);
      REQUIRE(mode.scale[f].y == base_scale);
    }
  }
}

TEST_CASE("refined scales stay strictly above the floor") {
  RefineFixture fx(73);
  const RefinedPrediction rp = refine(fx.sc, fx.ps, fx.store, fx.ref, false, fx.rng);
  double conf_total = 0.0;
  for (const RefinedMode& mode : rp.modes) {
    REQUIRE(mode.mean.size() == 6);
    REQUIRE(mode.scale.size() == 6);
    for (const Vec2& s : mode.scale) {
      REQUIRE(s.x > 1e-3);
      REQUIRE(s.y > 1e-3);
    }
    REQUIRE(mode.confidence >= 0.0);
    conf_total += mode.confidence;
  }
  REQUIRE_THAT(conf_total, Catch::Matchers::WithinAbs(1.0, 1e-6));
  REQUIRE(rp.conf_node.shape() == ShapeDims{1, 3});
  REQUIRE(rp.pools.size() == 3);
  REQUIRE(rp.groups.size() == 3);
  for (int m = 0; m < 3; ++m) {
    REQUIRE(rp.pools[static_cast<std::size_t>(m)].proposal_mode == m);
  }
}

TEST_CASE("refine_all covers every agent in its own frame") {
  RefineFixture fx(79);
  const std::vector<RefinedPrediction> all =
      refine_all(fx.sc, fx.ps, fx.store, fx.ref, false, fx.rng);
  REQUIRE(all.size() == fx.sc.agents.size());
  REQUIRE(all[0].anchor.x == 0.0);
  REQUIRE(all[0].anchor.heading == 0.0);
  for (std::size_t a = 1; a < all.size(); ++a) {
    const Pose2 want = derive_pose(fx.sc.agents[a].past).pose;
    REQUIRE(all[a].anchor.x == want.x);
    REQUIRE(all[a].anchor.y == want.y);
    REQUIRE(all[a].anchor.heading == want.heading);
    for (const RefinedMode& mode : all[a].modes) {
      for (const Vec2& p : mode.mean) {
        REQUIRE(std::isfinite(p.x));
        REQUIRE(std::isfinite(p.y));
      }
    }
  }
}

TEST_CASE("refiner rejects inconsistent inputs") {
  RefineFixture fx(83);
  Scenario short_sc = fx.sc;
  short_sc.agents.pop_back();
  REQUIRE_THROWS_MATCHES(refine(short_sc, fx.ps, fx.store, fx.ref, false, fx.rng),
                         ValidationError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("agent count")));
  REQUIRE_THROWS_AS(refine(fx.sc, fx.ps, fx.store, fx.ref, false, fx.rng, 17), ValidationError);

  RefinerConfig bad = fx.ref;
  bad.tube_radius = 0.0;
  REQUIRE_THROWS_AS(bad.validate(), ValidationError);
  bad = fx.ref;
  bad.group_confidence = 1.0;
  REQUIRE_THROWS_AS(bad.validate(), ValidationError);
  bad = fx.ref;
  bad.d = 10;
  bad.heads = 4;
  REQUIRE_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("refinement gradients flow into both attention blocks") {
  RefineFixture fx(89);
  // Untrained proposals need not pass near each other; widen the grouping
  // bound so the interaction branch is guaranteed to run.
  fx.ref.group_distance = 1e6;
  fx.store.zero_grads();
  Tensor loss;
  {
    const RefinedPrediction rp = refine(fx.sc, fx.ps, fx.store, fx.ref, false, fx.rng);
    std::vector<Tensor> parts;
    for (const RefinedMode& m : rp.modes) {
      parts.push_back(sum(m.mean_node));
      parts.push_back(sum(m.scale_node));
    }
    parts.push_back(sum(rp.conf_node));
    loss = sum(concat(parts));
  }
  backward(loss);
  for (const char* name : {"ref.tube_att.wq", "ref.nbr_att.w_gate", "ref.reg.w0", "ref.cls.w0",
                           "ref.scene_proj.w0"}) {
    INFO(name);
    REQUIRE(fx.store.at(name).has_grad());
  }
}
