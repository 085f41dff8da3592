#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tpred/common.hpp"
#include "tpred/core.hpp"

namespace tpred {

// Synthetic scenario generation: a small lane network (straight, curved,
// branching), agents that follow lane-consistent kinematic paths while
// executing one sampled maneuver, Gaussian noise on past states only, and a
// guarantee that at least one agent pair interacts closely. Everything is a
// pure function of (seed, index).

enum class Maneuver { kKeepLane = 0, kLaneChange = 1, kTurn = 2, kSlowDown = 3, kAccelerate = 4 };
inline constexpr int kManeuverCount = 5;

struct GeneratorConfig {
  std::uint64_t rng_seed = 7;
  int n_scenarios = 100;
  int lanes_min = 2;
  int lanes_max = 4;
  int agents_min = 2;
  int agents_max = 4;
  double lane_length = 120.0;
  double lane_sample_spacing = 2.0;
  // keep-lane, lane-change, turn, slow-down, accelerate
  std::array<double, kManeuverCount> maneuver_mix{0.40, 0.15, 0.15, 0.15, 0.15};
  double noise_sigma = 0.15;
  int T = 20;
  int F = 30;
  double step_dt = 0.1;

  void validate() const {
    const double mix_sum = std::accumulate(maneuver_mix.begin(), maneuver_mix.end(), 0.0);
    if (std::fabs(mix_sum - 1.0) > 1e-9) {
      throw ValidationError("maneuver_mix must sum to 1 (got " + std::to_string(mix_sum) + ")");
    }
    for (double p : maneuver_mix) {
      if (p < 0.0) throw ValidationError("maneuver_mix entries must be non-negative");
    }
    if (n_scenarios < 1) throw ValidationError("n_scenarios must be >= 1");
    if (T < 2) throw ValidationError("T must be >= 2");
    if (F < 1) throw ValidationError("F must be >= 1");
    if (lane_sample_spacing <= 0.0) throw ValidationError("lane_sample_spacing must be > 0");
    if (lanes_min < 1 || lanes_max < lanes_min) throw ValidationError("invalid lanes_per_scene range");
    if (agents_min < 1 || agents_max < agents_min) throw ValidationError("invalid agents_per_scene range");
    if (lane_length < 40.0) throw ValidationError("lane_length must be >= 40 m");
    if (noise_sigma < 0.0) throw ValidationError("noise_sigma must be >= 0");
    if (step_dt <= 0.0) throw ValidationError("step_dt must be > 0");
  }
};

// --- polyline geometry --------------------------------------------------

// Dense polyline with an arc-length table. Queries beyond either end
// extrapolate along the end tangent so paths never "run out" of geometry.
struct Polyline {
  std::vector<Vec2> pts;
  std::vector<double> arc;

  void rebuild_arc() {
    arc.resize(pts.size());
    if (pts.empty()) return;
    arc[0] = 0.0;
    for (std::size_t i = 1; i < pts.size(); ++i) arc[i] = arc[i - 1] + dist(pts[i - 1], pts[i]);
  }

  double length() const { return arc.empty() ? 0.0 : arc.back(); }

  Vec2 tangent_at(double s) const {
    if (pts.size() < 2) throw ValidationError("polyline: need >= 2 points");
    std::size_t seg;
    if (s <= 0.0) {
      seg = 0;
    } else if (s >= length()) {
      seg = pts.size() - 2;
    } else {
      seg = static_cast<std::size_t>(std::upper_bound(arc.begin(), arc.end(), s) - arc.begin()) - 1;
      seg = std::min(seg, pts.size() - 2);
    }
    Vec2 d = pts[seg + 1] - pts[seg];
    const double n = d.norm();
    return n > 0.0 ? d * (1.0 / n) : Vec2{1.0, 0.0};
  }

  Vec2 pos_at(double s) const {
    if (pts.size() < 2) throw ValidationError("polyline: need >= 2 points");
    if (s <= 0.0) return pts.front() + tangent_at(0.0) * s;
    if (s >= length()) return pts.back() + tangent_at(length()) * (s - length());
    const std::size_t seg =
        std::min(static_cast<std::size_t>(std::upper_bound(arc.begin(), arc.end(), s) - arc.begin()) - 1,
                 pts.size() - 2);
    const double seg_len = arc[seg + 1] - arc[seg];
    const double u = seg_len > 0.0 ? (s - arc[seg]) / seg_len : 0.0;
    return pts[seg] + (pts[seg + 1] - pts[seg]) * u;
  }
};

inline constexpr double kDenseStep = 0.5;  // meters between dense polyline points

inline void append_straight(Polyline& p, double len) {
  Vec2 dir = p.pts.size() >= 2 ? p.tangent_at(p.length()) : Vec2{1.0, 0.0};
  Vec2 cur = p.pts.back();
  const int steps = std::max(1, static_cast<int>(std::ceil(len / kDenseStep)));
  for (int i = 1; i <= steps; ++i) p.pts.push_back(cur + dir * (len * i / steps));
  p.rebuild_arc();
}

// Appends a circular arc of |sweep| radians; positive sweep turns left.
inline void append_arc(Polyline& p, double radius, double sweep) {
  Vec2 dir = p.tangent_at(p.length());
  Vec2 cur = p.pts.back();
  const double side = sweep >= 0.0 ? 1.0 : -1.0;
  const Vec2 center = cur + Vec2{-dir.y, dir.x} * (side * radius);
  const double a0 = std::atan2(cur.y - center.y, cur.x - center.x);
  const int steps = std::max(2, static_cast<int>(std::ceil(std::fabs(sweep) * radius / kDenseStep)));
  for (int i = 1; i <= steps; ++i) {
    const double a = a0 + sweep * i / steps;
    p.pts.push_back(center + Vec2{std::cos(a), std::sin(a)} * radius);
  }
  p.rebuild_arc();
}

inline Polyline make_straight(Vec2 start, double heading, double len) {
  Polyline p;
  p.pts.push_back(start);
  p.pts.push_back(start + Vec2{std::cos(heading), std::sin(heading)} * kDenseStep);
  p.rebuild_arc();
  append_straight(p, len - kDenseStep);
  return p;
}

struct LaneGeom {
  Polyline line;
  int parent = -1;       // lane this one branches off of, if any
  double parent_arc = 0; // arc position of the branch point on the parent
  int adjacent = -1;     // parallel lane reachable by a lane change
  bool straight = false;
};

// Dense polyline prefix of `src` up to arc position `s`.
inline Polyline polyline_prefix(const Polyline& src, double s) {
  Polyline p;
  for (std::size_t i = 0; i < src.pts.size() && src.arc[i] < s; ++i) p.pts.push_back(src.pts[i]);
  p.pts.push_back(src.pos_at(s));
  if (p.pts.size() < 2) {
    p.pts.insert(p.pts.begin(), src.pos_at(std::max(0.0, s - kDenseStep)));
  }
  p.rebuild_arc();
  return p;
}

inline std::vector<LaneGeom> build_lane_network(Rng& rng, const GeneratorConfig& cfg) {
  const int n_lanes = rng.uniform_int(cfg.lanes_min, cfg.lanes_max);
  std::vector<LaneGeom> lanes;
  lanes.reserve(static_cast<std::size_t>(n_lanes));

  // Lane 0: straight, passing near the origin.
  const double th0 = rng.uniform(0.0, 2.0 * kPi);
  const double frac = rng.uniform(0.35, 0.65);
  const Vec2 dir0{std::cos(th0), std::sin(th0)};
  LaneGeom lane0;
  lane0.line = make_straight(dir0 * (-frac * cfg.lane_length), th0, cfg.lane_length);
  lane0.straight = true;
  lanes.push_back(std::move(lane0));

  int parallels_left = 0, parallels_right = 0;
  for (int j = 1; j < n_lanes; ++j) {
    const int kind = rng.categorical(std::vector<double>{0.3, 0.4, 0.3});
    LaneGeom lane;
    if (kind == 0) {
      // Parallel lane offset from lane 0.
      const bool left = rng.bernoulli(0.5);
      const int slot = left ? ++parallels_left : ++parallels_right;
      const double offset = (left ? 1.0 : -1.0) * 3.5 * slot;
      const Vec2 nrm{-dir0.y, dir0.x};
      lane.line = lanes[0].line;
      for (Vec2& p : lane.line.pts) p = p + nrm * offset;
      lane.line.rebuild_arc();
      lane.straight = true;
      if (lanes[0].adjacent < 0) lanes[0].adjacent = j;
      lane.adjacent = 0;
    } else if (kind == 1) {
      // Branch: leave an existing lane through an arc, then run straight.
      const int parent = rng.uniform_int(0, j - 1);
      const double s_b = rng.uniform(0.3, 0.6) * lanes[static_cast<std::size_t>(parent)].line.length();
      Polyline p;
      p.pts.push_back(lanes[static_cast<std::size_t>(parent)].line.pos_at(s_b));
      p.pts.push_back(p.pts[0] + lanes[static_cast<std::size_t>(parent)].line.tangent_at(s_b) * kDenseStep);
      p.rebuild_arc();
      const double sweep = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(kPi / 3.0, kPi / 2.0);
      const double radius = rng.uniform(12.0, 25.0);
      append_arc(p, radius, sweep);
      if (p.length() < cfg.lane_length) append_straight(p, cfg.lane_length - p.length());
      lane.line = std::move(p);
      lane.parent = parent;
      lane.parent_arc = s_b;
    } else {
      // Independent crossing lane near the origin.
      const Vec2 c{rng.uniform(-25.0, 25.0), rng.uniform(-25.0, 25.0)};
      const double th = rng.uniform(0.0, 2.0 * kPi);
      if (rng.bernoulli(0.4)) {
        Polyline p;
        p.pts.push_back(c);
        p.pts.push_back(c + Vec2{std::cos(th), std::sin(th)} * kDenseStep);
        p.rebuild_arc();
        const double radius = rng.uniform(30.0, 80.0);
        const double sweep = (rng.bernoulli(0.5) ? 1.0 : -1.0) * (cfg.lane_length - kDenseStep) / radius;
        append_arc(p, radius, sweep);
        lane.line = std::move(p);
      } else {
        lane.line = make_straight(c - Vec2{std::cos(th), std::sin(th)} * (cfg.lane_length / 2.0), th,
                                  cfg.lane_length);
        lane.straight = true;
      }
    }
    lanes.push_back(std::move(lane));
  }
  return lanes;
}

inline std::vector<SceneVector> sample_scene(const std::vector<LaneGeom>& lanes, Rng& rng,
                                             const GeneratorConfig& cfg) {
  std::vector<SceneVector> scene;
  for (const LaneGeom& lane : lanes) {
    for (double s = 0.0; s <= lane.line.length(); s += cfg.lane_sample_spacing) {
      const Vec2 p = lane.line.pos_at(s);
      scene.push_back({p.x, p.y, static_cast<int>(SceneAttribute::kLaneCenterline)});
    }
    for (double s = 0.0; s <= lane.line.length(); s += 2.0 * cfg.lane_sample_spacing) {
      const Vec2 p = lane.line.pos_at(s);
      const Vec2 t = lane.line.tangent_at(s);
      const Vec2 n{-t.y, t.x};
      for (double side : {1.75, -1.75}) {
        const Vec2 b = p + n * side;
        scene.push_back({b.x, b.y, static_cast<int>(SceneAttribute::kRoadBoundary)});
      }
    }
  }
  if (rng.bernoulli(0.5)) {
    const double s = rng.uniform(0.3, 0.7) * lanes[0].line.length();
    const Vec2 p = lanes[0].line.pos_at(s);
    const Vec2 t = lanes[0].line.tangent_at(s);
    const Vec2 n{-t.y, t.x};
    for (int i = -3; i <= 3; ++i) {
      const Vec2 c = p + n * static_cast<double>(i);
      scene.push_back({c.x, c.y, static_cast<int>(SceneAttribute::kCrosswalk)});
    }
  }
  return scene;
}

// --- agent kinematics ---------------------------------------------------

namespace detail {

struct AgentPlan {
  Polyline path;
  double s_start = 0.0;
  double v0 = 5.0;
  Maneuver maneuver = Maneuver::kKeepLane;
  int semantic = 0;
  double lat_dir = 1.0;  // lane-change direction sign
};

inline double plan_speed(const AgentPlan& plan, int k, const GeneratorConfig& cfg) {
  if (k < cfg.T) return plan.v0;
  const double u = static_cast<double>(k - cfg.T + 1) / static_cast<double>(cfg.F);
  switch (plan.maneuver) {
    case Maneuver::kSlowDown:
      return plan.v0 * (1.0 - 0.6 * u);
    case Maneuver::kAccelerate:
      return plan.v0 + (std::min(1.5 * plan.v0, 15.0) - plan.v0) * u;
    default:
      return plan.v0;
  }
}

inline double plan_lateral(const AgentPlan& plan, int k, const GeneratorConfig& cfg) {
  if (plan.maneuver != Maneuver::kLaneChange || k < cfg.T) return 0.0;
  const double u = std::min(1.0, static_cast<double>(k - cfg.T + 1) * cfg.step_dt / 2.5);
  const double smooth = u * u * (3.0 - 2.0 * u);
  return plan.lat_dir * 3.5 * smooth;
}

// Samples the T+F noise-free positions a plan traces out.
inline std::vector<Vec2> plan_points(const AgentPlan& plan, const GeneratorConfig& cfg) {
  std::vector<Vec2> pts(static_cast<std::size_t>(cfg.T + cfg.F));
  double s = plan.s_start;
  for (int k = 0; k < cfg.T + cfg.F; ++k) {
    const Vec2 base = plan.path.pos_at(s);
    const Vec2 t = plan.path.tangent_at(s);
    const Vec2 n{-t.y, t.x};
    pts[static_cast<std::size_t>(k)] = base + n * plan_lateral(plan, k, cfg);
    s += plan_speed(plan, k, cfg) * cfg.step_dt;
  }
  return pts;
}

inline AgentPlan sample_plan(Rng& rng, const std::vector<LaneGeom>& lanes, int lane_index,
                             double s_current, const GeneratorConfig& cfg) {
  AgentPlan plan;
  const double sem_draw = rng.uniform();
  plan.semantic = sem_draw < 0.80 ? static_cast<int>(AgentSemantic::kVehicle)
                 : sem_draw < 0.95 ? static_cast<int>(AgentSemantic::kCyclist)
                                   : static_cast<int>(AgentSemantic::kPedestrian);
  switch (static_cast<AgentSemantic>(plan.semantic)) {
    case AgentSemantic::kVehicle:
      plan.v0 = rng.uniform(3.0, 10.0);
      break;
    case AgentSemantic::kCyclist:
      plan.v0 = rng.uniform(2.0, 5.0);
      break;
    case AgentSemantic::kPedestrian:
      plan.v0 = rng.uniform(0.8, 2.0);
      break;
  }
  plan.maneuver = static_cast<Maneuver>(
      rng.categorical(std::vector<double>(cfg.maneuver_mix.begin(), cfg.maneuver_mix.end())));
  const LaneGeom& lane = lanes[static_cast<std::size_t>(lane_index)];

  // Lateral ramps only on straight geometry, and only above 2 m/s: slower
  // movers would exceed the 0.3 rad per-step turn bound during the ramp.
  if (plan.maneuver == Maneuver::kLaneChange && (!lane.straight || plan.v0 < 2.0)) {
    plan.maneuver = Maneuver::kKeepLane;
  }
  if (plan.maneuver == Maneuver::kLaneChange) {
    if (lane.adjacent >= 0) {
      // Head toward the recorded neighbor: its offset sign relative to us.
      const Vec2 here = lane.line.pos_at(s_current);
      const Vec2 there = lanes[static_cast<std::size_t>(lane.adjacent)].line.pos_at(s_current);
      const Vec2 t = lane.line.tangent_at(s_current);
      plan.lat_dir = ((there - here).x * -t.y + (there - here).y * t.x) >= 0.0 ? 1.0 : -1.0;
    } else {
      plan.lat_dir = rng.bernoulli(0.5) ? 1.0 : -1.0;
    }
  }

  if (plan.maneuver == Maneuver::kTurn) {
    if (plan.semantic == static_cast<int>(AgentSemantic::kVehicle)) {
      plan.v0 = rng.uniform(3.0, 6.0);  // keep per-step turn angle well-bounded
    }
    int branch = -1;
    for (std::size_t j = 0; j < lanes.size(); ++j) {
      if (lanes[j].parent == lane_index && lanes[j].parent_arc > s_current + 0.3 * plan.v0) {
        branch = static_cast<int>(j);
        break;
      }
    }
    if (branch >= 0) {
      Polyline p = polyline_prefix(lane.line, lanes[static_cast<std::size_t>(branch)].parent_arc);
      const Polyline& br = lanes[static_cast<std::size_t>(branch)].line;
      p.pts.insert(p.pts.end(), br.pts.begin() + 1, br.pts.end());
      p.rebuild_arc();
      plan.path = std::move(p);
    } else {
      const double s_b = s_current + plan.v0 * rng.uniform(0.8, 1.5);
      Polyline p = polyline_prefix(lane.line, s_b);
      append_arc(p, rng.uniform(10.0, 20.0), (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(kPi / 3.0, kPi / 2.0));
      append_straight(p, 60.0);
      plan.path = std::move(p);
    }
  } else {
    plan.path = lane.line;
  }
  plan.s_start = s_current - plan.v0 * static_cast<double>(cfg.T - 1) * cfg.step_dt;
  return plan;
}

}  // namespace detail

// --- scenario assembly --------------------------------------------------

inline Scenario generate_scenario(const GeneratorConfig& cfg, int index) {
  cfg.validate();
  Rng rng(mix_seed(cfg.rng_seed, static_cast<std::uint64_t>(index)));

  const std::vector<LaneGeom> lanes = build_lane_network(rng, cfg);
  std::vector<SceneVector> scene = sample_scene(lanes, rng, cfg);

  const int n_agents = rng.uniform_int(cfg.agents_min, cfg.agents_max);
  std::vector<detail::AgentPlan> plans;
  plans.reserve(static_cast<std::size_t>(n_agents));
  for (int a = 0; a < n_agents; ++a) {
    int lane_index;
    double s_c;
    if (a == 0) {
      // Target rides lane 0 near the origin so the scene surrounds it.
      lane_index = 0;
      double s_origin = 0.0, best = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < lanes[0].line.pts.size(); ++i) {
        const double d = lanes[0].line.pts[i].norm();
        if (d < best) {
          best = d;
          s_origin = lanes[0].line.arc[i];
        }
      }
      s_c = s_origin + rng.uniform(-5.0, 5.0);
    } else {
      lane_index = rng.uniform_int(0, static_cast<int>(lanes.size()) - 1);
      s_c = rng.uniform(0.25, 0.70) * lanes[static_cast<std::size_t>(lane_index)].line.length();
    }
    plans.push_back(detail::sample_plan(rng, lanes, lane_index, s_c, cfg));
  }

  std::vector<std::vector<Vec2>> paths;
  paths.reserve(plans.size());
  for (const auto& plan : plans) paths.push_back(detail::plan_points(plan, cfg));

  // Interaction guarantee: some pair must pass within 15 m during the future.
  if (n_agents >= 2) {
    bool close = false;
    for (std::size_t a = 0; a < paths.size() && !close; ++a) {
      for (std::size_t b = a + 1; b < paths.size() && !close; ++b) {
        for (int k = cfg.T; k < cfg.T + cfg.F; ++k) {
          if (dist(paths[a][static_cast<std::size_t>(k)], paths[b][static_cast<std::size_t>(k)]) < 15.0) {
            close = true;
            break;
          }
        }
      }
    }
    if (!close) {
      // Deterministic fallback: agent 1 shadows the target 8 m behind on the
      // same path with the same profile, so the aligned gap stays ~8 m.
      detail::AgentPlan shadow = plans[0];
      shadow.s_start -= 8.0;
      plans[1] = shadow;
      paths[1] = detail::plan_points(plans[1], cfg);
    }
  }

  Scenario scn;
  scn.id = "scn-" + std::to_string(1000000 + index).substr(1);
  scn.frame = Pose2{0.0, 0.0, 0.0};
  scn.scene = std::move(scene);
  for (int a = 0; a < n_agents; ++a) {
    AgentTrack tr;
    tr.agent_id = "a" + std::to_string(a);
    const auto& pts = paths[static_cast<std::size_t>(a)];
    const int sem = plans[static_cast<std::size_t>(a)].semantic;
    tr.past.reserve(static_cast<std::size_t>(cfg.T));
    for (int k = 0; k < cfg.T; ++k) {
      const Vec2 p = pts[static_cast<std::size_t>(k)] +
                     Vec2{rng.normal() * cfg.noise_sigma, rng.normal() * cfg.noise_sigma};
      tr.past.push_back({p.x, p.y, sem});
    }
    std::vector<TrajState> fut;
    fut.reserve(static_cast<std::size_t>(cfg.F));
    for (int k = cfg.T; k < cfg.T + cfg.F; ++k) {
      const Vec2 p = pts[static_cast<std::size_t>(k)];
      fut.push_back({p.x, p.y, sem});
    }
    tr.future = std::move(fut);
    tr.current_pose = derive_pose(tr.past).pose;
    scn.agents.push_back(std::move(tr));
  }
  validate_scenario(scn);
  return to_agent_frame(scn, 0);
}

struct DatasetSplit {
  std::vector<Scenario> train;
  std::vector<Scenario> val;
  std::vector<Scenario> test;
};

inline std::vector<Scenario> generate_scenarios(const GeneratorConfig& cfg) {
  cfg.validate();
  std::vector<Scenario> out;
  out.reserve(static_cast<std::size_t>(cfg.n_scenarios));
  for (int i = 0; i < cfg.n_scenarios; ++i) out.push_back(generate_scenario(cfg, i));
  return out;
}

// Contiguous index split; fractions are of the total and need not be exact.
inline DatasetSplit split_dataset(std::vector<Scenario> all, double train_frac, double val_frac) {
  if (train_frac < 0 || val_frac < 0 || train_frac + val_frac > 1.0) {
    throw ValidationError("split fractions must be non-negative and sum to <= 1");
  }
  DatasetSplit split;
  const std::size_t n = all.size();
  const std::size_t n_train = static_cast<std::size_t>(std::floor(train_frac * static_cast<double>(n)));
  const std::size_t n_val = static_cast<std::size_t>(std::floor(val_frac * static_cast<double>(n)));
  for (std::size_t i = 0; i < n; ++i) {
    if (i < n_train) {
      split.train.push_back(std::move(all[i]));
    } else if (i < n_train + n_val) {
      split.val.push_back(std::move(all[i]));
    } else {
      split.test.push_back(std::move(all[i]));
    }
  }
  return split;
}

// --- JSONL persistence --------------------------------------------------

inline constexpr int kDatasetSchemaVersion = 1;

inline nlohmann::ordered_json scenario_to_json(const Scenario& s) {
  nlohmann::ordered_json j;
  j["v"] = kDatasetSchemaVersion;
  j["id"] = s.id;
  j["frame"] = nlohmann::ordered_json::array({s.frame.x, s.frame.y, s.frame.heading});
  auto scene = nlohmann::ordered_json::array();
  for (const SceneVector& v : s.scene) {
    scene.push_back(nlohmann::ordered_json::array({v.x, v.y, v.attribute}));
  }
  j["scene"] = std::move(scene);
  auto agents = nlohmann::ordered_json::array();
  for (const AgentTrack& a : s.agents) {
    nlohmann::ordered_json ja;
    ja["id"] = a.agent_id;
    auto past = nlohmann::ordered_json::array();
    for (const TrajState& st : a.past) past.push_back(nlohmann::ordered_json::array({st.x, st.y, st.semantic}));
    ja["past"] = std::move(past);
    if (a.future) {
      auto fut = nlohmann::ordered_json::array();
      for (const TrajState& st : *a.future) fut.push_back(nlohmann::ordered_json::array({st.x, st.y, st.semantic}));
      ja["future"] = std::move(fut);
    } else {
      ja["future"] = nullptr;
    }
    agents.push_back(std::move(ja));
  }
  j["agents"] = std::move(agents);
  return j;
}

namespace detail {

inline double json_num(const nlohmann::ordered_json& j, const std::string& where) {
  if (!j.is_number()) throw IoError(where + ": expected a number");
  return j.get<double>();
}

inline int json_int(const nlohmann::ordered_json& j, const std::string& where) {
  if (!j.is_number_integer()) throw IoError(where + ": expected an integer");
  return j.get<int>();
}

inline std::vector<TrajState> json_states(const nlohmann::ordered_json& j, const std::string& where) {
  if (!j.is_array()) throw IoError(where + ": expected an array");
  std::vector<TrajState> out;
  out.reserve(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& e = j[i];
    if (!e.is_array() || e.size() != 3) throw IoError(where + "[" + std::to_string(i) + "]: expected [x,y,code]");
    out.push_back({json_num(e[0], where + ".x"), json_num(e[1], where + ".y"),
                   json_int(e[2], where + ".code")});
  }
  return out;
}

}  // namespace detail

inline Scenario scenario_from_json(const nlohmann::ordered_json& j) {
  if (!j.is_object()) throw IoError("scenario: expected a JSON object");
  if (!j.contains("v")) throw IoError("scenario: missing field 'v'");
  const int v = detail::json_int(j.at("v"), "v");
  if (v != kDatasetSchemaVersion) {
    throw IoError("scenario: schema version " + std::to_string(v) + ", expected " +
                  std::to_string(kDatasetSchemaVersion));
  }
  for (const char* field : {"id", "frame", "scene", "agents"}) {
    if (!j.contains(field)) throw IoError(std::string("scenario: missing field '") + field + "'");
  }
  Scenario s;
  if (!j.at("id").is_string()) throw IoError("scenario: field 'id' must be a string");
  s.id = j.at("id").get<std::string>();
  const auto& jf = j.at("frame");
  if (!jf.is_array() || jf.size() != 3) throw IoError("scenario: field 'frame' must be [x,y,h]");
  s.frame = Pose2{detail::json_num(jf[0], "frame.x"), detail::json_num(jf[1], "frame.y"),
                  detail::json_num(jf[2], "frame.h")};
  const auto& js = j.at("scene");
  if (!js.is_array()) throw IoError("scenario: field 'scene' must be an array");
  for (std::size_t i = 0; i < js.size(); ++i) {
    const auto& e = js[i];
    const std::string where = "scene[" + std::to_string(i) + "]";
    if (!e.is_array() || e.size() != 3) throw IoError(where + ": expected [x,y,attr]");
    s.scene.push_back({detail::json_num(e[0], where + ".x"), detail::json_num(e[1], where + ".y"),
                       detail::json_int(e[2], where + ".attr")});
  }
  const auto& ja = j.at("agents");
  if (!ja.is_array()) throw IoError("scenario: field 'agents' must be an array");
  for (std::size_t i = 0; i < ja.size(); ++i) {
    const auto& e = ja[i];
    const std::string where = "agents[" + std::to_string(i) + "]";
    if (!e.is_object()) throw IoError(where + ": expected an object");
    for (const char* field : {"id", "past", "future"}) {
      if (!e.contains(field)) throw IoError(where + ": missing field '" + std::string(field) + "'");
    }
    AgentTrack tr;
    if (!e.at("id").is_string()) throw IoError(where + ".id: expected a string");
    tr.agent_id = e.at("id").get<std::string>();
    tr.past = detail::json_states(e.at("past"), where + ".past");
    if (!e.at("future").is_null()) {
      tr.future = detail::json_states(e.at("future"), where + ".future");
    }
    if (tr.past.size() < 2) throw IoError(where + ".past: need >= 2 states");
    tr.current_pose = derive_pose(tr.past).pose;
    s.agents.push_back(std::move(tr));
  }
  validate_scenario(s);
  return s;
}

inline void write_scenarios(const std::vector<Scenario>& scenarios, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  for (const Scenario& s : scenarios) {
    out << scenario_to_json(s).dump() << '\n';
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline std::vector<Scenario> read_scenarios(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::vector<Scenario> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::ordered_json j;
    try {
      j = nlohmann::ordered_json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw IoError(path + ":" + std::to_string(lineno) + ": malformed JSON line: " + e.what());
    }
    try {
      out.push_back(scenario_from_json(j));
    } catch (const IoError& e) {
      throw IoError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw IoError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void write_dataset(const DatasetSplit& split, const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
  write_scenarios(split.train, (std::filesystem::path(dir) / "train.jsonl").string());
  write_scenarios(split.val, (std::filesystem::path(dir) / "val.jsonl").string());
  write_scenarios(split.test, (std::filesystem::path(dir) / "test.jsonl").string());
}

inline DatasetSplit read_dataset(const std::string& dir) {
  DatasetSplit split;
  split.train = read_scenarios((std::filesystem::path(dir) / "train.jsonl").string());
  split.val = read_scenarios((std::filesystem::path(dir) / "val.jsonl").string());
  split.test = read_scenarios((std::filesystem::path(dir) / "test.jsonl").string());
  return split;
}

// --- CSV ingestion ------------------------------------------------------

struct IngestResult {
  std::vector<Scenario> scenarios;
  int dropped_agents = 0;
  std::vector<std::string> diagnostics;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline int resolve_column(const std::vector<std::string>& header, const std::string& canonical,
                          const std::map<std::string, std::string>& col_map) {
  auto it = col_map.find(canonical);
  const std::string wanted = it != col_map.end() ? it->second : canonical;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == wanted) return static_cast<int>(i);
  }
  throw ValidationError("missing required column '" + wanted + "' (for '" + canonical + "')");
}

inline double parse_double(const std::string& s, const std::string& where) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw IoError(where + ": cannot parse number from '" + s + "'");
  }
}

inline int parse_int(const std::string& s, const std::string& where) {
  try {
    std::size_t pos = 0;
    const int v = std::stoi(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw IoError(where + ": cannot parse integer from '" + s + "'");
  }
}

}  // namespace detail

// Builds Scenarios from a tracks CSV (scenario_id, agent_id, timestep, x, y,
// semantic) and a scene CSV (scenario_id, x, y, attribute). Rows may arrive in
// any order; each agent's rows are sorted by timestep. The first T rows become
// the past, the next F (when present) the future; agents with fewer than T
// rows are dropped and counted.
inline IngestResult ingest_csv(const std::string& tracks_path, const std::string& scene_path,
                               const std::map<std::string, std::string>& col_map, int T, int F) {
  if (T < 2 || F < 1) throw ValidationError("ingest: T must be >= 2 and F >= 1");
  std::ifstream tracks(tracks_path);
  if (!tracks) throw IoError("cannot open '" + tracks_path + "' for reading");

  std::string line;
  if (!std::getline(tracks, line)) throw IoError(tracks_path + ": empty file (missing header)");
  const auto header = detail::split_csv_line(line);
  const int c_scn = detail::resolve_column(header, "scenario_id", col_map);
  const int c_agent = detail::resolve_column(header, "agent_id", col_map);
  const int c_t = detail::resolve_column(header, "timestep", col_map);
  const int c_x = detail::resolve_column(header, "x", col_map);
  const int c_y = detail::resolve_column(header, "y", col_map);
  const int c_sem = detail::resolve_column(header, "semantic", col_map);

  struct Row {
    double t, x, y;
    int sem;
  };
  std::map<std::string, std::map<std::string, std::vector<Row>>> by_scenario;
  int lineno = 1;
  while (std::getline(tracks, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    const std::string where = tracks_path + ":" + std::to_string(lineno);
    const int max_col = std::max({c_scn, c_agent, c_t, c_x, c_y, c_sem});
    if (static_cast<int>(cells.size()) <= max_col) throw IoError(where + ": too few columns");
    const Row r{detail::parse_double(cells[static_cast<std::size_t>(c_t)], where + " timestep"),
                detail::parse_double(cells[static_cast<std::size_t>(c_x)], where + " x"),
                detail::parse_double(cells[static_cast<std::size_t>(c_y)], where + " y"),
                detail::parse_int(cells[static_cast<std::size_t>(c_sem)], where + " semantic")};
    by_scenario[cells[static_cast<std::size_t>(c_scn)]][cells[static_cast<std::size_t>(c_agent)]].push_back(r);
  }

  std::map<std::string, std::vector<SceneVector>> scene_by_scenario;
  if (!scene_path.empty()) {
    std::ifstream scene(scene_path);
    if (!scene) throw IoError("cannot open '" + scene_path + "' for reading");
    if (!std::getline(scene, line)) throw IoError(scene_path + ": empty file (missing header)");
    const auto sheader = detail::split_csv_line(line);
    const int s_scn = detail::resolve_column(sheader, "scenario_id", col_map);
    const int s_x = detail::resolve_column(sheader, "x", col_map);
    const int s_y = detail::resolve_column(sheader, "y", col_map);
    const int s_attr = detail::resolve_column(sheader, "attribute", col_map);
    int sln = 1;
    while (std::getline(scene, line)) {
      ++sln;
      if (line.empty()) continue;
      const auto cells = detail::split_csv_line(line);
      const std::string where = scene_path + ":" + std::to_string(sln);
      const int max_col = std::max({s_scn, s_x, s_y, s_attr});
      if (static_cast<int>(cells.size()) <= max_col) throw IoError(where + ": too few columns");
      scene_by_scenario[cells[static_cast<std::size_t>(s_scn)]].push_back(
          {detail::parse_double(cells[static_cast<std::size_t>(s_x)], where + " x"),
           detail::parse_double(cells[static_cast<std::size_t>(s_y)], where + " y"),
           detail::parse_int(cells[static_cast<std::size_t>(s_attr)], where + " attribute")});
    }
  }

  IngestResult result;
  for (auto& [scn_id, agents] : by_scenario) {
    Scenario s;
    s.id = scn_id;
    s.frame = Pose2{0.0, 0.0, 0.0};
    if (auto it = scene_by_scenario.find(scn_id); it != scene_by_scenario.end()) {
      s.scene = it->second;
    }
    for (auto& [agent_id, rows] : agents) {
      std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.t < b.t; });
      for (std::size_t i = 1; i < rows.size(); ++i) {
        if (rows[i].t == rows[i - 1].t) {
          throw ValidationError("agent '" + agent_id + "' in scenario '" + scn_id +
                                "': duplicate timestep " + std::to_string(rows[i].t));
        }
      }
      if (static_cast<int>(rows.size()) < T) {
        ++result.dropped_agents;
        result.diagnostics.push_back("scenario '" + scn_id + "' agent '" + agent_id + "': " +
                                     std::to_string(rows.size()) + " rows < T=" + std::to_string(T) +
                                     ", dropped");
        continue;
      }
      AgentTrack tr;
      tr.agent_id = agent_id;
      for (int k = 0; k < T; ++k) tr.past.push_back({rows[static_cast<std::size_t>(k)].x, rows[static_cast<std::size_t>(k)].y, rows[static_cast<std::size_t>(k)].sem});
      if (static_cast<int>(rows.size()) >= T + F) {
        std::vector<TrajState> fut;
        for (int k = T; k < T + F; ++k) fut.push_back({rows[static_cast<std::size_t>(k)].x, rows[static_cast<std::size_t>(k)].y, rows[static_cast<std::size_t>(k)].sem});
        tr.future = std::move(fut);
        if (static_cast<int>(rows.size()) > T + F) {
          result.diagnostics.push_back("scenario '" + scn_id + "' agent '" + agent_id + "': " +
                                       std::to_string(rows.size() - static_cast<std::size_t>(T + F)) +
                                       " rows beyond T+F ignored");
        }
      }
      tr.current_pose = derive_pose(tr.past).pose;
      s.agents.push_back(std::move(tr));
    }
    if (s.agents.empty()) {
      result.diagnostics.push_back("scenario '" + scn_id + "': all agents dropped, skipped");
      continue;
    }
    validate_scenario(s);
    result.scenarios.push_back(std::move(s));
  }
  return result;
}

}  // namespace tpred
