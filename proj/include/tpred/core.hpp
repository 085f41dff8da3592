#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tpred/common.hpp"

namespace tpred {

// Semantic codes for agent tracks.
enum AgentSemantic : int { kVehicle = 0, kPedestrian = 1, kCyclist = 2 };

// Attribute codes for scene vectors.
enum SceneAttribute : int { kLaneCenterline = 0, kRoadBoundary = 1, kCrosswalk = 2 };

// A 2D rigid pose; heading is kept in (-pi, pi].
struct Pose2 {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;

  Pose2() = default;
  Pose2(double px, double py, double h) : x(px), y(py), heading(wrap_angle(h)) {}
};

struct TrajState {
  double x = 0.0;
  double y = 0.0;
  int semantic = kVehicle;
};

struct SceneVector {
  double x = 0.0;
  double y = 0.0;
  int attribute = kLaneCenterline;
};

struct AgentTrack {
  std::string agent_id;
  std::vector<TrajState> past;                   // length T, oldest first
  std::optional<std::vector<TrajState>> future;  // length F when present
  Pose2 current_pose;
};

struct Scenario {
  std::string id;
  std::vector<SceneVector> scene;
  std::vector<AgentTrack> agents;  // index 0 = target by convention
  Pose2 frame;                     // pose of this coordinate frame in its parent
  bool degenerate_heading = false;
};

// --- rigid transforms ---------------------------------------------------

// Maps a point expressed in `frame` back into the parent coordinates.
inline Vec2 frame_to_parent(Vec2 p, const Pose2& frame) {
  const double c = std::cos(frame.heading);
  const double s = std::sin(frame.heading);
  return {frame.x + c * p.x - s * p.y, frame.y + s * p.x + c * p.y};
}

// Maps a parent-frame point into `frame` coordinates.
inline Vec2 parent_to_frame(Vec2 p, const Pose2& frame) {
  const double c = std::cos(frame.heading);
  const double s = std::sin(frame.heading);
  const double dx = p.x - frame.x;
  const double dy = p.y - frame.y;
  return {c * dx + s * dy, -s * dx + c * dy};
}

// Composition pose_of(b in a's parent) given b expressed in frame a.
inline Pose2 compose(const Pose2& a, const Pose2& b) {
  const Vec2 p = frame_to_parent({b.x, b.y}, a);
  return Pose2(p.x, p.y, a.heading + b.heading);
}

inline std::vector<Vec2> from_agent_frame(const std::vector<Vec2>& points, const Pose2& frame) {
  std::vector<Vec2> out;
  out.reserve(points.size());
  for (const Vec2& p : points) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) {
      throw ValidationError("from_agent_frame: non-finite input coordinate");
    }
    out.push_back(frame_to_parent(p, frame));
  }
  return out;
}

inline std::vector<Vec2> to_frame(const std::vector<Vec2>& points, const Pose2& frame) {
  std::vector<Vec2> out;
  out.reserve(points.size());
  for (const Vec2& p : points) out.push_back(parent_to_frame(p, frame));
  return out;
}

// --- pose derivation ----------------------------------------------------

struct DerivedPose {
  Pose2 pose;
  bool degenerate = false;
};

// Current pose from a past track: position is the last state, heading comes
// from the most recent displacement with norm > 1e-6 m. A fully stationary
// track gets heading 0 and the degenerate flag.
inline DerivedPose derive_pose(const std::vector<TrajState>& past) {
  if (past.size() < 2) {
    throw ValidationError("derive_pose: need at least 2 past states");
  }
  DerivedPose out;
  out.pose.x = past.back().x;
  out.pose.y = past.back().y;
  for (int i = static_cast<int>(past.size()) - 1; i >= 1; --i) {
    const double dx = past[i].x - past[i - 1].x;
    const double dy = past[i].y - past[i - 1].y;
    if (std::hypot(dx, dy) > 1e-6) {
      out.pose.heading = wrap_angle(std::atan2(dy, dx));
      return out;
    }
  }
  out.pose.heading = 0.0;
  out.degenerate = true;
  return out;
}

// --- scenario operations ------------------------------------------------

inline void validate_scenario(const Scenario& sc) {
  if (sc.agents.empty()) throw ValidationError("scenario " + sc.id + ": N >= 1 required");
  const std::size_t t_len = sc.agents.front().past.size();
  std::size_t f_len = 0;
  for (const AgentTrack& a : sc.agents) {
    if (a.past.size() < 2) {
      throw ValidationError("scenario " + sc.id + ": agent " + a.agent_id + " has past shorter than 2");
    }
    if (a.past.size() != t_len) {
      throw ValidationError("scenario " + sc.id + ": inconsistent past lengths");
    }
    for (const TrajState& s : a.past) {
      if (!std::isfinite(s.x) || !std::isfinite(s.y)) {
        throw ValidationError("scenario " + sc.id + ": non-finite past coordinate");
      }
    }
    if (a.future) {
      if (a.future->empty()) {
        throw ValidationError("scenario " + sc.id + ": agent " + a.agent_id + " has empty future");
      }
      if (f_len == 0) f_len = a.future->size();
      if (a.future->size() != f_len) {
        throw ValidationError("scenario " + sc.id + ": inconsistent future lengths");
      }
      for (const TrajState& s : *a.future) {
        if (!std::isfinite(s.x) || !std::isfinite(s.y)) {
          throw ValidationError("scenario " + sc.id + ": non-finite future coordinate");
        }
      }
    }
  }
  for (const SceneVector& v : sc.scene) {
    if (!std::isfinite(v.x) || !std::isfinite(v.y)) {
      throw ValidationError("scenario " + sc.id + ": non-finite scene coordinate");
    }
  }
}

// Rigidly re-expresses the whole scenario in the agent-centric frame of
// `target_index`: that agent's current position becomes the origin and its
// heading the +x axis. Semantic and attribute codes pass through untouched.
inline Scenario to_agent_frame(const Scenario& scenario, std::size_t target_index) {
  if (target_index >= scenario.agents.size()) {
    throw ValidationError("to_agent_frame: target index out of range");
  }
  const AgentTrack& target = scenario.agents[target_index];
  if (target.past.size() < 2) {
    throw ValidationError("to_agent_frame: target needs at least 2 past states");
  }
  const DerivedPose dp = derive_pose(target.past);
  const Pose2 anchor = dp.pose;

  Scenario out;
  out.id = scenario.id;
  out.frame = compose(scenario.frame, anchor);
  out.degenerate_heading = scenario.degenerate_heading || dp.degenerate;
  out.scene.reserve(scenario.scene.size());
  for (const SceneVector& v : scenario.scene) {
    const Vec2 p = parent_to_frame({v.x, v.y}, anchor);
    out.scene.push_back({p.x, p.y, v.attribute});
  }
  out.agents.reserve(scenario.agents.size());
  for (const AgentTrack& a : scenario.agents) {
    AgentTrack t;
    t.agent_id = a.agent_id;
    t.past.reserve(a.past.size());
    for (const TrajState& s : a.past) {
      const Vec2 p = parent_to_frame({s.x, s.y}, anchor);
      t.past.push_back({p.x, p.y, s.semantic});
    }
    if (a.future) {
      std::vector<TrajState> fut;
      fut.reserve(a.future->size());
      for (const TrajState& s : *a.future) {
        const Vec2 p = parent_to_frame({s.x, s.y}, anchor);
        fut.push_back({p.x, p.y, s.semantic});
      }
      t.future = std::move(fut);
    }
    const Vec2 cp = parent_to_frame({a.current_pose.x, a.current_pose.y}, anchor);
    t.current_pose = Pose2(cp.x, cp.y, a.current_pose.heading - anchor.heading);
    out.agents.push_back(std::move(t));
  }
  return out;
}

// Moves agent `target_index` to slot 0 so downstream code can always treat
// index 0 as the target. The relative order of the other agents is kept.
inline Scenario retarget(const Scenario& scenario, std::size_t target_index) {
  if (target_index >= scenario.agents.size()) {
    throw ValidationError("retarget: target index out of range");
  }
  Scenario out = scenario;
  if (target_index != 0) {
    AgentTrack t = std::move(out.agents[target_index]);
    out.agents.erase(out.agents.begin() + static_cast<std::ptrdiff_t>(target_index));
    out.agents.insert(out.agents.begin(), std::move(t));
  }
  return out;
}

inline std::vector<Vec2> track_points(const std::vector<TrajState>& states) {
  std::vector<Vec2> out;
  out.reserve(states.size());
  for (const TrajState& s : states) out.push_back({s.x, s.y});
  return out;
}

}  // namespace tpred
