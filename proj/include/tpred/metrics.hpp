#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tpred/core.hpp"
#include "tpred/proposer.hpp"
#include "tpred/refiner.hpp"

namespace tpred {

// Evaluation metrics over multimodal predictions. All of them select the
// top-k modes by confidence when k < M (ties broken toward the lower mode
// index) and measure displacement against the time-aligned ground truth.

inline constexpr double kMissThreshold = 2.0;  // endpoint displacement >= 2 m is a miss

struct EvalReport {
  int k = 6;
  double min_ade = 0.0;
  double min_fde = 0.0;
  double miss_rate = 0.0;
  double brier_fde = 0.0;
  std::size_t n = 0;
};

namespace detail {

// Mode indices ordered by descending confidence, ties toward lower index;
// truncated to the first k.
inline std::vector<int> top_k_by_confidence(const std::vector<double>& confidences, int k) {
  const int modes = static_cast<int>(confidences.size());
  if (k < 1) throw ValidationError("metrics: k must be >= 1");
  if (k > modes) {
    throw ValidationError("metrics: k = " + std::to_string(k) + " exceeds " +
                          std::to_string(modes) + " modes");
  }
  std::vector<int> order(static_cast<std::size_t>(modes));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return confidences[static_cast<std::size_t>(a)] >
                                              confidences[static_cast<std::size_t>(b)]; });
  order.resize(static_cast<std::size_t>(k));
  return order;
}

inline void check_modes(const std::vector<std::vector<Vec2>>& modes,
                        const std::vector<double>& confidences, const std::vector<Vec2>& gt) {
  if (modes.empty()) throw ValidationError("metrics: no predicted modes");
  if (modes.size() != confidences.size()) {
    throw ValidationError("metrics: mode and confidence counts differ");
  }
  if (gt.empty()) throw ValidationError("metrics: empty ground truth");
  for (const auto& m : modes) {
    if (m.size() != gt.size()) {
      throw ValidationError("metrics: mode horizon " + std::to_string(m.size()) +
                            " does not match ground truth " + std::to_string(gt.size()));
    }
  }
}

}  // namespace detail

inline double min_ade(const std::vector<std::vector<Vec2>>& modes,
                      const std::vector<double>& confidences, const std::vector<Vec2>& gt, int k) {
  detail::check_modes(modes, confidences, gt);
  double best = std::numeric_limits<double>::infinity();
  for (int m : detail::top_k_by_confidence(confidences, k)) {
    const std::vector<Vec2>& traj = modes[static_cast<std::size_t>(m)];
    double acc = 0.0;
    for (std::size_t f = 0; f < gt.size(); ++f) acc += dist(traj[f], gt[f]);
    best = std::min(best, acc / static_cast<double>(gt.size()));
  }
  return best;
}

inline double min_fde(const std::vector<std::vector<Vec2>>& modes,
                      const std::vector<double>& confidences, const std::vector<Vec2>& gt, int k) {
  detail::check_modes(modes, confidences, gt);
  double best = std::numeric_limits<double>::infinity();
  for (int m : detail::top_k_by_confidence(confidences, k)) {
    best = std::min(best, dist(modes[static_cast<std::size_t>(m)].back(), gt.back()));
  }
  return best;
}

// minFDE_k + (1 - p)^2 where p is the confidence of the mode achieving
// minFDE_k (first achiever in selection order on ties).
inline double brier_fde(const std::vector<std::vector<Vec2>>& modes,
                        const std::vector<double>& confidences, const std::vector<Vec2>& gt, int k) {
  detail::check_modes(modes, confidences, gt);
  double best = std::numeric_limits<double>::infinity();
  double best_p = 0.0;
  for (int m : detail::top_k_by_confidence(confidences, k)) {
    const double fde = dist(modes[static_cast<std::size_t>(m)].back(), gt.back());
    if (fde < best) {
      best = fde;
      best_p = confidences[static_cast<std::size_t>(m)];
    }
  }
  return best + (1.0 - best_p) * (1.0 - best_p);
}

// Fraction of samples whose best endpoint displacement is >= 2 m. Takes the
// per-sample minFDE_k values.
inline double miss_rate(const std::vector<double>& best_fdes) {
  if (best_fdes.empty()) throw ValidationError("miss_rate: empty evaluation set");
  std::size_t misses = 0;
  for (double fde : best_fdes) {
    if (fde >= kMissThreshold) ++misses;
  }
  return static_cast<double>(misses) / static_cast<double>(best_fdes.size());
}

// --- dataset-level evaluation -------------------------------------------

struct EvalSettings {
  int k = 6;
  bool use_refiner = true;  // false evaluates the proposal stage directly
};

namespace detail {

struct SamplePrediction {
  std::vector<std::vector<Vec2>> modes;  // target-frame trajectories
  std::vector<double> confidences;
  std::vector<Vec2> gt;  // same frame as modes
};

// Runs the model on one scenario and returns the target-agent prediction in
// the target's frame, where metric geometry matches the training losses.
inline SamplePrediction predict_target(const Scenario& raw, const ParameterStore& store,
                                       const ProposerConfig& pcfg, const RefinerConfig& rcfg,
                                       bool use_refiner, Rng& rng) {
  const Scenario sc = retarget(raw, 0);
  SamplePrediction out;
  const ProposalSet ps = propose(sc, store, pcfg, false, rng);
  if (use_refiner) {
    const RefinedPrediction rp = refine(sc, ps, store, rcfg, false, rng, 0);
    for (const RefinedMode& m : rp.modes) {
      out.modes.push_back(m.mean);
      out.confidences.push_back(m.confidence);
    }
  } else {
    out.modes = ps.agents[0].trajectories;
    out.confidences = ps.agents[0].confidences;
  }
  if (!sc.agents[0].future || sc.agents[0].future->empty()) {
    throw ValidationError("evaluate: scenario '" + sc.id + "' lacks a target future");
  }
  for (const TrajState& s : *sc.agents[0].future) out.gt.push_back({s.x, s.y});
  return out;
}

}  // namespace detail

// Averages the per-sample metrics for the target agent (agent 0) over the
// split. Dropout is off, so the report is deterministic for a fixed store.
inline EvalReport evaluate(const std::vector<Scenario>& split, const ParameterStore& store,
                           const ProposerConfig& pcfg, const RefinerConfig& rcfg,
                           const EvalSettings& settings = {}) {
  if (split.empty()) throw ValidationError("evaluate: empty split");
  EvalReport report;
  report.k = settings.k;
  report.n = split.size();
  Rng rng(0);  // never consumed: dropout is disabled in eval mode
  std::vector<double> fdes;
  fdes.reserve(split.size());
  double ade_acc = 0.0;
  double brier_acc = 0.0;
  for (const Scenario& raw : split) {
    const detail::SamplePrediction sp =
        detail::predict_target(raw, store, pcfg, rcfg, settings.use_refiner, rng);
    const double ade = min_ade(sp.modes, sp.confidences, sp.gt, settings.k);
    const double fde = min_fde(sp.modes, sp.confidences, sp.gt, settings.k);
    const double brier = brier_fde(sp.modes, sp.confidences, sp.gt, settings.k);
    if (ade < 0.0 || fde < 0.0) throw NumericError("evaluate: negative displacement metric");
    if (brier - fde < 0.0 || brier - fde > 1.0) {
      throw NumericError("evaluate: brier penalty outside [0,1]");
    }
    ade_acc += ade;
    brier_acc += brier;
    fdes.push_back(fde);
  }
  report.min_ade = ade_acc / static_cast<double>(report.n);
  report.min_fde = std::accumulate(fdes.begin(), fdes.end(), 0.0) / static_cast<double>(report.n);
  report.brier_fde = brier_acc / static_cast<double>(report.n);
  report.miss_rate = miss_rate(fdes);
  if (report.miss_rate < 0.0 || report.miss_rate > 1.0) {
    throw NumericError("evaluate: miss rate outside [0,1]");
  }
  return report;
}

inline nlohmann::ordered_json report_json(const EvalReport& r) {
  const std::string k = std::to_string(r.k);
  return {{"minade" + k, r.min_ade},
          {"minfde" + k, r.min_fde},
          {"mr" + k, r.miss_rate},
          {"brierfde" + k, r.brier_fde},
          {"n", r.n}};
}

inline std::string report_table(const EvalReport& r) {
  const std::string k = std::to_string(r.k);
  std::ostringstream os;
  os << std::left << std::setw(12) << "metric" << std::right << std::setw(12) << "value" << "\n";
  auto row = [&os](const std::string& name, double v) {
    os << std::left << std::setw(12) << name << std::right << std::setw(12) << std::fixed
       << std::setprecision(4) << v << "\n";
  };
  row("minADE" + k, r.min_ade);
  row("minFDE" + k, r.min_fde);
  row("MR" + k, r.miss_rate);
  row("brierFDE" + k, r.brier_fde);
  os << std::left << std::setw(12) << "n" << std::right << std::setw(12) << r.n << "\n";
  return os.str();
}

}  // namespace tpred
