#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "tpred/checkpoint.hpp"
#include "tpred/metrics.hpp"
#include "tpred/proposer.hpp"
#include "tpred/refiner.hpp"
#include "tpred/tensor.hpp"

namespace tpred {

// Losses, winner-takes-all mode selection, the optimizer, the learning-rate
// schedule, and the end-to-end training loop over both stages.

// --- losses --------------------------------------------------------------

struct LossWeights {
  double alpha = 1.0;  // proposal regression
  double beta = 1.0;   // proposal classification
  double gamma = 1.0;  // refined regression
  double delta = 1.0;  // refined classification
};

struct LossBreakdown {
  Tensor reg_pro;
  Tensor cls_pro;
  Tensor reg_ref;
  Tensor cls_ref;
  Tensor total;
  std::vector<int> winners_pro;  // per-agent proposal-stage WTA mode
  std::vector<int> winners_ref;  // per-agent refined-stage WTA mode; empty without refiner
};

// Negative log likelihood of a per-axis Laplace distribution: per waypoint
// and axis log(2b) + |y - mean|/b, summed over the two axes and averaged
// over the F waypoints.
inline Tensor laplace_nll(const Tensor& mean, const Tensor& b, const std::vector<Vec2>& gt) {
  if (!mean.defined() || !b.defined()) throw ValidationError("laplace_nll: undefined inputs");
  if (mean.shape() != b.shape()) throw ValidationError("laplace_nll: mean/scale shape mismatch");
  if (mean.rank() != 2 || mean.dim(1) != 2 || mean.dim(0) != static_cast<int>(gt.size())) {
    throw ValidationError("laplace_nll: expected [F,2] tensors matching ground truth length");
  }
  for (double v : b.data()) {
    if (!(v > 0.0)) throw ValidationError("laplace_nll: scale entries must be > 0");
  }
  const int F = mean.dim(0);
  const Tensor target = constant_points(gt);
  const Tensor per_entry = add(log_op(scale(b, 2.0)), div(abs_op(sub(target, mean)), b));
  return scale(sum(per_entry), 1.0 / static_cast<double>(F));
}

// Fixed unit scale for the proposal stage, which predicts means only.
inline Tensor unit_scale(int F) {
  return constant({F, 2}, std::vector<double>(static_cast<std::size_t>(F) * 2, 1.0));
}

// Winner-takes-all mode: argmin over modes of the summed per-step L2
// displacement; ties resolve to the lowest index.
inline int wta_mode(const std::vector<std::vector<Vec2>>& modes, const std::vector<Vec2>& gt) {
  if (modes.empty()) throw ValidationError("wta_mode: no modes");
  int best = 0;
  double best_err = std::numeric_limits<double>::infinity();
  for (std::size_t m = 0; m < modes.size(); ++m) {
    if (modes[m].size() != gt.size()) throw ValidationError("wta_mode: horizon mismatch");
    double err = 0.0;
    for (std::size_t f = 0; f < gt.size(); ++f) err += dist(modes[m][f], gt[f]);
    if (err < best_err) {
      best_err = err;
      best = static_cast<int>(m);
    }
  }
  return best;
}

// Cross entropy against the winning mode, with the log argument floored so a
// confidence collapse cannot produce infinities.
inline Tensor classification_loss(const Tensor& confidences, int winner) {
  if (winner < 0 || winner >= static_cast<int>(confidences.numel())) {
    throw ValidationError("classification_loss: winner index out of range");
  }
  return neg(log_op(clamp_min(pick(confidences, winner), 1e-12)));
}

// Builds the full two-stage loss for one scenario. The scenario and proposal
// set share a frame; refined predictions are scored in their own anchor
// frames. WTA runs independently per stage. Pass an empty `refined` vector to
// train the proposal stage alone (the refined terms become exact zeros).
inline LossBreakdown total_loss(const Scenario& scenario, const ProposalSet& proposals,
                                const std::vector<RefinedPrediction>& refined,
                                const LossWeights& w = {}) {
  const std::size_t N = proposals.agents.size();
  if (N == 0) throw ValidationError("total_loss: empty proposal set");
  if (scenario.agents.size() != N) {
    throw ValidationError("total_loss: scenario and proposal set disagree on agent count");
  }
  if (!refined.empty() && refined.size() != N) {
    throw ValidationError("total_loss: refined predictions must cover every agent");
  }
  for (const AgentTrack& a : scenario.agents) {
    if (!a.future || a.future->empty()) {
      throw ValidationError("total_loss: agent '" + a.agent_id + "' has no future");
    }
  }

  LossBreakdown out;
  const Tensor ones_b = unit_scale(proposals.horizon);
  Tensor reg_pro_acc, cls_pro_acc, reg_ref_acc, cls_ref_acc;
  auto accumulate = [](Tensor& acc, const Tensor& term) {
    acc = acc.defined() ? add(acc, term) : term;
  };
  for (std::size_t n = 0; n < N; ++n) {
    std::vector<Vec2> gt;
    gt.reserve(scenario.agents[n].future->size());
    for (const TrajState& s : *scenario.agents[n].future) gt.push_back({s.x, s.y});

    const AgentProposals& ap = proposals.agents[n];
    const int m_pro = wta_mode(ap.trajectories, gt);
    out.winners_pro.push_back(m_pro);
    accumulate(reg_pro_acc, laplace_nll(ap.traj_nodes[static_cast<std::size_t>(m_pro)], ones_b, gt));
    accumulate(cls_pro_acc, classification_loss(ap.conf_node, m_pro));

    if (!refined.empty()) {
      const RefinedPrediction& rp = refined[n];
      std::vector<Vec2> gt_local;
      gt_local.reserve(gt.size());
      for (const Vec2& p : gt) gt_local.push_back(parent_to_frame(p, rp.anchor));
      std::vector<std::vector<Vec2>> means;
      means.reserve(rp.modes.size());
      for (const RefinedMode& m : rp.modes) means.push_back(m.mean);
      const int m_ref = wta_mode(means, gt_local);
      out.winners_ref.push_back(m_ref);
      const RefinedMode& win = rp.modes[static_cast<std::size_t>(m_ref)];
      accumulate(reg_ref_acc, laplace_nll(win.mean_node, win.scale_node, gt_local));
      accumulate(cls_ref_acc, classification_loss(rp.conf_node, m_ref));
    }
  }
  const double inv_n = 1.0 / static_cast<double>(N);
  out.reg_pro = scale(reg_pro_acc, inv_n);
  out.cls_pro = scale(cls_pro_acc, inv_n);
  out.reg_ref = refined.empty() ? constant_scalar(0.0) : scale(reg_ref_acc, inv_n);
  out.cls_ref = refined.empty() ? constant_scalar(0.0) : scale(cls_ref_acc, inv_n);
  out.total = add(add(scale(out.reg_pro, w.alpha), scale(out.cls_pro, w.beta)),
                  add(scale(out.reg_ref, w.gamma), scale(out.cls_ref, w.delta)));
  return out;
}

// --- optimizer and schedule ---------------------------------------------

// Cosine decay from `base` to 0 across `horizon` epochs.
inline double cosine_lr(double base, int epoch, int horizon) {
  if (horizon < 1) throw ValidationError("cosine_lr: horizon must be >= 1");
  const double e = std::clamp(static_cast<double>(epoch), 0.0, static_cast<double>(horizon));
  return base * (1.0 + std::cos(kPi * e / static_cast<double>(horizon))) / 2.0;
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 0.0;  // 0 disables gradient clipping

  void validate() const {
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
      throw ValidationError("adamw: betas must be in [0,1)");
    }
    if (eps <= 0.0) throw ValidationError("adamw: eps must be > 0");
    if (weight_decay < 0.0) throw ValidationError("adamw: weight decay must be >= 0");
    if (clip_norm < 0.0) throw ValidationError("adamw: clip_norm must be >= 0");
  }
};

// Adaptive moments with decoupled weight decay. Moment buffers are keyed by
// parameter name and shaped lazily on first step.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }

  void step(ParameterStore& store, double lr) {
    ++t_;
    double clip_factor = 1.0;
    if (cfg_.clip_norm > 0.0) {
      double sq = 0.0;
      for (const auto& [name, t] : store.items()) {
        if (!t.has_grad()) continue;
        for (double g : t.grad()) sq += g * g;
      }
      const double norm = std::sqrt(sq);
      if (norm > cfg_.clip_norm) clip_factor = cfg_.clip_norm / norm;
    }
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const auto& [name, t] : store.items()) {
      if (!t.has_grad()) continue;
      std::vector<double>& m = m_[name];
      std::vector<double>& v = v_[name];
      if (m.empty()) m.assign(t.numel(), 0.0);
      if (v.empty()) v.assign(t.numel(), 0.0);
      std::vector<double>& p = t.data();
      const std::vector<double>& g = t.grad();
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i] * clip_factor;
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
        p[i] -= lr * (update + cfg_.weight_decay * p[i]);
      }
    }
  }

  long long steps() const { return t_; }

 private:
  AdamWConfig cfg_;
  long long t_ = 0;
  std::map<std::string, std::vector<double>> m_;
  std::map<std::string, std::vector<double>> v_;
};

// --- training loop -------------------------------------------------------

struct TrainConfig {
  int epochs = 64;
  int batch_size = 32;
  double base_lr = 5e-4;
  AdamWConfig optimizer;
  LossWeights weights;
  std::uint64_t seed = 7;
  bool use_refiner = true;
  int eval_k = 6;
  std::string metrics_csv;              // empty: no CSV written
  std::string best_path;                // empty: no best checkpoint written
  std::string last_path;                // empty: no last checkpoint written
  nlohmann::ordered_json meta_base;     // merged into checkpoint metadata

  void validate() const {
    if (epochs < 0) throw ValidationError("train: epochs must be >= 0");
    if (batch_size < 1) throw ValidationError("train: batch_size must be >= 1");
    if (base_lr < 0.0) throw ValidationError("train: base_lr must be >= 0");
    if (eval_k < 1) throw ValidationError("train: eval_k must be >= 1");
    optimizer.validate();
  }
};

struct EpochRow {
  int epoch = 0;
  double lr = 0.0;
  double train_total = 0.0;
  double val_min_ade = 0.0;
  double val_min_fde = 0.0;
  double val_miss_rate = 0.0;
};

struct TrainResult {
  std::vector<EpochRow> history;
  int best_epoch = -1;
  double best_val_min_ade = std::numeric_limits<double>::infinity();
};

namespace detail {

// Shortest round-trip decimal rendering, shared with the JSON emitters so
// logs are byte-stable across runs.
inline std::string fmt_double(double v) { return nlohmann::json(v).dump(); }

inline void shuffle_indices(std::vector<std::size_t>& idx, Rng& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1));
    std::swap(idx[i - 1], idx[j]);
  }
}

}  // namespace detail

// Trains both stages end to end: seeded shuffling into batches, loss averaged
// over each batch, cosine learning-rate decay per epoch, validation metrics
// after every epoch, and best/last checkpointing. Aborts with the global step
// number if any loss turns non-finite.
inline TrainResult train(const std::vector<Scenario>& train_split,
                         const std::vector<Scenario>& val_split, ParameterStore& store,
                         const ProposerConfig& pcfg, const RefinerConfig& rcfg,
                         const TrainConfig& tcfg) {
  tcfg.validate();
  if (train_split.empty()) throw ValidationError("train: empty training split");
  if (val_split.empty()) throw ValidationError("train: empty validation split");

  AdamW opt(tcfg.optimizer);
  Rng dropout_rng(mix_seed(tcfg.seed, 0xd506u));
  TrainResult result;
  const EvalSettings eval_settings{tcfg.eval_k, tcfg.use_refiner};

  std::ofstream csv;
  if (!tcfg.metrics_csv.empty()) {
    csv.open(tcfg.metrics_csv, std::ios::trunc);
    if (!csv) throw IoError("cannot open '" + tcfg.metrics_csv + "' for writing");
    const std::string k = std::to_string(tcfg.eval_k);
    csv << "epoch,lr,train_total,val_minade" << k << ",val_minfde" << k << ",val_mr" << k << "\n";
  }

  std::vector<std::size_t> order(train_split.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  long long global_step = 0;

  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    const double lr = cosine_lr(tcfg.base_lr, epoch, tcfg.epochs);
    Rng shuffle_rng(mix_seed(tcfg.seed, 0xe90cu + static_cast<std::uint64_t>(epoch)));
    detail::shuffle_indices(order, shuffle_rng);

    double epoch_total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(tcfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(tcfg.batch_size));
      const double inv_batch = 1.0 / static_cast<double>(end - start);
      store.zero_grads();
      ++global_step;
      for (std::size_t i = start; i < end; ++i) {
        try {
          const Scenario sc = retarget(train_split[order[i]], 0);
          const ProposalSet ps = propose(sc, store, pcfg, true, dropout_rng);
          const std::vector<RefinedPrediction> refined =
              tcfg.use_refiner ? refine_all(sc, ps, store, rcfg, true, dropout_rng)
                               : std::vector<RefinedPrediction>{};
          const LossBreakdown lb = total_loss(sc, ps, refined, tcfg.weights);
          const double total_value = lb.total.data()[0];
          if (!std::isfinite(total_value)) {
            throw NumericError("non-finite total loss");
          }
          epoch_total += total_value;
          backward(scale(lb.total, inv_batch));
        } catch (const NumericError& e) {
          throw NumericError(std::string(e.what()) + " (train step " + std::to_string(global_step) +
                             ", scenario '" + train_split[order[i]].id + "')");
        }
      }
      opt.step(store, lr);
    }

    const EvalReport rep = evaluate(val_split, store, pcfg, rcfg, eval_settings);
    EpochRow row;
    row.epoch = epoch;
    row.lr = lr;
    row.train_total = epoch_total / static_cast<double>(train_split.size());
    row.val_min_ade = rep.min_ade;
    row.val_min_fde = rep.min_fde;
    row.val_miss_rate = rep.miss_rate;
    result.history.push_back(row);

    if (csv.is_open()) {
      csv << row.epoch << ',' << detail::fmt_double(row.lr) << ','
          << detail::fmt_double(row.train_total) << ',' << detail::fmt_double(row.val_min_ade)
          << ',' << detail::fmt_double(row.val_min_fde) << ','
          << detail::fmt_double(row.val_miss_rate) << "\n";
      csv.flush();
    }

    nlohmann::ordered_json meta = tcfg.meta_base;
    meta["checkpoint"] = {{"epoch", epoch}, {"val", report_json(rep)}};
    if (!tcfg.last_path.empty()) save_checkpoint(tcfg.last_path, meta, store);
    if (rep.min_ade < result.best_val_min_ade) {
      result.best_val_min_ade = rep.min_ade;
      result.best_epoch = epoch;
      if (!tcfg.best_path.empty()) save_checkpoint(tcfg.best_path, meta, store);
    }
  }

  // A zero-epoch run still leaves valid artifacts behind: the untouched model
  // is both "best" and "last", with validation metrics to match.
  if (tcfg.epochs == 0) {
    const EvalReport rep = evaluate(val_split, store, pcfg, rcfg, eval_settings);
    result.best_val_min_ade = rep.min_ade;
    result.best_epoch = -1;
    nlohmann::ordered_json meta = tcfg.meta_base;
    meta["checkpoint"] = {{"epoch", -1}, {"val", report_json(rep)}};
    if (!tcfg.last_path.empty()) save_checkpoint(tcfg.last_path, meta, store);
    if (!tcfg.best_path.empty()) save_checkpoint(tcfg.best_path, meta, store);
  }
  return result;
}

}  // namespace tpred
