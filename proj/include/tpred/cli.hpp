#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "tpred/checkpoint.hpp"
#include "tpred/config.hpp"
#include "tpred/metrics.hpp"
#include "tpred/synthgen.hpp"
#include "tpred/training.hpp"

namespace tpred {

// Subcommand bodies for the tpred binary. Each returns the process exit code
// for the success path; failures are reported by throwing, and the entry
// point maps exception families onto exit codes (2 validation, 3 I/O,
// 4 numerical).

namespace detail {

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
}

inline std::string join(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

// The refiner consumes proposal features as queries, so both stages must
// agree on the feature width.
inline void check_model_dims(const RunConfig& rc) {
  if (rc.pro.d != rc.ref.d) {
    throw ValidationError("proposer.d (" + std::to_string(rc.pro.d) + ") and refiner.d (" +
                          std::to_string(rc.ref.d) + ") must match");
  }
}

inline int dataset_horizon(const std::vector<Scenario>& scenarios) {
  for (const Scenario& s : scenarios) {
    for (const AgentTrack& a : s.agents) {
      if (a.future) return static_cast<int>(a.future->size());
    }
  }
  throw ValidationError("dataset has no agent futures; cannot infer the horizon");
}

}  // namespace detail

// --- gen-data ------------------------------------------------------------

inline int run_gen_data(RunConfig rc) {
  rc.gen.rng_seed = rc.seed;
  rc.gen.validate();
  detail::ensure_dir(rc.out_dir);
  const std::vector<Scenario> all = generate_scenarios(rc.gen);
  const DatasetSplit split = split_dataset(all, 0.8, 0.1);
  write_dataset(split, rc.out_dir);
  const nlohmann::ordered_json manifest = {{"v", kDatasetSchemaVersion},
                                           {"seed", rc.gen.rng_seed},
                                           {"n_scenarios", rc.gen.n_scenarios},
                                           {"train", split.train.size()},
                                           {"val", split.val.size()},
                                           {"test", split.test.size()},
                                           {"past_steps", rc.gen.T},
                                           {"future_steps", rc.gen.F}};
  detail::write_file_bytes(detail::join(rc.out_dir, "manifest.json"), manifest.dump() + "\n");
  std::cout << "wrote " << all.size() << " scenarios to " << rc.out_dir << " (train "
            << split.train.size() << ", val " << split.val.size() << ", test "
            << split.test.size() << ")\n";
  return 0;
}

// --- train ---------------------------------------------------------------

inline int run_train(RunConfig rc, const std::string& data_dir) {
  detail::check_model_dims(rc);
  if (rc.eval_k > rc.pro.M) {
    throw ValidationError("metrics.k (" + std::to_string(rc.eval_k) + ") exceeds modes (" +
                          std::to_string(rc.pro.M) + "); lower --k or raise --modes");
  }
  const DatasetSplit data = read_dataset(data_dir);
  if (data.train.empty()) throw ValidationError("training split in '" + data_dir + "' is empty");
  const int F = detail::dataset_horizon(data.train);

  ParameterStore store(rc.seed);
  init_proposer(store, rc.pro, F);
  init_refiner(store, rc.ref, F, rc.pro.M);

  detail::ensure_dir(rc.out_dir);
  TrainConfig tcfg = rc.train_config();
  tcfg.metrics_csv = detail::join(rc.out_dir, "metrics.csv");
  tcfg.best_path = detail::join(rc.out_dir, "best.ckpt");
  tcfg.last_path = detail::join(rc.out_dir, "last.ckpt");
  tcfg.meta_base = {{"format", "tpred-checkpoint"}, {"horizon", F}, {"run", run_config_json(rc)}};

  const TrainResult res = train(data.train, data.val, store, rc.pro, rc.ref, tcfg);
  if (!res.history.empty()) {
    const EpochRow& last = res.history.back();
    std::cout << "trained " << rc.epochs << " epochs; final train loss "
              << detail::fmt_double(last.train_total) << ", best val minADE" << rc.eval_k << " "
              << detail::fmt_double(res.best_val_min_ade) << " at epoch " << res.best_epoch
              << "\n";
  } else {
    std::cout << "trained 0 epochs; wrote untouched model checkpoints\n";
  }
  return 0;
}

// --- eval ----------------------------------------------------------------

namespace detail {

struct LoadedModel {
  ParameterStore params{0};
  ProposerConfig pro;
  RefinerConfig ref;
  bool use_refiner = true;
};

inline LoadedModel load_model(const std::string& ckpt_path) {
  CheckpointData cd = load_checkpoint(ckpt_path);
  LoadedModel m;
  try {
    const nlohmann::ordered_json& run = cd.meta.at("run");
    m.pro = proposer_config_from_json(run.at("proposer"));
    m.ref = refiner_config_from_json(run.at("refiner"));
    m.use_refiner = run.at("training").at("use_refiner").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("checkpoint metadata incomplete: " + std::string(e.what()));
  }
  m.params = std::move(cd.params);
  return m;
}

}  // namespace detail

inline int run_eval(const RunConfig& rc, const std::string& ckpt_path, const std::string& data_dir,
                    const std::string& split_name, std::string json_path,
                    const std::string& stage) {
  if (split_name != "train" && split_name != "val" && split_name != "test") {
    throw ValidationError("eval: --split must be train, val, or test");
  }
  detail::LoadedModel model = detail::load_model(ckpt_path);
  EvalSettings settings;
  settings.k = rc.eval_k;
  settings.use_refiner = model.use_refiner;
  if (stage == "proposal") settings.use_refiner = false;
  else if (stage == "refined") settings.use_refiner = true;
  else if (!stage.empty()) throw ValidationError("eval: --stage must be 'proposal' or 'refined'");

  const std::vector<Scenario> split =
      read_scenarios(detail::join(data_dir, split_name + ".jsonl"));
  const EvalReport rep = evaluate(split, model.params, model.pro, model.ref, settings);

  const std::string json_line = report_json(rep).dump() + "\n";
  std::cout << report_table(rep) << json_line;
  if (json_path.empty()) {
    detail::ensure_dir(rc.out_dir);
    json_path = detail::join(rc.out_dir, "eval.json");
  }
  detail::write_file_bytes(json_path, json_line);
  return 0;
}

// --- predict -------------------------------------------------------------

namespace detail {

inline nlohmann::ordered_json points_json(const std::vector<Vec2>& pts) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const Vec2& p : pts) arr.push_back({p.x, p.y});
  return arr;
}

}  // namespace detail

// Exports world-frame proposals and refined trajectories with everything an
// external plotter needs: per-mode confidences, Laplace scales (in the
// agent's own frame), tube-pool membership, and proposal-group provenance.
inline int run_predict(const RunConfig& rc, const std::string& ckpt_path,
                       const std::string& input_path, std::string export_path) {
  detail::LoadedModel model = detail::load_model(ckpt_path);
  const std::vector<Scenario> scenarios = read_scenarios(input_path);
  if (export_path.empty()) {
    detail::ensure_dir(rc.out_dir);
    export_path = detail::join(rc.out_dir, "predictions.jsonl");
  }

  std::ofstream out(export_path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + export_path + "' for writing");
  Rng rng(0);  // eval mode: never consumed
  for (const Scenario& raw : scenarios) {
    const Pose2 world_anchor = derive_pose(raw.agents[0].past).pose;
    const Scenario sc = retarget(raw, 0);
    const ProposalSet ps = propose(sc, model.params, model.pro, false, rng);
    const std::vector<RefinedPrediction> refined =
        refine_all(sc, ps, model.params, model.ref, false, rng);

    nlohmann::ordered_json agents = nlohmann::ordered_json::array();
    for (std::size_t a = 0; a < ps.agents.size(); ++a) {
      const RefinedPrediction& rp = refined[a];
      const Pose2 agent_world = compose(world_anchor, rp.anchor);
      nlohmann::ordered_json modes = nlohmann::ordered_json::array();
      for (std::size_t m = 0; m < rp.modes.size(); ++m) {
        const RefinedMode& mode = rp.modes[m];
        nlohmann::ordered_json group = nlohmann::ordered_json::array();
        for (const ProposalGroupRef& ref : rp.groups[m]) {
          group.push_back({ref.agent_index, ref.mode});
        }
        modes.push_back(
            {{"proposal", detail::points_json(
                              from_agent_frame(ps.agents[a].trajectories[m], world_anchor))},
             {"proposal_confidence", ps.agents[a].confidences[m]},
             {"refined", detail::points_json(from_agent_frame(mode.mean, agent_world))},
             {"scale", detail::points_json(mode.scale)},
             {"confidence", mode.confidence},
             {"tube_pool", rp.pools[m].member_indices},
             {"group", group}});
      }
      agents.push_back({{"id", sc.agents[a].agent_id},
                        {"anchor", {agent_world.x, agent_world.y, agent_world.heading}},
                        {"modes", modes}});
    }
    const nlohmann::ordered_json line = {
        {"v", kDatasetSchemaVersion}, {"id", raw.id}, {"agents", agents}};
    out << line.dump() << "\n";
  }
  if (!out) throw IoError("write failed for '" + export_path + "'");
  std::cout << "wrote predictions for " << scenarios.size() << " scenarios to " << export_path
            << "\n";
  return 0;
}

// --- ingest --------------------------------------------------------------

inline int run_ingest(const RunConfig& rc, const std::string& tracks_path,
                      const std::string& scene_path,
                      const std::map<std::string, std::string>& col_map,
                      std::string export_path) {
  const IngestResult result = ingest_csv(tracks_path, scene_path, col_map, rc.gen.T, rc.gen.F);
  if (export_path.empty()) {
    detail::ensure_dir(rc.out_dir);
    export_path = detail::join(rc.out_dir, "ingested.jsonl");
  }
  write_scenarios(result.scenarios, export_path);
  for (const std::string& d : result.diagnostics) std::cout << d << "\n";
  std::cout << "ingested " << result.scenarios.size() << " scenarios ("
            << result.dropped_agents << " agents dropped) to " << export_path << "\n";
  return 0;
}

}  // namespace tpred
