#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tpred/proposer.hpp"
#include "tpred/refiner.hpp"
#include "tpred/synthgen.hpp"
#include "tpred/training.hpp"

namespace tpred {

// Merged run configuration. Every field has a default; a config file
// overrides defaults section by section, and command-line flags override the
// file (the merge order is: defaults, then profile, then file, then flags).

struct RunConfig {
  std::uint64_t seed = 7;
  std::string out_dir = "out";
  GeneratorConfig gen;
  ProposerConfig pro;
  RefinerConfig ref;
  int epochs = 64;
  int batch_size = 32;
  double base_lr = 5e-4;
  double weight_decay = 0.01;
  double clip_norm = 0.0;
  bool use_refiner = true;
  int eval_k = 6;

  TrainConfig train_config() const {
    TrainConfig t;
    t.epochs = epochs;
    t.batch_size = batch_size;
    t.base_lr = base_lr;
    t.optimizer.weight_decay = weight_decay;
    t.optimizer.clip_norm = clip_norm;
    t.seed = seed;
    t.use_refiner = use_refiner;
    t.eval_k = eval_k;
    return t;
  }
};

// Named hyperparameter presets: "desk" shrinks the model and widens batches
// for laptop-scale runs, "full" is the production scale.
inline void apply_profile(RunConfig& rc, const std::string& profile) {
  if (profile == "desk") {
    rc.pro.d = 64;
    rc.ref.d = 64;
    rc.batch_size = 64;
  } else if (profile == "full") {
    rc.pro.d = 128;
    rc.ref.d = 128;
    rc.batch_size = 32;
  } else {
    throw ValidationError("unknown profile '" + profile + "' (expected 'desk' or 'full')");
  }
}

namespace detail {

inline std::string trim(const std::string& s) {
  const std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

struct ConfigEntry {
  std::string section;
  std::string key;
  std::string value;  // raw text, quotes already stripped
  int line = 0;
};

inline std::vector<ConfigEntry> parse_config_text(const std::string& text,
                                                  const std::string& origin) {
  std::vector<ConfigEntry> entries;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = origin + ":" + std::to_string(lineno);
    // Comments start at '#' outside quotes.
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.resize(i);
        break;
      }
    }
    const std::string t = trim(line);
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']' || t.size() < 3) {
        throw ValidationError(where + ": malformed section header '" + t + "'");
      }
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    const std::size_t eq = t.find('=');
    if (eq == std::string::npos) {
      throw ValidationError(where + ": expected 'key = value', got '" + t + "'");
    }
    ConfigEntry e;
    e.section = section;
    e.key = trim(t.substr(0, eq));
    e.value = trim(t.substr(eq + 1));
    e.line = lineno;
    if (e.key.empty()) throw ValidationError(where + ": empty key");
    if (e.value.size() >= 2 && e.value.front() == '"' && e.value.back() == '"') {
      e.value = e.value.substr(1, e.value.size() - 2);
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

inline double config_double(const ConfigEntry& e) {
  try {
    std::size_t used = 0;
    const double v = std::stod(e.value, &used);
    if (used != e.value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ValidationError("config " + e.section + "." + e.key + ": '" + e.value +
                          "' is not a number");
  }
}

inline int config_int(const ConfigEntry& e) {
  try {
    std::size_t used = 0;
    const long v = std::stol(e.value, &used);
    if (used != e.value.size()) throw std::invalid_argument("trailing");
    return static_cast<int>(v);
  } catch (const std::exception&) {
    throw ValidationError("config " + e.section + "." + e.key + ": '" + e.value +
                          "' is not an integer");
  }
}

inline std::uint64_t config_u64(const ConfigEntry& e) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(e.value, &used);
    if (used != e.value.size()) throw std::invalid_argument("trailing");
    return static_cast<std::uint64_t>(v);
  } catch (const std::exception&) {
    throw ValidationError("config " + e.section + "." + e.key + ": '" + e.value +
                          "' is not an unsigned integer");
  }
}

inline bool config_bool(const ConfigEntry& e) {
  if (e.value == "true") return true;
  if (e.value == "false") return false;
  throw ValidationError("config " + e.section + "." + e.key + ": expected 'true' or 'false'");
}

inline void apply_entry(RunConfig& rc, const ConfigEntry& e) {
  const std::string id = e.section + "." + e.key;
  if (id == "run.seed") rc.seed = config_u64(e);
  else if (id == "run.out") rc.out_dir = e.value;
  else if (id == "generator.n_scenarios") rc.gen.n_scenarios = config_int(e);
  else if (id == "generator.lanes_min") rc.gen.lanes_min = config_int(e);
  else if (id == "generator.lanes_max") rc.gen.lanes_max = config_int(e);
  else if (id == "generator.agents_min") rc.gen.agents_min = config_int(e);
  else if (id == "generator.agents_max") rc.gen.agents_max = config_int(e);
  else if (id == "generator.lane_length") rc.gen.lane_length = config_double(e);
  else if (id == "generator.lane_sample_spacing") rc.gen.lane_sample_spacing = config_double(e);
  else if (id == "generator.noise_sigma") rc.gen.noise_sigma = config_double(e);
  else if (id == "generator.past_steps") rc.gen.T = config_int(e);
  else if (id == "generator.future_steps") rc.gen.F = config_int(e);
  else if (id == "generator.step_dt") rc.gen.step_dt = config_double(e);
  else if (id == "proposer.d") rc.pro.d = config_int(e);
  else if (id == "proposer.modes") rc.pro.M = config_int(e);
  else if (id == "proposer.history_layers") rc.pro.history_layers = config_int(e);
  else if (id == "proposer.scene_radius") rc.pro.scene_radius = config_double(e);
  else if (id == "proposer.heads") rc.pro.heads = config_int(e);
  else if (id == "proposer.dropout") rc.pro.dropout_rate = config_double(e);
  else if (id == "proposer.decoder_hidden") rc.pro.decoder_hidden = config_int(e);
  else if (id == "refiner.tube_radius") rc.ref.tube_radius = config_double(e);
  else if (id == "refiner.group_distance") rc.ref.group_distance = config_double(e);
  else if (id == "refiner.group_confidence") rc.ref.group_confidence = config_double(e);
  else if (id == "refiner.d") rc.ref.d = config_int(e);
  else if (id == "refiner.heads") rc.ref.heads = config_int(e);
  else if (id == "refiner.dropout") rc.ref.dropout_rate = config_double(e);
  else if (id == "refiner.reg_hidden") rc.ref.reg_hidden = config_int(e);
  else if (id == "training.epochs") rc.epochs = config_int(e);
  else if (id == "training.batch_size") rc.batch_size = config_int(e);
  else if (id == "training.base_lr") rc.base_lr = config_double(e);
  else if (id == "training.weight_decay") rc.weight_decay = config_double(e);
  else if (id == "training.clip_norm") rc.clip_norm = config_double(e);
  else if (id == "training.use_refiner") rc.use_refiner = config_bool(e);
  else if (id == "metrics.k") rc.eval_k = config_int(e);
  else throw ValidationError("config: unknown key '" + id + "'");
}

}  // namespace detail

inline void apply_config_text(RunConfig& rc, const std::string& text, const std::string& origin) {
  for (const detail::ConfigEntry& e : detail::parse_config_text(text, origin)) {
    detail::apply_entry(rc, e);
  }
}

inline void load_config_file(RunConfig& rc, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "' for reading");
  std::stringstream buf;
  buf << in.rdbuf();
  apply_config_text(rc, buf.str(), path);
}

// Snapshot used in checkpoint metadata and run manifests.
inline nlohmann::ordered_json run_config_json(const RunConfig& rc) {
  return {{"seed", rc.seed},
          {"out", rc.out_dir},
          {"generator",
           {{"n_scenarios", rc.gen.n_scenarios},
            {"lanes_min", rc.gen.lanes_min},
            {"lanes_max", rc.gen.lanes_max},
            {"agents_min", rc.gen.agents_min},
            {"agents_max", rc.gen.agents_max},
            {"lane_length", rc.gen.lane_length},
            {"lane_sample_spacing", rc.gen.lane_sample_spacing},
            {"noise_sigma", rc.gen.noise_sigma},
            {"past_steps", rc.gen.T},
            {"future_steps", rc.gen.F},
            {"step_dt", rc.gen.step_dt}}},
          {"proposer", proposer_config_json(rc.pro)},
          {"refiner", refiner_config_json(rc.ref)},
          {"training",
           {{"epochs", rc.epochs},
            {"batch_size", rc.batch_size},
            {"base_lr", rc.base_lr},
            {"weight_decay", rc.weight_decay},
            {"clip_norm", rc.clip_norm},
            {"use_refiner", rc.use_refiner}}},
          {"metrics", {{"k", rc.eval_k}}}};
}

}  // namespace tpred
