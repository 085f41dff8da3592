#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tpred/cli.hpp"

namespace {

using tpred::RunConfig;

// Flag values are captured as optionals so the merge order is explicit:
// defaults, then --profile, then --config, then individual flags.
struct CommonFlags {
  std::optional<std::string> profile;
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

void add_common_flags(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--profile", f.profile, "hyperparameter preset: desk or full");
  cmd->add_option("--config", f.config, "TOML-style config file");
  cmd->add_option("--seed", f.seed, "run seed");
  cmd->add_option("--out", f.out, "output directory");
}

RunConfig resolve_config(const CommonFlags& f) {
  RunConfig rc;
  if (f.profile) tpred::apply_profile(rc, *f.profile);
  if (f.config) tpred::load_config_file(rc, *f.config);
  if (f.seed) rc.seed = *f.seed;
  if (f.out) rc.out_dir = *f.out;
  return rc;
}

template <typename T>
void apply_flag(const std::optional<T>& flag, T& field) {
  if (flag) field = *flag;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"two-stage multimodal trajectory prediction"};
  app.require_subcommand(1);

  // gen-data
  CommonFlags gen_common;
  std::optional<int> gen_n, gen_past, gen_future;
  std::optional<double> gen_noise;
  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  add_common_flags(gen, gen_common);
  gen->add_option("--n", gen_n, "number of scenarios");
  gen->add_option("--noise", gen_noise, "history noise sigma (meters)");
  gen->add_option("--past", gen_past, "past steps per agent");
  gen->add_option("--future", gen_future, "future steps per agent");

  // train
  CommonFlags train_common;
  std::string train_data;
  std::optional<int> train_epochs, train_batch, train_modes, train_d, train_heads, train_k;
  std::optional<double> train_lr, train_wd, train_dropout;
  bool train_no_refiner = false;
  CLI::App* tr = app.add_subcommand("train", "train both stages end to end");
  add_common_flags(tr, train_common);
  tr->add_option("--data", train_data, "dataset directory from gen-data")->required();
  tr->add_option("--epochs", train_epochs, "training epochs");
  tr->add_option("--batch", train_batch, "scenarios per batch");
  tr->add_option("--lr", train_lr, "base learning rate");
  tr->add_option("--wd", train_wd, "weight decay");
  tr->add_option("--dropout", train_dropout, "dropout rate for both stages");
  tr->add_option("--modes", train_modes, "proposal modes M");
  tr->add_option("--d", train_d, "feature width for both stages");
  tr->add_option("--heads", train_heads, "attention heads for both stages");
  tr->add_option("--k", train_k, "modes evaluated per epoch (top-k by confidence)");
  tr->add_flag("--no-refiner", train_no_refiner, "train and evaluate the proposal stage only");

  // eval
  CommonFlags eval_common;
  std::string eval_ckpt, eval_data;
  std::string eval_split = "val";
  std::string eval_stage;
  std::string eval_json;
  std::optional<int> eval_k;
  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  add_common_flags(ev, eval_common);
  ev->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();
  ev->add_option("--data", eval_data, "dataset directory")->required();
  ev->add_option("--split", eval_split, "train, val, or test");
  ev->add_option("--k", eval_k, "modes evaluated (top-k by confidence)");
  ev->add_option("--json", eval_json, "report JSON path (default <out>/eval.json)");
  ev->add_option("--stage", eval_stage, "force 'proposal' or 'refined' read-out");

  // predict
  CommonFlags pred_common;
  std::string pred_ckpt, pred_input, pred_export;
  CLI::App* pr = app.add_subcommand("predict", "export predictions for plotting");
  add_common_flags(pr, pred_common);
  pr->add_option("--ckpt", pred_ckpt, "checkpoint path")->required();
  pr->add_option("--input", pred_input, "scenario JSONL file")->required();
  pr->add_option("--export", pred_export, "output JSONL path (default <out>/predictions.jsonl)");

  // ingest
  CommonFlags ing_common;
  std::string ing_tracks, ing_scene, ing_export;
  std::optional<int> ing_past, ing_future;
  std::vector<std::string> ing_cols;
  CLI::App* in = app.add_subcommand("ingest", "convert CSV logs into the dataset schema");
  add_common_flags(in, ing_common);
  in->add_option("--tracks", ing_tracks, "agent track CSV")->required();
  in->add_option("--scene", ing_scene, "scene vector CSV")->required();
  in->add_option("--col", ing_cols, "column mapping canonical=actual (repeatable)");
  in->add_option("--past", ing_past, "past steps per agent");
  in->add_option("--future", ing_future, "future steps per agent");
  in->add_option("--export", ing_export, "output JSONL path (default <out>/ingested.jsonl)");

  try {
    app.parse(argc, argv);

    if (gen->parsed()) {
      RunConfig rc = resolve_config(gen_common);
      apply_flag(gen_n, rc.gen.n_scenarios);
      apply_flag(gen_noise, rc.gen.noise_sigma);
      apply_flag(gen_past, rc.gen.T);
      apply_flag(gen_future, rc.gen.F);
      return tpred::run_gen_data(rc);
    }
    if (tr->parsed()) {
      RunConfig rc = resolve_config(train_common);
      apply_flag(train_epochs, rc.epochs);
      apply_flag(train_batch, rc.batch_size);
      apply_flag(train_lr, rc.base_lr);
      apply_flag(train_wd, rc.weight_decay);
      apply_flag(train_modes, rc.pro.M);
      apply_flag(train_k, rc.eval_k);
      if (train_d) {
        rc.pro.d = *train_d;
        rc.ref.d = *train_d;
      }
      if (train_heads) {
        rc.pro.heads = *train_heads;
        rc.ref.heads = *train_heads;
      }
      if (train_dropout) {
        rc.pro.dropout_rate = *train_dropout;
        rc.ref.dropout_rate = *train_dropout;
      }
      if (train_no_refiner) rc.use_refiner = false;
      return tpred::run_train(rc, train_data);
    }
    if (ev->parsed()) {
      RunConfig rc = resolve_config(eval_common);
      apply_flag(eval_k, rc.eval_k);
      return tpred::run_eval(rc, eval_ckpt, eval_data, eval_split, eval_json, eval_stage);
    }
    if (pr->parsed()) {
      RunConfig rc = resolve_config(pred_common);
      return tpred::run_predict(rc, pred_ckpt, pred_input, pred_export);
    }
    if (in->parsed()) {
      RunConfig rc = resolve_config(ing_common);
      apply_flag(ing_past, rc.gen.T);
      apply_flag(ing_future, rc.gen.F);
      std::map<std::string, std::string> col_map;
      for (const std::string& c : ing_cols) {
        const std::size_t eq = c.find('=');
        if (eq == std::string::npos || eq == 0 || eq + 1 == c.size()) {
          throw tpred::ValidationError("--col expects canonical=actual, got '" + c + "'");
        }
        col_map[c.substr(0, eq)] = c.substr(eq + 1);
      }
      return tpred::run_ingest(rc, ing_tracks, ing_scene, col_map, ing_export);
    }
    return 0;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help / --version
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const tpred::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const tpred::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const tpred::NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
}
