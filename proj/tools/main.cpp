// denseloc: synthetic-city generation, triplet mining, detection-weighted
// triplet training, feature export, matching/retrieval evaluation, and
// FLOP/runtime profiling, driven by one JSON config plus flag overrides.

#include <CLI11.hpp>

#include <denseloc/commands.hpp>

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace {

struct CliState {
  std::string config_path;
  denseloc::FlagOverrides flags;
  bool force = false;
  std::string mode = "retrieval";
  std::vector<std::string> feature_dirs;
};

denseloc::RunConfig resolve_config(const CliState& cli) {
  denseloc::RunConfig cfg =
      cli.config_path.empty() ? denseloc::RunConfig{} : denseloc::load_run_config(cli.config_path);
  denseloc::apply_overrides(cfg, cli.flags);
  return cfg;
}

void add_common_flags(CLI::App* cmd, CliState& cli) {
  cmd->add_option("--config", cli.config_path, "JSON run config; flags override its fields");
  cmd->add_option("--out", cli.flags.out, "output directory (all artifacts live here)");
  cmd->add_option("--seed", cli.flags.seed, "global seed; re-derives all component seeds");
}

void add_train_flags(CLI::App* cmd, CliState& cli) {
  cmd->add_option("--ablation", cli.flags.ablation, "branch subset: full, hb, hb+lb, hb+mb, none");
  cmd->add_option("--margin", cli.flags.margin, "triplet hinge margin");
  cmd->add_option("--epochs", cli.flags.epochs, "training epochs");
  cmd->add_option("--batch-triplets", cli.flags.batch_triplets, "triplets per optimizer step");
  cmd->add_option("--lr", cli.flags.lr, "initial learning rate (halved every lr_halving_period epochs)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dense feature localization pipeline"};
  app.require_subcommand(1);
  CliState cli;

  CLI::App* generate = app.add_subcommand("generate", "write a synthetic geo-tagged city");
  add_common_flags(generate, cli);
  generate->add_flag("--force", cli.force, "overwrite an existing generated city");

  CLI::App* mine = app.add_subcommand("mine", "mine training triplets from the manifest");
  add_common_flags(mine, cli);

  CLI::App* train = app.add_subcommand("train", "train the detector/descriptor network");
  add_common_flags(train, cli);
  add_train_flags(train, cli);

  CLI::App* export_cmd = app.add_subcommand("export-features", "decode every manifest image to a feature store");
  add_common_flags(export_cmd, cli);
  export_cmd->add_option("--checkpoint", cli.flags.checkpoint, "checkpoint to decode with");
  export_cmd->add_option("--ablation", cli.flags.ablation, "branch subset the checkpoint was trained with");

  CLI::App* evaluate = app.add_subcommand("evaluate", "matching or retrieval evaluation");
  add_common_flags(evaluate, cli);
  evaluate->add_option("--mode", cli.mode, "matching or retrieval")
      ->check(CLI::IsMember({"matching", "retrieval"}));
  evaluate->add_option("--features", cli.feature_dirs,
                       "feature store directory; repeat to compare several stores");
  evaluate->add_option("--checkpoint", cli.flags.checkpoint, "checkpoint for matching mode");
  evaluate->add_option("--ablation", cli.flags.ablation, "branch subset the checkpoint was trained with");

  CLI::App* profile = app.add_subcommand("profile", "FLOP and wall-time breakdown");
  add_common_flags(profile, cli);
  profile->add_option("--checkpoint", cli.flags.checkpoint, "checkpoint to profile");
  profile->add_option("--ablation", cli.flags.ablation, "branch subset to profile");

  CLI::App* pipeline = app.add_subcommand("pipeline", "generate, mine, train, export, evaluate, profile");
  add_common_flags(pipeline, cli);
  add_train_flags(pipeline, cli);
  pipeline->add_flag("--force", cli.force, "overwrite an existing generated city");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  }

  try {
    const denseloc::RunConfig cfg = resolve_config(cli);
    if (generate->parsed()) {
      denseloc::cmd_generate(cfg, cli.force);
    } else if (mine->parsed()) {
      denseloc::cmd_mine(cfg);
    } else if (train->parsed()) {
      denseloc::cmd_train(cfg);
    } else if (export_cmd->parsed()) {
      denseloc::cmd_export_features(cfg);
    } else if (evaluate->parsed()) {
      std::vector<std::filesystem::path> stores(cli.feature_dirs.begin(), cli.feature_dirs.end());
      denseloc::cmd_evaluate(cfg, denseloc::eval_mode_from_string(cli.mode), stores);
    } else if (profile->parsed()) {
      denseloc::cmd_profile(cfg);
    } else if (pipeline->parsed()) {
      denseloc::cmd_pipeline(cfg, cli.force);
    }
  } catch (const denseloc::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
