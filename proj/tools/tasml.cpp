// tasml: command-line front end for conditional meta-learning experiments.

#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "tasml/experiment.hpp"

namespace {

constexpr const char* kEpilogue = R"(Outputs (written under output_dir):
  results.csv   experiment,variant,seed,mean_acc_pct,std_acc_pct,steps_per_sec,wall_s
                one row per (variant, seed) and an aggregate row per variant with
                seed "all" (population mean/std of the per-seed means). Accuracies
                are percent over the test tasks of a seed. steps_per_sec and
                wall_s are "n/a" unless record_timing is true.
  traces.csv    variant,seed,task,step,objective_loss,query_acc_pct
                J+1 rows per test task; step 0 is the unadapted system.
  curve.csv     variant,step,mean_acc_pct,std_acc_pct,n_tasks
                query accuracy per step over all tasks and seeds.
  summary.json  resolved config, per-seed accuracy, unconditional (step 0)
                baseline and the share of selected tasks from the target's mode.
  checkpoint_<variant>_seed<k>.bin   meta-trained system (run only).
Ablations write the same files under output_dir/ablate_<which>/.

Exit codes: 0 success, 2 invalid config, 1 runtime failure.
Environment: TASML_THREADS caps the worker pool.)";

int report_error(const std::exception& e, int code) {
  std::cerr << "tasml: " << e.what() << '\n';
  return code;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Task-adaptive conditional meta-learning with least-squares heads"};
  app.footer(kEpilogue);
  app.require_subcommand(1);

  std::string config_path;
  std::string which;
  std::string out_path;
  std::string split_name = "train";

  auto* run = app.add_subcommand("run", "meta-train and adapt to every test task for each seed");
  run->add_option("config", config_path, "experiment config (JSON)")->required()->check(CLI::ExistingFile);

  auto* ablate = app.add_subcommand("ablate", "run one ablation grid");
  ablate->add_option("--which", which, "kernel | topm | beta | steps | init")
      ->required()
      ->check(CLI::IsMember({"kernel", "topm", "beta", "steps", "init"}));
  ablate->add_option("config", config_path, "experiment config (JSON)")->required()->check(CLI::ExistingFile);

  auto* bench = app.add_subcommand("bench", "time adaptation steps and task scoring");
  bench->add_option("config", config_path, "experiment config (JSON)")->required()->check(CLI::ExistingFile);

  auto* gen = app.add_subcommand("gen-tasks", "write the synthetic generator as an embedding file");
  gen->add_option("config", config_path, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", out_path, "output path (.csv for text, anything else for binary)")->required();
  gen->add_option("--split", split_name, "train | validation | test")
      ->check(CLI::IsMember({"train", "validation", "test"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const auto cfg = tasml::load_experiment_config(config_path);
    if (*run) {
      const auto report = tasml::cmd_run(cfg);
      std::cout << tasml::results_csv(report);
    } else if (*ablate) {
      const auto report = tasml::cmd_ablate(cfg, tasml::parse_ablation(which));
      std::cout << tasml::results_csv(report);
    } else if (*bench) {
      std::cout << tasml::bench_text(tasml::cmd_bench(cfg));
    } else if (*gen) {
      const auto split = split_name == "test"         ? tasml::Split::test
                         : split_name == "validation" ? tasml::Split::validation
                                                      : tasml::Split::train;
      const auto file = tasml::cmd_gen_tasks(cfg, out_path, split);
      std::cout << "wrote " << file.classes.size() << " classes of dim " << file.dim << " to " << out_path << '\n';
    }
  } catch (const tasml::ConfigInvalid& e) {
    return report_error(e, 2);
  } catch (const std::exception& e) {
    return report_error(e, 1);
  }
  return 0;
}
