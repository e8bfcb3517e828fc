// tofcal: detector timing-calibration pipeline driver.
//
// Stages run in order against a shared run directory:
//   simulate -> preprocess -> calibrate -> train -> evaluate -> explain -> report
// Each stage writes a versioned artifact set plus summary.json under
// <out>/<stage>/. Exit codes: 0 ok, 2 config error, 3 missing input,
// 4 numerical failure.

#include <CLI11.hpp>
#include <iostream>

#include "tofcal/config.hpp"
#include "tofcal/gtb.hpp"
#include "tofcal/io.hpp"
#include "tofcal/pipeline.hpp"

namespace {

using tofcal::cli::PipelineConfig;
using tofcal::cli::RunPaths;

struct CommonOpts {
  std::string config_path;
  std::string out_dir;
  long long seed = -1;
  int threads = -1;
  std::string energy_window;
};

PipelineConfig make_config(const CommonOpts& opts) {
  PipelineConfig cfg = opts.config_path.empty()
                           ? PipelineConfig()
                           : PipelineConfig::from_file(opts.config_path);
  if (opts.seed >= 0) cfg.set("seed", std::to_string(opts.seed));
  if (opts.threads >= 0) cfg.set("threads", std::to_string(opts.threads));
  if (!opts.energy_window.empty()) {
    cfg.set("eval.energy_windows", opts.energy_window);
  }
  return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "configuration file");
  cmd->add_option("--out", opts.out_dir, "run directory")->required();
  cmd->add_option("--seed", opts.seed, "override the configured seed");
  cmd->add_option("--threads", opts.threads, "worker thread count");
  cmd->add_option("--energy-window", opts.energy_window,
                  "evaluation energy window LO-HI in keV (replaces the list)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tofcal: residual-physics timing calibration pipeline"};
  app.require_subcommand(1);

  CommonOpts opts;
  std::string export_dataset, export_csv;

  CLI::App* c_sim = app.add_subcommand("simulate", "generate campaign datasets");
  CLI::App* c_prep = app.add_subcommand(
      "preprocess", "cluster, filter, estimate energy and position");
  CLI::App* c_cal =
      app.add_subcommand("calibrate", "analytical timing calibration");
  CLI::App* c_train =
      app.add_subcommand("train", "grid-search the residual regressors");
  CLI::App* c_eval =
      app.add_subcommand("evaluate", "MAE, linearity and CTR tables");
  CLI::App* c_explain =
      app.add_subcommand("explain", "SHAP analysis of the best model");
  CLI::App* c_report = app.add_subcommand("report", "merge stage summaries");
  for (CLI::App* c :
       {c_sim, c_prep, c_cal, c_train, c_eval, c_explain, c_report}) {
    add_common(c, opts);
  }
  c_report->add_option("--export-dataset", export_dataset,
                       "dataset file to export as CSV");
  c_report->add_option("--csv-out", export_csv,
                       "CSV destination for --export-dataset");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    const PipelineConfig cfg = make_config(opts);
    const RunPaths paths{opts.out_dir};
    if (c_sim->parsed()) tofcal::cli::stage_simulate(cfg, paths);
    if (c_prep->parsed()) tofcal::cli::stage_preprocess(cfg, paths);
    if (c_cal->parsed()) tofcal::cli::stage_calibrate(cfg, paths);
    if (c_train->parsed()) tofcal::cli::stage_train(cfg, paths);
    if (c_eval->parsed()) tofcal::cli::stage_evaluate(cfg, paths);
    if (c_explain->parsed()) tofcal::cli::stage_explain(cfg, paths);
    if (c_report->parsed()) {
      tofcal::cli::stage_report(cfg, paths);
      if (!export_dataset.empty()) {
        if (export_csv.empty()) {
          throw tofcal::ConfigError("--export-dataset requires --csv-out");
        }
        tofcal::io::export_dataset_csv(export_dataset, export_csv);
      }
    }
  } catch (const tofcal::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const tofcal::MissingInputError& e) {
    std::cerr << "missing input: " << e.what() << "\n";
    return 3;
  } catch (const tofcal::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
