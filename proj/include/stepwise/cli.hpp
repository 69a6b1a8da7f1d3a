#pragma once

#include <string>
#include <vector>

#include "stepwise/config.hpp"
#include "stepwise/explain.hpp"
#include "stepwise/trainer.hpp"

namespace stepwise {

// Writes data.csv, labels.csv, splits.csv and groups.csv to the output
// directory and prints a label summary.
void cmd_generate(const ExperimentConfig& cfg);

// Trains from the configured csv files, writes checkpoint.json and
// history.csv to the output directory, prints the validation metrics.
TrainHistory cmd_train(const ExperimentConfig& cfg);

// Scores a checkpoint on one split, writes metrics_<split>.csv.
MetricRecord cmd_evaluate(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                          const std::string& split);

// Emits an attention report for one split to the output directory.
void cmd_explain(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                 const std::string& split, const std::vector<std::string>& stay_ids,
                 const ExplainOptions& opts);

// Cartesian sweep over a grid file of section.key = v1,v2,... lines, each
// setting trained over consecutive seeds; writes sweep.csv with mean and std
// of the validation metric per setting.
void cmd_sweep(const ExperimentConfig& base, const std::string& grid_path, int n_seeds,
               bool parallel);

// Full argument parsing and dispatch. Returns the process exit code: 0 on
// success, 2 config errors, 3 data errors, 4 numeric failures.
int run_cli(int argc, const char* const* argv);

}  // namespace stepwise
