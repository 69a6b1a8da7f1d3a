#pragma once

#include <string>

#include "stepwise/datapipe.hpp"
#include "stepwise/model.hpp"
#include "stepwise/trainer.hpp"

namespace stepwise {

// Experiment description parsed from an INI file with [data], [model],
// [train] and [output] sections. Unknown sections or keys are rejected.
struct ExperimentConfig {
  // [data]
  std::string data_csv;
  std::string labels_csv;
  std::string splits_csv;
  std::string groups_csv;
  TaskKind task = TaskKind::online_binary;
  double step_hours = 1.0;
  SyntheticSpec synthetic;  // generate command parameters

  // [model]
  std::string encoder = "ftt";  // none disables the embedding stage
  std::string grouping = "none";  // none, data, or a groups csv path
  std::string aggregation = "attention";
  int embed_dim = 32;
  int token_dim = 64;
  int group_dim = 0;  // 0 means embed_dim
  int encoder_depth = 1;
  int encoder_hidden = 64;
  int encoder_heads = 2;
  int agg_depth = 2;
  int agg_heads = 3;
  double dropout = 0.4;
  double attention_dropout = 0.3;
  std::string backbone = "gru";
  int backbone_depth = 1;
  int backbone_hidden = 32;
  int backbone_heads = 2;
  int kernel_size = 2;
  int dilation_base = 2;
  int n_classes = 2;

  // [train]
  TrainConfig train;

  // [output]
  std::string out_dir = "out";
};

ExperimentConfig parse_config_text(const std::string& text, const std::string& origin);
ExperimentConfig load_config(const std::string& path);

// Applies one "section.key" override, same validation as the file parser.
void set_config_key(ExperimentConfig& cfg, const std::string& section, const std::string& key,
                    const std::string& value, const std::string& origin);

// Resolves the experiment description against a loaded dataset into a full
// model configuration, including the grouping scheme when one is requested.
ModelConfig resolve_model(const ExperimentConfig& cfg, const TimeSeriesDataset& dataset);

}  // namespace stepwise
