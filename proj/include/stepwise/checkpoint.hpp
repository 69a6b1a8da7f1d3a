#pragma once

#include <string>
#include <vector>

#include "stepwise/datapipe.hpp"
#include "stepwise/model.hpp"

namespace stepwise {

struct CheckpointMeta {
  TaskKind task = TaskKind::online_binary;
  double step_hours = 1.0;
  std::vector<std::string> feature_names;
  ScalerStats scaler;
  int best_epoch = 0;
};

// Versioned JSON container with the model configuration, every named
// parameter tensor, the scaler statistics and the grouping. Keys are sorted
// and doubles use shortest round-trip form, so identical runs produce byte
// identical files.
void save_checkpoint(const std::string& path, const Model& model, const CheckpointMeta& meta);

struct LoadedCheckpoint {
  Model model;
  CheckpointMeta meta;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace stepwise
