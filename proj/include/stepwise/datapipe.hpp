#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stepwise/grouping.hpp"
#include "stepwise/rng.hpp"
#include "stepwise/tensor.hpp"

namespace stepwise {

enum class TaskKind { online_binary, per_stay_binary, multiclass, regression };

TaskKind task_kind_from(const std::string& name);
const char* task_kind_name(TaskKind kind);
bool task_is_per_stay(TaskKind kind);

// One contiguous multivariate series. Cell states: observed (raw measurement),
// filled (forward imputed), pending (no prior observation, becomes exactly 0
// after scaling).
struct Stay {
  std::string stay_id;
  Tensor x;  // [T, d]
  std::vector<std::int64_t> times;
  std::vector<std::uint8_t> observed;  // T*d row-major
  std::vector<std::uint8_t> pending;   // set by forward imputation
  std::vector<double> step_labels;     // length T when the task is per step
  std::vector<std::uint8_t> step_label_mask;
  double stay_label = 0.0;
  std::string split = "train";

  int steps() const { return x.shape.empty() ? 0 : x.shape[0]; }
};

// Per-feature statistics fitted on observed training cells only.
struct ScalerStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

struct TimeSeriesDataset {
  std::vector<Stay> stays;
  std::vector<std::string> feature_names;
  GroupingScheme grouping;
  bool has_grouping = false;
  bool per_stay_labels = false;
  double step_hours = 1.0;

  int n_features() const { return static_cast<int>(feature_names.size()); }
};

// groups_csv may be empty, leaving the dataset ungrouped.
TimeSeriesDataset load_dataset(const std::string& data_csv, const std::string& labels_csv,
                               const std::string& splits_csv, const std::string& groups_csv,
                               double step_hours);

// Parses a feature,group csv against known feature names and validates the
// partition. The scheme is named after the file stem.
GroupingScheme load_grouping(const std::string& groups_csv,
                             const std::vector<std::string>& feature_names);

// Each unobserved cell takes the most recent observed value of its feature
// within the stay; cells with no prior observation are flagged pending.
void forward_impute(Stay& stay);

ScalerStats fit_scaler(const TimeSeriesDataset& dataset);
// x' = (x - mean) / std. Pending cells become exactly 0, the feature mean.
void apply_scaler(Stay& stay, const ScalerStats& stats);

// forward_impute every stay, fit on train, apply everywhere.
ScalerStats preprocess(TimeSeriesDataset& dataset);

struct SyntheticSpec {
  std::uint64_t seed = 0;
  int n_stays = 200;
  int horizon = 32;  // maximum stay length T
  int k_groups = 4;
  int feats_per_group = 6;
  double missing_rate = 0.0;
  TaskKind task = TaskKind::online_binary;
  // -1 puts label signal in every group, otherwise only in this one.
  int signal_group = -1;
  double step_hours = 1.0;
};

// Group-structured generator: per group an AR(1) latent, features are noisy
// affine or quadratic readouts, binary labels threshold a sum of one designated
// feature product per group so the signal rewards within-group interaction
// modeling. Prevalence is calibrated into [0.05, 0.15]. Deterministic under seed.
TimeSeriesDataset generate_synthetic(const SyntheticSpec& spec);

struct Batch {
  Tensor x;        // [B, T, d], zero padded
  Tensor y_step;   // [B, T] labels, zero where invalid
  Tensor m_step;   // [B, T] 1.0 on valid labeled steps
  std::vector<double> y_stay;
  std::vector<int> last_step;   // index of the final real step per stay
  std::vector<int> stay_index;  // into dataset.stays
  int size = 0;
  int max_steps = 0;
};

std::vector<Batch> make_batches(const TimeSeriesDataset& dataset, const std::string& split,
                                int batch_size, std::uint64_t seed);

void write_dataset_csvs(const TimeSeriesDataset& dataset, const std::string& dir);

}  // namespace stepwise
