#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "stepwise/datapipe.hpp"
#include "stepwise/model.hpp"

namespace stepwise {

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 32;
  int max_epochs = 50;
  int patience = 10;
  double l1_weight = 1e-3;
  std::uint64_t seed = 0;
  TaskKind task_kind = TaskKind::online_binary;
  double grad_clip = 1.0;  // 0 disables clipping
  double min_delta = 1e-6;
};

void validate_train(const TrainConfig& cfg);

// Scalar loss over valid targets. Binary tasks use cross-entropy with logits,
// multiclass softmax cross-entropy, regression absolute error. An all-invalid
// mask yields loss 0 and sets *empty_mask.
int task_loss(GraphTape& tape, TaskKind kind, int logits, const Tensor& targets, const Tensor& mask,
              bool* empty_mask = nullptr);

// loss + weight * sum of |theta| over the embedding parameters only. The
// subgradient of |theta| at 0 is taken as 0.
int regularized_loss(Ctx& ctx, int loss, const std::vector<Tensor*>& embedding_params, double weight);

// Improvement means the validation loss drops below the best seen by more
// than min_delta; patience consecutive non-improvements stop training.
class EarlyStopper {
 public:
  EarlyStopper(int patience, double min_delta = 1e-6);

  // Call once per epoch; returns true when training should stop after it.
  bool observe(double val_loss);
  bool improved() const { return improved_; }
  int best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_; }

 private:
  int patience_;
  double min_delta_;
  double best_;
  int best_epoch_ = 0;
  int seen_ = 0;
  int bad_ = 0;
  bool improved_ = false;
};

class Adam {
 public:
  Adam(std::vector<Tensor*> params, double learning_rate);
  void step();

 private:
  std::vector<Tensor*> params_;
  double lr_;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

double grad_norm(const std::vector<Tensor*>& params);
void clip_grads(const std::vector<Tensor*>& params, double max_norm);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_metric = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  bool stopped_early = false;
  bool diverged = false;
  bool empty_mask_warning = false;
};

// Trains model.params in place and restores the best-validation snapshot.
TrainHistory train_model(Model& model, const TrainConfig& cfg, const TimeSeriesDataset& dataset);

struct MetricRecord {
  TaskKind task = TaskKind::online_binary;
  std::string split;
  int n = 0;
  double prevalence = 0.0;
  std::vector<std::pair<std::string, double>> values;

  double value(const std::string& name) const;
};

MetricRecord evaluate(Model& model, const TimeSeriesDataset& dataset, const std::string& split,
                      TaskKind task);

// Eval-mode head outputs with their targets, one entry per valid target.
struct ScoreDump {
  std::vector<double> scores;   // logit, predicted value, or argmax class
  std::vector<double> targets;
};

ScoreDump collect_scores(Model& model, const TimeSeriesDataset& dataset, const std::string& split,
                         TaskKind task);

}  // namespace stepwise
