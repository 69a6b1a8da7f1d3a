#include "stepwise/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "stepwise/errors.hpp"
#include "stepwise/metrics.hpp"

namespace stepwise {

namespace {

double mask_weight(const Tensor& mask) {
  double w = 0.0;
  for (double v : mask.data) w += v;
  return w;
}

// Targets and mask for a batch in the shapes task_loss expects.
void batch_targets(TaskKind kind, const Batch& batch, Tensor& targets, Tensor& mask) {
  if (task_is_per_stay(kind)) {
    targets = Tensor({batch.size}, batch.y_stay);
    mask = Tensor::zeros({batch.size});
    for (auto& v : mask.data) v = 1.0;
  } else {
    targets = batch.y_step;
    mask = batch.m_step;
  }
}

}  // namespace

void validate_train(const TrainConfig& cfg) {
  if (cfg.learning_rate <= 0.0) throw ConfigError("learning_rate must be positive");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (cfg.max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (cfg.patience < 1) throw ConfigError("patience must be >= 1");
  if (cfg.l1_weight < 0.0) throw ConfigError("l1_weight must be >= 0");
  if (cfg.grad_clip < 0.0) throw ConfigError("grad_clip must be >= 0, 0 disables");
  if (cfg.min_delta < 0.0) throw ConfigError("min_delta must be >= 0");
}

int task_loss(GraphTape& tape, TaskKind kind, int logits, const Tensor& targets, const Tensor& mask,
              bool* empty_mask) {
  const Tensor& lv = tape.val(logits);
  if (!lv.all_finite()) throw NumericError("task loss: non-finite logits");
  if (targets.shape != mask.shape)
    throw ShapeError("task loss: targets " + targets.shape_string() + " vs mask " + mask.shape_string());
  if (empty_mask && mask_weight(mask) == 0.0) *empty_mask = true;

  if (kind == TaskKind::multiclass) {
    if (lv.shape.empty()) throw ShapeError("task loss: scalar logits");
    const int classes = lv.shape.back();
    int rows = static_cast<int>(lv.numel()) / classes;
    if (rows != static_cast<int>(mask.numel()))
      throw ShapeError("task loss: " + std::to_string(rows) + " logit rows for " +
                       std::to_string(mask.numel()) + " targets");
    const int table = tape.reshape(logits, {rows, classes});
    std::vector<std::int64_t> ids;
    std::vector<std::int64_t> labels;
    for (std::size_t i = 0; i < mask.data.size(); ++i) {
      if (mask.data[i] == 0.0) continue;
      ids.push_back(static_cast<std::int64_t>(i));
      labels.push_back(std::llround(targets.data[i]));
    }
    if (ids.empty()) return tape.constant(Tensor::scalar(0.0));
    return tape.softmax_xent(tape.embedding_select(table, ids), labels);
  }

  int l = logits;
  if (lv.shape.size() == targets.shape.size() + 1 && lv.shape.back() == 1)
    l = tape.reshape(logits, targets.shape);
  if (tape.val(l).shape != targets.shape)
    throw ShapeError("task loss: logits " + lv.shape_string() + " vs targets " + targets.shape_string());
  if (kind == TaskKind::regression)
    return tape.masked_mae(l, tape.constant(targets), tape.constant(mask));
  return tape.bce_with_logits(l, tape.constant(targets), tape.constant(mask));
}

int regularized_loss(Ctx& ctx, int loss, const std::vector<Tensor*>& embedding_params, double weight) {
  if (weight == 0.0 || embedding_params.empty()) return loss;
  int penalty = -1;
  for (Tensor* p : embedding_params) {
    const int term = ctx.tape.l1_norm(ctx.leaf(p));
    penalty = penalty < 0 ? term : ctx.tape.add(penalty, term);
  }
  return ctx.tape.add(loss, ctx.tape.scalar_scale(penalty, weight));
}

EarlyStopper::EarlyStopper(int patience, double min_delta)
    : patience_(patience), min_delta_(min_delta), best_(std::numeric_limits<double>::infinity()) {
  if (patience < 1) throw ConfigError("patience must be >= 1");
}

bool EarlyStopper::observe(double val_loss) {
  ++seen_;
  if (val_loss < best_ - min_delta_) {
    best_ = val_loss;
    best_epoch_ = seen_;
    bad_ = 0;
    improved_ = true;
    return false;
  }
  improved_ = false;
  return ++bad_ >= patience_;
}

Adam::Adam(std::vector<Tensor*> params, double learning_rate)
    : params_(std::move(params)), lr_(learning_rate) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (Tensor* p : params_) {
    m_.emplace_back(p->data.size(), 0.0);
    v_.emplace_back(p->data.size(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor* p = params_[i];
    for (std::size_t j = 0; j < p->data.size(); ++j) {
      const double g = p->grad[j];
      m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g;
      v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g * g;
      p->data[j] -= lr_ * (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + eps_);
    }
  }
}

double grad_norm(const std::vector<Tensor*>& params) {
  double sq = 0.0;
  for (const Tensor* p : params)
    for (double g : p->grad) sq += g * g;
  return std::sqrt(sq);
}

void clip_grads(const std::vector<Tensor*>& params, double max_norm) {
  const double norm = grad_norm(params);
  if (norm <= max_norm || norm == 0.0) return;
  const double scale = max_norm / norm;
  for (Tensor* p : params)
    for (double& g : p->grad) g *= scale;
}

namespace {

struct ValResult {
  double loss = 0.0;
  double metric = 0.0;
};

double primary_metric(TaskKind task, const std::vector<double>& scores,
                      const std::vector<double>& targets) {
  if (scores.empty()) return std::numeric_limits<double>::quiet_NaN();
  if (task == TaskKind::regression) return mae_hours(scores, targets, 1.0);
  std::vector<int> labels(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) labels[i] = static_cast<int>(std::llround(targets[i]));
  if (task == TaskKind::multiclass) {
    std::vector<int> pred(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) pred[i] = static_cast<int>(std::llround(scores[i]));
    return balanced_accuracy(pred, labels);
  }
  bool has_pos = false, has_neg = false;
  for (int l : labels) (l ? has_pos : has_neg) = true;
  if (!has_pos || !has_neg) return std::numeric_limits<double>::quiet_NaN();
  return auprc(scores, labels);
}

// One eval pass: weighted mean task loss plus collected scores and targets.
ValResult run_validation(Model& model, const TimeSeriesDataset& dataset, const TrainConfig& cfg,
                         bool* empty_mask) {
  const auto batches = make_batches(dataset, "val", cfg.batch_size, 0);
  double loss_sum = 0.0, weight_sum = 0.0;
  std::vector<double> scores, targets;
  for (const Batch& batch : batches) {
    GraphTape tape(Mode::eval, 0);
    Ctx ctx(tape, model.params);
    const int out = model.forward(ctx, tape.constant(batch.x), batch.last_step);
    Tensor t, m;
    batch_targets(cfg.task_kind, batch, t, m);
    const int loss = task_loss(tape, cfg.task_kind, out, t, m, empty_mask);
    const double w = task_is_per_stay(cfg.task_kind) ? batch.size : mask_weight(batch.m_step);
    loss_sum += tape.val(loss).data[0] * w;
    weight_sum += w;

    const Tensor& ov = tape.val(out);
    if (task_is_per_stay(cfg.task_kind)) {
      for (int b = 0; b < batch.size; ++b) {
        scores.push_back(ov.at(b, 0));
        targets.push_back(batch.y_stay[static_cast<std::size_t>(b)]);
      }
    } else {
      const int classes = ov.shape[2];
      for (int b = 0; b < batch.size; ++b)
        for (int step = 0; step < batch.max_steps; ++step) {
          if (batch.m_step.at(b, step) == 0.0) continue;
          if (cfg.task_kind == TaskKind::multiclass) {
            int arg = 0;
            for (int c = 1; c < classes; ++c)
              if (ov.at(b, step, c) > ov.at(b, step, arg)) arg = c;
            scores.push_back(arg);
          } else {
            scores.push_back(ov.at(b, step, 0));
          }
          targets.push_back(batch.y_step.at(b, step));
        }
    }
  }
  ValResult res;
  res.loss = weight_sum > 0.0 ? loss_sum / weight_sum : 0.0;
  res.metric = primary_metric(cfg.task_kind, scores, targets);
  return res;
}

}  // namespace

TrainHistory train_model(Model& model, const TrainConfig& cfg, const TimeSeriesDataset& dataset) {
  validate_train(cfg);
  auto entries = model.params.entries();
  if (entries.empty()) throw std::logic_error("train_model: model has no parameters, call init first");
  if (task_is_per_stay(cfg.task_kind) != dataset.per_stay_labels)
    throw DataError(std::string("task ") + task_kind_name(cfg.task_kind) + " does not match " +
                    (dataset.per_stay_labels ? "per-stay" : "per-step") + " labels");

  std::vector<Tensor*> all_params;
  all_params.reserve(entries.size());
  for (auto& [name, p] : entries) all_params.push_back(p);
  const std::vector<Tensor*> embed = model.embedding_params();

  Adam opt(all_params, cfg.learning_rate);
  EarlyStopper stopper(cfg.patience, cfg.min_delta);
  TrainHistory history;

  auto snapshot = [&] {
    std::vector<std::vector<double>> s;
    s.reserve(all_params.size());
    for (Tensor* p : all_params) s.push_back(p->data);
    return s;
  };
  std::vector<std::vector<double>> best = snapshot();

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto batches =
        make_batches(dataset, "train", cfg.batch_size, hash_mix(cfg.seed, static_cast<std::uint64_t>(epoch)));
    double loss_sum = 0.0, weight_sum = 0.0;
    bool finite = true;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const Batch& batch = batches[bi];
      GraphTape tape(Mode::train, hash_mix(hash_mix(cfg.seed, static_cast<std::uint64_t>(epoch)),
                                           static_cast<std::uint64_t>(bi) + 1));
      Ctx ctx(tape, model.params);
      Tensor targets, mask;
      batch_targets(cfg.task_kind, batch, targets, mask);
      int loss = -1, objective = -1;
      try {
        const int out = model.forward(ctx, tape.constant(batch.x), batch.last_step);
        bool empty = false;
        loss = task_loss(tape, cfg.task_kind, out, targets, mask, &empty);
        if (empty) history.empty_mask_warning = true;
        objective = regularized_loss(ctx, loss, embed, cfg.l1_weight);
      } catch (const NumericError&) {
        finite = false;
        break;
      }
      const double objective_value = tape.val(objective).data[0];
      if (!std::isfinite(objective_value)) {
        finite = false;
        break;
      }
      const double w = task_is_per_stay(cfg.task_kind) ? batch.size : mask_weight(batch.m_step);
      loss_sum += tape.val(loss).data[0] * w;
      weight_sum += w;
      model.params.zero_grads();
      tape.backward(objective);
      if (cfg.grad_clip > 0.0) clip_grads(all_params, cfg.grad_clip);
      opt.step();
    }
    if (!finite) {
      history.diverged = true;
      break;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = weight_sum > 0.0 ? loss_sum / weight_sum : 0.0;
    ValResult val;
    try {
      val = run_validation(model, dataset, cfg, &history.empty_mask_warning);
    } catch (const NumericError&) {
      val.loss = std::numeric_limits<double>::quiet_NaN();
      val.metric = std::numeric_limits<double>::quiet_NaN();
    }
    rec.val_loss = val.loss;
    rec.val_metric = val.metric;
    history.epochs.push_back(rec);
    if (!std::isfinite(val.loss)) {
      history.diverged = true;
      break;
    }
    const bool stop = stopper.observe(val.loss);
    if (stopper.improved()) best = snapshot();
    if (stop) {
      history.stopped_early = true;
      break;
    }
  }

  for (std::size_t i = 0; i < all_params.size(); ++i) all_params[i]->data = best[i];
  history.best_epoch = stopper.best_epoch();
  return history;
}

double MetricRecord::value(const std::string& name) const {
  for (const auto& [key, v] : values)
    if (key == name) return v;
  throw std::logic_error("MetricRecord: no metric named " + name);
}

ScoreDump collect_scores(Model& model, const TimeSeriesDataset& dataset, const std::string& split,
                         TaskKind task) {
  const auto batches = make_batches(dataset, split, 32, 0);
  ScoreDump dump;
  for (const Batch& batch : batches) {
    GraphTape tape(Mode::eval, 0);
    Ctx ctx(tape, model.params);
    const int out = model.forward(ctx, tape.constant(batch.x), batch.last_step);
    const Tensor& ov = tape.val(out);
    if (!ov.all_finite()) throw NumericError("evaluate: non-finite model output");
    if (task_is_per_stay(task)) {
      for (int b = 0; b < batch.size; ++b) {
        dump.scores.push_back(ov.at(b, 0));
        dump.targets.push_back(batch.y_stay[static_cast<std::size_t>(b)]);
      }
    } else {
      const int classes = ov.shape[2];
      for (int b = 0; b < batch.size; ++b)
        for (int step = 0; step < batch.max_steps; ++step) {
          if (batch.m_step.at(b, step) == 0.0) continue;
          if (task == TaskKind::multiclass) {
            int arg = 0;
            for (int c = 1; c < classes; ++c)
              if (ov.at(b, step, c) > ov.at(b, step, arg)) arg = c;
            dump.scores.push_back(arg);
          } else {
            dump.scores.push_back(ov.at(b, step, 0));
          }
          dump.targets.push_back(batch.y_step.at(b, step));
        }
    }
  }
  return dump;
}

MetricRecord evaluate(Model& model, const TimeSeriesDataset& dataset, const std::string& split,
                      TaskKind task) {
  const ScoreDump dump = collect_scores(model, dataset, split, task);
  if (dump.scores.empty()) throw DataError("split '" + split + "' has no labeled targets");
  MetricRecord rec;
  rec.task = task;
  rec.split = split;
  rec.n = static_cast<int>(dump.scores.size());
  rec.prevalence = std::numeric_limits<double>::quiet_NaN();

  if (task == TaskKind::regression) {
    rec.values.emplace_back("mae_hours", mae_hours(dump.scores, dump.targets, 1.0));
    std::vector<int> pb, tb;
    for (std::size_t i = 0; i < dump.scores.size(); ++i) {
      pb.push_back(los_bucket(std::max(0.0, dump.scores[i])));
      tb.push_back(los_bucket(std::max(0.0, dump.targets[i])));
    }
    // Degenerate bucket tables leave kappa undefined; reported as nan.
    double kappa = std::numeric_limits<double>::quiet_NaN();
    try {
      kappa = cohen_kappa(pb, tb, static_cast<int>(los_bucket_edges().size()) + 1, KappaWeighting::linear);
    } catch (const DataError&) {
    }
    rec.values.emplace_back("kappa_linear", kappa);
    return rec;
  }

  std::vector<int> labels(dump.targets.size());
  for (std::size_t i = 0; i < dump.targets.size(); ++i)
    labels[i] = static_cast<int>(std::llround(dump.targets[i]));

  if (task == TaskKind::multiclass) {
    std::vector<int> pred(dump.scores.size());
    for (std::size_t i = 0; i < dump.scores.size(); ++i)
      pred[i] = static_cast<int>(std::llround(dump.scores[i]));
    rec.values.emplace_back("balanced_accuracy", balanced_accuracy(pred, labels));
    const int bins = model.cfg.backbone.n_classes;
    double kappa = std::numeric_limits<double>::quiet_NaN();
    double kappa_linear = std::numeric_limits<double>::quiet_NaN();
    try {
      kappa = cohen_kappa(pred, labels, bins, KappaWeighting::none);
      kappa_linear = cohen_kappa(pred, labels, bins, KappaWeighting::linear);
    } catch (const DataError&) {
    }
    rec.values.emplace_back("kappa", kappa);
    rec.values.emplace_back("kappa_linear", kappa_linear);
    return rec;
  }

  double prevalence = 0.0;
  for (int l : labels) prevalence += l;
  rec.prevalence = prevalence / static_cast<double>(labels.size());
  // One-class splits leave the ranking metrics undefined; reported as nan.
  double ap = std::numeric_limits<double>::quiet_NaN();
  double roc = std::numeric_limits<double>::quiet_NaN();
  try {
    ap = auprc(dump.scores, labels);
    roc = auroc(dump.scores, labels);
  } catch (const DataError&) {
  }
  rec.values.emplace_back("auprc", ap);
  rec.values.emplace_back("auroc", roc);
  std::vector<int> pred(dump.scores.size());
  for (std::size_t i = 0; i < dump.scores.size(); ++i) pred[i] = dump.scores[i] > 0.0 ? 1 : 0;
  rec.values.emplace_back("balanced_accuracy", balanced_accuracy(pred, labels));
  return rec;
}

}  // namespace stepwise
