#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "doctest.h"
#include "stepwise/checkpoint.hpp"
#include "stepwise/errors.hpp"
#include "stepwise/metrics.hpp"
#include "stepwise/trainer.hpp"

using namespace stepwise;

namespace {

constexpr double kLn2 = 0.6931471805599453;
constexpr double kLn3 = 1.0986122886681098;

Tensor ones(std::vector<int> shape) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = 1.0;
  return t;
}

SyntheticSpec small_spec(std::uint64_t seed, TaskKind task = TaskKind::online_binary) {
  SyntheticSpec spec;
  spec.seed = seed;
  spec.n_stays = 18;
  spec.horizon = 6;
  spec.k_groups = 2;
  spec.feats_per_group = 2;
  spec.task = task;
  return spec;
}

// Grouped mlp encoder, sum aggregation, gru backbone: parameters in every
// module so gradient-flow checks can see all of them.
Model small_model(const TimeSeriesDataset& ds, TaskKind task, std::uint64_t seed) {
  Model model;
  model.cfg.n_features = ds.n_features();
  model.cfg.embed_dim = 5;
  model.cfg.grouped = true;
  model.cfg.grouping = ds.grouping;
  model.cfg.encoder.kind = EncoderKind::mlp;
  model.cfg.encoder.depth = 1;
  model.cfg.encoder.hidden_dim = 4;
  model.cfg.agg.method = AggMethod::sum;
  model.cfg.agg.group_dim = 4;
  model.cfg.agg.output_dim = 5;
  model.cfg.backbone.kind = BackboneKind::gru;
  model.cfg.backbone.hidden_dim = 5;
  model.cfg.backbone.depth = 1;
  model.cfg.backbone.head_kind =
      task == TaskKind::regression ? HeadKind::regression : HeadKind::binary;
  model.cfg.backbone.prediction_mode =
      task_is_per_stay(task) ? PredictionMode::per_stay : PredictionMode::per_step;
  validate_model(model.cfg);
  model.init(seed);
  return model;
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    static int n = 0;
    path = std::filesystem::temp_directory_path() /
           ("stepwise_tr_" + std::to_string(::getpid()) + "_" + std::to_string(n++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace

TEST_CASE("task loss analytic values") {
  SUBCASE("zero logit against any binary target is ln 2") {
    GraphTape tape(Mode::eval, 0);
    const int logits = tape.constant(Tensor({1, 2, 1}));
    const int loss = task_loss(tape, TaskKind::online_binary, logits, Tensor({1, 2}, {1.0, 0.0}),
                               ones({1, 2}));
    CHECK(tape.val(loss).data[0] == doctest::Approx(kLn2).epsilon(1e-14));
  }
  SUBCASE("regression absolute error") {
    GraphTape tape(Mode::eval, 0);
    const int logits = tape.constant(Tensor({1, 2, 1}, {2.0, 4.0}));
    const int loss = task_loss(tape, TaskKind::regression, logits, Tensor({1, 2}, {1.0, 6.0}),
                               ones({1, 2}));
    CHECK(tape.val(loss).data[0] == doctest::Approx(1.5).epsilon(1e-14));
  }
  SUBCASE("uniform logits over three classes is ln 3") {
    GraphTape tape(Mode::eval, 0);
    const int logits = tape.constant(Tensor({1, 2, 3}));
    const int loss = task_loss(tape, TaskKind::multiclass, logits, Tensor({1, 2}, {0.0, 2.0}),
                               ones({1, 2}));
    CHECK(tape.val(loss).data[0] == doctest::Approx(kLn3).epsilon(1e-14));
  }
  SUBCASE("per-stay logits shaped [B, 1]") {
    GraphTape tape(Mode::eval, 0);
    const int logits = tape.constant(Tensor({2, 1}));
    const int loss = task_loss(tape, TaskKind::per_stay_binary, logits, Tensor({2}, {1.0, 1.0}),
                               ones({2}));
    CHECK(tape.val(loss).data[0] == doctest::Approx(kLn2).epsilon(1e-14));
  }
}

TEST_CASE("task loss masking") {
  SUBCASE("only valid entries contribute") {
    GraphTape tape(Mode::eval, 0);
    // second step carries a wild value, mask hides it
    const int logits = tape.constant(Tensor({1, 2, 1}, {0.0, 500.0}));
    const int loss = task_loss(tape, TaskKind::online_binary, logits, Tensor({1, 2}, {1.0, 0.0}),
                               Tensor({1, 2}, {1.0, 0.0}));
    CHECK(tape.val(loss).data[0] == doctest::Approx(kLn2).epsilon(1e-14));
  }
  SUBCASE("empty mask yields zero and raises the flag") {
    GraphTape tape(Mode::eval, 0);
    const int logits = tape.constant(Tensor({1, 2, 1}, {0.3, -0.4}));
    bool empty = false;
    const int loss = task_loss(tape, TaskKind::online_binary, logits, Tensor({1, 2}),
                               Tensor({1, 2}), &empty);
    CHECK(tape.val(loss).data[0] == 0.0);
    CHECK(empty);
  }
  SUBCASE("empty multiclass mask") {
    GraphTape tape(Mode::eval, 0);
    const int logits = tape.constant(Tensor({1, 2, 3}));
    bool empty = false;
    const int loss = task_loss(tape, TaskKind::multiclass, logits, Tensor({1, 2}), Tensor({1, 2}),
                               &empty);
    CHECK(tape.val(loss).data[0] == 0.0);
    CHECK(empty);
  }
  SUBCASE("padded steps leave the loss unchanged") {
    GraphTape tape(Mode::eval, 0);
    const int compact = tape.constant(Tensor({1, 3, 1}, {0.2, -0.7, 1.4}));
    const int l1 = task_loss(tape, TaskKind::online_binary, compact,
                             Tensor({1, 3}, {1.0, 0.0, 1.0}), ones({1, 3}));
    const int padded = tape.constant(Tensor({1, 5, 1}, {0.2, -0.7, 1.4, 99.0, -99.0}));
    const int l2 = task_loss(tape, TaskKind::online_binary, padded,
                             Tensor({1, 5}, {1.0, 0.0, 1.0, 1.0, 0.0}),
                             Tensor({1, 5}, {1.0, 1.0, 1.0, 0.0, 0.0}));
    CHECK(std::abs(tape.val(l1).data[0] - tape.val(l2).data[0]) <= 1e-12);
  }
}

TEST_CASE("task loss rejects bad inputs") {
  GraphTape tape(Mode::eval, 0);
  // overflow inside the graph produces the non-finite logits
  const int huge = tape.constant(Tensor({1, 1, 1}, {1e308}));
  const int inf_logits = tape.multiply(huge, huge);
  CHECK_THROWS_AS(
      task_loss(tape, TaskKind::online_binary, inf_logits, Tensor({1, 1}, {1.0}), ones({1, 1})),
      NumericError);
  const int logits = tape.constant(Tensor({1, 2, 1}));
  CHECK_THROWS_AS(task_loss(tape, TaskKind::online_binary, logits, Tensor({1, 3}), ones({1, 2})),
                  ShapeError);
}

TEST_CASE("embedding regularizer") {
  ParamMap pm;
  Tensor* w = pm.add("embed.w", Tensor({3}, {2.0, -3.0, 0.0}));
  GraphTape tape(Mode::train, 0);
  Ctx ctx(tape, pm);
  const int base = tape.constant(Tensor::scalar(0.25));

  SUBCASE("weight zero returns the loss node untouched") {
    const int out = regularized_loss(ctx, base, {w}, 0.0);
    CHECK(out == base);
  }
  SUBCASE("adds weight times the l1 norm") {
    const int out = regularized_loss(ctx, base, {w}, 1.0);
    CHECK(tape.val(out).data[0] == doctest::Approx(0.25 + 5.0).epsilon(1e-14));
    const int half = regularized_loss(ctx, base, {w}, 0.5);
    CHECK(tape.val(half).data[0] == doctest::Approx(0.25 + 2.5).epsilon(1e-14));
  }
  SUBCASE("subgradient at zero is zero") {
    const int out = regularized_loss(ctx, base, {w}, 1.0);
    pm.zero_grads();
    tape.backward(out);
    CHECK(w->grad[0] == 1.0);
    CHECK(w->grad[1] == -1.0);
    CHECK(w->grad[2] == 0.0);
  }
}

TEST_CASE("early stopping counts consecutive non-improvements") {
  EarlyStopper stopper(10);
  CHECK_FALSE(stopper.observe(1.0));
  CHECK(stopper.improved());
  CHECK_FALSE(stopper.observe(0.9));
  CHECK(stopper.best_epoch() == 2);
  bool stopped = false;
  int epoch = 2;
  for (int i = 0; i < 10; ++i) {
    ++epoch;
    stopped = stopper.observe(0.91);
    CHECK_FALSE(stopper.improved());
    if (i < 9) CHECK_FALSE(stopped);
  }
  CHECK(stopped);
  CHECK(epoch == 12);
  CHECK(stopper.best_epoch() == 2);
  CHECK(stopper.best_loss() == 0.9);
}

TEST_CASE("early stopping needs a decrease beyond min_delta") {
  EarlyStopper stopper(2, 1e-6);
  stopper.observe(1.0);
  // a drop smaller than min_delta is not an improvement
  CHECK_FALSE(stopper.observe(1.0 - 1e-9));
  CHECK_FALSE(stopper.improved());
  CHECK(stopper.observe(1.0 - 1e-9));
  CHECK(stopper.best_epoch() == 1);
}

TEST_CASE("adam takes a bias-corrected first step") {
  Tensor p({1}, {0.0});
  p.grad.assign(1, 0.5);
  Adam opt({&p}, 0.1);
  opt.step();
  // m-hat = g, v-hat = g^2, so the first step is almost exactly -lr
  CHECK(p.data[0] == doctest::Approx(-0.1).epsilon(1e-6));
}

TEST_CASE("gradient clipping rescales the global norm") {
  Tensor a({1}, {0.0});
  Tensor b({1}, {0.0});
  a.grad.assign(1, 3.0);
  b.grad.assign(1, 4.0);
  CHECK(grad_norm({&a, &b}) == doctest::Approx(5.0).epsilon(1e-14));
  clip_grads({&a, &b}, 1.0);
  CHECK(a.grad[0] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(b.grad[0] == doctest::Approx(0.8).epsilon(1e-12));
  // already small norms are untouched
  clip_grads({&a, &b}, 10.0);
  CHECK(a.grad[0] == doctest::Approx(0.6).epsilon(1e-12));
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(validate_train(cfg));
  TrainConfig bad = cfg;
  bad.learning_rate = 0.0;
  CHECK_THROWS_AS(validate_train(bad), ConfigError);
  bad = cfg;
  bad.patience = 0;
  CHECK_THROWS_AS(validate_train(bad), ConfigError);
  bad = cfg;
  bad.batch_size = 0;
  CHECK_THROWS_AS(validate_train(bad), ConfigError);
  bad = cfg;
  bad.l1_weight = -1.0;
  CHECK_THROWS_AS(validate_train(bad), ConfigError);
}

TEST_CASE("first step sends gradient into every module") {
  TimeSeriesDataset ds = generate_synthetic(small_spec(31));
  preprocess(ds);
  Model model = small_model(ds, TaskKind::online_binary, 1);

  const auto batches = make_batches(ds, "train", 64, 0);
  GraphTape tape(Mode::eval, 0);
  Ctx ctx(tape, model.params);
  const int out = model.forward(ctx, tape.constant(batches[0].x), batches[0].last_step);
  const int loss = task_loss(tape, TaskKind::online_binary, out, batches[0].y_step,
                             batches[0].m_step);
  model.params.zero_grads();
  tape.backward(loss);

  for (const std::string& prefix : {"embed.group0.", "embed.group1.", "embed.agg.", "backbone.",
                                    "head."}) {
    double norm = 0.0;
    for (Tensor* p : model.params.with_prefix(prefix))
      for (double g : p->grad) norm += g * g;
    INFO("module ", prefix);
    CHECK(norm > 0.0);
  }
}

TEST_CASE("one optimizer pass reduces the loss on a tiny problem") {
  TimeSeriesDataset ds = generate_synthetic(small_spec(7));
  preprocess(ds);
  Model model = small_model(ds, TaskKind::online_binary, 3);
  const auto batches = make_batches(ds, "train", 64, 0);
  REQUIRE(batches.size() == 1);

  auto loss_now = [&] {
    GraphTape tape(Mode::eval, 0);
    Ctx ctx(tape, model.params);
    const int out = model.forward(ctx, tape.constant(batches[0].x), batches[0].last_step);
    const int loss = task_loss(tape, TaskKind::online_binary, out, batches[0].y_step,
                               batches[0].m_step);
    model.params.zero_grads();
    tape.backward(loss);
    return tape.val(loss).data[0];
  };

  std::vector<Tensor*> params;
  for (auto& [name, p] : model.params.entries()) params.push_back(p);
  const double before = loss_now();
  Adam opt(params, 1e-3);
  opt.step();
  GraphTape tape(Mode::eval, 0);
  Ctx ctx(tape, model.params);
  const int out = model.forward(ctx, tape.constant(batches[0].x), batches[0].last_step);
  const int loss = task_loss(tape, TaskKind::online_binary, out, batches[0].y_step,
                             batches[0].m_step);
  CHECK(tape.val(loss).data[0] < before);
}

TEST_CASE("training is deterministic under the seed") {
  TimeSeriesDataset ds = generate_synthetic(small_spec(12));
  preprocess(ds);
  TrainConfig cfg;
  cfg.learning_rate = 3e-3;
  cfg.batch_size = 8;
  cfg.max_epochs = 3;
  cfg.l1_weight = 1e-4;
  cfg.seed = 5;

  Model a = small_model(ds, TaskKind::online_binary, 5);
  Model b = small_model(ds, TaskKind::online_binary, 5);
  const TrainHistory ha = train_model(a, cfg, ds);
  const TrainHistory hb = train_model(b, cfg, ds);

  REQUIRE(ha.epochs.size() == hb.epochs.size());
  for (std::size_t i = 0; i < ha.epochs.size(); ++i) {
    CHECK(ha.epochs[i].train_loss == hb.epochs[i].train_loss);
    CHECK(ha.epochs[i].val_loss == hb.epochs[i].val_loss);
    CHECK(ha.epochs[i].val_metric == hb.epochs[i].val_metric);
  }
  CHECK(ha.best_epoch == hb.best_epoch);
  auto ea = a.params.entries();
  auto eb = b.params.entries();
  REQUIRE(ea.size() == eb.size());
  for (std::size_t i = 0; i < ea.size(); ++i) {
    CHECK(ea[i].first == eb[i].first);
    CHECK(ea[i].second->data == eb[i].second->data);
  }

  Model c = small_model(ds, TaskKind::online_binary, 6);
  TrainConfig cfg2 = cfg;
  cfg2.seed = 6;
  const TrainHistory hc = train_model(c, cfg2, ds);
  bool same = hc.epochs.size() == ha.epochs.size();
  if (same)
    for (std::size_t i = 0; i < ha.epochs.size(); ++i)
      same = same && ha.epochs[i].train_loss == hc.epochs[i].train_loss;
  CHECK_FALSE(same);
}

TEST_CASE("training restores the best epoch parameters") {
  TimeSeriesDataset ds = generate_synthetic(small_spec(23));
  preprocess(ds);
  TrainConfig cfg;
  cfg.learning_rate = 5e-3;
  cfg.batch_size = 8;
  cfg.max_epochs = 6;
  cfg.patience = 3;
  cfg.l1_weight = 0.0;
  cfg.seed = 2;

  Model model = small_model(ds, TaskKind::online_binary, 2);
  const TrainHistory hist = train_model(model, cfg, ds);
  REQUIRE_FALSE(hist.epochs.empty());
  double best = hist.epochs[0].val_loss;
  for (const EpochRecord& e : hist.epochs) best = std::min(best, e.val_loss);
  CHECK(hist.best_epoch >= 1);
  CHECK(hist.epochs[static_cast<std::size_t>(hist.best_epoch - 1)].val_loss ==
        doctest::Approx(best).epsilon(1e-15));

  // restored parameters reproduce the best epoch validation loss
  const auto batches = make_batches(ds, "val", 1024, 0);
  double loss_sum = 0.0, w_sum = 0.0;
  for (const Batch& batch : batches) {
    GraphTape tape(Mode::eval, 0);
    Ctx ctx(tape, model.params);
    const int out = model.forward(ctx, tape.constant(batch.x), batch.last_step);
    const int loss = task_loss(tape, TaskKind::online_binary, out, batch.y_step, batch.m_step);
    double w = 0.0;
    for (double m : batch.m_step.data) w += m;
    loss_sum += tape.val(loss).data[0] * w;
    w_sum += w;
  }
  CHECK(loss_sum / w_sum == doctest::Approx(best).epsilon(1e-12));
}

TEST_CASE("exploding learning rate aborts as divergence") {
  TimeSeriesDataset ds = generate_synthetic(small_spec(4));
  preprocess(ds);
  TrainConfig cfg;
  cfg.learning_rate = 1e200;
  cfg.grad_clip = 0.0;
  cfg.batch_size = 8;
  cfg.max_epochs = 5;
  cfg.seed = 1;

  Model model = small_model(ds, TaskKind::online_binary, 1);
  const TrainHistory hist = train_model(model, cfg, ds);
  CHECK(hist.diverged);
  // parameters fall back to a finite snapshot
  for (auto& [name, p] : model.params.entries())
    for (double v : p->data) REQUIRE(std::isfinite(v));
}

TEST_CASE("task and label layout must agree") {
  TimeSeriesDataset ds = generate_synthetic(small_spec(4));
  preprocess(ds);
  Model model = small_model(ds, TaskKind::per_stay_binary, 1);
  TrainConfig cfg;
  cfg.task_kind = TaskKind::per_stay_binary;
  CHECK_THROWS_AS(train_model(model, cfg, ds), DataError);
}

TEST_CASE("evaluate matches the metrics module on dumped scores") {
  TimeSeriesDataset ds = generate_synthetic(small_spec(19));
  preprocess(ds);
  Model model = small_model(ds, TaskKind::online_binary, 8);
  TrainConfig cfg;
  cfg.learning_rate = 3e-3;
  cfg.batch_size = 8;
  cfg.max_epochs = 2;
  cfg.seed = 8;
  train_model(model, cfg, ds);

  const MetricRecord rec = evaluate(model, ds, "val", TaskKind::online_binary);
  const ScoreDump dump = collect_scores(model, ds, "val", TaskKind::online_binary);
  REQUIRE(rec.n == static_cast<int>(dump.scores.size()));

  std::vector<int> labels;
  std::vector<int> pred;
  double pos = 0.0;
  for (std::size_t i = 0; i < dump.targets.size(); ++i) {
    labels.push_back(dump.targets[i] > 0.5 ? 1 : 0);
    pred.push_back(dump.scores[i] > 0.0 ? 1 : 0);
    pos += labels.back();
  }
  CHECK(rec.prevalence == doctest::Approx(pos / dump.targets.size()).epsilon(1e-14));
  CHECK(rec.value("auprc") == doctest::Approx(auprc(dump.scores, labels)).epsilon(1e-14));
  CHECK(rec.value("auroc") == doctest::Approx(auroc(dump.scores, labels)).epsilon(1e-14));
  CHECK(rec.value("balanced_accuracy") ==
        doctest::Approx(balanced_accuracy(pred, labels)).epsilon(1e-14));
  CHECK_THROWS_AS(evaluate(model, ds, "nope", TaskKind::online_binary), DataError);
}

TEST_CASE("evaluate on regression reports hours") {
  TimeSeriesDataset ds = generate_synthetic(small_spec(6, TaskKind::regression));
  preprocess(ds);
  Model model = small_model(ds, TaskKind::regression, 4);
  const MetricRecord rec = evaluate(model, ds, "val", TaskKind::regression);
  const ScoreDump dump = collect_scores(model, ds, "val", TaskKind::regression);
  double mae = 0.0;
  for (std::size_t i = 0; i < dump.scores.size(); ++i)
    mae += std::abs(dump.scores[i] - dump.targets[i]);
  mae = mae / dump.scores.size() * ds.step_hours;
  CHECK(rec.value("mae_hours") == doctest::Approx(mae).epsilon(1e-12));
}

TEST_CASE("large l1 weight shrinks embedding parameters") {
  TimeSeriesDataset ds = generate_synthetic(small_spec(44));
  preprocess(ds);
  TrainConfig cfg;
  cfg.learning_rate = 5e-3;
  cfg.batch_size = 8;
  cfg.max_epochs = 4;
  cfg.seed = 9;

  auto embed_l1 = [](Model& m) {
    double total = 0.0;
    for (Tensor* p : m.embedding_params())
      for (double v : p->data) total += std::abs(v);
    return total;
  };

  cfg.l1_weight = 0.0;
  Model plain = small_model(ds, TaskKind::online_binary, 9);
  train_model(plain, cfg, ds);

  cfg.l1_weight = 10.0;
  Model shrunk = small_model(ds, TaskKind::online_binary, 9);
  train_model(shrunk, cfg, ds);

  CHECK(embed_l1(shrunk) < embed_l1(plain));
}

TEST_CASE("checkpoints round trip exactly") {
  TempDir dir;
  TimeSeriesDataset ds = generate_synthetic(small_spec(3));
  preprocess(ds);
  Model model = small_model(ds, TaskKind::online_binary, 11);

  CheckpointMeta meta;
  meta.task = TaskKind::online_binary;
  meta.step_hours = 1.0;
  meta.feature_names = ds.feature_names;
  meta.scaler.mean.assign(static_cast<std::size_t>(ds.n_features()), 0.25);
  meta.scaler.stddev.assign(static_cast<std::size_t>(ds.n_features()), 1.5);
  meta.best_epoch = 7;

  const std::string path = (dir.path / "ck.json").string();
  save_checkpoint(path, model, meta);
  LoadedCheckpoint loaded = load_checkpoint(path);

  CHECK(loaded.meta.task == meta.task);
  CHECK(loaded.meta.step_hours == meta.step_hours);
  CHECK(loaded.meta.feature_names == meta.feature_names);
  CHECK(loaded.meta.scaler.mean == meta.scaler.mean);
  CHECK(loaded.meta.scaler.stddev == meta.scaler.stddev);
  CHECK(loaded.meta.best_epoch == 7);
  CHECK(loaded.model.cfg.grouping.groups == model.cfg.grouping.groups);
  CHECK(loaded.model.cfg.backbone.kind == model.cfg.backbone.kind);

  auto ea = model.params.entries();
  auto eb = loaded.model.params.entries();
  REQUIRE(ea.size() == eb.size());
  for (std::size_t i = 0; i < ea.size(); ++i) {
    CHECK(ea[i].first == eb[i].first);
    CHECK(ea[i].second->data == eb[i].second->data);
  }

  // loaded model scores identically
  const ScoreDump da = collect_scores(model, ds, "val", TaskKind::online_binary);
  const ScoreDump db = collect_scores(loaded.model, ds, "val", TaskKind::online_binary);
  CHECK(da.scores == db.scores);

  // byte-identical re-save, both from the original and the loaded model
  const std::string again = (dir.path / "ck2.json").string();
  save_checkpoint(again, model, meta);
  CHECK(read_file(path) == read_file(again));
  const std::string relay = (dir.path / "ck3.json").string();
  save_checkpoint(relay, loaded.model, loaded.meta);
  CHECK(read_file(path) == read_file(relay));
}

TEST_CASE("checkpoint loading validates the payload") {
  TempDir dir;
  const std::string path = (dir.path / "bad.json").string();
  {
    std::ofstream out(path, std::ios::binary);
    out << "{ not json";
  }
  CHECK_THROWS_AS(load_checkpoint(path), DataError);
  {
    std::ofstream out(path, std::ios::binary);
    out << "{\"format\":\"other\",\"version\":1}";
  }
  CHECK_THROWS_AS(load_checkpoint(path), DataError);
  CHECK_THROWS_AS(load_checkpoint((dir.path / "absent.json").string()), DataError);
}

TEST_CASE("checkpoints refuse non-finite parameters") {
  TempDir dir;
  TimeSeriesDataset ds = generate_synthetic(small_spec(3));
  preprocess(ds);
  Model model = small_model(ds, TaskKind::online_binary, 11);
  model.params.entries()[0].second->data[0] = std::numeric_limits<double>::quiet_NaN();
  CheckpointMeta meta;
  meta.feature_names = ds.feature_names;
  CHECK_THROWS_AS(save_checkpoint((dir.path / "ck.json").string(), model, meta), NumericError);
}
