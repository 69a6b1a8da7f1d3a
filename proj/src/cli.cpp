#include "stepwise/cli.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "stepwise/checkpoint.hpp"
#include "stepwise/errors.hpp"

namespace stepwise {

namespace {

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

const char* primary_metric_name(TaskKind task) {
  switch (task) {
    case TaskKind::online_binary:
    case TaskKind::per_stay_binary: return "auprc";
    case TaskKind::multiclass: return "balanced_accuracy";
    case TaskKind::regression: return "mae_hours";
  }
  return "auprc";
}

void require_paths(const ExperimentConfig& cfg) {
  if (cfg.data_csv.empty()) throw ConfigError("missing [data] data");
  if (cfg.labels_csv.empty()) throw ConfigError("missing [data] labels");
  if (cfg.splits_csv.empty()) throw ConfigError("missing [data] splits");
}

TimeSeriesDataset load_from_config(const ExperimentConfig& cfg, double step_hours) {
  require_paths(cfg);
  return load_dataset(cfg.data_csv, cfg.labels_csv, cfg.splits_csv, cfg.groups_csv, step_hours);
}

// Datasets scored against a checkpoint reuse its training scaler.
void apply_checkpoint_scaler(TimeSeriesDataset& dataset, const CheckpointMeta& meta) {
  if (dataset.feature_names != meta.feature_names)
    throw DataError("checkpoint features do not match the dataset");
  for (Stay& stay : dataset.stays) {
    forward_impute(stay);
    apply_scaler(stay, meta.scaler);
  }
}

void print_metrics(const MetricRecord& rec) {
  std::cout << "split " << rec.split << ": n = " << rec.n << '\n';
  for (const auto& [name, value] : rec.values) {
    std::cout << "  " << name << " = " << fmt(value) << '\n';
  }
}

void write_metrics_csv(const std::filesystem::path& path, const MetricRecord& rec,
                       std::uint64_t seed) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "metric,value,seed\n";
  out << "n," << rec.n << ',' << seed << '\n';
  for (const auto& [name, value] : rec.values) {
    out << name << ',' << fmt(value) << ',' << seed << '\n';
  }
}

struct GridAxis {
  std::string section;
  std::string key;
  std::vector<std::string> values;
};

std::vector<GridAxis> parse_grid(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open grid " + path);
  std::vector<GridAxis> axes;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    const std::string where = path + ":" + std::to_string(line_no);
    const std::size_t eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected section.key = values");
    const std::string full_key = trim(t.substr(0, eq));
    const std::size_t dot = full_key.find('.');
    if (dot == std::string::npos)
      throw ConfigError(where + ": key must be section.key, got '" + full_key + "'");
    GridAxis axis;
    axis.section = full_key.substr(0, dot);
    axis.key = full_key.substr(dot + 1);
    std::stringstream values(t.substr(eq + 1));
    std::string cell;
    while (std::getline(values, cell, ',')) {
      const std::string v = trim(cell);
      if (!v.empty()) axis.values.push_back(v);
    }
    if (axis.values.empty()) throw ConfigError(where + ": no values for " + full_key);
    axes.push_back(std::move(axis));
  }
  return axes;
}

struct SweepSetting {
  std::string label;
  ExperimentConfig cfg;
};

std::vector<SweepSetting> expand_grid(const ExperimentConfig& base,
                                      const std::vector<GridAxis>& axes) {
  std::vector<SweepSetting> settings;
  std::vector<std::size_t> at(axes.size(), 0);
  while (true) {
    SweepSetting s;
    s.cfg = base;
    std::string label;
    for (std::size_t i = 0; i < axes.size(); ++i) {
      const GridAxis& axis = axes[i];
      const std::string& value = axis.values[at[i]];
      set_config_key(s.cfg, axis.section, axis.key, value, "grid");
      if (!label.empty()) label += ' ';
      label += axis.section + "." + axis.key + "=" + value;
    }
    s.cfg.synthetic.task = s.cfg.task;
    s.cfg.synthetic.step_hours = s.cfg.step_hours;
    s.cfg.train.task_kind = s.cfg.task;
    s.label = label.empty() ? "base" : label;
    settings.push_back(std::move(s));
    std::size_t i = axes.size();
    while (i > 0) {
      --i;
      if (++at[i] < axes[i].values.size()) break;
      at[i] = 0;
      if (i == 0) return settings;
    }
    if (axes.empty()) return settings;
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// commands

void cmd_generate(const ExperimentConfig& cfg) {
  SyntheticSpec spec = cfg.synthetic;
  spec.task = cfg.task;
  spec.step_hours = cfg.step_hours;
  TimeSeriesDataset ds = generate_synthetic(spec);
  write_dataset_csvs(ds, cfg.out_dir);

  std::int64_t steps = 0;
  double label_sum = 0.0;
  std::int64_t labels = 0;
  for (const Stay& stay : ds.stays) {
    steps += stay.steps();
    if (ds.per_stay_labels) {
      label_sum += stay.stay_label;
      ++labels;
    } else {
      for (int t = 0; t < stay.steps(); ++t) {
        if (stay.step_label_mask[static_cast<std::size_t>(t)] != 0) {
          label_sum += stay.step_labels[static_cast<std::size_t>(t)];
          ++labels;
        }
      }
    }
  }
  std::cout << "wrote " << ds.stays.size() << " stays, " << ds.n_features() << " features, "
            << steps << " steps to " << cfg.out_dir << '\n';
  if (labels > 0) {
    const double mean = label_sum / static_cast<double>(labels);
    if (cfg.task == TaskKind::regression) {
      std::cout << "mean label " << fmt(mean) << " hours over " << labels << " steps\n";
    } else {
      std::cout << "prevalence " << fmt(mean) << " over " << labels
                << (ds.per_stay_labels ? " stays\n" : " steps\n");
    }
  }
}

TrainHistory cmd_train(const ExperimentConfig& cfg) {
  TimeSeriesDataset ds = load_from_config(cfg, cfg.step_hours);
  const ScalerStats stats = preprocess(ds);

  Model model;
  model.cfg = resolve_model(cfg, ds);
  model.init(cfg.train.seed);

  TrainConfig tc = cfg.train;
  tc.task_kind = cfg.task;
  const TrainHistory hist = train_model(model, tc, ds);
  if (hist.empty_mask_warning)
    std::cerr << "warning: some batches carried no labeled steps\n";
  if (hist.diverged)
    std::cerr << "warning: training diverged, parameters restored from the best epoch\n";

  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  CheckpointMeta meta;
  meta.task = cfg.task;
  meta.step_hours = cfg.step_hours;
  meta.feature_names = ds.feature_names;
  meta.scaler = stats;
  meta.best_epoch = hist.best_epoch;
  save_checkpoint((fs::path(cfg.out_dir) / "checkpoint.json").string(), model, meta);

  std::ofstream out(fs::path(cfg.out_dir) / "history.csv", std::ios::binary);
  if (!out) throw DataError("cannot write history.csv in " + cfg.out_dir);
  out << "epoch,train_loss,val_loss,val_metric\n";
  for (const EpochRecord& e : hist.epochs) {
    out << e.epoch << ',' << fmt(e.train_loss) << ',' << fmt(e.val_loss) << ','
        << fmt(e.val_metric) << '\n';
  }
  out.close();

  std::cout << "trained " << hist.epochs.size() << " epoch(s), best epoch " << hist.best_epoch
            << (hist.stopped_early ? " (early stop)" : "") << '\n';
  print_metrics(evaluate(model, ds, "val", cfg.task));
  std::cout << "wrote checkpoint.json and history.csv to " << cfg.out_dir << '\n';
  return hist;
}

MetricRecord cmd_evaluate(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                          const std::string& split) {
  LoadedCheckpoint ck = load_checkpoint(checkpoint_path);
  TimeSeriesDataset ds = load_from_config(cfg, ck.meta.step_hours);
  apply_checkpoint_scaler(ds, ck.meta);

  const MetricRecord rec = evaluate(ck.model, ds, split, ck.meta.task);
  print_metrics(rec);

  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  const fs::path path = fs::path(cfg.out_dir) / ("metrics_" + split + ".csv");
  write_metrics_csv(path, rec, cfg.train.seed);
  std::cout << "wrote " << path.string() << '\n';
  return rec;
}

void cmd_explain(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                 const std::string& split, const std::vector<std::string>& stay_ids,
                 const ExplainOptions& opts) {
  LoadedCheckpoint ck = load_checkpoint(checkpoint_path);
  TimeSeriesDataset ds = load_from_config(cfg, ck.meta.step_hours);
  apply_checkpoint_scaler(ds, ck.meta);

  const AttentionReport report = aggregate_report(ck.model, ds, split, stay_ids, opts);
  emit_report(report, cfg.out_dir);
  std::cout << "attention over " << report.timesteps << " timesteps of split " << split << '\n';
  const int k_groups = static_cast<int>(report.group_names.size());
  for (int k = 0; k < k_groups; ++k) {
    std::cout << "  " << report.group_names[k] << " = " << fmt(report.between[k + 1]) << '\n';
  }
  std::cout << "  cls = " << fmt(report.between[0]) << '\n';
  std::cout << "wrote attention report to " << cfg.out_dir << '\n';
}

void cmd_sweep(const ExperimentConfig& base, const std::string& grid_path, int n_seeds,
               bool parallel) {
  if (n_seeds < 1) throw ConfigError("sweep needs at least one seed");
  const std::vector<GridAxis> axes = parse_grid(grid_path);
  std::vector<SweepSetting> settings = expand_grid(base, axes);

  struct Row {
    std::string label;
    std::string metric;
    double mean = 0.0;
    double stddev = 0.0;
  };
  std::vector<Row> rows(settings.size());

  auto run_setting = [&](std::size_t i) {
    const SweepSetting& s = settings[i];
    TimeSeriesDataset ds = load_from_config(s.cfg, s.cfg.step_hours);
    preprocess(ds);
    const std::string metric = primary_metric_name(s.cfg.task);
    std::vector<double> values;
    for (int k = 0; k < n_seeds; ++k) {
      Model model;
      model.cfg = resolve_model(s.cfg, ds);
      TrainConfig tc = s.cfg.train;
      tc.task_kind = s.cfg.task;
      tc.seed = s.cfg.train.seed + static_cast<std::uint64_t>(k);
      model.init(tc.seed);
      train_model(model, tc, ds);
      values.push_back(evaluate(model, ds, "val", s.cfg.task).value(metric));
    }
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) var += (v - mean) * (v - mean);
    var /= static_cast<double>(values.size());
    rows[i] = Row{s.label, metric, mean, std::sqrt(var)};
  };

  if (parallel && settings.size() > 1) {
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_lock;
    unsigned hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    const std::size_t n_threads = std::min<std::size_t>(hw, settings.size());
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) {
      pool.emplace_back([&] {
        while (true) {
          const std::size_t i = next.fetch_add(1);
          if (i >= settings.size()) return;
          try {
            run_setting(i);
          } catch (...) {
            std::lock_guard<std::mutex> hold(failure_lock);
            if (!failure) failure = std::current_exception();
            return;
          }
        }
      });
    }
    for (std::thread& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
  } else {
    for (std::size_t i = 0; i < settings.size(); ++i) run_setting(i);
  }

  namespace fs = std::filesystem;
  fs::create_directories(base.out_dir);
  const fs::path path = fs::path(base.out_dir) / "sweep.csv";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "setting,seeds,metric,mean,std\n";
  for (const Row& row : rows) {
    out << row.label << ',' << n_seeds << ',' << row.metric << ',' << fmt(row.mean) << ','
        << fmt(row.stddev) << '\n';
    std::cout << row.label << ": " << row.metric << " = " << fmt(row.mean) << " +- "
              << fmt(row.stddev) << " over " << n_seeds << " seed(s)\n";
  }
  std::cout << "wrote " << path.string() << '\n';
}

// ---------------------------------------------------------------------------
// argument parsing

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"per-timestep embeddings for heterogeneous tabular time series"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_override;
  std::uint64_t seed_override = 0;
  std::string checkpoint_path;
  std::string split = "test";
  std::vector<std::string> stay_ids;
  int layer = -1;
  std::string head_reduce = "mean";
  std::string grid_path;
  int n_seeds = 3;
  bool parallel = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "experiment config file")->required();
    cmd->add_option("--seed", seed_override, "override the experiment seed");
    cmd->add_option("--out", out_override, "override the output directory");
  };

  CLI::App* gen = app.add_subcommand("generate", "write a synthetic dataset as csv files");
  add_common(gen);
  CLI::App* train = app.add_subcommand("train", "train a model and write a checkpoint");
  add_common(train);
  CLI::App* eval = app.add_subcommand("evaluate", "score a checkpoint on one split");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
  eval->add_option("--split", split, "split to score (default test)");
  CLI::App* explain = app.add_subcommand("explain", "emit an attention report");
  add_common(explain);
  explain->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
  explain->add_option("--split", split, "split to report on (default test)");
  explain->add_option("--stays", stay_ids, "stay ids for over-time trajectories")->delimiter(',');
  explain->add_option("--layer", layer, "attention block index, -1 for the last");
  explain->add_option("--heads", head_reduce, "head reduction: mean or max");
  CLI::App* sweep = app.add_subcommand("sweep", "train a cartesian grid of settings");
  add_common(sweep);
  sweep->add_option("--grid", grid_path, "grid file of section.key = v1,v2,... lines")->required();
  sweep->add_option("--seeds", n_seeds, "seeds per setting (default 3)");
  sweep->add_flag("--parallel", parallel, "run settings concurrently");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    ExperimentConfig cfg = load_config(config_path);
    if (gen->count("--seed") || train->count("--seed") || eval->count("--seed") ||
        explain->count("--seed") || sweep->count("--seed")) {
      cfg.train.seed = seed_override;
      cfg.synthetic.seed = seed_override;
    }
    if (!out_override.empty()) cfg.out_dir = out_override;

    if (app.got_subcommand(gen)) {
      cmd_generate(cfg);
    } else if (app.got_subcommand(train)) {
      cmd_train(cfg);
    } else if (app.got_subcommand(eval)) {
      cmd_evaluate(cfg, checkpoint_path, split);
    } else if (app.got_subcommand(explain)) {
      ExplainOptions opts;
      opts.layer = layer;
      opts.head_reduce = head_reduce_from(head_reduce);
      cmd_explain(cfg, checkpoint_path, split, stay_ids, opts);
    } else if (app.got_subcommand(sweep)) {
      cmd_sweep(cfg, grid_path, n_seeds, parallel);
    }
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace stepwise
