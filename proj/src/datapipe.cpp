#include "stepwise/datapipe.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "stepwise/errors.hpp"

namespace stepwise {

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

double parse_number(const std::string& s, const std::string& where) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw DataError(where + ": cannot parse number '" + s + "'");
  }
  if (pos != s.size()) throw DataError(where + ": cannot parse number '" + s + "'");
  if (!std::isfinite(v)) throw DataError(where + ": non-finite value '" + s + "' rejected");
  return v;
}

std::int64_t parse_time(const std::string& s, const std::string& where) {
  std::size_t pos = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &pos);
  } catch (const std::exception&) {
    throw DataError(where + ": cannot parse time '" + s + "'");
  }
  if (pos != s.size()) throw DataError(where + ": cannot parse time '" + s + "'");
  if (v < 0) throw DataError(where + ": negative time " + s);
  return v;
}

std::ifstream open_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return in;
}

std::string fmt(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Threshold at the 10 percent quantile of descending scores; labels are the
// strictly-greater values.
double calibrate_threshold(std::vector<double> scores) {
  if (scores.empty()) throw NumericError("prevalence calibration: no scores");
  std::sort(scores.begin(), scores.end(), std::greater<double>());
  const std::size_t n = scores.size();
  const std::size_t at = std::min(n - 1, static_cast<std::size_t>(std::floor(0.10 * static_cast<double>(n))));
  const double thr = scores[at];
  std::size_t positives = 0;
  for (double s : scores)
    if (s > thr) ++positives;
  const double prevalence = static_cast<double>(positives) / static_cast<double>(n);
  if (prevalence < 0.05 || prevalence > 0.15)
    throw NumericError("prevalence calibration failed: achieved " + fmt(prevalence) +
                       " outside [0.05, 0.15]");
  return thr;
}

}  // namespace

TaskKind task_kind_from(const std::string& name) {
  if (name == "online_binary") return TaskKind::online_binary;
  if (name == "per_stay_binary") return TaskKind::per_stay_binary;
  if (name == "multiclass") return TaskKind::multiclass;
  if (name == "regression") return TaskKind::regression;
  throw ConfigError("unknown task kind: " + name);
}

const char* task_kind_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::online_binary: return "online_binary";
    case TaskKind::per_stay_binary: return "per_stay_binary";
    case TaskKind::multiclass: return "multiclass";
    case TaskKind::regression: return "regression";
  }
  return "?";
}

bool task_is_per_stay(TaskKind kind) { return kind == TaskKind::per_stay_binary; }

TimeSeriesDataset load_dataset(const std::string& data_csv, const std::string& labels_csv,
                               const std::string& splits_csv, const std::string& groups_csv,
                               double step_hours) {
  if (step_hours <= 0.0) throw ConfigError("step_hours must be positive");
  TimeSeriesDataset ds;
  ds.step_hours = step_hours;

  {
    std::ifstream in = open_file(data_csv);
    std::string line;
    if (!std::getline(in, line)) throw DataError(data_csv + ": empty file");
    const auto header = split_line(line);
    if (header.size() < 3 || header[0] != "stay_id" || header[1] != "time")
      throw DataError(data_csv + ": header must be stay_id,time,<features>");
    ds.feature_names.assign(header.begin() + 2, header.end());
    const int d = ds.n_features();

    std::unordered_map<std::string, std::size_t> stay_at;
    int line_no = 1;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const auto cells = split_line(line);
      const std::string where = data_csv + ":" + std::to_string(line_no);
      if (static_cast<int>(cells.size()) != d + 2)
        throw DataError(where + ": expected " + std::to_string(d + 2) + " columns, got " +
                        std::to_string(cells.size()));
      auto it = stay_at.find(cells[0]);
      if (it == stay_at.end()) {
        it = stay_at.emplace(cells[0], ds.stays.size()).first;
        ds.stays.emplace_back();
        ds.stays.back().stay_id = cells[0];
      }
      Stay& stay = ds.stays[it->second];
      const std::int64_t time = parse_time(cells[1], where);
      if (!stay.times.empty()) {
        if (time == stay.times.back())
          throw DataError(where + ": duplicate (stay_id, time) = (" + cells[0] + ", " + cells[1] + ")");
        if (time < stay.times.back())
          throw DataError(where + ": non-monotone time for stay " + cells[0]);
      }
      stay.times.push_back(time);
      for (int f = 0; f < d; ++f) {
        const std::string& cell = cells[static_cast<std::size_t>(f + 2)];
        if (cell.empty()) {
          stay.x.data.push_back(0.0);
          stay.observed.push_back(0);
        } else {
          stay.x.data.push_back(parse_number(cell, where));
          stay.observed.push_back(1);
        }
      }
    }
    if (ds.stays.empty()) throw DataError(data_csv + ": no rows");
    for (Stay& stay : ds.stays) {
      stay.x.shape = {static_cast<int>(stay.times.size()), d};
      stay.pending.assign(stay.observed.size(), 0);
    }
  }

  std::unordered_map<std::string, std::size_t> stay_at;
  for (std::size_t i = 0; i < ds.stays.size(); ++i) stay_at[ds.stays[i].stay_id] = i;

  {
    std::ifstream in = open_file(labels_csv);
    std::string line;
    if (!std::getline(in, line)) throw DataError(labels_csv + ": empty file");
    const auto header = split_line(line);
    if (header.size() == 3 && header[0] == "stay_id" && header[1] == "time" && header[2] == "label")
      ds.per_stay_labels = false;
    else if (header.size() == 2 && header[0] == "stay_id" && header[1] == "label")
      ds.per_stay_labels = true;
    else
      throw DataError(labels_csv + ": header must be stay_id,time,label or stay_id,label");

    std::vector<std::unordered_map<std::int64_t, int>> step_of(ds.stays.size());
    if (!ds.per_stay_labels)
      for (std::size_t i = 0; i < ds.stays.size(); ++i)
        for (std::size_t t = 0; t < ds.stays[i].times.size(); ++t)
          step_of[i][ds.stays[i].times[t]] = static_cast<int>(t);
    for (Stay& stay : ds.stays) {
      stay.step_labels.assign(static_cast<std::size_t>(stay.steps()), 0.0);
      stay.step_label_mask.assign(static_cast<std::size_t>(stay.steps()), 0);
    }
    std::vector<std::uint8_t> has_stay_label(ds.stays.size(), 0);

    int line_no = 1;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const auto cells = split_line(line);
      const std::string where = labels_csv + ":" + std::to_string(line_no);
      if (cells.size() != (ds.per_stay_labels ? 2u : 3u)) throw DataError(where + ": wrong column count");
      auto it = stay_at.find(cells[0]);
      if (it == stay_at.end()) throw DataError(where + ": label for unknown stay " + cells[0]);
      Stay& stay = ds.stays[it->second];
      if (ds.per_stay_labels) {
        if (has_stay_label[it->second]) throw DataError(where + ": duplicate label for stay " + cells[0]);
        has_stay_label[it->second] = 1;
        stay.stay_label = parse_number(cells[1], where);
      } else {
        const std::int64_t time = parse_time(cells[1], where);
        auto st = step_of[it->second].find(time);
        if (st == step_of[it->second].end())
          throw DataError(where + ": label for unknown step (" + cells[0] + ", " + cells[1] + ")");
        if (stay.step_label_mask[static_cast<std::size_t>(st->second)])
          throw DataError(where + ": duplicate label for (" + cells[0] + ", " + cells[1] + ")");
        stay.step_labels[static_cast<std::size_t>(st->second)] = parse_number(cells[2], where);
        stay.step_label_mask[static_cast<std::size_t>(st->second)] = 1;
      }
    }
    if (ds.per_stay_labels)
      for (std::size_t i = 0; i < ds.stays.size(); ++i)
        if (!has_stay_label[i]) throw DataError(labels_csv + ": no label for stay " + ds.stays[i].stay_id);
  }

  {
    std::ifstream in = open_file(splits_csv);
    std::string line;
    if (!std::getline(in, line)) throw DataError(splits_csv + ": empty file");
    const auto header = split_line(line);
    if (header.size() != 2 || header[0] != "stay_id" || header[1] != "split")
      throw DataError(splits_csv + ": header must be stay_id,split");
    std::vector<std::uint8_t> has_split(ds.stays.size(), 0);
    int line_no = 1;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const auto cells = split_line(line);
      const std::string where = splits_csv + ":" + std::to_string(line_no);
      if (cells.size() != 2) throw DataError(where + ": wrong column count");
      auto it = stay_at.find(cells[0]);
      if (it == stay_at.end()) throw DataError(where + ": split for unknown stay " + cells[0]);
      if (has_split[it->second]) throw DataError(where + ": duplicate split for stay " + cells[0]);
      if (cells[1] != "train" && cells[1] != "val" && cells[1] != "test")
        throw DataError(where + ": split must be train, val or test, got '" + cells[1] + "'");
      has_split[it->second] = 1;
      ds.stays[it->second].split = cells[1];
    }
    for (std::size_t i = 0; i < ds.stays.size(); ++i)
      if (!has_split[i]) throw DataError(splits_csv + ": no split for stay " + ds.stays[i].stay_id);
  }

  if (!groups_csv.empty()) {
    ds.grouping = load_grouping(groups_csv, ds.feature_names);
    ds.has_grouping = true;
  }
  return ds;
}

GroupingScheme load_grouping(const std::string& groups_csv,
                             const std::vector<std::string>& feature_names) {
  std::ifstream in = open_file(groups_csv);
  std::string line;
  if (!std::getline(in, line)) throw DataError(groups_csv + ": empty file");
  const auto header = split_line(line);
  if (header.size() != 2 || header[0] != "feature" || header[1] != "group")
    throw DataError(groups_csv + ": header must be feature,group");
  std::unordered_map<std::string, int> feature_at;
  for (std::size_t f = 0; f < feature_names.size(); ++f)
    feature_at[feature_names[f]] = static_cast<int>(f);
  std::unordered_map<std::string, std::size_t> group_at;
  GroupingScheme scheme;
  scheme.name = std::filesystem::path(groups_csv).stem().string();
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = split_line(line);
    const std::string where = groups_csv + ":" + std::to_string(line_no);
    if (cells.size() != 2) throw DataError(where + ": wrong column count");
    auto it = feature_at.find(cells[0]);
    if (it == feature_at.end()) throw DataError(where + ": unknown feature '" + cells[0] + "'");
    auto git = group_at.find(cells[1]);
    if (git == group_at.end()) {
      git = group_at.emplace(cells[1], scheme.groups.size()).first;
      scheme.group_names.push_back(cells[1]);
      scheme.groups.emplace_back();
    }
    scheme.groups[git->second].push_back(it->second);
  }
  validate_partition(scheme, static_cast<int>(feature_names.size()));
  return scheme;
}

void forward_impute(Stay& stay) {
  const int T = stay.steps();
  const int d = stay.x.shape.size() > 1 ? stay.x.shape[1] : 0;
  stay.pending.assign(static_cast<std::size_t>(T) * static_cast<std::size_t>(d), 0);
  for (int f = 0; f < d; ++f) {
    bool have = false;
    double last = 0.0;
    for (int t = 0; t < T; ++t) {
      const std::size_t at = static_cast<std::size_t>(t) * static_cast<std::size_t>(d) +
                             static_cast<std::size_t>(f);
      if (stay.observed[at]) {
        have = true;
        last = stay.x.data[at];
      } else if (have) {
        stay.x.data[at] = last;
      } else {
        stay.pending[at] = 1;
      }
    }
  }
}

ScalerStats fit_scaler(const TimeSeriesDataset& dataset) {
  const int d = dataset.n_features();
  std::vector<double> sum(static_cast<std::size_t>(d), 0.0);
  std::vector<double> sum_sq(static_cast<std::size_t>(d), 0.0);
  std::vector<std::int64_t> count(static_cast<std::size_t>(d), 0);
  bool any_train = false;
  for (const Stay& stay : dataset.stays) {
    if (stay.split != "train") continue;
    any_train = true;
    const int T = stay.steps();
    for (int t = 0; t < T; ++t)
      for (int f = 0; f < d; ++f) {
        const std::size_t at = static_cast<std::size_t>(t) * static_cast<std::size_t>(d) +
                               static_cast<std::size_t>(f);
        if (!stay.observed[at]) continue;
        sum[static_cast<std::size_t>(f)] += stay.x.data[at];
        sum_sq[static_cast<std::size_t>(f)] += stay.x.data[at] * stay.x.data[at];
        ++count[static_cast<std::size_t>(f)];
      }
  }
  if (!any_train) throw DataError("fit_scaler: training split is empty");
  ScalerStats stats;
  stats.mean.assign(static_cast<std::size_t>(d), 0.0);
  stats.stddev.assign(static_cast<std::size_t>(d), 1.0);
  for (int f = 0; f < d; ++f) {
    const std::size_t fi = static_cast<std::size_t>(f);
    if (count[fi] == 0) continue;  // fully unobserved feature, cells stay pending
    const double n = static_cast<double>(count[fi]);
    const double mean = sum[fi] / n;
    const double var = std::max(0.0, sum_sq[fi] / n - mean * mean);
    double std_dev = std::sqrt(var);
    if (std_dev < 1e-8) std_dev = 1.0;
    stats.mean[fi] = mean;
    stats.stddev[fi] = std_dev;
  }
  return stats;
}

void apply_scaler(Stay& stay, const ScalerStats& stats) {
  const int T = stay.steps();
  const int d = stay.x.shape.size() > 1 ? stay.x.shape[1] : 0;
  if (static_cast<std::size_t>(d) != stats.mean.size())
    throw DataError("apply_scaler: stats cover " + std::to_string(stats.mean.size()) +
                    " features, stay has " + std::to_string(d));
  for (int t = 0; t < T; ++t)
    for (int f = 0; f < d; ++f) {
      const std::size_t at = static_cast<std::size_t>(t) * static_cast<std::size_t>(d) +
                             static_cast<std::size_t>(f);
      if (stay.pending[at])
        stay.x.data[at] = 0.0;
      else
        stay.x.data[at] = (stay.x.data[at] - stats.mean[static_cast<std::size_t>(f)]) /
                          stats.stddev[static_cast<std::size_t>(f)];
    }
}

ScalerStats preprocess(TimeSeriesDataset& dataset) {
  for (Stay& stay : dataset.stays) forward_impute(stay);
  const ScalerStats stats = fit_scaler(dataset);
  for (Stay& stay : dataset.stays) apply_scaler(stay, stats);
  return stats;
}

TimeSeriesDataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.n_stays < 1 || spec.horizon < 1 || spec.k_groups < 1 || spec.feats_per_group < 1)
    throw ConfigError("synthetic generator needs positive n_stays, horizon, k_groups, feats_per_group");
  if (spec.missing_rate < 0.0 || spec.missing_rate >= 1.0)
    throw ConfigError("synthetic missing_rate must lie in [0,1)");
  if (spec.signal_group >= spec.k_groups)
    throw ConfigError("signal_group " + std::to_string(spec.signal_group) + " outside 0.." +
                      std::to_string(spec.k_groups - 1));
  if (spec.task == TaskKind::multiclass)
    throw ConfigError("synthetic generator emits online_binary, per_stay_binary or regression labels");
  if (spec.feats_per_group < 2 && spec.task != TaskKind::regression)
    throw ConfigError("binary label signal needs feats_per_group >= 2");
  if (spec.step_hours <= 0.0) throw ConfigError("step_hours must be positive");

  const int K = spec.k_groups;
  const int fpg = spec.feats_per_group;
  const int d = K * fpg;
  TimeSeriesDataset ds;
  ds.step_hours = spec.step_hours;
  ds.per_stay_labels = task_is_per_stay(spec.task);
  ds.has_grouping = true;
  ds.grouping.name = "latent";
  for (int k = 0; k < K; ++k) {
    ds.grouping.group_names.push_back("group" + std::to_string(k));
    std::vector<int> members;
    for (int j = 0; j < fpg; ++j) {
      members.push_back(k * fpg + j);
      ds.feature_names.push_back("g" + std::to_string(k) + "_f" + std::to_string(j));
    }
    ds.grouping.groups.push_back(std::move(members));
  }

  Rng rng(hash_mix(spec.seed, 0x5D47A));
  std::vector<double> coef_a(static_cast<std::size_t>(d));
  std::vector<double> coef_b(static_cast<std::size_t>(d));
  std::vector<std::uint8_t> quadratic(static_cast<std::size_t>(d));
  for (int f = 0; f < d; ++f) {
    const int j = f % fpg;
    coef_a[static_cast<std::size_t>(f)] = rng.uniform(0.6, 1.4) * (j % 2 ? -1.0 : 1.0);
    coef_b[static_cast<std::size_t>(f)] = rng.uniform(-0.3, 0.3);
    quadratic[static_cast<std::size_t>(f)] = j % 3 == 2;
  }

  const double rho = 0.9;
  const double drive = std::sqrt(1.0 - rho * rho);
  const int lo = std::max(1, (3 * spec.horizon) / 4);
  std::vector<std::vector<double>> signal(static_cast<std::size_t>(spec.n_stays));
  int id_width = 1;
  for (int n = spec.n_stays - 1; n >= 10; n /= 10) ++id_width;

  for (int b = 0; b < spec.n_stays; ++b) {
    Stay stay;
    std::string id = std::to_string(b);
    stay.stay_id = "s" + std::string(static_cast<std::size_t>(id_width) - id.size(), '0') + id;
    const int T = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.horizon - lo + 1)));
    stay.x = Tensor::zeros({T, d});
    stay.observed.assign(static_cast<std::size_t>(T) * static_cast<std::size_t>(d), 1);
    stay.pending.assign(stay.observed.size(), 0);
    stay.times.resize(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) stay.times[static_cast<std::size_t>(t)] = t;

    std::vector<double> z(static_cast<std::size_t>(K));
    for (auto& v : z) v = rng.normal();
    signal[static_cast<std::size_t>(b)].resize(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) {
      if (t > 0)
        for (auto& v : z) v = rho * v + drive * rng.normal();
      for (int f = 0; f < d; ++f) {
        const std::size_t fi = static_cast<std::size_t>(f);
        const double zk = z[static_cast<std::size_t>(f / fpg)];
        const double base = quadratic[fi] ? coef_a[fi] * (zk * zk - 1.0) + coef_b[fi]
                                          : coef_a[fi] * zk + coef_b[fi];
        stay.x.at(t, f) = base + 0.1 * rng.normal();
      }
      // The designated pair is an affine and, when present, a quadratic readout
      // so no single feature carries the product linearly.
      const int j2 = fpg >= 3 ? 2 : 1;
      double s = 0.0;
      for (int k = 0; k < K; ++k) {
        if (spec.signal_group >= 0 && k != spec.signal_group) continue;
        s += stay.x.at(t, k * fpg) * stay.x.at(t, k * fpg + j2);
      }
      signal[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)] = s;
    }
    ds.stays.push_back(std::move(stay));
  }

  if (spec.task == TaskKind::regression) {
    for (Stay& stay : ds.stays) {
      const int T = stay.steps();
      stay.step_labels.resize(static_cast<std::size_t>(T));
      stay.step_label_mask.assign(static_cast<std::size_t>(T), 1);
      for (int t = 0; t < T; ++t)
        stay.step_labels[static_cast<std::size_t>(t)] = (T - 1 - t) * spec.step_hours;
    }
  } else if (spec.task == TaskKind::online_binary) {
    std::vector<double> all;
    for (const auto& s : signal)
      for (double v : s) all.push_back(sigmoid(v));
    const double thr = calibrate_threshold(all);
    for (int b = 0; b < spec.n_stays; ++b) {
      Stay& stay = ds.stays[static_cast<std::size_t>(b)];
      const int T = stay.steps();
      stay.step_labels.resize(static_cast<std::size_t>(T));
      stay.step_label_mask.assign(static_cast<std::size_t>(T), 1);
      for (int t = 0; t < T; ++t)
        stay.step_labels[static_cast<std::size_t>(t)] =
            sigmoid(signal[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)]) > thr ? 1.0 : 0.0;
    }
  } else {
    std::vector<double> peak(static_cast<std::size_t>(spec.n_stays), -1e300);
    for (int b = 0; b < spec.n_stays; ++b)
      for (double v : signal[static_cast<std::size_t>(b)])
        peak[static_cast<std::size_t>(b)] = std::max(peak[static_cast<std::size_t>(b)], sigmoid(v));
    const double thr = calibrate_threshold(peak);
    for (int b = 0; b < spec.n_stays; ++b)
      ds.stays[static_cast<std::size_t>(b)].stay_label = peak[static_cast<std::size_t>(b)] > thr ? 1.0 : 0.0;
  }

  if (spec.missing_rate > 0.0)
    for (Stay& stay : ds.stays)
      for (std::size_t at = 0; at < stay.observed.size(); ++at)
        if (rng.uniform() < spec.missing_rate) {
          stay.observed[at] = 0;
          stay.x.data[at] = 0.0;
        }

  std::vector<int> order(static_cast<std::size_t>(spec.n_stays));
  for (int i = 0; i < spec.n_stays; ++i) order[static_cast<std::size_t>(i)] = i;
  rng.shuffle(order);
  int n_train = std::max(1, (7 * spec.n_stays) / 10);
  int n_val = std::max(1, (15 * spec.n_stays) / 100);
  while (spec.n_stays >= 3 && n_train + n_val >= spec.n_stays) --n_train;
  for (int i = 0; i < spec.n_stays; ++i) {
    Stay& stay = ds.stays[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
    stay.split = i < n_train ? "train" : i < n_train + n_val ? "val" : "test";
  }
  if (spec.n_stays < 3)
    for (Stay& stay : ds.stays) stay.split = "train";
  return ds;
}

std::vector<Batch> make_batches(const TimeSeriesDataset& dataset, const std::string& split,
                                int batch_size, std::uint64_t seed) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  std::vector<int> idx;
  for (std::size_t i = 0; i < dataset.stays.size(); ++i)
    if (dataset.stays[i].split == split) idx.push_back(static_cast<int>(i));
  if (idx.empty()) throw DataError("split '" + split + "' is empty");
  Rng rng(hash_mix(seed, 0xBA7C5));
  rng.shuffle(idx);

  const int d = dataset.n_features();
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(batch_size)) {
    const int B = static_cast<int>(std::min(static_cast<std::size_t>(batch_size), idx.size() - start));
    int max_T = 1;
    for (int b = 0; b < B; ++b)
      max_T = std::max(max_T, dataset.stays[static_cast<std::size_t>(idx[start + static_cast<std::size_t>(b)])].steps());
    Batch batch;
    batch.size = B;
    batch.max_steps = max_T;
    batch.x = Tensor::zeros({B, max_T, d});
    batch.y_step = Tensor::zeros({B, max_T});
    batch.m_step = Tensor::zeros({B, max_T});
    batch.y_stay.assign(static_cast<std::size_t>(B), 0.0);
    batch.last_step.assign(static_cast<std::size_t>(B), 0);
    batch.stay_index.assign(static_cast<std::size_t>(B), 0);
    for (int b = 0; b < B; ++b) {
      const int si = idx[start + static_cast<std::size_t>(b)];
      const Stay& stay = dataset.stays[static_cast<std::size_t>(si)];
      const int T = stay.steps();
      batch.stay_index[static_cast<std::size_t>(b)] = si;
      batch.last_step[static_cast<std::size_t>(b)] = T - 1;
      batch.y_stay[static_cast<std::size_t>(b)] = stay.stay_label;
      for (int t = 0; t < T; ++t) {
        for (int f = 0; f < d; ++f) batch.x.at(b, t, f) = stay.x.at(t, f);
        if (!dataset.per_stay_labels && !stay.step_label_mask.empty() &&
            stay.step_label_mask[static_cast<std::size_t>(t)]) {
          batch.y_step.at(b, t) = stay.step_labels[static_cast<std::size_t>(t)];
          batch.m_step.at(b, t) = 1.0;
        }
      }
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

void write_dataset_csvs(const TimeSeriesDataset& dataset, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const int d = dataset.n_features();
  {
    std::ofstream out(dir + "/data.csv");
    if (!out) throw DataError("cannot write " + dir + "/data.csv");
    out << "stay_id,time";
    for (const auto& name : dataset.feature_names) out << "," << name;
    out << "\n";
    for (const Stay& stay : dataset.stays)
      for (int t = 0; t < stay.steps(); ++t) {
        out << stay.stay_id << "," << stay.times[static_cast<std::size_t>(t)];
        for (int f = 0; f < d; ++f) {
          const std::size_t at = static_cast<std::size_t>(t) * static_cast<std::size_t>(d) +
                                 static_cast<std::size_t>(f);
          out << ",";
          if (stay.observed[at]) out << fmt(stay.x.data[at]);
        }
        out << "\n";
      }
  }
  {
    std::ofstream out(dir + "/labels.csv");
    if (!out) throw DataError("cannot write " + dir + "/labels.csv");
    if (dataset.per_stay_labels) {
      out << "stay_id,label\n";
      for (const Stay& stay : dataset.stays) out << stay.stay_id << "," << fmt(stay.stay_label) << "\n";
    } else {
      out << "stay_id,time,label\n";
      for (const Stay& stay : dataset.stays)
        for (int t = 0; t < stay.steps(); ++t)
          if (stay.step_label_mask[static_cast<std::size_t>(t)])
            out << stay.stay_id << "," << stay.times[static_cast<std::size_t>(t)] << ","
                << fmt(stay.step_labels[static_cast<std::size_t>(t)]) << "\n";
    }
  }
  {
    std::ofstream out(dir + "/splits.csv");
    if (!out) throw DataError("cannot write " + dir + "/splits.csv");
    out << "stay_id,split\n";
    for (const Stay& stay : dataset.stays) out << stay.stay_id << "," << stay.split << "\n";
  }
  if (dataset.has_grouping) {
    std::ofstream out(dir + "/groups.csv");
    if (!out) throw DataError("cannot write " + dir + "/groups.csv");
    out << "feature,group\n";
    for (std::size_t k = 0; k < dataset.grouping.groups.size(); ++k)
      for (int f : dataset.grouping.groups[k])
        out << dataset.feature_names[static_cast<std::size_t>(f)] << ","
            << dataset.grouping.group_names[k] << "\n";
  }
}

}  // namespace stepwise
