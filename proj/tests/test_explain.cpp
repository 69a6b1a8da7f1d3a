#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "doctest.h"
#include "stepwise/errors.hpp"
#include "stepwise/explain.hpp"

using namespace stepwise;

namespace {

namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  TempDir() {
    static int n = 0;
    path = fs::temp_directory_path() /
           ("stepwise_ex_" + std::to_string(::getpid()) + "_" + std::to_string(n++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

TimeSeriesDataset attn_dataset(std::uint64_t seed) {
  SyntheticSpec spec;
  spec.seed = seed;
  spec.n_stays = 12;
  spec.horizon = 6;
  spec.k_groups = 3;
  spec.feats_per_group = 2;
  TimeSeriesDataset ds = generate_synthetic(spec);
  preprocess(ds);
  return ds;
}

Model attn_model(const TimeSeriesDataset& ds, std::uint64_t seed) {
  Model model;
  model.cfg.n_features = ds.n_features();
  model.cfg.embed_dim = 6;
  model.cfg.grouped = true;
  model.cfg.grouping = ds.grouping;
  model.cfg.encoder.kind = EncoderKind::ftt;
  model.cfg.encoder.depth = 2;
  model.cfg.encoder.token_dim = 4;
  model.cfg.encoder.heads = 2;
  model.cfg.agg.method = AggMethod::attention;
  model.cfg.agg.group_dim = 6;
  model.cfg.agg.output_dim = 6;
  model.cfg.agg.agg_depth = 2;
  model.cfg.agg.agg_heads = 2;
  model.cfg.backbone.kind = BackboneKind::gru;
  model.cfg.backbone.hidden_dim = 5;
  model.cfg.backbone.head_kind = HeadKind::binary;
  model.cfg.backbone.prediction_mode = PredictionMode::per_step;
  validate_model(model.cfg);
  model.init(seed);
  return model;
}

}  // namespace

TEST_CASE("extraction shapes and row sums") {
  TimeSeriesDataset ds = attn_dataset(50);
  Model model = attn_model(ds, 1);
  const Stay& stay = ds.stays[0];
  const int t_steps = stay.steps();

  for (HeadReduce reduce : {HeadReduce::mean, HeadReduce::max}) {
    ExplainOptions opts;
    opts.head_reduce = reduce;
    AttentionExtract ex = extract_attention(model, stay.x, opts);
    REQUIRE(ex.within.size() == 3);
    REQUIRE(static_cast<int>(ex.between.size()) == t_steps);
    for (int k = 0; k < 3; ++k) {
      REQUIRE(static_cast<int>(ex.within[static_cast<std::size_t>(k)].size()) == t_steps);
      const std::size_t width = ds.grouping.groups[static_cast<std::size_t>(k)].size() + 1;
      for (int t = 0; t < t_steps; ++t) {
        const auto& row = ex.within[static_cast<std::size_t>(k)][static_cast<std::size_t>(t)];
        REQUIRE(row.size() == width);
        double sum = 0.0;
        for (double w : row) {
          CHECK(w >= 0.0);
          sum += w;
        }
        CHECK(std::abs(sum - 1.0) <= 1e-9);
      }
    }
    for (int t = 0; t < t_steps; ++t) {
      const auto& row = ex.between[static_cast<std::size_t>(t)];
      REQUIRE(row.size() == 4);
      double sum = 0.0;
      for (double w : row) sum += w;
      CHECK(std::abs(sum - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("head mean differs from head max on a generic model") {
  TimeSeriesDataset ds = attn_dataset(51);
  Model model = attn_model(ds, 2);
  ExplainOptions mean_opts;
  ExplainOptions max_opts;
  max_opts.head_reduce = HeadReduce::max;
  AttentionExtract a = extract_attention(model, ds.stays[0].x, mean_opts);
  AttentionExtract b = extract_attention(model, ds.stays[0].x, max_opts);
  bool differs = false;
  for (std::size_t t = 0; t < a.between.size(); ++t)
    for (std::size_t j = 0; j < a.between[t].size(); ++j)
      differs = differs || std::abs(a.between[t][j] - b.between[t][j]) > 1e-12;
  CHECK(differs);
}

TEST_CASE("layer selection") {
  TimeSeriesDataset ds = attn_dataset(52);
  Model model = attn_model(ds, 3);
  ExplainOptions last;
  ExplainOptions explicit_last;
  explicit_last.layer = 1;
  ExplainOptions first;
  first.layer = 0;

  AttentionExtract a = extract_attention(model, ds.stays[0].x, last);
  AttentionExtract b = extract_attention(model, ds.stays[0].x, explicit_last);
  CHECK(a.between == b.between);
  AttentionExtract c = extract_attention(model, ds.stays[0].x, first);
  bool differs = false;
  for (std::size_t t = 0; t < a.between.size(); ++t)
    for (std::size_t j = 0; j < a.between[t].size(); ++j)
      differs = differs || std::abs(a.between[t][j] - c.between[t][j]) > 1e-12;
  CHECK(differs);

  ExplainOptions bad;
  bad.layer = 2;
  CHECK_THROWS_AS(extract_attention(model, ds.stays[0].x, bad), ConfigError);
}

TEST_CASE("extraction names the incompatible component") {
  TimeSeriesDataset ds = attn_dataset(53);

  Model base = attn_model(ds, 1);

  SUBCASE("direct encoder") {
    Model model;
    model.cfg = base.cfg;
    model.cfg.grouped = false;
    model.cfg.grouping = GroupingScheme{};
    model.init(1);
    CHECK_THROWS_WITH_AS(extract_attention(model, ds.stays[0].x, {}),
                         doctest::Contains("direct encoder"), ConfigError);
  }
  SUBCASE("non-ftt group encoder") {
    Model model;
    model.cfg = base.cfg;
    model.cfg.encoder.kind = EncoderKind::mlp;
    model.init(1);
    CHECK_THROWS_WITH_AS(extract_attention(model, ds.stays[0].x, {}), doctest::Contains("mlp"),
                         ConfigError);
  }
  SUBCASE("non-attention aggregation") {
    Model model;
    model.cfg = base.cfg;
    model.cfg.agg.method = AggMethod::mean;
    model.init(1);
    CHECK_THROWS_WITH_AS(extract_attention(model, ds.stays[0].x, {}), doctest::Contains("mean"),
                         ConfigError);
  }
  SUBCASE("no embedding stage") {
    Model model;
    model.cfg.n_features = ds.n_features();
    model.cfg.embed_dim = 4;
    model.cfg.use_embedding = false;
    model.cfg.backbone.kind = BackboneKind::gru;
    model.cfg.backbone.hidden_dim = 4;
    model.cfg.backbone.head_kind = HeadKind::binary;
    model.init(1);
    CHECK_THROWS_WITH_AS(extract_attention(model, ds.stays[0].x, {}),
                         doctest::Contains("embedding"), ConfigError);
  }
  SUBCASE("wrong feature count") {
    Model model = attn_model(ds, 1);
    CHECK_THROWS_AS(extract_attention(model, Tensor({4, 2}), {}), ShapeError);
  }
}

TEST_CASE("report averages extraction over the split") {
  TimeSeriesDataset ds = attn_dataset(54);
  Model model = attn_model(ds, 5);

  AttentionReport report = aggregate_report(model, ds, "train");
  REQUIRE(report.between.size() == 4);
  REQUIRE(report.within.size() == 3);
  CHECK(report.over_time.empty());
  CHECK(report.split == "train");
  CHECK(report.head_reduce == "mean");

  // recompute the mean by hand from per-stay extractions
  std::vector<double> between_sum(4, 0.0);
  std::int64_t steps = 0;
  for (const Stay& stay : ds.stays) {
    if (stay.split != "train") continue;
    AttentionExtract ex = extract_attention(model, stay.x, {});
    for (const auto& row : ex.between)
      for (std::size_t j = 0; j < row.size(); ++j) between_sum[j] += row[j];
    steps += stay.steps();
  }
  CHECK(report.timesteps == steps);
  for (std::size_t j = 0; j < 4; ++j)
    CHECK(report.between[j] ==
          doctest::Approx(between_sum[j] / static_cast<double>(steps)).epsilon(1e-12));

  double total = 0.0;
  for (double w : report.between) total += w;
  CHECK(std::abs(total - 1.0) <= 1e-9);
  for (const auto& within : report.within) {
    double sum = 0.0;
    for (double w : within) sum += w;
    CHECK(std::abs(sum - 1.0) <= 1e-9);
  }
}

TEST_CASE("report keeps trajectories for requested stays only") {
  TimeSeriesDataset ds = attn_dataset(55);
  Model model = attn_model(ds, 6);
  std::vector<std::string> train_ids;
  for (const Stay& stay : ds.stays)
    if (stay.split == "train") train_ids.push_back(stay.stay_id);
  REQUIRE(train_ids.size() >= 2);

  AttentionReport report =
      aggregate_report(model, ds, "train", {train_ids[0], train_ids[1]});
  REQUIRE(report.over_time.size() == 2);
  CHECK(report.over_time[0].first == train_ids[0]);
  CHECK(report.over_time[1].first == train_ids[1]);
  for (const auto& [id, rows] : report.over_time)
    for (const auto& row : rows) {
      double sum = 0.0;
      for (double w : row) sum += w;
      CHECK(std::abs(sum - 1.0) <= 1e-9);
    }

  CHECK_THROWS_AS(aggregate_report(model, ds, "train", {"missing_stay"}), DataError);
  CHECK_THROWS_AS(aggregate_report(model, ds, "nope"), DataError);
}

TEST_CASE("emission writes csv and svg charts byte stably") {
  TempDir dir;
  TimeSeriesDataset ds = attn_dataset(56);
  Model model = attn_model(ds, 7);
  std::string stay_id;
  for (const Stay& stay : ds.stays)
    if (stay.split == "val") {
      stay_id = stay.stay_id;
      break;
    }
  REQUIRE_FALSE(stay_id.empty());

  AttentionReport report = aggregate_report(model, ds, "val", {stay_id});
  const std::string out = (dir.path / "report").string();
  emit_report(report, out);

  const std::vector<std::string> expected = {
      "between.csv",          "between.svg",
      "within_group0.csv",    "within_group0.svg",
      "within_group1.csv",    "within_group1.svg",
      "within_group2.csv",    "within_group2.svg",
      "over_time_" + stay_id + ".csv", "over_time_" + stay_id + ".svg"};
  for (const std::string& name : expected) {
    INFO("file ", name);
    CHECK(fs::exists(fs::path(out) / name));
  }

  // between.csv: header, cls row, one row per group
  std::istringstream between(read_file(fs::path(out) / "between.csv"));
  std::string line;
  std::getline(between, line);
  CHECK(line == "group,weight");
  std::getline(between, line);
  CHECK(line.substr(0, 4) == "cls,");
  int rows = 0;
  double sum = std::stod(line.substr(4));
  while (std::getline(between, line)) {
    ++rows;
    sum += std::stod(line.substr(line.find(',') + 1));
  }
  CHECK(rows == 3);
  CHECK(std::abs(sum - 1.0) <= 1e-9);

  // within csv names features of that group
  std::istringstream within(read_file(fs::path(out) / "within_group1.csv"));
  std::getline(within, line);
  CHECK(line == "feature,weight");
  std::getline(within, line);
  CHECK(line.substr(0, 4) == "cls,");
  std::vector<std::string> feat_rows;
  while (std::getline(within, line)) feat_rows.push_back(line.substr(0, line.find(',')));
  REQUIRE(feat_rows.size() == ds.grouping.groups[1].size());
  for (std::size_t j = 0; j < feat_rows.size(); ++j)
    CHECK(feat_rows[j] == ds.feature_names[static_cast<std::size_t>(ds.grouping.groups[1][j])]);

  // over-time csv has one row per timestep
  std::istringstream over(read_file(fs::path(out) / ("over_time_" + stay_id + ".csv")));
  std::getline(over, line);
  CHECK(line == "time,cls,group0,group1,group2");
  int t_rows = 0;
  while (std::getline(over, line)) ++t_rows;
  int stay_steps = 0;
  for (const Stay& stay : ds.stays)
    if (stay.stay_id == stay_id) stay_steps = stay.steps();
  CHECK(t_rows == stay_steps);

  // charts are well-formed svg with axis labels
  const std::string bar = read_file(fs::path(out) / "between.svg");
  CHECK(bar.find("<svg") != std::string::npos);
  CHECK(bar.find("mean attention weight") != std::string::npos);
  const std::string lines = read_file(fs::path(out) / ("over_time_" + stay_id + ".svg"));
  CHECK(lines.find("<polyline") != std::string::npos);
  CHECK(lines.find("timestep") != std::string::npos);

  // re-emission is byte identical
  std::vector<std::string> first;
  for (const std::string& name : expected) first.push_back(read_file(fs::path(out) / name));
  emit_report(report, out);
  for (std::size_t i = 0; i < expected.size(); ++i)
    CHECK(first[i] == read_file(fs::path(out) / expected[i]));
}
