#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "stepwise/datapipe.hpp"
#include "stepwise/model.hpp"

namespace stepwise {

enum class HeadReduce { mean, max };

HeadReduce head_reduce_from(const std::string& name);
const char* head_reduce_name(HeadReduce reduce);

struct ExplainOptions {
  int layer = -1;  // -1 selects the last block of each stack
  HeadReduce head_reduce = HeadReduce::mean;
};

// CLS-query attention rows for one stay, one entry per timestep. Head mean
// keeps rows summing to 1; head max is renormalized to do the same.
struct AttentionExtract {
  std::vector<std::string> group_names;
  std::vector<std::vector<int>> group_features;
  // within[k][t]: 1+|M_k| weights, entry 0 is the CLS self mass
  std::vector<std::vector<std::vector<double>>> within;
  // between[t]: 1+K weights, entry 0 is the CLS self mass
  std::vector<std::vector<double>> between;
};

// stay_x: [T, d] preprocessed features. The model must use ftt group encoders
// under attention aggregation; anything else raises a config error naming the
// incompatible component.
AttentionExtract extract_attention(Model& model, const Tensor& stay_x,
                                   const ExplainOptions& opts = {});

struct AttentionReport {
  std::vector<std::string> group_names;
  std::vector<std::vector<int>> group_features;
  std::vector<std::string> feature_names;
  // within[k]: 1+|M_k| mean weights, entry 0 CLS; between: 1+K, entry 0 CLS
  std::vector<std::vector<double>> within;
  std::vector<double> between;
  // per requested stay: [T][1+K] between-group trajectories
  std::vector<std::pair<std::string, std::vector<std::vector<double>>>> over_time;
  std::string split;
  int layer = -1;
  std::string head_reduce = "mean";
  std::int64_t timesteps = 0;
};

// Arithmetic mean over every timestep of every stay in the split; over_time
// trajectories are kept only for the requested stay ids.
AttentionReport aggregate_report(Model& model, const TimeSeriesDataset& dataset,
                                 const std::string& split,
                                 const std::vector<std::string>& stay_ids = {},
                                 const ExplainOptions& opts = {});

// Writes within_<group>.csv, between.csv, over_time_<stay>.csv and matching
// SVG charts. Pure function of the report, re-emission is byte identical.
void emit_report(const AttentionReport& report, const std::string& out_dir);

}  // namespace stepwise
