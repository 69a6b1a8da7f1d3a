#pragma once

#include <string>
#include <vector>

#include "stepwise/encoders.hpp"
#include "stepwise/nn.hpp"

namespace stepwise {

// Named partition of feature indices {0..d-1} into ordered concept groups.
// Feature order inside a group is the declared order, not sorted.
struct GroupingScheme {
  std::string name;
  std::vector<std::string> group_names;
  std::vector<std::vector<int>> groups;

  int group_count() const { return static_cast<int>(groups.size()); }
};

// Covering + disjoint + nonempty or throws DataError naming the indices.
void validate_partition(const GroupingScheme& scheme, int d);

enum class AggMethod { mean, sum, concat, attention };

AggMethod agg_method_from(const std::string& name);
const char* agg_method_name(AggMethod method);

struct AggregatorSpec {
  AggMethod method = AggMethod::attention;
  int agg_depth = 2;
  int agg_heads = 3;
  int group_dim = 0;
  int output_dim = 0;
  double dropout = 0.0;
  double attention_dropout = 0.0;
};

void validate_aggregator(const AggregatorSpec& spec, int K);

// Post-softmax attention of the aggregator blocks, [layer][head], each of
// shape [n, K+1, K+1], token row 0 is the CLS token. Empty for non-attention
// methods.
struct AggTrace {
  std::vector<std::vector<int>> layers;
};

void add_aggregator_params(ParamMap& pm, const std::string& prefix, const AggregatorSpec& spec, int K,
                           Rng& rng);

// h_list: K nodes of shape [n, group_dim] in scheme group order.
// Returns [n, output_dim].
int aggregate(Ctx& ctx, const std::string& prefix, const AggregatorSpec& spec,
              const std::vector<int>& h_list, AggTrace* trace = nullptr);

// Column gather: x [n, d] -> [n, |idx|] with columns in idx order.
int select_features(Ctx& ctx, int x, const std::vector<int>& idx);

// Per-group encoders (shared architecture, disjoint parameters) followed by
// the aggregator. Parameter prefixes: <prefix>.group<k>. and <prefix>.agg.
struct GroupedSpec {
  GroupingScheme scheme;
  EncoderSpec encoder;  // input_dim ignored, set per group
  AggregatorSpec agg;
};

void add_grouped_params(ParamMap& pm, const std::string& prefix, const GroupedSpec& spec, Rng& rng);

struct GroupedTrace {
  std::vector<FttTrace> encoders;  // per group, empty unless ftt
  AggTrace agg;
};

int grouped_forward(Ctx& ctx, const std::string& prefix, const GroupedSpec& spec, int x,
                    GroupedTrace* trace = nullptr);

}  // namespace stepwise
