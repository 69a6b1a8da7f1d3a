#include "stepwise/grouping.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "stepwise/errors.hpp"

namespace stepwise {

namespace {
std::string join_ints(const std::vector<int>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) os << ", ";
    os << v[i];
  }
  return os.str();
}
}  // namespace

void validate_partition(const GroupingScheme& scheme, int d) {
  if (scheme.groups.empty()) throw DataError("grouping '" + scheme.name + "' has no groups");
  std::vector<int> seen(static_cast<std::size_t>(d), 0);
  std::vector<int> overlap;
  for (std::size_t k = 0; k < scheme.groups.size(); ++k) {
    if (scheme.groups[k].empty()) {
      const std::string gname = k < scheme.group_names.size() ? scheme.group_names[k] : std::to_string(k);
      throw DataError("grouping '" + scheme.name + "': group '" + gname + "' is empty");
    }
    for (int idx : scheme.groups[k]) {
      if (idx < 0 || idx >= d)
        throw DataError("grouping '" + scheme.name + "': feature index " + std::to_string(idx) +
                        " outside 0.." + std::to_string(d - 1));
      if (++seen[static_cast<std::size_t>(idx)] == 2) overlap.push_back(idx);
    }
  }
  if (!overlap.empty())
    throw DataError("grouping '" + scheme.name + "': features in multiple groups: " + join_ints(overlap));
  std::vector<int> missing;
  for (int i = 0; i < d; ++i)
    if (seen[static_cast<std::size_t>(i)] == 0) missing.push_back(i);
  if (!missing.empty())
    throw DataError("grouping '" + scheme.name + "': features in no group: " + join_ints(missing));
}

AggMethod agg_method_from(const std::string& name) {
  if (name == "mean") return AggMethod::mean;
  if (name == "sum") return AggMethod::sum;
  if (name == "concat") return AggMethod::concat;
  if (name == "attention") return AggMethod::attention;
  throw ConfigError("unknown aggregation method: " + name);
}

const char* agg_method_name(AggMethod method) {
  switch (method) {
    case AggMethod::mean: return "mean";
    case AggMethod::sum: return "sum";
    case AggMethod::concat: return "concat";
    case AggMethod::attention: return "attention";
  }
  return "?";
}

void validate_aggregator(const AggregatorSpec& spec, int K) {
  if (spec.group_dim < 1) throw ConfigError("aggregator group_dim must be positive");
  if (spec.output_dim < 1) throw ConfigError("aggregator output_dim must be positive");
  if (K < 1) throw ConfigError("aggregator needs at least one group");
  if (spec.method == AggMethod::attention) {
    if (spec.agg_depth < 1) throw ConfigError("aggregator agg_depth must be >= 1");
    if (spec.agg_heads < 1) throw ConfigError("aggregator agg_heads must be positive");
    if (spec.group_dim % spec.agg_heads != 0)
      throw ConfigError("aggregator group_dim " + std::to_string(spec.group_dim) +
                        " not divisible by agg_heads " + std::to_string(spec.agg_heads));
  }
  if (spec.method == AggMethod::concat && K * spec.group_dim > 1 << 16)
    throw ConfigError("aggregator concat width " + std::to_string(K * spec.group_dim) + " exceeds limit");
}

void add_aggregator_params(ParamMap& pm, const std::string& prefix, const AggregatorSpec& spec, int K,
                           Rng& rng) {
  validate_aggregator(spec, K);
  const int e = spec.group_dim;
  switch (spec.method) {
    case AggMethod::mean:
    case AggMethod::sum:
      add_linear_params(pm, prefix + ".out", e, spec.output_dim, rng);
      break;
    case AggMethod::concat:
      add_linear_params(pm, prefix + ".out", K * e, spec.output_dim, rng);
      break;
    case AggMethod::attention: {
      const double bound = 1.0 / std::sqrt(static_cast<double>(e));
      Tensor cls = Tensor::zeros({1, e});
      for (auto& v : cls.data) v = rng.uniform(-bound, bound);
      pm.add(prefix + ".cls", std::move(cls));
      for (int i = 0; i < spec.agg_depth; ++i)
        add_block_params(pm, prefix + ".blk" + std::to_string(i), e, 4 * e, rng);
      add_linear_params(pm, prefix + ".out", e, spec.output_dim, rng);
      break;
    }
  }
}

int aggregate(Ctx& ctx, const std::string& prefix, const AggregatorSpec& spec,
              const std::vector<int>& h_list, AggTrace* trace) {
  GraphTape& t = ctx.tape;
  if (h_list.empty()) throw ShapeError("aggregate: no group embeddings");
  const int n = t.val(h_list[0]).shape[0];
  const int e = spec.group_dim;
  for (int h : h_list)
    if (t.val(h).shape != std::vector<int>{n, e})
      throw ShapeError("aggregate: group embedding " + t.val(h).shape_string() + " does not match [" +
                       std::to_string(n) + ", " + std::to_string(e) + "]");
  const int K = static_cast<int>(h_list.size());
  switch (spec.method) {
    case AggMethod::mean:
    case AggMethod::sum: {
      int acc = h_list[0];
      for (int k = 1; k < K; ++k) acc = t.add(acc, h_list[k]);
      if (spec.method == AggMethod::mean) acc = t.scalar_scale(acc, 1.0 / K);
      return linear(ctx, prefix + ".out", acc);
    }
    case AggMethod::concat: {
      const int cat = K == 1 ? h_list[0] : t.concat(h_list, 1);
      return linear(ctx, prefix + ".out", cat);
    }
    case AggMethod::attention: {
      std::vector<int> tokens;
      tokens.reserve(static_cast<std::size_t>(K) + 1);
      const int cls = t.embedding_select(ctx.param(prefix + ".cls"), std::vector<std::int64_t>(n, 0));
      tokens.push_back(t.reshape(cls, {n, 1, e}));
      for (int h : h_list) tokens.push_back(t.reshape(h, {n, 1, e}));
      int seq = t.concat(tokens, 1);
      for (int i = 0; i < spec.agg_depth; ++i) {
        std::vector<int> probs;
        seq = transformer_block(ctx, prefix + ".blk" + std::to_string(i), seq, spec.agg_heads, spec.dropout,
                                spec.attention_dropout, -1, trace ? &probs : nullptr);
        if (trace) trace->layers.push_back(std::move(probs));
      }
      const int cls_out = t.reshape(t.slice(t.layer_norm(seq, 2), 1, 0, 1), {n, e});
      return linear(ctx, prefix + ".out", cls_out);
    }
  }
  throw std::logic_error("aggregate: unreachable");
}

int select_features(Ctx& ctx, int x, const std::vector<int>& idx) {
  GraphTape& t = ctx.tape;
  std::vector<std::int64_t> ids(idx.begin(), idx.end());
  return t.transpose(t.embedding_select(t.transpose(x), ids));
}

void add_grouped_params(ParamMap& pm, const std::string& prefix, const GroupedSpec& spec, Rng& rng) {
  const int K = spec.scheme.group_count();
  for (int k = 0; k < K; ++k) {
    EncoderSpec enc = spec.encoder;
    enc.input_dim = static_cast<int>(spec.scheme.groups[static_cast<std::size_t>(k)].size());
    enc.output_dim = spec.agg.group_dim;
    add_encoder_params(pm, prefix + ".group" + std::to_string(k), enc, rng);
  }
  add_aggregator_params(pm, prefix + ".agg", spec.agg, K, rng);
}

int grouped_forward(Ctx& ctx, const std::string& prefix, const GroupedSpec& spec, int x,
                    GroupedTrace* trace) {
  const int K = spec.scheme.group_count();
  std::vector<int> h_list;
  h_list.reserve(static_cast<std::size_t>(K));
  if (trace) trace->encoders.resize(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    EncoderSpec enc = spec.encoder;
    enc.input_dim = static_cast<int>(spec.scheme.groups[static_cast<std::size_t>(k)].size());
    enc.output_dim = spec.agg.group_dim;
    const int xk = select_features(ctx, x, spec.scheme.groups[static_cast<std::size_t>(k)]);
    FttTrace* ft = trace && enc.kind == EncoderKind::ftt ? &trace->encoders[static_cast<std::size_t>(k)] : nullptr;
    h_list.push_back(encoder_forward(ctx, prefix + ".group" + std::to_string(k), enc, xk, ft));
  }
  return aggregate(ctx, prefix + ".agg", spec.agg, h_list, trace ? &trace->agg : nullptr);
}

}  // namespace stepwise
