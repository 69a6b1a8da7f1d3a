#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stepwise/backbones.hpp"
#include "stepwise/encoders.hpp"
#include "stepwise/grouping.hpp"

namespace stepwise {

// Full pipeline wiring: per-timestep embedding stage (direct encoder, grouped
// encoders + aggregator, or none) feeding a causal backbone and task head.
struct ModelConfig {
  int n_features = 0;
  int embed_dim = 0;
  bool use_embedding = true;
  bool grouped = false;
  EncoderSpec encoder;
  GroupingScheme grouping;
  AggregatorSpec agg;
  BackboneSpec backbone;
};

void validate_model(const ModelConfig& cfg);

struct ModelTrace {
  bool present = false;
  GroupedTrace grouped;
  FttTrace direct;
};

class Model {
 public:
  ModelConfig cfg;
  ParamMap params;

  // Builds all parameters under prefixes embed. / backbone. / head. so the
  // L1 regularizer and checkpoints can address modules by name.
  void init(std::uint64_t seed);

  // X: [B, T, d]. last_step: per-stay index of the final valid step, used by
  // per_stay heads. Returns the head output node: [B, T, C] or [B, C].
  int forward(Ctx& ctx, int x, const std::vector<int>& last_step, ModelTrace* trace = nullptr) const;

  std::vector<Tensor*> embedding_params() { return params.with_prefix("embed."); }
};

}  // namespace stepwise
