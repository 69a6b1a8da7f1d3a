#pragma once

#include <string>
#include <vector>

#include "stepwise/nn.hpp"

namespace stepwise {

enum class BackboneKind { gru, transformer, tcn };
enum class HeadKind { binary, multiclass, regression };
enum class PredictionMode { per_step, per_stay };

BackboneKind backbone_kind_from(const std::string& name);
const char* backbone_kind_name(BackboneKind kind);
HeadKind head_kind_from(const std::string& name);
const char* head_kind_name(HeadKind kind);
PredictionMode prediction_mode_from(const std::string& name);
const char* prediction_mode_name(PredictionMode mode);

struct BackboneSpec {
  BackboneKind kind = BackboneKind::gru;
  int input_dim = 0;
  int hidden_dim = 32;
  int depth = 1;
  int heads = 2;
  int kernel_size = 2;
  int dilation_base = 2;
  double dropout = 0.0;
  double attention_dropout = 0.0;
  HeadKind head_kind = HeadKind::binary;
  int n_classes = 2;
  PredictionMode prediction_mode = PredictionMode::per_step;
};

void validate_backbone(const BackboneSpec& spec);
int head_out_dim(const BackboneSpec& spec);
// 1 + sum over layers of (kernel-1) * dilation_base^layer.
int tcn_receptive_field(const BackboneSpec& spec);

void add_backbone_params(ParamMap& pm, const std::string& prefix, const BackboneSpec& spec, Rng& rng);
// H: [B, T, input_dim] -> [B, T, hidden_dim]; strictly causal for all kinds.
int backbone_forward(Ctx& ctx, const std::string& prefix, const BackboneSpec& spec, int H);

void add_head_params(ParamMap& pm, const std::string& prefix, const BackboneSpec& spec, Rng& rng);
// per_step: [B, T, hidden] -> [B, T, C]. per_stay: gathers hidden[b, last_step[b]]
// per stay and returns [B, C].
int predict(Ctx& ctx, const std::string& prefix, const BackboneSpec& spec, int hidden,
            const std::vector<int>& last_step);

}  // namespace stepwise
