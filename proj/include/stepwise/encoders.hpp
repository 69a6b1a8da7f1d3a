#pragma once

#include <string>
#include <vector>

#include "stepwise/nn.hpp"

namespace stepwise {

enum class EncoderKind { linear, mlp, resnet, ftt };

EncoderKind encoder_kind_from(const std::string& name);
const char* encoder_kind_name(EncoderKind kind);

struct EncoderSpec {
  EncoderKind kind = EncoderKind::ftt;
  int input_dim = 0;
  int output_dim = 0;
  int depth = 1;
  int hidden_dim = 64;
  int token_dim = 64;
  int heads = 2;
  double dropout = 0.0;
  double attention_dropout = 0.0;
};

void validate_encoder(const EncoderSpec& spec);

// Post-softmax attention node ids of the ftt blocks, [layer][head], each of
// shape [n, d+1, d+1]. Token row 0 is the CLS token.
struct FttTrace {
  std::vector<std::vector<int>> layers;
};

void add_encoder_params(ParamMap& pm, const std::string& prefix, const EncoderSpec& spec, Rng& rng);

// Lifts each scalar feature to a token: out[i,j,:] = x[i,j] * W[j,:] + b[j,:]
// with W = <prefix>.tok.w and b = <prefix>.tok.b, both [d, m]. Returns [n, d, m].
int feature_tokenize(Ctx& ctx, const std::string& prefix, int x);

// x: [n, input_dim] rows of feature vectors (one row per timestep instance).
// Returns [n, output_dim].
int encoder_forward(Ctx& ctx, const std::string& prefix, const EncoderSpec& spec, int x,
                    FttTrace* trace = nullptr);

}  // namespace stepwise
