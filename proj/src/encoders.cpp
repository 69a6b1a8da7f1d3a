#include "stepwise/encoders.hpp"

#include <cmath>

#include "stepwise/errors.hpp"

namespace stepwise {

EncoderKind encoder_kind_from(const std::string& name) {
  if (name == "linear") return EncoderKind::linear;
  if (name == "mlp") return EncoderKind::mlp;
  if (name == "resnet") return EncoderKind::resnet;
  if (name == "ftt") return EncoderKind::ftt;
  throw ConfigError("unknown encoder kind: " + name);
}

const char* encoder_kind_name(EncoderKind kind) {
  switch (kind) {
    case EncoderKind::linear: return "linear";
    case EncoderKind::mlp: return "mlp";
    case EncoderKind::resnet: return "resnet";
    case EncoderKind::ftt: return "ftt";
  }
  return "?";
}

void validate_encoder(const EncoderSpec& spec) {
  if (spec.input_dim < 1) throw ConfigError("encoder input_dim must be positive");
  if (spec.output_dim < 1) throw ConfigError("encoder output_dim must be positive");
  if (spec.depth < 1) throw ConfigError("encoder depth must be >= 1");
  if (spec.dropout < 0.0 || spec.dropout >= 1.0) throw ConfigError("encoder dropout must lie in [0,1)");
  if (spec.kind == EncoderKind::mlp || spec.kind == EncoderKind::resnet) {
    if (spec.hidden_dim < 1) throw ConfigError("encoder hidden_dim must be positive");
  }
  if (spec.kind == EncoderKind::ftt) {
    if (spec.token_dim < 1) throw ConfigError("ftt token_dim must be positive");
    if (spec.heads < 1) throw ConfigError("ftt heads must be positive");
    if (spec.token_dim % spec.heads != 0)
      throw ConfigError("ftt token_dim " + std::to_string(spec.token_dim) + " not divisible by heads " +
                        std::to_string(spec.heads));
    if (spec.attention_dropout < 0.0 || spec.attention_dropout >= 1.0)
      throw ConfigError("ftt attention_dropout must lie in [0,1)");
  }
}

void add_encoder_params(ParamMap& pm, const std::string& prefix, const EncoderSpec& spec, Rng& rng) {
  validate_encoder(spec);
  switch (spec.kind) {
    case EncoderKind::linear:
      add_linear_params(pm, prefix + ".out", spec.input_dim, spec.output_dim, rng);
      break;
    case EncoderKind::mlp: {
      int in = spec.input_dim;
      for (int i = 0; i < spec.depth; ++i) {
        add_linear_params(pm, prefix + ".l" + std::to_string(i), in, spec.hidden_dim, rng);
        in = spec.hidden_dim;
      }
      add_linear_params(pm, prefix + ".out", in, spec.output_dim, rng);
      break;
    }
    case EncoderKind::resnet: {
      add_linear_params(pm, prefix + ".stem", spec.input_dim, spec.hidden_dim, rng);
      for (int i = 0; i < spec.depth; ++i) {
        const std::string b = prefix + ".block" + std::to_string(i);
        add_linear_params(pm, b + ".a", spec.hidden_dim, spec.hidden_dim, rng);
        add_linear_params(pm, b + ".b", spec.hidden_dim, spec.hidden_dim, rng);
      }
      add_linear_params(pm, prefix + ".out", spec.hidden_dim, spec.output_dim, rng);
      break;
    }
    case EncoderKind::ftt: {
      const int d = spec.input_dim;
      const int m = spec.token_dim;
      const double bound = 1.0 / std::sqrt(static_cast<double>(m));
      Tensor w = Tensor::zeros({d, m});
      Tensor b = Tensor::zeros({d, m});
      Tensor cls = Tensor::zeros({1, m});
      for (auto& v : w.data) v = rng.uniform(-bound, bound);
      for (auto& v : b.data) v = rng.uniform(-bound, bound);
      for (auto& v : cls.data) v = rng.uniform(-bound, bound);
      pm.add(prefix + ".tok.w", std::move(w));
      pm.add(prefix + ".tok.b", std::move(b));
      pm.add(prefix + ".cls", std::move(cls));
      for (int i = 0; i < spec.depth; ++i)
        add_block_params(pm, prefix + ".blk" + std::to_string(i), m, 4 * m, rng);
      add_linear_params(pm, prefix + ".out", m, spec.output_dim, rng);
      break;
    }
  }
}

int feature_tokenize(Ctx& ctx, const std::string& prefix, int x) {
  GraphTape& t = ctx.tape;
  const int w = ctx.param(prefix + ".tok.w");
  const auto& xs = t.val(x).shape;
  const auto& ws = t.val(w).shape;
  if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[0])
    throw ShapeError("feature_tokenize: input " + shape_str(xs) + " vs token table " + shape_str(ws));
  const int xr = t.reshape(x, {xs[0], xs[1], 1});
  return t.add(t.multiply(xr, w), ctx.param(prefix + ".tok.b"));
}

namespace {

int ftt_forward(Ctx& ctx, const std::string& prefix, const EncoderSpec& spec, int x, FttTrace* trace) {
  GraphTape& t = ctx.tape;
  const int n = t.val(x).shape[0];
  const int m = spec.token_dim;
  const int tokens = feature_tokenize(ctx, prefix, x);
  const int cls_rows = t.embedding_select(ctx.param(prefix + ".cls"), std::vector<std::int64_t>(n, 0));
  int seq = t.concat(t.reshape(cls_rows, {n, 1, m}), tokens, 1);
  for (int i = 0; i < spec.depth; ++i) {
    std::vector<int> probs;
    seq = transformer_block(ctx, prefix + ".blk" + std::to_string(i), seq, spec.heads, spec.dropout,
                            spec.attention_dropout, -1, trace ? &probs : nullptr);
    if (trace) trace->layers.push_back(std::move(probs));
  }
  const int cls_out = t.reshape(t.slice(t.layer_norm(seq, 2), 1, 0, 1), {n, m});
  return linear(ctx, prefix + ".out", cls_out);
}

}  // namespace

int encoder_forward(Ctx& ctx, const std::string& prefix, const EncoderSpec& spec, int x, FttTrace* trace) {
  GraphTape& t = ctx.tape;
  const auto& shape = t.val(x).shape;
  if (shape.size() != 2 || shape[1] != spec.input_dim)
    throw ShapeError("encoder " + std::string(encoder_kind_name(spec.kind)) + ": input " + shape_str(shape) +
                     " does not match input_dim " + std::to_string(spec.input_dim));
  switch (spec.kind) {
    case EncoderKind::linear:
      return linear(ctx, prefix + ".out", x);
    case EncoderKind::mlp: {
      int h = x;
      for (int i = 0; i < spec.depth; ++i)
        h = t.dropout(t.relu(linear(ctx, prefix + ".l" + std::to_string(i), h)), spec.dropout);
      return linear(ctx, prefix + ".out", h);
    }
    case EncoderKind::resnet: {
      int h = linear(ctx, prefix + ".stem", x);
      for (int i = 0; i < spec.depth; ++i) {
        const std::string b = prefix + ".block" + std::to_string(i);
        const int inner = t.dropout(t.relu(linear(ctx, b + ".a", h)), spec.dropout);
        h = t.add(h, linear(ctx, b + ".b", inner));
      }
      return linear(ctx, prefix + ".out", h);
    }
    case EncoderKind::ftt:
      return ftt_forward(ctx, prefix, spec, x, trace);
  }
  throw std::logic_error("encoder_forward: unreachable");
}

}  // namespace stepwise
