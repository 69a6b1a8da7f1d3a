#include "stepwise/backbones.hpp"

#include <cmath>

#include "stepwise/errors.hpp"

namespace stepwise {

BackboneKind backbone_kind_from(const std::string& name) {
  if (name == "gru") return BackboneKind::gru;
  if (name == "transformer") return BackboneKind::transformer;
  if (name == "tcn") return BackboneKind::tcn;
  throw ConfigError("unknown backbone kind: " + name);
}

const char* backbone_kind_name(BackboneKind kind) {
  switch (kind) {
    case BackboneKind::gru: return "gru";
    case BackboneKind::transformer: return "transformer";
    case BackboneKind::tcn: return "tcn";
  }
  return "?";
}

HeadKind head_kind_from(const std::string& name) {
  if (name == "binary") return HeadKind::binary;
  if (name == "multiclass") return HeadKind::multiclass;
  if (name == "regression") return HeadKind::regression;
  throw ConfigError("unknown head kind: " + name);
}

const char* head_kind_name(HeadKind kind) {
  switch (kind) {
    case HeadKind::binary: return "binary";
    case HeadKind::multiclass: return "multiclass";
    case HeadKind::regression: return "regression";
  }
  return "?";
}

PredictionMode prediction_mode_from(const std::string& name) {
  if (name == "per_step") return PredictionMode::per_step;
  if (name == "per_stay") return PredictionMode::per_stay;
  throw ConfigError("unknown prediction mode: " + name);
}

const char* prediction_mode_name(PredictionMode mode) {
  return mode == PredictionMode::per_step ? "per_step" : "per_stay";
}

void validate_backbone(const BackboneSpec& spec) {
  if (spec.input_dim < 1) throw ConfigError("backbone input_dim must be positive");
  if (spec.hidden_dim < 1) throw ConfigError("backbone hidden_dim must be positive");
  if (spec.depth < 1) throw ConfigError("backbone depth must be >= 1");
  if (spec.dropout < 0.0 || spec.dropout >= 1.0) throw ConfigError("backbone dropout must lie in [0,1)");
  if (spec.kind == BackboneKind::transformer) {
    if (spec.heads < 1) throw ConfigError("backbone heads must be positive");
    if (spec.hidden_dim % spec.heads != 0)
      throw ConfigError("backbone hidden_dim " + std::to_string(spec.hidden_dim) +
                        " not divisible by heads " + std::to_string(spec.heads));
    if (spec.attention_dropout < 0.0 || spec.attention_dropout >= 1.0)
      throw ConfigError("backbone attention_dropout must lie in [0,1)");
  }
  if (spec.kind == BackboneKind::tcn) {
    if (spec.kernel_size < 1) throw ConfigError("tcn kernel_size must be >= 1");
    if (spec.dilation_base < 1) throw ConfigError("tcn dilation_base must be >= 1");
  }
  if (spec.head_kind == HeadKind::multiclass && spec.n_classes < 2)
    throw ConfigError("multiclass head needs n_classes >= 2");
}

int head_out_dim(const BackboneSpec& spec) {
  return spec.head_kind == HeadKind::multiclass ? spec.n_classes : 1;
}

int tcn_receptive_field(const BackboneSpec& spec) {
  int field = 1;
  int dilation = 1;
  for (int l = 0; l < spec.depth; ++l) {
    field += (spec.kernel_size - 1) * dilation;
    dilation *= spec.dilation_base;
  }
  return field;
}

void add_backbone_params(ParamMap& pm, const std::string& prefix, const BackboneSpec& spec, Rng& rng) {
  validate_backbone(spec);
  const int h = spec.hidden_dim;
  switch (spec.kind) {
    case BackboneKind::gru: {
      int in = spec.input_dim;
      for (int l = 0; l < spec.depth; ++l) {
        const std::string p = prefix + ".l" + std::to_string(l);
        const double bx = 1.0 / std::sqrt(static_cast<double>(in));
        const double bh = 1.0 / std::sqrt(static_cast<double>(h));
        Tensor wx = Tensor::zeros({in, 3 * h});
        Tensor wh = Tensor::zeros({h, 3 * h});
        for (auto& v : wx.data) v = rng.uniform(-bx, bx);
        for (auto& v : wh.data) v = rng.uniform(-bh, bh);
        pm.add(p + ".wx", std::move(wx));
        pm.add(p + ".wh", std::move(wh));
        pm.add(p + ".bx", Tensor::zeros({3 * h}));
        pm.add(p + ".bh", Tensor::zeros({3 * h}));
        in = h;
      }
      break;
    }
    case BackboneKind::transformer: {
      add_linear_params(pm, prefix + ".in", spec.input_dim, h, rng);
      for (int l = 0; l < spec.depth; ++l)
        add_block_params(pm, prefix + ".blk" + std::to_string(l), h, 4 * h, rng);
      break;
    }
    case BackboneKind::tcn: {
      add_linear_params(pm, prefix + ".in", spec.input_dim, h, rng);
      for (int l = 0; l < spec.depth; ++l) {
        const std::string p = prefix + ".l" + std::to_string(l);
        const double bound = 1.0 / std::sqrt(static_cast<double>(h * spec.kernel_size));
        for (int j = 0; j < spec.kernel_size; ++j) {
          Tensor w = Tensor::zeros({h, h});
          for (auto& v : w.data) v = rng.uniform(-bound, bound);
          pm.add(p + ".w" + std::to_string(j), std::move(w));
        }
        pm.add(p + ".b", Tensor::zeros({h}));
      }
      break;
    }
  }
}

namespace {

int gru_forward(Ctx& ctx, const std::string& prefix, const BackboneSpec& spec, int H) {
  GraphTape& t = ctx.tape;
  const int B = t.val(H).shape[0];
  const int T = t.val(H).shape[1];
  const int h = spec.hidden_dim;
  int in = H;
  const int one = t.constant(Tensor::scalar(1.0));
  for (int l = 0; l < spec.depth; ++l) {
    const std::string p = prefix + ".l" + std::to_string(l);
    const int wh = ctx.param(p + ".wh");
    const int bh = ctx.param(p + ".bh");
    // Input-side gate terms for all timesteps in one matmul.
    const int gx_all = t.add(t.matmul(in, ctx.param(p + ".wx")), ctx.param(p + ".bx"));
    int h_prev = t.constant(Tensor::zeros({B, h}));
    std::vector<int> outs;
    outs.reserve(static_cast<std::size_t>(T));
    for (int step = 0; step < T; ++step) {
      const int gx = t.reshape(t.slice(gx_all, 1, step, 1), {B, 3 * h});
      const int gh = t.add(t.matmul(h_prev, wh), bh);
      const int z = t.sigmoid(t.add(t.slice(gx, 1, 0, h), t.slice(gh, 1, 0, h)));
      const int r = t.sigmoid(t.add(t.slice(gx, 1, h, h), t.slice(gh, 1, h, h)));
      const int cand = t.tanh_fn(t.add(t.slice(gx, 1, 2 * h, h), t.multiply(r, t.slice(gh, 1, 2 * h, h))));
      const int keep = t.add(one, t.scalar_scale(z, -1.0));
      h_prev = t.add(t.multiply(keep, cand), t.multiply(z, h_prev));
      outs.push_back(t.reshape(h_prev, {B, 1, h}));
    }
    int stacked = T == 1 ? outs[0] : t.concat(outs, 1);
    if (l + 1 < spec.depth) stacked = t.dropout(stacked, spec.dropout);
    in = stacked;
  }
  return in;
}

int transformer_backbone_forward(Ctx& ctx, const std::string& prefix, const BackboneSpec& spec, int H) {
  GraphTape& t = ctx.tape;
  const int T = t.val(H).shape[1];
  int x = linear(ctx, prefix + ".in", H);
  x = t.add(x, t.constant(sinusoidal_positions(T, spec.hidden_dim)));
  x = t.dropout(x, spec.dropout);
  const int mask = t.constant(causal_mask(T));
  for (int l = 0; l < spec.depth; ++l)
    x = transformer_block(ctx, prefix + ".blk" + std::to_string(l), x, spec.heads, spec.dropout,
                          spec.attention_dropout, mask);
  return t.layer_norm(x, 2);
}

int tcn_forward(Ctx& ctx, const std::string& prefix, const BackboneSpec& spec, int H) {
  GraphTape& t = ctx.tape;
  const int B = t.val(H).shape[0];
  const int T = t.val(H).shape[1];
  const int h = spec.hidden_dim;
  int x = linear(ctx, prefix + ".in", H);
  int dilation = 1;
  for (int l = 0; l < spec.depth; ++l) {
    const std::string p = prefix + ".l" + std::to_string(l);
    int conv = -1;
    for (int j = 0; j < spec.kernel_size; ++j) {
      const int shift = j * dilation;
      if (shift >= T) continue;  // tap sees only left padding, contributes zero
      int tap_in = x;
      if (shift > 0) {
        const int pad = t.constant(Tensor::zeros({B, shift, h}));
        tap_in = t.concat(pad, t.slice(x, 1, 0, T - shift), 1);
      }
      const int term = t.matmul(tap_in, ctx.param(p + ".w" + std::to_string(j)));
      conv = conv < 0 ? term : t.add(conv, term);
    }
    conv = t.add(conv, ctx.param(p + ".b"));
    x = t.add(x, t.dropout(t.relu(conv), spec.dropout));
    dilation *= spec.dilation_base;
  }
  return x;
}

}  // namespace

int backbone_forward(Ctx& ctx, const std::string& prefix, const BackboneSpec& spec, int H) {
  const auto& shape = ctx.tape.val(H).shape;
  if (shape.size() != 3 || shape[2] != spec.input_dim)
    throw ShapeError("backbone " + std::string(backbone_kind_name(spec.kind)) + ": input " +
                     shape_str(shape) + " does not match input_dim " + std::to_string(spec.input_dim));
  switch (spec.kind) {
    case BackboneKind::gru: return gru_forward(ctx, prefix, spec, H);
    case BackboneKind::transformer: return transformer_backbone_forward(ctx, prefix, spec, H);
    case BackboneKind::tcn: return tcn_forward(ctx, prefix, spec, H);
  }
  throw std::logic_error("backbone_forward: unreachable");
}

void add_head_params(ParamMap& pm, const std::string& prefix, const BackboneSpec& spec, Rng& rng) {
  add_linear_params(pm, prefix + ".out", spec.hidden_dim, head_out_dim(spec), rng);
}

int predict(Ctx& ctx, const std::string& prefix, const BackboneSpec& spec, int hidden,
            const std::vector<int>& last_step) {
  GraphTape& t = ctx.tape;
  const int B = t.val(hidden).shape[0];
  const int T = t.val(hidden).shape[1];
  const int h = t.val(hidden).shape[2];
  if (spec.prediction_mode == PredictionMode::per_step) return linear(ctx, prefix + ".out", hidden);
  if (static_cast<int>(last_step.size()) != B)
    throw ShapeError("predict: " + std::to_string(last_step.size()) + " step indices for batch of " +
                     std::to_string(B));
  std::vector<std::int64_t> ids;
  ids.reserve(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) {
    if (last_step[b] < 0 || last_step[b] >= T)
      throw ShapeError("predict: step index " + std::to_string(last_step[b]) + " outside 0.." +
                       std::to_string(T - 1));
    ids.push_back(static_cast<std::int64_t>(b) * T + last_step[b]);
  }
  const int rows = t.embedding_select(t.reshape(hidden, {B * T, h}), ids);
  return linear(ctx, prefix + ".out", rows);
}

}  // namespace stepwise
