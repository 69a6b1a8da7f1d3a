#include "stepwise/model.hpp"

#include "stepwise/errors.hpp"

namespace stepwise {

void validate_model(const ModelConfig& cfg) {
  if (cfg.n_features < 1) throw ConfigError("model n_features must be positive");
  if (cfg.use_embedding) {
    if (cfg.embed_dim < 1) throw ConfigError("model embed_dim must be positive");
    if (cfg.grouped) {
      validate_partition(cfg.grouping, cfg.n_features);
      EncoderSpec probe = cfg.encoder;
      for (std::size_t k = 0; k < cfg.grouping.groups.size(); ++k) {
        probe.input_dim = static_cast<int>(cfg.grouping.groups[k].size());
        probe.output_dim = cfg.agg.group_dim;
        validate_encoder(probe);
      }
      validate_aggregator(cfg.agg, cfg.grouping.group_count());
      if (cfg.agg.output_dim != cfg.embed_dim)
        throw ConfigError("aggregator output_dim must equal embed_dim");
    } else {
      EncoderSpec probe = cfg.encoder;
      probe.input_dim = cfg.n_features;
      probe.output_dim = cfg.embed_dim;
      validate_encoder(probe);
    }
  }
  BackboneSpec bb = cfg.backbone;
  bb.input_dim = cfg.use_embedding ? cfg.embed_dim : cfg.n_features;
  validate_backbone(bb);
}

void Model::init(std::uint64_t seed) {
  validate_model(cfg);
  Rng rng(hash_mix(seed, 0x5745u));
  if (cfg.use_embedding) {
    if (cfg.grouped) {
      GroupedSpec gs{cfg.grouping, cfg.encoder, cfg.agg};
      gs.agg.output_dim = cfg.embed_dim;
      add_grouped_params(params, "embed", gs, rng);
    } else {
      EncoderSpec enc = cfg.encoder;
      enc.input_dim = cfg.n_features;
      enc.output_dim = cfg.embed_dim;
      add_encoder_params(params, "embed.direct", enc, rng);
    }
  }
  BackboneSpec bb = cfg.backbone;
  bb.input_dim = cfg.use_embedding ? cfg.embed_dim : cfg.n_features;
  add_backbone_params(params, "backbone", bb, rng);
  add_head_params(params, "head", bb, rng);
}

int Model::forward(Ctx& ctx, int x, const std::vector<int>& last_step, ModelTrace* trace) const {
  GraphTape& t = ctx.tape;
  const auto& shape = t.val(x).shape;
  if (shape.size() != 3 || shape[2] != cfg.n_features)
    throw ShapeError("model: input " + shape_str(shape) + " does not match n_features " +
                     std::to_string(cfg.n_features));
  const int B = shape[0];
  const int T = shape[1];
  int seq = x;
  if (cfg.use_embedding) {
    const int flat = t.reshape(x, {B * T, cfg.n_features});
    int emb;
    if (cfg.grouped) {
      GroupedSpec gs{cfg.grouping, cfg.encoder, cfg.agg};
      gs.agg.output_dim = cfg.embed_dim;
      emb = grouped_forward(ctx, "embed", gs, flat, trace ? &trace->grouped : nullptr);
    } else {
      EncoderSpec enc = cfg.encoder;
      enc.input_dim = cfg.n_features;
      enc.output_dim = cfg.embed_dim;
      emb = encoder_forward(ctx, "embed.direct", enc, flat, trace ? &trace->direct : nullptr);
    }
    if (trace) trace->present = true;
    seq = t.reshape(emb, {B, T, cfg.embed_dim});
  }
  BackboneSpec bb = cfg.backbone;
  bb.input_dim = cfg.use_embedding ? cfg.embed_dim : cfg.n_features;
  const int hidden = backbone_forward(ctx, "backbone", bb, seq);
  return predict(ctx, "head", bb, hidden, last_step);
}

}  // namespace stepwise
