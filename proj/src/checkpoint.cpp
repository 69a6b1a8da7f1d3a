#include "stepwise/checkpoint.hpp"

#include <fstream>

#include "json.hpp"
#include "stepwise/errors.hpp"

namespace stepwise {

namespace {

using nlohmann::json;

json encoder_to_json(const EncoderSpec& spec) {
  return json{{"kind", encoder_kind_name(spec.kind)},
              {"input_dim", spec.input_dim},
              {"output_dim", spec.output_dim},
              {"depth", spec.depth},
              {"hidden_dim", spec.hidden_dim},
              {"token_dim", spec.token_dim},
              {"heads", spec.heads},
              {"dropout", spec.dropout},
              {"attention_dropout", spec.attention_dropout}};
}

EncoderSpec encoder_from_json(const json& j) {
  EncoderSpec spec;
  spec.kind = encoder_kind_from(j.at("kind").get<std::string>());
  spec.input_dim = j.at("input_dim").get<int>();
  spec.output_dim = j.at("output_dim").get<int>();
  spec.depth = j.at("depth").get<int>();
  spec.hidden_dim = j.at("hidden_dim").get<int>();
  spec.token_dim = j.at("token_dim").get<int>();
  spec.heads = j.at("heads").get<int>();
  spec.dropout = j.at("dropout").get<double>();
  spec.attention_dropout = j.at("attention_dropout").get<double>();
  return spec;
}

json model_config_to_json(const ModelConfig& cfg) {
  json grouping{{"name", cfg.grouping.name},
                {"group_names", cfg.grouping.group_names},
                {"groups", cfg.grouping.groups}};
  json agg{{"method", agg_method_name(cfg.agg.method)},
           {"agg_depth", cfg.agg.agg_depth},
           {"agg_heads", cfg.agg.agg_heads},
           {"group_dim", cfg.agg.group_dim},
           {"output_dim", cfg.agg.output_dim},
           {"dropout", cfg.agg.dropout},
           {"attention_dropout", cfg.agg.attention_dropout}};
  json backbone{{"kind", backbone_kind_name(cfg.backbone.kind)},
                {"input_dim", cfg.backbone.input_dim},
                {"hidden_dim", cfg.backbone.hidden_dim},
                {"depth", cfg.backbone.depth},
                {"heads", cfg.backbone.heads},
                {"kernel_size", cfg.backbone.kernel_size},
                {"dilation_base", cfg.backbone.dilation_base},
                {"dropout", cfg.backbone.dropout},
                {"attention_dropout", cfg.backbone.attention_dropout},
                {"head_kind", head_kind_name(cfg.backbone.head_kind)},
                {"n_classes", cfg.backbone.n_classes},
                {"prediction_mode", prediction_mode_name(cfg.backbone.prediction_mode)}};
  return json{{"n_features", cfg.n_features},   {"embed_dim", cfg.embed_dim},
              {"use_embedding", cfg.use_embedding}, {"grouped", cfg.grouped},
              {"encoder", encoder_to_json(cfg.encoder)}, {"grouping", grouping},
              {"agg", agg},                     {"backbone", backbone}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig cfg;
  cfg.n_features = j.at("n_features").get<int>();
  cfg.embed_dim = j.at("embed_dim").get<int>();
  cfg.use_embedding = j.at("use_embedding").get<bool>();
  cfg.grouped = j.at("grouped").get<bool>();
  cfg.encoder = encoder_from_json(j.at("encoder"));
  const json& g = j.at("grouping");
  cfg.grouping.name = g.at("name").get<std::string>();
  cfg.grouping.group_names = g.at("group_names").get<std::vector<std::string>>();
  cfg.grouping.groups = g.at("groups").get<std::vector<std::vector<int>>>();
  const json& a = j.at("agg");
  cfg.agg.method = agg_method_from(a.at("method").get<std::string>());
  cfg.agg.agg_depth = a.at("agg_depth").get<int>();
  cfg.agg.agg_heads = a.at("agg_heads").get<int>();
  cfg.agg.group_dim = a.at("group_dim").get<int>();
  cfg.agg.output_dim = a.at("output_dim").get<int>();
  cfg.agg.dropout = a.at("dropout").get<double>();
  cfg.agg.attention_dropout = a.at("attention_dropout").get<double>();
  const json& b = j.at("backbone");
  cfg.backbone.kind = backbone_kind_from(b.at("kind").get<std::string>());
  cfg.backbone.input_dim = b.at("input_dim").get<int>();
  cfg.backbone.hidden_dim = b.at("hidden_dim").get<int>();
  cfg.backbone.depth = b.at("depth").get<int>();
  cfg.backbone.heads = b.at("heads").get<int>();
  cfg.backbone.kernel_size = b.at("kernel_size").get<int>();
  cfg.backbone.dilation_base = b.at("dilation_base").get<int>();
  cfg.backbone.dropout = b.at("dropout").get<double>();
  cfg.backbone.attention_dropout = b.at("attention_dropout").get<double>();
  cfg.backbone.head_kind = head_kind_from(b.at("head_kind").get<std::string>());
  cfg.backbone.n_classes = b.at("n_classes").get<int>();
  cfg.backbone.prediction_mode = prediction_mode_from(b.at("prediction_mode").get<std::string>());
  return cfg;
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, const CheckpointMeta& meta) {
  json params = json::object();
  for (const auto& [name, p] : model.params.entries()) {
    if (!p->all_finite()) throw NumericError("checkpoint: non-finite parameter " + name);
    params[name] = json{{"shape", p->shape}, {"data", p->data}};
  }
  json root{{"format", "stepwise-checkpoint"},
            {"version", 1},
            {"task", task_kind_name(meta.task)},
            {"step_hours", meta.step_hours},
            {"feature_names", meta.feature_names},
            {"scaler", json{{"mean", meta.scaler.mean}, {"stddev", meta.scaler.stddev}}},
            {"best_epoch", meta.best_epoch},
            {"model", model_config_to_json(model.cfg)},
            {"params", params}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << root.dump() << "\n";
  if (!out) throw DataError("write failed for " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  try {
    const json root = json::parse(in);
    if (root.at("format").get<std::string>() != "stepwise-checkpoint")
      throw DataError(path + ": not a checkpoint file");
    if (root.at("version").get<int>() != 1)
      throw DataError(path + ": unsupported checkpoint version " +
                      std::to_string(root.at("version").get<int>()));
    LoadedCheckpoint ck;
    ck.meta.task = task_kind_from(root.at("task").get<std::string>());
    ck.meta.step_hours = root.at("step_hours").get<double>();
    ck.meta.feature_names = root.at("feature_names").get<std::vector<std::string>>();
    ck.meta.scaler.mean = root.at("scaler").at("mean").get<std::vector<double>>();
    ck.meta.scaler.stddev = root.at("scaler").at("stddev").get<std::vector<double>>();
    ck.meta.best_epoch = root.at("best_epoch").get<int>();
    ck.model.cfg = model_config_from_json(root.at("model"));
    validate_model(ck.model.cfg);
    ck.model.init(0);
    const json& params = root.at("params");
    for (auto& [name, p] : ck.model.params.entries()) {
      auto it = params.find(name);
      if (it == params.end()) throw DataError(path + ": missing parameter " + name);
      const auto shape = it->at("shape").get<std::vector<int>>();
      if (shape != p->shape)
        throw DataError(path + ": parameter " + name + " has shape " + shape_str(shape) +
                        ", model expects " + p->shape_string());
      p->data = it->at("data").get<std::vector<double>>();
      if (p->data.size() != static_cast<std::size_t>(shape_numel(shape)))
        throw DataError(path + ": parameter " + name + " payload does not match its shape");
    }
    if (params.size() != ck.model.params.entries().size())
      throw DataError(path + ": checkpoint has extra parameters");
    return ck;
  } catch (const json::exception& e) {
    throw DataError(path + ": malformed checkpoint: " + e.what());
  }
}

}  // namespace stepwise
