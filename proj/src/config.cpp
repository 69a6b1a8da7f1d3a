#include "stepwise/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "stepwise/errors.hpp"

namespace stepwise {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

int to_int(const std::string& value, const std::string& where) {
  int out = 0;
  const char* begin = value.data();
  const char* end = begin + value.size();
  auto res = std::from_chars(begin, end, out);
  if (res.ec != std::errc() || res.ptr != end)
    throw ConfigError(where + ": expected an integer, got '" + value + "'");
  return out;
}

std::uint64_t to_u64(const std::string& value, const std::string& where) {
  std::uint64_t out = 0;
  const char* begin = value.data();
  const char* end = begin + value.size();
  auto res = std::from_chars(begin, end, out);
  if (res.ec != std::errc() || res.ptr != end)
    throw ConfigError(where + ": expected a non-negative integer, got '" + value + "'");
  return out;
}

double to_double(const std::string& value, const std::string& where) {
  char* parse_end = nullptr;
  const double out = std::strtod(value.c_str(), &parse_end);
  if (parse_end != value.c_str() + value.size() || value.empty() || !std::isfinite(out))
    throw ConfigError(where + ": expected a finite number, got '" + value + "'");
  return out;
}

}  // namespace

void set_config_key(ExperimentConfig& cfg, const std::string& section, const std::string& key,
                    const std::string& value, const std::string& origin) {
  const std::string where = origin + ": [" + section + "] " + key;
  if (section == "data") {
    if (key == "data") cfg.data_csv = value;
    else if (key == "labels") cfg.labels_csv = value;
    else if (key == "splits") cfg.splits_csv = value;
    else if (key == "groups") cfg.groups_csv = value;
    else if (key == "task") cfg.task = task_kind_from(value);
    else if (key == "step_hours") cfg.step_hours = to_double(value, where);
    else if (key == "seed") cfg.synthetic.seed = to_u64(value, where);
    else if (key == "n_stays") cfg.synthetic.n_stays = to_int(value, where);
    else if (key == "horizon") cfg.synthetic.horizon = to_int(value, where);
    else if (key == "k_groups") cfg.synthetic.k_groups = to_int(value, where);
    else if (key == "feats_per_group") cfg.synthetic.feats_per_group = to_int(value, where);
    else if (key == "missing_rate") cfg.synthetic.missing_rate = to_double(value, where);
    else if (key == "signal_group") cfg.synthetic.signal_group = to_int(value, where);
    else throw ConfigError(origin + ": unknown key '" + key + "' in section [data]");
  } else if (section == "model") {
    if (key == "encoder") cfg.encoder = value;
    else if (key == "grouping") cfg.grouping = value;
    else if (key == "aggregation") cfg.aggregation = value;
    else if (key == "embed_dim") cfg.embed_dim = to_int(value, where);
    else if (key == "token_dim") cfg.token_dim = to_int(value, where);
    else if (key == "group_dim") cfg.group_dim = to_int(value, where);
    else if (key == "encoder_depth") cfg.encoder_depth = to_int(value, where);
    else if (key == "encoder_hidden") cfg.encoder_hidden = to_int(value, where);
    else if (key == "encoder_heads") cfg.encoder_heads = to_int(value, where);
    else if (key == "agg_depth") cfg.agg_depth = to_int(value, where);
    else if (key == "agg_heads") cfg.agg_heads = to_int(value, where);
    else if (key == "dropout") cfg.dropout = to_double(value, where);
    else if (key == "attention_dropout") cfg.attention_dropout = to_double(value, where);
    else if (key == "backbone") cfg.backbone = value;
    else if (key == "backbone_depth") cfg.backbone_depth = to_int(value, where);
    else if (key == "backbone_hidden") cfg.backbone_hidden = to_int(value, where);
    else if (key == "backbone_heads") cfg.backbone_heads = to_int(value, where);
    else if (key == "kernel_size") cfg.kernel_size = to_int(value, where);
    else if (key == "dilation_base") cfg.dilation_base = to_int(value, where);
    else if (key == "n_classes") cfg.n_classes = to_int(value, where);
    else throw ConfigError(origin + ": unknown key '" + key + "' in section [model]");
  } else if (section == "train") {
    if (key == "learning_rate") cfg.train.learning_rate = to_double(value, where);
    else if (key == "batch_size") cfg.train.batch_size = to_int(value, where);
    else if (key == "max_epochs") cfg.train.max_epochs = to_int(value, where);
    else if (key == "patience") cfg.train.patience = to_int(value, where);
    else if (key == "l1_weight") cfg.train.l1_weight = to_double(value, where);
    else if (key == "grad_clip") cfg.train.grad_clip = to_double(value, where);
    else if (key == "min_delta") cfg.train.min_delta = to_double(value, where);
    else if (key == "seed") cfg.train.seed = to_u64(value, where);
    else throw ConfigError(origin + ": unknown key '" + key + "' in section [train]");
  } else if (section == "output") {
    if (key == "dir") cfg.out_dir = value;
    else throw ConfigError(origin + ": unknown key '" + key + "' in section [output]");
  } else {
    throw ConfigError(origin + ": unknown section [" + section + "]");
  }
}

ExperimentConfig parse_config_text(const std::string& text, const std::string& origin) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    const std::string where = origin + ":" + std::to_string(line_no);
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError(where + ": unterminated section header");
      section = trim(t.substr(1, t.size() - 2));
      if (section.empty()) throw ConfigError(where + ": empty section name");
      continue;
    }
    const std::size_t eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    if (section.empty()) throw ConfigError(where + ": key outside any section");
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + ": empty key");
    set_config_key(cfg, section, key, value, where);
  }
  cfg.synthetic.task = cfg.task;
  cfg.synthetic.step_hours = cfg.step_hours;
  cfg.train.task_kind = cfg.task;
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), path);
}

ModelConfig resolve_model(const ExperimentConfig& cfg, const TimeSeriesDataset& dataset) {
  ModelConfig m;
  m.n_features = dataset.n_features();
  m.embed_dim = cfg.embed_dim;
  m.use_embedding = cfg.encoder != "none";

  if (m.use_embedding) {
    m.encoder.kind = encoder_kind_from(cfg.encoder);
    m.encoder.depth = cfg.encoder_depth;
    m.encoder.hidden_dim = cfg.encoder_hidden;
    m.encoder.token_dim = cfg.token_dim;
    m.encoder.heads = cfg.encoder_heads;
    m.encoder.dropout = cfg.dropout;
    m.encoder.attention_dropout = cfg.attention_dropout;

    if (cfg.grouping == "none") {
      m.grouped = false;
    } else {
      m.grouped = true;
      if (cfg.grouping == "data") {
        if (!dataset.has_grouping)
          throw ConfigError("grouping = data, but the dataset carries no grouping");
        m.grouping = dataset.grouping;
      } else {
        m.grouping = load_grouping(cfg.grouping, dataset.feature_names);
      }
      m.agg.method = agg_method_from(cfg.aggregation);
      m.agg.agg_depth = cfg.agg_depth;
      m.agg.agg_heads = cfg.agg_heads;
      m.agg.group_dim = cfg.group_dim > 0 ? cfg.group_dim : cfg.embed_dim;
      m.agg.output_dim = cfg.embed_dim;
      m.agg.dropout = cfg.dropout;
      m.agg.attention_dropout = cfg.attention_dropout;
    }
  } else if (cfg.grouping != "none") {
    throw ConfigError("grouping requires an encoder, but encoder = none");
  }

  m.backbone.kind = backbone_kind_from(cfg.backbone);
  m.backbone.hidden_dim = cfg.backbone_hidden;
  m.backbone.depth = cfg.backbone_depth;
  m.backbone.heads = cfg.backbone_heads;
  m.backbone.kernel_size = cfg.kernel_size;
  m.backbone.dilation_base = cfg.dilation_base;
  m.backbone.dropout = cfg.dropout;
  m.backbone.attention_dropout = cfg.attention_dropout;
  m.backbone.n_classes = cfg.n_classes;
  switch (cfg.task) {
    case TaskKind::online_binary:
      m.backbone.head_kind = HeadKind::binary;
      m.backbone.prediction_mode = PredictionMode::per_step;
      break;
    case TaskKind::per_stay_binary:
      m.backbone.head_kind = HeadKind::binary;
      m.backbone.prediction_mode = PredictionMode::per_stay;
      break;
    case TaskKind::multiclass:
      m.backbone.head_kind = HeadKind::multiclass;
      m.backbone.prediction_mode = PredictionMode::per_step;
      break;
    case TaskKind::regression:
      m.backbone.head_kind = HeadKind::regression;
      m.backbone.prediction_mode = PredictionMode::per_step;
      break;
  }
  validate_model(m);
  return m;
}

}  // namespace stepwise
