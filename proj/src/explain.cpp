#include "stepwise/explain.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "stepwise/errors.hpp"

namespace stepwise {

// ---------------------------------------------------------------------------
// options

HeadReduce head_reduce_from(const std::string& name) {
  if (name == "mean") return HeadReduce::mean;
  if (name == "max") return HeadReduce::max;
  throw ConfigError("unknown head reduction '" + name + "', expected mean or max");
}

const char* head_reduce_name(HeadReduce reduce) {
  return reduce == HeadReduce::mean ? "mean" : "max";
}

// ---------------------------------------------------------------------------
// extraction

namespace {

// CLS-query row t of one attention stack at the chosen layer, reduced over
// heads. probs nodes hold [T, S, S] post-softmax weights.
std::vector<double> cls_row(const GraphTape& tape, const std::vector<int>& head_nodes, int t,
                            HeadReduce reduce) {
  const Tensor& first = tape.val(head_nodes[0]);
  const int s = static_cast<int>(first.shape[1]);
  std::vector<double> row(s, 0.0);
  if (reduce == HeadReduce::mean) {
    for (int node : head_nodes) {
      const Tensor& p = tape.val(node);
      for (int j = 0; j < s; ++j) row[j] += p.at(t, 0, j);
    }
    const double inv = 1.0 / static_cast<double>(head_nodes.size());
    for (double& w : row) w *= inv;
  } else {
    for (int j = 0; j < s; ++j) {
      double m = 0.0;
      for (int node : head_nodes) m = std::max(m, tape.val(node).at(t, 0, j));
      row[j] = m;
    }
    double total = 0.0;
    for (double w : row) total += w;
    if (total > 0.0) {
      for (double& w : row) w /= total;
    }
  }
  return row;
}

int pick_layer(int requested, int depth, const char* stack) {
  if (requested < 0) return depth - 1;
  if (requested >= depth) {
    throw ConfigError("attention layer " + std::to_string(requested) + " out of range, " + stack +
                      " has " + std::to_string(depth) + " block(s)");
  }
  return requested;
}

}  // namespace

AttentionExtract extract_attention(Model& model, const Tensor& stay_x, const ExplainOptions& opts) {
  const ModelConfig& cfg = model.cfg;
  if (!cfg.use_embedding) {
    throw ConfigError("attention extraction needs an embedding stage, model has none");
  }
  if (!cfg.grouped) {
    throw ConfigError("attention extraction needs grouped encoders, model uses a direct encoder");
  }
  if (cfg.encoder.kind != EncoderKind::ftt) {
    throw ConfigError(std::string("attention extraction needs ftt group encoders, model uses ") +
                      encoder_kind_name(cfg.encoder.kind));
  }
  if (cfg.agg.method != AggMethod::attention) {
    throw ConfigError(std::string("attention extraction needs attention aggregation, model uses ") +
                      agg_method_name(cfg.agg.method));
  }
  if (stay_x.rank() != 2 || stay_x.shape[1] != cfg.n_features) {
    throw ShapeError("extract_attention: stay must be (steps, " + std::to_string(cfg.n_features) +
                     "), got " + shape_str(stay_x.shape));
  }
  const int enc_layer = pick_layer(opts.layer, cfg.encoder.depth, "encoder");
  const int agg_layer = pick_layer(opts.layer, cfg.agg.agg_depth, "aggregator");
  const int t_steps = static_cast<int>(stay_x.shape[0]);

  GraphTape tape(Mode::eval, 0);
  Ctx ctx(tape, model.params);
  Tensor x3 = stay_x;
  x3.shape = {1, t_steps, cfg.n_features};
  ModelTrace trace;
  model.forward(ctx, tape.constant(std::move(x3)), {t_steps - 1}, &trace);

  const int k_groups = cfg.grouping.group_count();
  AttentionExtract out;
  out.group_names = cfg.grouping.group_names;
  out.group_features = cfg.grouping.groups;
  out.within.resize(k_groups);
  for (int k = 0; k < k_groups; ++k) {
    const std::vector<int>& heads = trace.grouped.encoders[k].layers[enc_layer];
    out.within[k].reserve(t_steps);
    for (int t = 0; t < t_steps; ++t) {
      out.within[k].push_back(cls_row(tape, heads, t, opts.head_reduce));
    }
  }
  const std::vector<int>& agg_heads = trace.grouped.agg.layers[agg_layer];
  out.between.reserve(t_steps);
  for (int t = 0; t < t_steps; ++t) {
    out.between.push_back(cls_row(tape, agg_heads, t, opts.head_reduce));
  }
  return out;
}

// ---------------------------------------------------------------------------
// report

AttentionReport aggregate_report(Model& model, const TimeSeriesDataset& dataset,
                                 const std::string& split, const std::vector<std::string>& stay_ids,
                                 const ExplainOptions& opts) {
  std::vector<const Stay*> members;
  for (const Stay& stay : dataset.stays) {
    if (stay.split == split) members.push_back(&stay);
  }
  if (members.empty()) throw DataError("split '" + split + "' has no stays");
  for (const std::string& id : stay_ids) {
    const bool found = std::any_of(members.begin(), members.end(),
                                   [&](const Stay* s) { return s->stay_id == id; });
    if (!found) throw DataError("stay '" + id + "' not in split '" + split + "'");
  }

  const int k_groups = model.cfg.grouping.group_count();
  AttentionReport report;
  report.feature_names = dataset.feature_names;
  report.split = split;
  report.head_reduce = head_reduce_name(opts.head_reduce);
  report.timesteps = 0;

  bool first = true;
  for (const Stay* stay : members) {
    AttentionExtract ex = extract_attention(model, stay->x, opts);
    if (first) {
      report.group_names = ex.group_names;
      report.group_features = ex.group_features;
      report.within.resize(k_groups);
      for (int k = 0; k < k_groups; ++k) {
        report.within[k].assign(ex.within[k][0].size(), 0.0);
      }
      report.between.assign(k_groups + 1, 0.0);
      first = false;
    }
    const int t_steps = stay->steps();
    for (int t = 0; t < t_steps; ++t) {
      for (int k = 0; k < k_groups; ++k) {
        for (std::size_t j = 0; j < report.within[k].size(); ++j) {
          report.within[k][j] += ex.within[k][t][j];
        }
      }
      for (std::size_t j = 0; j < report.between.size(); ++j) {
        report.between[j] += ex.between[t][j];
      }
    }
    report.timesteps += t_steps;
    if (std::find(stay_ids.begin(), stay_ids.end(), stay->stay_id) != stay_ids.end()) {
      report.over_time.emplace_back(stay->stay_id, std::move(ex.between));
    }
  }
  const double inv = 1.0 / static_cast<double>(report.timesteps);
  for (std::vector<double>& w : report.within) {
    for (double& v : w) v *= inv;
  }
  for (double& v : report.between) v *= inv;
  report.layer = opts.layer;
  return report;
}

// ---------------------------------------------------------------------------
// emission

namespace {

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

// Fixed decimals for SVG coordinates so emission is byte stable.
std::string fmt2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return std::string(buf);
}

std::string safe_name(const std::string& name) {
  std::string out;
  for (char c : name) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                    c == '_' || c == '-' || c == '.';
    out.push_back(ok ? c : '_');
  }
  return out;
}

std::string xml_escape(const std::string& text) {
  std::string out;
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << content;
  if (!out) throw DataError("failed writing " + path.string());
}

constexpr const char* kPalette[] = {"#3b6ea5", "#c2533a", "#4a9160", "#8a63a8",
                                    "#b58636", "#5a8fa3", "#a84a6e", "#6f7d46"};

std::string palette(std::size_t i) { return kPalette[i % (sizeof(kPalette) / sizeof(kPalette[0]))]; }

// Horizontal bar chart: one labeled bar per category, x axis spans [0, 1].
std::string bar_chart_svg(const std::string& title, const std::vector<std::string>& labels,
                          const std::vector<double>& values) {
  const double left = 150.0, top = 42.0, bar_h = 18.0, gap = 8.0, width = 380.0;
  const double height = top + labels.size() * (bar_h + gap) + 46.0;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt2(left + width + 40.0)
      << "\" height=\"" << fmt2(height) << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg << "<text x=\"" << fmt2(left) << "\" y=\"20\" font-size=\"14\">" << xml_escape(title)
      << "</text>\n";
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double y = top + i * (bar_h + gap);
    svg << "<text x=\"" << fmt2(left - 8.0) << "\" y=\"" << fmt2(y + bar_h - 5.0)
        << "\" text-anchor=\"end\">" << xml_escape(labels[i]) << "</text>\n";
    svg << "<rect x=\"" << fmt2(left) << "\" y=\"" << fmt2(y) << "\" width=\""
        << fmt2(std::max(0.0, std::min(1.0, values[i])) * width) << "\" height=\"" << fmt2(bar_h)
        << "\" fill=\"" << palette(i) << "\"/>\n";
    svg << "<text x=\"" << fmt2(left + std::max(0.0, std::min(1.0, values[i])) * width + 6.0)
        << "\" y=\"" << fmt2(y + bar_h - 5.0) << "\">" << fmt(values[i]) << "</text>\n";
  }
  const double axis_y = top + labels.size() * (bar_h + gap) + 6.0;
  svg << "<line x1=\"" << fmt2(left) << "\" y1=\"" << fmt2(axis_y) << "\" x2=\""
      << fmt2(left + width) << "\" y2=\"" << fmt2(axis_y) << "\" stroke=\"#444\"/>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const double x = left + width * tick / 4.0;
    svg << "<line x1=\"" << fmt2(x) << "\" y1=\"" << fmt2(axis_y) << "\" x2=\"" << fmt2(x)
        << "\" y2=\"" << fmt2(axis_y + 4.0) << "\" stroke=\"#444\"/>\n";
    svg << "<text x=\"" << fmt2(x) << "\" y=\"" << fmt2(axis_y + 17.0)
        << "\" text-anchor=\"middle\">" << fmt(tick / 4.0) << "</text>\n";
  }
  svg << "<text x=\"" << fmt2(left + width / 2.0) << "\" y=\"" << fmt2(axis_y + 34.0)
      << "\" text-anchor=\"middle\">mean attention weight</text>\n";
  svg << "</svg>\n";
  return svg.str();
}

// Line chart of per-timestep weights, one series per column.
std::string line_chart_svg(const std::string& title, const std::vector<std::string>& series_names,
                           const std::vector<std::vector<double>>& rows) {
  const double left = 60.0, top = 42.0, width = 460.0, height = 220.0;
  const int t_steps = static_cast<int>(rows.size());
  const double dx = t_steps > 1 ? width / (t_steps - 1) : 0.0;
  std::ostringstream svg;
  const double total_w = left + width + 160.0;
  const double total_h = top + height + 56.0;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt2(total_w) << "\" height=\""
      << fmt2(total_h) << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg << "<text x=\"" << fmt2(left) << "\" y=\"20\" font-size=\"14\">" << xml_escape(title)
      << "</text>\n";
  svg << "<rect x=\"" << fmt2(left) << "\" y=\"" << fmt2(top) << "\" width=\"" << fmt2(width)
      << "\" height=\"" << fmt2(height) << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const double y = top + height - height * tick / 4.0;
    svg << "<text x=\"" << fmt2(left - 8.0) << "\" y=\"" << fmt2(y + 4.0)
        << "\" text-anchor=\"end\">" << fmt(tick / 4.0) << "</text>\n";
  }
  for (std::size_t s = 0; s < series_names.size(); ++s) {
    svg << "<polyline fill=\"none\" stroke=\"" << palette(s) << "\" stroke-width=\"1.5\" points=\"";
    for (int t = 0; t < t_steps; ++t) {
      const double v = std::max(0.0, std::min(1.0, rows[t][s]));
      if (t > 0) svg << ' ';
      svg << fmt2(left + t * dx) << ',' << fmt2(top + height - v * height);
    }
    svg << "\"/>\n";
    const double ly = top + 14.0 + 16.0 * s;
    svg << "<rect x=\"" << fmt2(left + width + 12.0) << "\" y=\"" << fmt2(ly - 9.0)
        << "\" width=\"10\" height=\"10\" fill=\"" << palette(s) << "\"/>\n";
    svg << "<text x=\"" << fmt2(left + width + 27.0) << "\" y=\"" << fmt2(ly) << "\">"
        << xml_escape(series_names[s]) << "</text>\n";
  }
  svg << "<text x=\"" << fmt2(left + width / 2.0) << "\" y=\"" << fmt2(top + height + 32.0)
      << "\" text-anchor=\"middle\">timestep</text>\n";
  svg << "<text x=\"16\" y=\"" << fmt2(top + height / 2.0) << "\" transform=\"rotate(-90 16 "
      << fmt2(top + height / 2.0) << ")\" text-anchor=\"middle\">attention weight</text>\n";
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace

void emit_report(const AttentionReport& report, const std::string& out_dir) {
  namespace fs = std::filesystem;
  const fs::path dir(out_dir);
  fs::create_directories(dir);

  const int k_groups = static_cast<int>(report.group_names.size());
  for (int k = 0; k < k_groups; ++k) {
    std::ostringstream csv;
    csv << "feature,weight\n";
    std::vector<std::string> labels;
    std::vector<double> values;
    labels.push_back("cls");
    values.push_back(report.within[k][0]);
    csv << "cls," << fmt(report.within[k][0]) << '\n';
    for (std::size_t j = 0; j < report.group_features[k].size(); ++j) {
      const std::string& fname = report.feature_names[report.group_features[k][j]];
      csv << fname << ',' << fmt(report.within[k][j + 1]) << '\n';
      labels.push_back(fname);
      values.push_back(report.within[k][j + 1]);
    }
    const std::string stem = "within_" + safe_name(report.group_names[k]);
    write_file(dir / (stem + ".csv"), csv.str());
    write_file(dir / (stem + ".svg"),
               bar_chart_svg("attention within group " + report.group_names[k], labels, values));
  }

  {
    std::ostringstream csv;
    csv << "group,weight\n";
    std::vector<std::string> labels;
    std::vector<double> values;
    labels.push_back("cls");
    values.push_back(report.between[0]);
    csv << "cls," << fmt(report.between[0]) << '\n';
    for (int k = 0; k < k_groups; ++k) {
      csv << report.group_names[k] << ',' << fmt(report.between[k + 1]) << '\n';
      labels.push_back(report.group_names[k]);
      values.push_back(report.between[k + 1]);
    }
    write_file(dir / "between.csv", csv.str());
    write_file(dir / "between.svg", bar_chart_svg("attention between groups", labels, values));
  }

  std::vector<std::string> series;
  series.push_back("cls");
  for (const std::string& g : report.group_names) series.push_back(g);
  for (const auto& [stay_id, rows] : report.over_time) {
    std::ostringstream csv;
    csv << "time";
    for (const std::string& s : series) csv << ',' << s;
    csv << '\n';
    for (std::size_t t = 0; t < rows.size(); ++t) {
      csv << t;
      for (std::size_t j = 0; j < series.size(); ++j) csv << ',' << fmt(rows[t][j]);
      csv << '\n';
    }
    const std::string stem = "over_time_" + safe_name(stay_id);
    write_file(dir / (stem + ".csv"), csv.str());
    write_file(dir / (stem + ".svg"),
               line_chart_svg("group attention over stay " + stay_id, series, rows));
  }
}

}  // namespace stepwise
