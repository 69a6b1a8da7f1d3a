#include "stepwise/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "stepwise/errors.hpp"

namespace stepwise {

namespace {

void check_binary(const std::vector<double>& scores, const std::vector<int>& labels, const char* who) {
  if (scores.size() != labels.size())
    throw DataError(std::string(who) + ": " + std::to_string(scores.size()) + " scores for " +
                    std::to_string(labels.size()) + " labels");
  if (scores.empty()) throw DataError(std::string(who) + ": empty input");
  std::size_t positives = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw DataError(std::string(who) + ": labels must be 0 or 1");
    positives += static_cast<std::size_t>(l);
  }
  if (positives == 0 || positives == labels.size())
    throw DataError(std::string(who) + ": needs both classes present");
}

std::vector<std::size_t> order_by_score_desc(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace

double auprc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_binary(scores, labels, "auprc");
  const auto order = order_by_score_desc(scores);
  double total_pos = 0.0;
  for (int l : labels) total_pos += l;

  double tp = 0.0, fp = 0.0, ap = 0.0, prev_recall = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      if (labels[order[j]]) tp += 1.0;
      else fp += 1.0;
      ++j;
    }
    const double recall = tp / total_pos;
    const double precision = tp / (tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_binary(scores, labels, "auroc");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double pos = 0.0, neg = 0.0;
  for (int l : labels) {
    if (l) pos += 1.0;
    else neg += 1.0;
  }
  // Midranks make tied pairs count one half each.
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]]) rank_sum_pos += midrank;
    i = j;
  }
  const double u = rank_sum_pos - pos * (pos + 1.0) / 2.0;
  return u / (pos * neg);
}

double balanced_accuracy(const std::vector<int>& pred, const std::vector<int>& truth) {
  if (pred.size() != truth.size())
    throw DataError("balanced_accuracy: " + std::to_string(pred.size()) + " predictions for " +
                    std::to_string(truth.size()) + " labels");
  if (pred.empty()) throw DataError("balanced_accuracy: empty input");
  int max_class = 0;
  for (int c : truth) {
    if (c < 0) throw DataError("balanced_accuracy: negative class id");
    max_class = std::max(max_class, c);
  }
  for (int c : pred)
    if (c < 0) throw DataError("balanced_accuracy: negative class id");
  std::vector<double> count(static_cast<std::size_t>(max_class) + 1, 0.0);
  std::vector<double> correct(static_cast<std::size_t>(max_class) + 1, 0.0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    count[static_cast<std::size_t>(truth[i])] += 1.0;
    if (pred[i] == truth[i]) correct[static_cast<std::size_t>(truth[i])] += 1.0;
  }
  double sum = 0.0;
  int present = 0;
  for (std::size_t c = 0; c < count.size(); ++c) {
    if (count[c] == 0.0) continue;
    sum += correct[c] / count[c];
    ++present;
  }
  return sum / static_cast<double>(present);
}

double mae_hours(const std::vector<double>& pred, const std::vector<double>& truth, double step_hours) {
  if (pred.size() != truth.size())
    throw DataError("mae_hours: " + std::to_string(pred.size()) + " predictions for " +
                    std::to_string(truth.size()) + " labels");
  if (pred.empty()) throw DataError("mae_hours: empty input");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) sum += std::abs(pred[i] - truth[i]);
  return sum / static_cast<double>(pred.size()) * step_hours;
}

KappaWeighting kappa_weighting_from(const std::string& name) {
  if (name == "none") return KappaWeighting::none;
  if (name == "linear") return KappaWeighting::linear;
  throw ConfigError("unknown kappa weighting: " + name);
}

double cohen_kappa(const std::vector<int>& pred_bins, const std::vector<int>& true_bins, int n_bins,
                   KappaWeighting weighting) {
  if (pred_bins.size() != true_bins.size())
    throw DataError("cohen_kappa: " + std::to_string(pred_bins.size()) + " predictions for " +
                    std::to_string(true_bins.size()) + " labels");
  if (pred_bins.empty()) throw DataError("cohen_kappa: empty input");
  if (n_bins < 1) throw DataError("cohen_kappa: n_bins must be positive");
  const std::size_t nb = static_cast<std::size_t>(n_bins);
  for (std::size_t i = 0; i < pred_bins.size(); ++i)
    if (pred_bins[i] < 0 || pred_bins[i] >= n_bins || true_bins[i] < 0 || true_bins[i] >= n_bins)
      throw DataError("cohen_kappa: bin outside 0.." + std::to_string(n_bins - 1));

  const double n = static_cast<double>(pred_bins.size());
  std::vector<double> pred_frac(nb, 0.0), true_frac(nb, 0.0);
  std::vector<double> joint(nb * nb, 0.0);
  for (std::size_t i = 0; i < pred_bins.size(); ++i) {
    const std::size_t p = static_cast<std::size_t>(pred_bins[i]);
    const std::size_t t = static_cast<std::size_t>(true_bins[i]);
    pred_frac[p] += 1.0 / n;
    true_frac[t] += 1.0 / n;
    joint[p * nb + t] += 1.0 / n;
  }
  auto weight = [&](std::size_t p, std::size_t t) {
    if (weighting == KappaWeighting::none) return p == t ? 0.0 : 1.0;
    if (n_bins == 1) return 0.0;
    return std::abs(static_cast<double>(p) - static_cast<double>(t)) / static_cast<double>(n_bins - 1);
  };
  double observed = 0.0, expected = 0.0;
  for (std::size_t p = 0; p < nb; ++p)
    for (std::size_t t = 0; t < nb; ++t) {
      observed += weight(p, t) * joint[p * nb + t];
      expected += weight(p, t) * pred_frac[p] * true_frac[t];
    }
  if (expected == 0.0) throw DataError("cohen_kappa: agreement by chance is 1, kappa undefined");
  return 1.0 - observed / expected;
}

const std::vector<double>& los_bucket_edges() {
  static const std::vector<double> edges{24, 48, 72, 96, 120, 144, 168, 192, 336};
  return edges;
}

int los_bucket(double hours) { return los_bucket(hours, los_bucket_edges()); }

int los_bucket(double hours, const std::vector<double>& edges) {
  for (std::size_t i = 0; i < edges.size(); ++i)
    if (hours < edges[i]) return static_cast<int>(i);
  return static_cast<int>(edges.size());
}

}  // namespace stepwise
