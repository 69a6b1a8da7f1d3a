#pragma once

#include <string>
#include <vector>

namespace stepwise {

// Average-precision area under the precision-recall curve. Ties are grouped
// at one threshold so the value is independent of input order.
double auprc(const std::vector<double>& scores, const std::vector<int>& labels);

// Mann-Whitney area under the ROC curve: P(score_pos > score_neg) plus half
// the tie probability, exact over all positive/negative pairs.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

// Unweighted mean of per-class recall over classes present in truth.
double balanced_accuracy(const std::vector<int>& pred, const std::vector<int>& truth);

// Mean absolute error scaled into hours by step_hours (1.0 when the inputs
// are already hours).
double mae_hours(const std::vector<double>& pred, const std::vector<double>& truth, double step_hours);

enum class KappaWeighting { none, linear };

KappaWeighting kappa_weighting_from(const std::string& name);

// Chance-corrected agreement 1 - observed/expected disagreement. none weights
// every disagreement equally, linear by bin distance.
double cohen_kappa(const std::vector<int>& pred_bins, const std::vector<int>& true_bins, int n_bins,
                   KappaWeighting weighting);

// Ten buckets: one per day below eight days, 8 to 14 days, above 14 days.
const std::vector<double>& los_bucket_edges();
int los_bucket(double hours);
int los_bucket(double hours, const std::vector<double>& edges);

}  // namespace stepwise
