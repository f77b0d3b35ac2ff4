#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace dfca {

/// 2 decimals, decided on the stored binary value rather than its decimal spelling.
double round2(double v);

/// Mean of two 2-decimal error rates, to 2 decimals; an exact half rounds down.
double acer_from(double apcer, double npcer);

struct DetPoint {
  double threshold;
  double apcer;  // % of attacks scored below threshold
  double npcer;  // % of bonafide scored at or above threshold
};

struct DetResult {
  std::vector<DetPoint> points;  // ascending threshold
  double eer = 0;                // %
};

/// Labels are 1 for attack, 0 for bonafide; a sample is called attack when score >= threshold.
/// Thresholds sweep the sorted unique scores plus one point above the maximum.
DetResult det_curve(const std::vector<double>& scores, const std::vector<int>& labels);

using Confusion = std::vector<std::vector<std::int64_t>>;

/// Rows are true classes, columns predictions.
Confusion confusion_matrix(const std::vector<int>& predictions, const std::vector<int>& labels, int k);

struct MetricsReport {
  double threshold = 0.5;
  double aa = 0;                 // % correct
  std::optional<double> apcer;   // undefined without attack samples
  std::optional<double> npcer;   // undefined without bonafide samples
  std::optional<double> acer;
  std::optional<double> eer;
  std::vector<DetPoint> det;
  Confusion confusion;
  std::int64_t n_attack = 0, n_bonafide = 0, n_total = 0;
};

/// Binary PAD metrics; rates are rounded to 2 decimals and ACER is derived from the rounded pair.
MetricsReport pad_metrics(const std::vector<double>& scores, const std::vector<int>& labels, double threshold = 0.5);

/// K-class metrics from class-probability rows (row-major n x k): AA and confusion only.
MetricsReport multiclass_metrics(const std::vector<double>& probs, const std::vector<int>& labels, int k);

std::string format_metric(const std::optional<double>& v);

}  // namespace dfca
