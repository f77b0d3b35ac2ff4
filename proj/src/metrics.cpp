#include "dfca/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <stdexcept>

namespace dfca {

double round2(double v) {
  // Rounds the exact binary value, so 7.425 (stored just below) gives 7.42.
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return std::strtod(buf, nullptr);
}

// Works in whole hundredths of the already rounded pair. Their mean is either
// exact or sits on a half, and halves go down (7.425 -> 7.42, 1.195 -> 1.19).
double acer_from(double apcer, double npcer) {
  const long long sum = std::llround(apcer * 100) + std::llround(npcer * 100);
  return static_cast<double>(sum / 2) / 100.0;
}

namespace {

void check_binary(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("scores and labels differ in length");
  for (int l : labels)
    if (l != 0 && l != 1) throw std::invalid_argument("binary labels must be 0 (bonafide) or 1 (attack)");
}

}  // namespace

DetResult det_curve(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_binary(scores, labels);
  std::vector<std::pair<double, int>> s;
  std::int64_t na = 0, nb = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    s.emplace_back(scores[i], labels[i]);
    (labels[i] ? na : nb) += 1;
  }
  if (na == 0 || nb == 0) throw std::invalid_argument("DET curve needs both attack and bonafide samples");
  std::sort(s.begin(), s.end());

  DetResult out;
  // Running counts of samples strictly below the current threshold.
  std::int64_t attacks_below = 0, bona_below = 0;
  std::size_t i = 0;
  auto emit = [&](double t) {
    out.points.push_back({t, 100.0 * static_cast<double>(attacks_below) / static_cast<double>(na),
                          100.0 * static_cast<double>(nb - bona_below) / static_cast<double>(nb)});
  };
  while (i < s.size()) {
    const double t = s[i].first;
    emit(t);
    while (i < s.size() && s[i].first == t) {
      (s[i].second ? attacks_below : bona_below) += 1;
      ++i;
    }
  }
  emit(std::nextafter(s.back().first, std::numeric_limits<double>::infinity()));

  // APCER - NPCER rises from -100 to +100; interpolate linearly at the sign change.
  out.eer = 50.0;
  for (std::size_t k = 0; k < out.points.size(); ++k) {
    const double d = out.points[k].apcer - out.points[k].npcer;
    if (d == 0) {
      out.eer = out.points[k].apcer;
      break;
    }
    if (d > 0) {
      const auto& p = out.points[k - 1];
      const auto& q = out.points[k];
      const double dp = p.apcer - p.npcer;
      const double f = -dp / (d - dp);
      out.eer = p.apcer + f * (q.apcer - p.apcer);
      break;
    }
  }
  return out;
}

Confusion confusion_matrix(const std::vector<int>& predictions, const std::vector<int>& labels, int k) {
  if (k < 1) throw std::invalid_argument("confusion matrix needs k >= 1");
  if (predictions.size() != labels.size()) throw std::invalid_argument("predictions and labels differ in length");
  Confusion m(static_cast<std::size_t>(k), std::vector<std::int64_t>(static_cast<std::size_t>(k), 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= k || predictions[i] < 0 || predictions[i] >= k)
      throw std::out_of_range("class index out of range for k=" + std::to_string(k) + " at sample " + std::to_string(i));
    ++m[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(predictions[i])];
  }
  return m;
}

MetricsReport pad_metrics(const std::vector<double>& scores, const std::vector<int>& labels, double threshold) {
  check_binary(scores, labels);
  MetricsReport r;
  r.threshold = threshold;
  std::vector<int> pred(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) pred[i] = scores[i] >= threshold ? 1 : 0;
  r.confusion = confusion_matrix(pred, labels, 2);
  const auto& c = r.confusion;
  r.n_bonafide = c[0][0] + c[0][1];
  r.n_attack = c[1][0] + c[1][1];
  r.n_total = r.n_bonafide + r.n_attack;
  if (r.n_total > 0) r.aa = round2(100.0 * static_cast<double>(c[0][0] + c[1][1]) / static_cast<double>(r.n_total));
  if (r.n_attack > 0) r.apcer = round2(100.0 * static_cast<double>(c[1][0]) / static_cast<double>(r.n_attack));
  if (r.n_bonafide > 0) r.npcer = round2(100.0 * static_cast<double>(c[0][1]) / static_cast<double>(r.n_bonafide));
  if (r.apcer && r.npcer) {
    r.acer = acer_from(*r.apcer, *r.npcer);
    auto det = det_curve(scores, labels);
    r.eer = round2(det.eer);
    r.det = std::move(det.points);
  }
  return r;
}

MetricsReport multiclass_metrics(const std::vector<double>& probs, const std::vector<int>& labels, int k) {
  if (probs.size() != labels.size() * static_cast<std::size_t>(k))
    throw std::invalid_argument("probability rows do not match label count");
  std::vector<int> pred(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto row = probs.begin() + static_cast<std::ptrdiff_t>(i * static_cast<std::size_t>(k));
    pred[i] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  MetricsReport r;
  r.confusion = confusion_matrix(pred, labels, k);
  std::int64_t correct = 0;
  for (int j = 0; j < k; ++j) correct += r.confusion[static_cast<std::size_t>(j)][static_cast<std::size_t>(j)];
  r.n_total = static_cast<std::int64_t>(labels.size());
  if (r.n_total > 0) r.aa = round2(100.0 * static_cast<double>(correct) / static_cast<double>(r.n_total));
  return r;
}

std::string format_metric(const std::optional<double>& v) {
  if (!v) return "undefined";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", *v);
  return buf;
}

}  // namespace dfca
