#pragma once

#include <optional>
#include <string>
#include <vector>

#include "platoonwatch/tensor.hpp"

namespace pw::eval {

struct ConfusionCounts {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  std::int64_t total() const { return tp + fp + fn + tn; }
};

// Zero-denominator metrics are undefined, never silently 0: an undefined
// value would otherwise corrupt performance-gain comparisons.
using Metric = std::optional<double>;

struct ClassMetrics {
  Metric precision, recall, f1, accuracy;
};

struct RocPoint {
  double fpr = 0.0, tpr = 0.0;
};

struct VehicleMetrics {
  ConfusionCounts counts;
  ClassMetrics metrics;
  Metric auc;
};

struct MetricsReport {
  ConfusionCounts counts;
  ClassMetrics metrics;
  std::vector<RocPoint> roc;
  Metric auc;
  std::vector<VehicleMetrics> per_vehicle;
  std::string model_id, dataset_id;
  double threshold = 0.6;

  std::string to_json() const;
  std::string to_text() const;  // aligned metric x vehicle table
  std::string roc_csv() const;
};

// predictions/labels in {0,1}; counted only where mask is 1.
ConfusionCounts masked_confusion(const nn::Tensor& predictions,
                                 const nn::Tensor& labels,
                                 const nn::Tensor& mask);

ClassMetrics classification_metrics(const ConfusionCounts& c);

// Threshold sweep over the unique scores (ties collapse into one step);
// trapezoidal AUC. Needs at least one positive and one negative among the
// valid cells, otherwise AUC is undefined.
std::pair<std::vector<RocPoint>, Metric> roc_auc(const nn::Tensor& scores,
                                                 const nn::Tensor& labels,
                                                 const nn::Tensor& mask);

// Full report from sigmoid scores: binarize at threshold (strictly greater),
// overall and per vehicle row.
MetricsReport evaluate_scores(const nn::Tensor& scores, const nn::Tensor& labels,
                              const nn::Tensor& mask, double threshold);

struct PerformanceGain {
  int vehicle = 0;
  std::string metric;
  double pg = 0.0;  // individual minus global
};

// Gain for one vehicle and metric; both reports must describe the same
// dataset slice at the same threshold. individual_vehicle selects the row in
// the individual report (an individual model's report has a single row 0);
// -1 means the same index as `vehicle`.
PerformanceGain performance_gain(const MetricsReport& individual,
                                 const MetricsReport& global_report,
                                 int vehicle, const std::string& metric,
                                 int individual_vehicle = -1);

}  // namespace pw::eval
