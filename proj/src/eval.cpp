#include "platoonwatch/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <json.hpp>

namespace pw::eval {

using nlohmann::json;
using nn::Tensor;

ConfusionCounts masked_confusion(const Tensor& predictions,
                                 const Tensor& labels, const Tensor& mask) {
  nn::check_same_shape(predictions, labels, "masked_confusion pred/labels");
  nn::check_same_shape(predictions, mask, "masked_confusion pred/mask");
  ConfusionCounts c;
  for (std::int64_t i = 0; i < predictions.numel(); ++i) {
    if (mask[i] == 0.0) continue;
    bool y = labels[i] != 0.0;
    bool p = predictions[i] != 0.0;
    if (y && p) c.tp++;
    else if (!y && p) c.fp++;
    else if (y && !p) c.fn++;
    else c.tn++;
  }
  return c;
}

ClassMetrics classification_metrics(const ConfusionCounts& c) {
  ClassMetrics m;
  auto ratio = [](std::int64_t num, std::int64_t den) -> Metric {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
  };
  m.precision = ratio(c.tp, c.tp + c.fp);
  m.recall = ratio(c.tp, c.tp + c.fn);
  if (m.precision && m.recall && (*m.precision + *m.recall) > 0.0)
    m.f1 = 2.0 * *m.precision * *m.recall / (*m.precision + *m.recall);
  m.accuracy = ratio(c.tp + c.tn, c.total());
  return m;
}

std::pair<std::vector<RocPoint>, Metric> roc_auc(const Tensor& scores,
                                                 const Tensor& labels,
                                                 const Tensor& mask) {
  nn::check_same_shape(scores, labels, "roc_auc scores/labels");
  nn::check_same_shape(scores, mask, "roc_auc scores/mask");
  std::vector<std::pair<double, bool>> pts;
  std::int64_t pos = 0, neg = 0;
  for (std::int64_t i = 0; i < scores.numel(); ++i) {
    if (mask[i] == 0.0) continue;
    bool y = labels[i] != 0.0;
    pts.emplace_back(scores[i], y);
    (y ? pos : neg)++;
  }
  std::vector<RocPoint> roc;
  roc.push_back({0.0, 0.0});
  if (pos == 0 || neg == 0) return {roc, std::nullopt};

  std::sort(pts.begin(), pts.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });
  std::int64_t tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < pts.size()) {
    double s = pts[i].first;
    // equal scores form one threshold step
    while (i < pts.size() && pts[i].first == s) {
      (pts[i].second ? tp : fp)++;
      i++;
    }
    roc.push_back({static_cast<double>(fp) / static_cast<double>(neg),
                   static_cast<double>(tp) / static_cast<double>(pos)});
  }
  double auc = 0.0;
  for (std::size_t k = 1; k < roc.size(); ++k)
    auc += 0.5 * (roc[k].tpr + roc[k - 1].tpr) * (roc[k].fpr - roc[k - 1].fpr);
  return {roc, auc};
}

MetricsReport evaluate_scores(const Tensor& scores, const Tensor& labels,
                              const Tensor& mask, double threshold) {
  nn::check_same_shape(scores, labels, "evaluate scores/labels");
  nn::check_same_shape(scores, mask, "evaluate scores/mask");
  MetricsReport rep;
  rep.threshold = threshold;
  Tensor pred(scores.shape());
  for (std::int64_t i = 0; i < scores.numel(); ++i)
    pred[i] = scores[i] > threshold ? 1.0 : 0.0;
  rep.counts = masked_confusion(pred, labels, mask);
  rep.metrics = classification_metrics(rep.counts);
  auto [roc, auc] = roc_auc(scores, labels, mask);
  rep.roc = std::move(roc);
  rep.auc = auc;

  // per-vehicle breakdown when shaped [B,V,T]
  if (scores.ndim() == 3) {
    std::int64_t B = scores.dim(0), V = scores.dim(1), T = scores.dim(2);
    for (std::int64_t v = 0; v < V; ++v) {
      Tensor s({B, T}), y({B, T}), m({B, T}), p({B, T});
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t t = 0; t < T; ++t) {
          s[b * T + t] = scores[(b * V + v) * T + t];
          y[b * T + t] = labels[(b * V + v) * T + t];
          m[b * T + t] = mask[(b * V + v) * T + t];
          p[b * T + t] = s[b * T + t] > threshold ? 1.0 : 0.0;
        }
      VehicleMetrics vm;
      vm.counts = masked_confusion(p, y, m);
      vm.metrics = classification_metrics(vm.counts);
      vm.auc = roc_auc(s, y, m).second;
      rep.per_vehicle.push_back(std::move(vm));
    }
  }
  return rep;
}

PerformanceGain performance_gain(const MetricsReport& individual,
                                 const MetricsReport& global_report,
                                 int vehicle, const std::string& metric,
                                 int individual_vehicle) {
  if (individual.dataset_id != global_report.dataset_id ||
      individual.threshold != global_report.threshold)
    throw ShapeError("performance_gain: reports describe different slices");
  auto pick = [&](const MetricsReport& r, int row) -> Metric {
    if (row < 0 || row >= static_cast<int>(r.per_vehicle.size()))
      throw ShapeError("performance_gain: vehicle out of range");
    const ClassMetrics& m = r.per_vehicle[static_cast<std::size_t>(row)].metrics;
    if (metric == "precision") return m.precision;
    if (metric == "recall") return m.recall;
    if (metric == "f1") return m.f1;
    if (metric == "accuracy") return m.accuracy;
    if (metric == "auc") return r.per_vehicle[static_cast<std::size_t>(row)].auc;
    throw ConfigError("performance_gain: unknown metric " + metric);
  };
  int irow = individual_vehicle >= 0 ? individual_vehicle : vehicle;
  Metric a = pick(individual, irow), b = pick(global_report, vehicle);
  if (!a || !b)
    throw ShapeError("performance_gain: metric undefined on one side");
  PerformanceGain pg;
  pg.vehicle = vehicle;
  pg.metric = metric;
  pg.pg = *a - *b;
  return pg;
}

// --- rendering ---------------------------------------------------------

namespace {

json metric_json(const Metric& m) {
  if (!m) return nullptr;
  return *m;
}

json class_metrics_json(const ClassMetrics& m) {
  return {{"precision", metric_json(m.precision)},
          {"recall", metric_json(m.recall)},
          {"f1", metric_json(m.f1)},
          {"accuracy", metric_json(m.accuracy)}};
}

json counts_json(const ConfusionCounts& c) {
  return {{"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}, {"tn", c.tn}};
}

std::string fmt_metric(const Metric& m) {
  if (!m) return "   n/a";
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%6.4f", *m);
  return buf;
}

}  // namespace

std::string MetricsReport::to_json() const {
  json j;
  j["model"] = model_id;
  j["dataset"] = dataset_id;
  j["threshold"] = threshold;
  j["counts"] = counts_json(counts);
  j["metrics"] = class_metrics_json(metrics);
  j["auc"] = metric_json(auc);
  json pv = json::array();
  for (const auto& v : per_vehicle)
    pv.push_back({{"counts", counts_json(v.counts)},
                  {"metrics", class_metrics_json(v.metrics)},
                  {"auc", metric_json(v.auc)}});
  j["per_vehicle"] = pv;
  return j.dump(2);
}

std::string MetricsReport::to_text() const {
  std::string out = "metric    ";
  for (std::size_t v = 0; v < per_vehicle.size(); ++v)
    out += "    C" + std::to_string(v + 1) + " ";
  out += "     G\n";
  auto row = [&](const std::string& name, auto getter) {
    std::string line = name;
    line.resize(10, ' ');
    for (const auto& v : per_vehicle) line += " " + fmt_metric(getter(v.metrics, v.auc));
    ClassMetrics g = metrics;
    line += " " + fmt_metric(getter(g, auc));
    return line + "\n";
  };
  out += row("precision", [](const ClassMetrics& m, const Metric&) { return m.precision; });
  out += row("recall", [](const ClassMetrics& m, const Metric&) { return m.recall; });
  out += row("f1", [](const ClassMetrics& m, const Metric&) { return m.f1; });
  out += row("accuracy", [](const ClassMetrics& m, const Metric&) { return m.accuracy; });
  out += row("auc", [](const ClassMetrics&, const Metric& a) { return a; });
  return out;
}

std::string MetricsReport::roc_csv() const {
  std::string out = "fpr,tpr\n";
  char buf[64];
  for (const auto& p : roc) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g\n", p.fpr, p.tpr);
    out += buf;
  }
  return out;
}

}  // namespace pw::eval
