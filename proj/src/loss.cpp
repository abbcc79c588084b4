#include "platoonwatch/loss.hpp"

#include <cmath>

namespace pw::nn {

void LossConfig::validate() const {
  if (lambda_fp < 1.0)
    throw ConfigError("loss: lambda_fp must be >= 1, got " + std::to_string(lambda_fp));
  if (lambda_pos <= 0.0)
    throw ConfigError("loss: lambda_pos must be > 0");
  if (tau <= 0.0 || tau >= 1.0)
    throw ConfigError("loss: tau must be in (0,1), got " + std::to_string(tau));
  if (eps <= 0.0) throw ConfigError("loss: eps must be > 0");
}

namespace {

void check_inputs(const Tensor& logits, const Tensor& labels,
                  const Tensor& mask) {
  check_same_shape(logits, labels, "loss logits/labels");
  check_same_shape(logits, mask, "loss logits/mask");
  for (std::int64_t i = 0; i < labels.numel(); ++i) {
    if (labels[i] != 0.0 && labels[i] != 1.0)
      throw ShapeError("loss: label outside {0,1} at flat index " +
                       std::to_string(i));
  }
}

}  // namespace

double pfbce(const Tensor& logits, const Tensor& labels, const Tensor& mask,
             const LossConfig& cfg) {
  cfg.validate();
  check_inputs(logits, labels, mask);
  double sum = 0.0;
  double m_count = 0.0;
  // fixed-order serial reduction keeps the value thread-count independent
  for (std::int64_t i = 0; i < logits.numel(); ++i) {
    double m = mask[i];
    m_count += m;
    if (m == 0.0) continue;
    double y = labels[i];
    double s = sigmoid(logits[i]);
    double sc = std::min(std::max(s, cfg.eps), 1.0 - cfg.eps);
    double ell = -y * std::log(sc) - (1.0 - y) * std::log(1.0 - sc);
    double w_fp = (y == 0.0 && s > cfg.tau) ? cfg.lambda_fp : 1.0;
    double w_pos = (y == 1.0) ? cfg.lambda_pos : 1.0;
    sum += ell * w_fp * w_pos * m;
  }
  return sum / (m_count + cfg.eps);
}

Tensor pfbce_grad(const Tensor& logits, const Tensor& labels,
                  const Tensor& mask, const LossConfig& cfg) {
  cfg.validate();
  check_inputs(logits, labels, mask);
  double m_count = 0.0;
  for (std::int64_t i = 0; i < mask.numel(); ++i) m_count += mask[i];
  double inv = 1.0 / (m_count + cfg.eps);

  Tensor g(logits.shape());
  std::int64_t n = logits.numel();
#pragma omp parallel for schedule(static) if (n > 16384)
  for (std::int64_t i = 0; i < n; ++i) {
    double m = mask[i];
    if (m == 0.0) {
      g[i] = 0.0;
      continue;
    }
    double y = labels[i];
    double s = sigmoid(logits[i]);
    double w_fp = (y == 0.0 && s > cfg.tau) ? cfg.lambda_fp : 1.0;
    double w_pos = (y == 1.0) ? cfg.lambda_pos : 1.0;
    g[i] = w_fp * w_pos * (s - y) * m * inv;
  }
  return g;
}

double bce(const Tensor& logits, const Tensor& labels, const Tensor& mask) {
  LossConfig unit;
  unit.lambda_fp = 1.0;
  unit.lambda_pos = 1.0;
  return pfbce(logits, labels, mask, unit);
}

}  // namespace pw::nn
