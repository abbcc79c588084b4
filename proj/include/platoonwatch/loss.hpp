#pragma once

#include <cmath>

#include "platoonwatch/tensor.hpp"

namespace pw::nn {

// Precision-focused BCE. A benign element predicted positive with confidence
// above tau is up-weighted by lambda_fp; attack elements are weighted by
// lambda_pos. The epsilon lives in the |M| denominator so an all-masked batch
// yields exactly zero.
struct LossConfig {
  double lambda_fp = 1.7;
  double lambda_pos = 0.6;
  double tau = 0.6;
  double eps = 1e-8;

  void validate() const;
};

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// logits/labels/mask share a shape; labels must be exactly 0 or 1.
double pfbce(const Tensor& logits, const Tensor& labels, const Tensor& mask,
             const LossConfig& cfg);

// d(pfbce)/d(logits). The fp-penalty indicator and the class weight are
// treated as per-element constants, so this is a weighted BCE gradient;
// exactly zero wherever mask is zero.
Tensor pfbce_grad(const Tensor& logits, const Tensor& labels,
                  const Tensor& mask, const LossConfig& cfg);

// Plain masked BCE == pfbce with unit weights.
double bce(const Tensor& logits, const Tensor& labels, const Tensor& mask);

}  // namespace pw::nn
