#pragma once

#include <cmath>
#include <vector>

#include "platoonwatch/tensor.hpp"

// Plain serial implementations of the numeric kernels, written as directly
// as possible. Tests compare the OpenMP kernels against these, and
// bench_kernels times the two side by side. Nothing here is used by the
// production path.

namespace pw::ref {

using nn::Tensor;

inline void matmul(const double* A, const double* B, double* C,
                   std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::int64_t kk = 0; kk < k; ++kk) s += A[i * k + kk] * B[kk * n + j];
      C[i * n + j] = s;
    }
}

inline Tensor affine(const Tensor& x, const Tensor& W, const Tensor& b) {
  std::int64_t d_in = W.dim(0), d_out = W.dim(1);
  std::int64_t rows = x.rows();
  auto shape = x.shape();
  shape.back() = d_out;
  Tensor y(shape);
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < d_out; ++j) {
      double s = b[j];
      for (std::int64_t kk = 0; kk < d_in; ++kk)
        s += x[i * d_in + kk] * W[kk * d_out + j];
      y[i * d_out + j] = s;
    }
  return y;
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gain,
                         const Tensor& bias, double eps = 1e-5) {
  std::int64_t d = x.last_dim();
  std::int64_t rows = x.rows();
  Tensor y(x.shape());
  for (std::int64_t i = 0; i < rows; ++i) {
    double mean = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mean += x[i * d + j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      double t = x[i * d + j] - mean;
      var += t * t;
    }
    var /= static_cast<double>(d);
    double rstd = 1.0 / std::sqrt(var + eps);
    for (std::int64_t j = 0; j < d; ++j)
      y[i * d + j] = gain[j] * (x[i * d + j] - mean) * rstd + bias[j];
  }
  return y;
}

inline Tensor masked_softmax(const Tensor& logits, const Tensor& mask) {
  std::int64_t d = logits.last_dim();
  std::int64_t rows = logits.rows();
  Tensor out(logits.shape());
  for (std::int64_t i = 0; i < rows; ++i) {
    double maxv = -1e300;
    for (std::int64_t j = 0; j < d; ++j)
      if (mask[i * d + j] > nn::kMaskNegInf && logits[i * d + j] > maxv)
        maxv = logits[i * d + j];
    double denom = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      if (mask[i * d + j] <= nn::kMaskNegInf) {
        out[i * d + j] = 0.0;
        continue;
      }
      out[i * d + j] = std::exp(logits[i * d + j] - maxv);
      denom += out[i * d + j];
    }
    for (std::int64_t j = 0; j < d; ++j) out[i * d + j] /= denom;
    for (std::int64_t j = 0; j < d; ++j)
      if (mask[i * d + j] <= nn::kMaskNegInf) out[i * d + j] = 0.0;
  }
  return out;
}

// Scaled dot-product attention for one sequence, one head, written as the
// obvious triple loop. Q,K,V are [T, dk] row-major; key_valid has T entries;
// fully padded queries get one-hot self attention, matching the model.
inline void attention_naive(const double* Q, const double* K, const double* V,
                            const std::uint8_t* key_valid, std::int64_t T,
                            std::int64_t dk, double* out,
                            const std::uint8_t* query_valid = nullptr) {
  double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<double> w(static_cast<std::size_t>(T));
  for (std::int64_t t = 0; t < T; ++t) {
    bool q_ok = query_valid ? query_valid[t] != 0 : true;
    if (!q_ok) {
      for (std::int64_t u = 0; u < T; ++u)
        w[static_cast<std::size_t>(u)] = (u == t) ? 1.0 : 0.0;
    } else {
      double maxv = -1e300;
      for (std::int64_t u = 0; u < T; ++u) {
        if (key_valid && !key_valid[u]) continue;
        double s = 0.0;
        for (std::int64_t c = 0; c < dk; ++c) s += Q[t * dk + c] * K[u * dk + c];
        s *= scale;
        w[static_cast<std::size_t>(u)] = s;
        if (s > maxv) maxv = s;
      }
      double denom = 0.0;
      for (std::int64_t u = 0; u < T; ++u) {
        if (key_valid && !key_valid[u]) {
          w[static_cast<std::size_t>(u)] = 0.0;
          continue;
        }
        double e = std::exp(w[static_cast<std::size_t>(u)] - maxv);
        w[static_cast<std::size_t>(u)] = e;
        denom += e;
      }
      for (std::int64_t u = 0; u < T; ++u) w[static_cast<std::size_t>(u)] /= denom;
      for (std::int64_t u = 0; u < T; ++u)
        if (key_valid && !key_valid[u]) w[static_cast<std::size_t>(u)] = 0.0;
    }
    for (std::int64_t c = 0; c < dk; ++c) {
      double s = 0.0;
      for (std::int64_t u = 0; u < T; ++u)
        s += w[static_cast<std::size_t>(u)] * V[u * dk + c];
      out[t * dk + c] = s;
    }
  }
}

}  // namespace pw::ref
