#pragma once

#include <cmath>
#include <cstdint>

#include "platoonwatch/common.hpp"

// Scalar-templated kernel bodies shared by the double training path
// (tensor.cpp) and the float32 inference engine (infer.hpp).

namespace pw::nn::detail {

template <typename T>
void matmul_body(const T* A, const T* B, T* C, std::int64_t m, std::int64_t k,
                 std::int64_t n, bool acc) {
#pragma omp parallel for schedule(static) if (m * k * n > 16384)
  for (std::int64_t i = 0; i < m; ++i) {
    T* c = C + i * n;
    if (!acc)
      for (std::int64_t j = 0; j < n; ++j) c[j] = T(0);
    const T* a = A + i * k;
    std::int64_t kk = 0;
    for (; kk + 4 <= k; kk += 4) {
      T a0 = a[kk], a1 = a[kk + 1], a2 = a[kk + 2], a3 = a[kk + 3];
      const T* b0 = B + kk * n;
      const T* b1 = b0 + n;
      const T* b2 = b1 + n;
      const T* b3 = b2 + n;
      for (std::int64_t j = 0; j < n; ++j)
        c[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
    }
    for (; kk < k; ++kk) {
      T av = a[kk];
      const T* b = B + kk * n;
      for (std::int64_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

template <typename T>
void matmul_nt_body(const T* A, const T* B, T* C, std::int64_t m,
                    std::int64_t k, std::int64_t n, bool acc) {
#pragma omp parallel for schedule(static) if (m * k * n > 16384)
  for (std::int64_t i = 0; i < m; ++i) {
    const T* a = A + i * k;
    T* c = C + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      const T* b = B + j * k;
      T s = T(0);
      for (std::int64_t kk = 0; kk < k; ++kk) s += a[kk] * b[kk];
      c[j] = acc ? c[j] + s : s;
    }
  }
}

template <typename T>
void matmul_tn_body(const T* A, const T* B, T* C, std::int64_t m,
                    std::int64_t k, std::int64_t n, bool acc) {
  // C[k,n] = A^T B with A:[m,k], B:[m,n]; parallel over rows of C, serial
  // over m so the accumulation order is fixed.
#pragma omp parallel for schedule(static) if (m * k * n > 16384)
  for (std::int64_t kk = 0; kk < k; ++kk) {
    T* c = C + kk * n;
    if (!acc)
      for (std::int64_t j = 0; j < n; ++j) c[j] = T(0);
    std::int64_t i = 0;
    for (; i + 4 <= m; i += 4) {
      T a0 = A[i * k + kk], a1 = A[(i + 1) * k + kk], a2 = A[(i + 2) * k + kk],
        a3 = A[(i + 3) * k + kk];
      const T* b0 = B + i * n;
      const T* b1 = b0 + n;
      const T* b2 = b1 + n;
      const T* b3 = b2 + n;
      for (std::int64_t j = 0; j < n; ++j)
        c[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
    }
    for (; i < m; ++i) {
      T av = A[i * k + kk];
      const T* b = B + i * n;
      for (std::int64_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// One softmax row with an additive key mask (0 or -inf sentinel). Entries at
// masked positions are forced to exactly zero. Returns false if every
// position is masked.
template <typename T>
bool softmax_row_masked(const T* logits, const T* add_mask, T* out,
                        std::int64_t n, T neg_inf_sentinel) {
  T maxv = -std::numeric_limits<T>::infinity();
  bool any = false;
  for (std::int64_t j = 0; j < n; ++j) {
    if (add_mask && add_mask[j] <= neg_inf_sentinel) continue;
    any = true;
    T v = logits[j] + (add_mask ? add_mask[j] : T(0));
    if (v > maxv) maxv = v;
  }
  if (!any) return false;
  T denom = T(0);
  for (std::int64_t j = 0; j < n; ++j) {
    if (add_mask && add_mask[j] <= neg_inf_sentinel) {
      out[j] = T(0);
      continue;
    }
    T v = logits[j] + (add_mask ? add_mask[j] : T(0));
    T e = std::exp(v - maxv);
    out[j] = e;
    denom += e;
  }
  T inv = T(1) / denom;
  for (std::int64_t j = 0; j < n; ++j) out[j] *= inv;
  // re-zero in case a masked slot picked up anything (it cannot, but the
  // exact-zero contract is cheap to enforce)
  if (add_mask)
    for (std::int64_t j = 0; j < n; ++j)
      if (add_mask[j] <= neg_inf_sentinel) out[j] = T(0);
  return true;
}

template <typename T>
void layer_norm_row(const T* x, const T* gain, const T* bias, T* y, T* xhat,
                    std::int64_t d, T eps, T* rstd_out) {
  T mean = T(0);
  for (std::int64_t j = 0; j < d; ++j) mean += x[j];
  mean /= static_cast<T>(d);
  T var = T(0);
  for (std::int64_t j = 0; j < d; ++j) {
    T t = x[j] - mean;
    var += t * t;
  }
  var /= static_cast<T>(d);
  T rstd = T(1) / std::sqrt(var + eps);
  for (std::int64_t j = 0; j < d; ++j) {
    T h = (x[j] - mean) * rstd;
    if (xhat) xhat[j] = h;
    y[j] = gain[j] * h + bias[j];
  }
  if (rstd_out) *rstd_out = rstd;
}

}  // namespace pw::nn::detail
