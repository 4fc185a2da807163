#include "dear/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "dear/errors.hpp"

#ifdef DEAR_HAVE_OPENMP
#include <omp.h>
#endif

namespace dear::kernels {

namespace {

bool go_parallel(Exec exec, std::size_t work) {
#ifdef DEAR_HAVE_OPENMP
  if (exec == Exec::kParallel) return true;
  if (exec == Exec::kSerial) return false;
  return work >= kParallelThreshold && omp_get_max_threads() > 1;
#else
  (void)exec;
  (void)work;
  return false;
#endif
}

inline void gemm_nn_row(const double* a, const double* b, double* c, std::size_t i, std::size_t k,
                        std::size_t n) {
  double* ci = c + i * n;
  const double* ai = a + i * k;
  for (std::size_t p = 0; p < k; ++p) {
    const double aip = ai[p];
    const double* bp = b + p * n;
    for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
  }
}

inline void gemm_nt_row(const double* a, const double* b, double* c, std::size_t i, std::size_t k,
                        std::size_t n) {
  const double* ai = a + i * k;
  double* ci = c + i * n;
  for (std::size_t j = 0; j < n; ++j) {
    const double* bj = b + j * k;
    double s = 0.0;
    for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
    ci[j] += s;
  }
}

inline void gemm_tn_row(const double* a, const double* b, double* c, std::size_t i, std::size_t m,
                        std::size_t k, std::size_t n) {
  double* ci = c + i * n;
  for (std::size_t p = 0; p < k; ++p) {
    const double api = a[p * m + i];
    const double* bp = b + p * n;
    for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
  }
}

void softmax_row(const double* s, double* out, std::size_t cols, const AttentionMask* mask, std::size_t row) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < cols; ++j)
    if (!mask || !mask->blocked(row, j)) mx = std::max(mx, s[j]);
  double sum = 0.0;
  for (std::size_t j = 0; j < cols; ++j) {
    if (mask && mask->blocked(row, j)) {
      out[j] = 0.0;
    } else {
      out[j] = std::exp(s[j] - mx);
      sum += out[j];
    }
  }
  const double inv = 1.0 / sum;
  for (std::size_t j = 0; j < cols; ++j) out[j] *= inv;
}

void check_rows(const AttentionMask* mask, std::size_t rows, std::size_t cols) {
  if (!mask) {
    if (cols == 0 && rows > 0) throw DegenerateRowError(0);
    return;
  }
  if (mask->rows() != rows || mask->cols() != cols)
    throw ShapeError("masked softmax: mask is " + std::to_string(mask->rows()) + "x" +
                     std::to_string(mask->cols()) + ", scores are " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  for (std::size_t i = 0; i < rows; ++i) {
    bool open_cell = false;
    for (std::size_t j = 0; j < cols && !open_cell; ++j) open_cell = !mask->blocked(i, j);
    if (!open_cell) throw DegenerateRowError(i);
  }
}

void attention_head_forward(const double* q, const double* k, const double* v, double* out, double* probs,
                            std::size_t n, std::size_t d_model, std::size_t dh, std::size_t h,
                            const AttentionMask* mask) {
  const std::size_t off = h * dh;
  const double root = std::sqrt(static_cast<double>(dh));
  std::vector<double> scores(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* qi = q + i * d_model + off;
    for (std::size_t j = 0; j < n; ++j) {
      const double* kj = k + j * d_model + off;
      double s = 0.0;
      for (std::size_t d = 0; d < dh; ++d) s += qi[d] * kj[d];
      scores[i * n + j] = s / root;
    }
  }
  double* p = probs + h * n * n;
  for (std::size_t i = 0; i < n; ++i) softmax_row(&scores[i * n], p + i * n, n, mask, i);
  for (std::size_t i = 0; i < n; ++i) {
    double* oi = out + i * d_model + off;
    for (std::size_t d = 0; d < dh; ++d) oi[d] = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double pij = p[i * n + j];
      const double* vj = v + j * d_model + off;
      for (std::size_t d = 0; d < dh; ++d) oi[d] += pij * vj[d];
    }
  }
}

void attention_head_backward(const double* q, const double* k, const double* v, const double* probs,
                             const double* d_out, double* dq, double* dk, double* dv, std::size_t n,
                             std::size_t d_model, std::size_t dh, std::size_t h) {
  const std::size_t off = h * dh;
  const double root = std::sqrt(static_cast<double>(dh));
  const double* p = probs + h * n * n;
  std::vector<double> dp(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* gi = d_out + i * d_model + off;
    for (std::size_t j = 0; j < n; ++j) {
      const double* vj = v + j * d_model + off;
      double s = 0.0;
      for (std::size_t d = 0; d < dh; ++d) s += gi[d] * vj[d];
      dp[i * n + j] = s;
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    double* dvj = dv + j * d_model + off;
    for (std::size_t i = 0; i < n; ++i) {
      const double pij = p[i * n + j];
      const double* gi = d_out + i * d_model + off;
      for (std::size_t d = 0; d < dh; ++d) dvj[d] += pij * gi[d];
    }
  }
  // dp becomes d(scores) in place.
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += p[i * n + j] * dp[i * n + j];
    for (std::size_t j = 0; j < n; ++j) dp[i * n + j] = p[i * n + j] * (dp[i * n + j] - dot) / root;
  }
  for (std::size_t i = 0; i < n; ++i) {
    double* dqi = dq + i * d_model + off;
    for (std::size_t j = 0; j < n; ++j) {
      const double ds = dp[i * n + j];
      const double* kj = k + j * d_model + off;
      for (std::size_t d = 0; d < dh; ++d) dqi[d] += ds * kj[d];
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    double* dkj = dk + j * d_model + off;
    for (std::size_t i = 0; i < n; ++i) {
      const double ds = dp[i * n + j];
      const double* qi = q + i * d_model + off;
      for (std::size_t d = 0; d < dh; ++d) dkj[d] += ds * qi[d];
    }
  }
}

}  // namespace

int max_threads() {
#ifdef DEAR_HAVE_OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate, Exec exec) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  if (go_parallel(exec, m * k * n)) {
    const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < rows; ++i) gemm_nn_row(a, b, c, static_cast<std::size_t>(i), k, n);
  } else {
    for (std::size_t i = 0; i < m; ++i) gemm_nn_row(a, b, c, i, k, n);
  }
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate, Exec exec) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  if (go_parallel(exec, m * k * n)) {
    const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < rows; ++i) gemm_nt_row(a, b, c, static_cast<std::size_t>(i), k, n);
  } else {
    for (std::size_t i = 0; i < m; ++i) gemm_nt_row(a, b, c, i, k, n);
  }
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate, Exec exec) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  if (go_parallel(exec, m * k * n)) {
    const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < rows; ++i) gemm_tn_row(a, b, c, static_cast<std::size_t>(i), m, k, n);
  } else {
    for (std::size_t i = 0; i < m; ++i) gemm_tn_row(a, b, c, i, m, k, n);
  }
}

void masked_softmax(const double* scores, double* out, std::size_t rows, std::size_t cols,
                    const AttentionMask* mask, Exec exec) {
  // Degenerate rows are rejected up front so no exception escapes a parallel region.
  check_rows(mask, rows, cols);
  if (go_parallel(exec, rows * cols * 8)) {
    const auto n = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
      const auto r = static_cast<std::size_t>(i);
      softmax_row(scores + r * cols, out + r * cols, cols, mask, r);
    }
  } else {
    for (std::size_t r = 0; r < rows; ++r) softmax_row(scores + r * cols, out + r * cols, cols, mask, r);
  }
}

void attention_forward(const double* q, const double* k, const double* v, double* out, double* probs,
                       std::size_t n, std::size_t d_model, std::size_t n_heads,
                       std::span<const AttentionMask> masks, Exec exec) {
  if (n_heads == 0 || d_model % n_heads != 0)
    throw ShapeError("attention: width " + std::to_string(d_model) + " not divisible by " +
                     std::to_string(n_heads) + " heads");
  if (!masks.empty() && masks.size() != n_heads)
    throw ShapeError("attention: expected " + std::to_string(n_heads) + " masks, got " +
                     std::to_string(masks.size()));
  for (const auto& m : masks) check_rows(&m, n, n);
  if (masks.empty()) check_rows(nullptr, n, n);

  const std::size_t dh = d_model / n_heads;
  auto mask_of = [&](std::size_t h) -> const AttentionMask* { return masks.empty() ? nullptr : &masks[h]; };
  if (go_parallel(exec, n * n * d_model * 2)) {
    const auto heads = static_cast<std::ptrdiff_t>(n_heads);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t h = 0; h < heads; ++h) {
      const auto hh = static_cast<std::size_t>(h);
      attention_head_forward(q, k, v, out, probs, n, d_model, dh, hh, mask_of(hh));
    }
  } else {
    for (std::size_t h = 0; h < n_heads; ++h)
      attention_head_forward(q, k, v, out, probs, n, d_model, dh, h, mask_of(h));
  }
}

void attention_backward(const double* q, const double* k, const double* v, const double* probs,
                        const double* d_out, double* dq, double* dk, double* dv, std::size_t n,
                        std::size_t d_model, std::size_t n_heads, Exec exec) {
  const std::size_t dh = d_model / n_heads;
  if (go_parallel(exec, n * n * d_model * 4)) {
    const auto heads = static_cast<std::ptrdiff_t>(n_heads);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t h = 0; h < heads; ++h)
      attention_head_backward(q, k, v, probs, d_out, dq, dk, dv, n, d_model, dh, static_cast<std::size_t>(h));
  } else {
    for (std::size_t h = 0; h < n_heads; ++h)
      attention_head_backward(q, k, v, probs, d_out, dq, dk, dv, n, d_model, dh, h);
  }
}

}  // namespace dear::kernels
