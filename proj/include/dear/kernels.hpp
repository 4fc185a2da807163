#pragma once

// Dense f64 kernels used by the tensor ops.
//
// Every kernel has a serial reference and an OpenMP variant. The parallel
// variants split work over independent output rows (or heads) and keep the
// per-element accumulation order of the serial loop, so both paths produce
// bitwise-identical results. The dispatching entry points pick the parallel
// path only above a work threshold.

#include <cstddef>
#include <span>

#include "dear/attention_mask.hpp"

namespace dear::kernels {

enum class Exec { kAuto, kSerial, kParallel };

/// Work (multiply-adds) above which kAuto uses the OpenMP path.
inline constexpr std::size_t kParallelThreshold = 1u << 16;

int max_threads();

// c[m x n] (+)= a[m x k] * b[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate, Exec exec = Exec::kAuto);
// c[m x n] (+)= a[m x k] * b[n x k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate, Exec exec = Exec::kAuto);
// c[m x n] (+)= a[k x m]^T * b[k x n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate, Exec exec = Exec::kAuto);

/// Row-wise softmax over unmasked entries. Throws DegenerateRowError when a
/// row has no unmasked entry. `mask` may be null.
void masked_softmax(const double* scores, double* out, std::size_t rows, std::size_t cols,
                    const AttentionMask* mask, Exec exec = Exec::kAuto);

/// Per-head scaled dot-product attention on packed [n x d_model] q/k/v.
/// Head h uses columns [h*dh, (h+1)*dh). `probs` receives n_heads * n * n
/// attention weights (kept for the backward pass). `masks` is either empty
/// or holds one mask per head.
void attention_forward(const double* q, const double* k, const double* v, double* out, double* probs,
                       std::size_t n, std::size_t d_model, std::size_t n_heads,
                       std::span<const AttentionMask> masks, Exec exec = Exec::kAuto);

/// Accumulates into dq/dk/dv given upstream d_out and the saved probs.
void attention_backward(const double* q, const double* k, const double* v, const double* probs,
                        const double* d_out, double* dq, double* dk, double* dv, std::size_t n,
                        std::size_t d_model, std::size_t n_heads, Exec exec = Exec::kAuto);

}  // namespace dear::kernels
