#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "dear/errors.hpp"
#include "dear/kernels.hpp"
#include "support/oracles.hpp"

using namespace dear;
using kernels::Exec;

namespace {

AttentionMask random_mask(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double p) {
  std::bernoulli_distribution coin(p);
  std::uniform_int_distribution<std::size_t> pick(0, cols - 1);
  AttentionMask m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j)
      if (coin(rng)) m.block(i, j);
    m.unblock(i, pick(rng));  // keep one open cell per row
  }
  return m;
}

}  // namespace

TEST_SUITE("kernels") {

TEST_CASE("gemm variants match the triple loop and each other bitwise") {
  std::mt19937_64 rng(7);
  for (auto [m, k, n] : {std::tuple{1u, 1u, 1u}, {3u, 5u, 2u}, {17u, 33u, 9u}, {64u, 64u, 64u}}) {
    auto a = oracle::random_vector(rng, m * k);
    auto b = oracle::random_vector(rng, k * n);
    auto ref = oracle::matmul(a, b, m, k, n);
    std::vector<double> cs(m * n), cp(m * n);
    kernels::gemm_nn(a.data(), b.data(), cs.data(), m, k, n, false, Exec::kSerial);
    kernels::gemm_nn(a.data(), b.data(), cp.data(), m, k, n, false, Exec::kParallel);
    CHECK(cs == cp);
    for (std::size_t i = 0; i < cs.size(); ++i) CHECK(cs[i] == doctest::Approx(ref[i]).epsilon(1e-12));

    // nt: b stored as n x k
    std::vector<double> bt(n * k);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < n; ++j) bt[j * k + i] = b[i * n + j];
    std::vector<double> ns(m * n), np(m * n);
    kernels::gemm_nt(a.data(), bt.data(), ns.data(), m, k, n, false, Exec::kSerial);
    kernels::gemm_nt(a.data(), bt.data(), np.data(), m, k, n, false, Exec::kParallel);
    CHECK(ns == np);
    for (std::size_t i = 0; i < ns.size(); ++i) CHECK(ns[i] == doctest::Approx(ref[i]).epsilon(1e-12));

    // tn: a stored as k x m
    std::vector<double> at(k * m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < k; ++j) at[j * m + i] = a[i * k + j];
    std::vector<double> ts(m * n, 1.0), tp(m * n, 1.0);
    kernels::gemm_tn(at.data(), b.data(), ts.data(), m, k, n, true, Exec::kSerial);
    kernels::gemm_tn(at.data(), b.data(), tp.data(), m, k, n, true, Exec::kParallel);
    CHECK(ts == tp);
    for (std::size_t i = 0; i < ts.size(); ++i) CHECK(ts[i] == doctest::Approx(ref[i] + 1.0).epsilon(1e-12));
  }
}

TEST_CASE("masked softmax matches delete-renormalize") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t rows = 1 + rng() % 6, cols = 1 + rng() % 12;
    auto s = oracle::random_vector(rng, rows * cols, 5.0);
    auto mask = random_mask(rng, rows, cols, 0.4);
    std::vector<double> ser(rows * cols), par(rows * cols);
    kernels::masked_softmax(s.data(), ser.data(), rows, cols, &mask, Exec::kSerial);
    kernels::masked_softmax(s.data(), par.data(), rows, cols, &mask, Exec::kParallel);
    CHECK(ser == par);
    for (std::size_t i = 0; i < rows; ++i) {
      std::vector<double> row(s.begin() + i * cols, s.begin() + (i + 1) * cols);
      std::vector<bool> masked(cols);
      for (std::size_t j = 0; j < cols; ++j) masked[j] = mask.blocked(i, j);
      auto ref = oracle::delete_renormalize(row, masked);
      double total = 0.0;
      for (std::size_t j = 0; j < cols; ++j) {
        total += ser[i * cols + j];
        if (masked[j]) CHECK(ser[i * cols + j] == 0.0);
        CHECK(std::abs(ser[i * cols + j] - ref[j]) <= 1e-12);
      }
      CHECK(std::abs(total - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("masked softmax is stable for huge scores") {
  std::vector<double> s = {1e300, -1e300, 1e300};
  std::vector<double> out(3);
  kernels::masked_softmax(s.data(), out.data(), 1, 3, nullptr);
  CHECK(out[0] == doctest::Approx(0.5));
  CHECK(out[1] == 0.0);
}

TEST_CASE("fully masked row raises DegenerateRowError naming the row") {
  AttentionMask m(2, 3);
  for (std::size_t j = 0; j < 3; ++j) m.block(1, j);
  std::vector<double> s(6, 0.0), out(6);
  try {
    kernels::masked_softmax(s.data(), out.data(), 2, 3, &m);
    FAIL("expected DegenerateRowError");
  } catch (const DegenerateRowError& e) {
    CHECK(e.row() == 1);
  }
}

TEST_CASE("multi-head attention matches brute force, serial equals parallel") {
  std::mt19937_64 rng(3);
  const std::size_t n = 7, heads = 3, dh = 4, d = heads * dh;
  auto q = oracle::random_vector(rng, n * d), k = oracle::random_vector(rng, n * d), v = oracle::random_vector(rng, n * d);
  std::vector<AttentionMask> masks;
  for (std::size_t h = 0; h < heads; ++h) masks.push_back(random_mask(rng, n, n, 0.5));

  std::vector<double> out_s(n * d), out_p(n * d), pr_s(heads * n * n), pr_p(heads * n * n);
  kernels::attention_forward(q.data(), k.data(), v.data(), out_s.data(), pr_s.data(), n, d, heads, masks, Exec::kSerial);
  kernels::attention_forward(q.data(), k.data(), v.data(), out_p.data(), pr_p.data(), n, d, heads, masks,
                             Exec::kParallel);
  CHECK(out_s == out_p);
  CHECK(pr_s == pr_p);

  for (std::size_t h = 0; h < heads; ++h) {
    std::vector<double> qh(n * dh), kh(n * dh), vh(n * dh);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t t = 0; t < dh; ++t) {
        qh[i * dh + t] = q[i * d + h * dh + t];
        kh[i * dh + t] = k[i * d + h * dh + t];
        vh[i * dh + t] = v[i * d + h * dh + t];
      }
    std::vector<std::vector<bool>> blocked(n, std::vector<bool>(n));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) blocked[i][j] = masks[h].blocked(i, j);
    auto ref = oracle::attention(qh, kh, vh, n, dh, blocked);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t t = 0; t < dh; ++t) CHECK(std::abs(out_s[i * d + h * dh + t] - ref[i * dh + t]) < 1e-12);
  }

  std::vector<double> dout = oracle::random_vector(rng, n * d);
  std::vector<double> dq_s(n * d), dk_s(n * d), dv_s(n * d), dq_p(n * d), dk_p(n * d), dv_p(n * d);
  kernels::attention_backward(q.data(), k.data(), v.data(), pr_s.data(), dout.data(), dq_s.data(), dk_s.data(),
                              dv_s.data(), n, d, heads, Exec::kSerial);
  kernels::attention_backward(q.data(), k.data(), v.data(), pr_s.data(), dout.data(), dq_p.data(), dk_p.data(),
                              dv_p.data(), n, d, heads, Exec::kParallel);
  CHECK(dq_s == dq_p);
  CHECK(dk_s == dk_p);
  CHECK(dv_s == dv_p);
}

}  // TEST_SUITE
