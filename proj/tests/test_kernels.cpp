#include <gtest/gtest.h>

#include <omp.h>

#include <stdexcept>

#include "oracles.hpp"
#include "sparsepat/core/rng.hpp"
#include "sparsepat/kernels/kernels.hpp"
#include "sparsepat/transcoder.hpp"

using namespace sparsepat;
using testsupport::full_sort_top_k;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (auto& v : m.data()) v = rng.normal();
  return m;
}

}  // namespace

TEST(TopK, KeepsLargest) {
  EXPECT_EQ(transcoder::top_k(std::vector<double>{3, 1, 2, 5}, 2), (std::vector<double>{3, 0, 0, 5}));
}

TEST(TopK, TiesGoToLowerIndex) {
  EXPECT_EQ(transcoder::top_k(std::vector<double>{1, 1, 1, 1}, 2), (std::vector<double>{1, 1, 0, 0}));
}

TEST(TopK, RejectsOutOfRangeK) {
  const std::vector<double> v{1, 2, 3};
  EXPECT_THROW(transcoder::top_k(v, 0), std::invalid_argument);
  EXPECT_THROW(transcoder::top_k(v, 4), std::invalid_argument);
}

TEST(TopK, FullWidthIsIdentity) {
  Rng rng(5);
  std::vector<double> v(37);
  for (auto& x : v) x = rng.normal();
  EXPECT_EQ(transcoder::top_k(v, v.size()), v);
}

TEST(TopK, MatchesFullSortOracleOnLargeVectors) {
  Rng rng(17);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> v(15000);
    for (auto& x : v) x = rng.uniform(1e-3, 1.0);
    const auto got = transcoder::top_k(v, 32);
    ASSERT_EQ(got, full_sort_top_k(v, 32));
    ASSERT_EQ(std::count_if(got.begin(), got.end(), [](double x) { return x != 0.0; }), 32);
  }
}

TEST(TopK, MatchesOracleWithHeavyTies) {
  Rng rng(23);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 4 + rng.below(200);
    std::vector<double> v(n);
    for (auto& x : v) x = static_cast<double>(rng.below(5)) - 2.0;
    const std::size_t k = 1 + rng.below(n);
    ASSERT_EQ(transcoder::top_k(v, k), full_sort_top_k(v, k));
  }
}

static void expect_close(const Matrix& a, const Matrix& b) {
  ASSERT_EQ(a.rows(), b.rows());
  ASSERT_EQ(a.cols(), b.cols());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-12);
}

TEST(Kernels, GemmSerialAndOmpAgree) {
  Rng rng(3);
  const auto a = random_matrix(33, 19, rng);
  const auto b = random_matrix(21, 19, rng);
  std::vector<double> bias(21);
  for (auto& x : bias) x = rng.normal();
  Matrix c1(33, 21), c2(33, 21);
  kernels::serial::gemm_nt(a, b, bias, c1);
  kernels::omp::gemm_nt(a, b, bias, c2);
  expect_close(c1, c2);
  for (std::size_t i = 0; i < 33; ++i) {
    for (std::size_t j = 0; j < 21; ++j) {
      double s = bias[j];
      for (std::size_t t = 0; t < 19; ++t) s += a(i, t) * b(j, t);
      EXPECT_NEAR(c1(i, j), s, 1e-12);
    }
  }

  const auto bn = random_matrix(19, 21, rng);
  Matrix d1(33, 21), d2(33, 21);
  kernels::serial::gemm_nn(a, bn, bias, d1);
  kernels::omp::gemm_nn(a, bn, bias, d2);
  expect_close(d1, d2);

  const auto at = random_matrix(33, 21, rng);
  Matrix e1(19, 21), e2(19, 21);
  kernels::serial::gemm_tn(a, at, e1);
  kernels::omp::gemm_tn(a, at, e2);
  expect_close(e1, e2);
  for (std::size_t i = 0; i < 19; ++i) {
    for (std::size_t j = 0; j < 21; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < 33; ++t) s += a(t, i) * at(t, j);
      EXPECT_NEAR(e1(i, j), s, 1e-12);
    }
  }
}

TEST(Kernels, OmpResultsIndependentOfThreadCount) {
  Rng rng(12);
  const auto a = random_matrix(70, 45, rng);
  const auto b = random_matrix(66, 45, rng);
  const auto bt = random_matrix(70, 30, rng);
  const int saved = omp_get_max_threads();
  Matrix ref_nt, ref_tn;
  omp_set_num_threads(1);
  kernels::omp::gemm_nt(a, b, {}, ref_nt);
  kernels::omp::gemm_tn(a, bt, ref_tn);
  for (int threads : {2, 3, 4}) {
    omp_set_num_threads(threads);
    Matrix nt, tn;
    kernels::omp::gemm_nt(a, b, {}, nt);
    kernels::omp::gemm_tn(a, bt, tn);
    EXPECT_EQ(nt, ref_nt) << threads;
    EXPECT_EQ(tn, ref_tn) << threads;
  }
  omp_set_num_threads(saved);
}

TEST(Kernels, ReluTopKRowsSerialAndOmpAgree) {
  Rng rng(8);
  const auto pre = random_matrix(40, 64, rng);
  std::vector<kernels::SparseRow> s, o;
  kernels::serial::relu_top_k_rows(pre, 7, s);
  kernels::omp::relu_top_k_rows(pre, 7, o);
  ASSERT_EQ(s.size(), o.size());
  for (std::size_t r = 0; r < s.size(); ++r) {
    EXPECT_EQ(s[r].index, o[r].index);
    EXPECT_EQ(s[r].value, o[r].value);
    EXPECT_LE(s[r].nnz(), 7u);
    std::vector<double> relu(pre.row(r).begin(), pre.row(r).end());
    for (auto& x : relu) x = std::max(x, 0.0);
    const auto want = full_sort_top_k(relu, 7);
    std::vector<double> got(64, 0.0);
    for (std::size_t j = 0; j < s[r].nnz(); ++j) got[s[r].index[j]] = s[r].value[j];
    EXPECT_EQ(got, want);
  }
}
