#include <omp.h>

#include <algorithm>
#include <stdexcept>

#include "sparsepat/kernels/kernels.hpp"

namespace sparsepat::kernels::omp {

namespace {
constexpr std::size_t kRowBlock = 16;

void check_bias(std::span<const double> bias, std::size_t m) {
  if (!bias.empty() && bias.size() != m) throw std::invalid_argument("bias length mismatch");
}
}  // namespace

void gemm_nt(const Matrix& a, const Matrix& b, std::span<const double> bias, Matrix& c) {
  if (a.cols() != b.cols()) throw std::invalid_argument("gemm_nt: inner dims differ");
  check_bias(bias, b.rows());
  const std::size_t n = a.rows(), m = b.rows(), k = a.cols();
  c = Matrix(n, m);
  const double* ap = a.data().data();
  const double* bp = b.data().data();
  double* cp = c.data().data();
  const bool has_bias = !bias.empty();
  const double* biasp = bias.data();

#pragma omp parallel for schedule(static) collapse(2)
  for (std::size_t ib = 0; ib < n; ib += kRowBlock) {
    for (std::size_t jb = 0; jb < m; jb += kRowBlock) {
      const std::size_t ie = std::min(ib + kRowBlock, n);
      const std::size_t je = std::min(jb + kRowBlock, m);
      for (std::size_t i = ib; i < ie; ++i) {
        const double* ar = ap + i * k;
        for (std::size_t j = jb; j < je; ++j) {
          const double* br = bp + j * k;
          double s = 0.0;
#pragma omp simd reduction(+ : s)
          for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
          cp[i * m + j] = s + (has_bias ? biasp[j] : 0.0);
        }
      }
    }
  }
}

void gemm_nn(const Matrix& a, const Matrix& b, std::span<const double> bias, Matrix& c) {
  if (a.cols() != b.rows()) throw std::invalid_argument("gemm_nn: inner dims differ");
  check_bias(bias, b.cols());
  const std::size_t n = a.rows(), m = b.cols(), k = a.cols();
  c = Matrix(n, m);
  const double* ap = a.data().data();
  const double* bp = b.data().data();
  double* cp = c.data().data();

#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) {
    double* cr = cp + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ap[i * k + p];
      if (aip == 0.0) continue;
      const double* br = bp + p * m;
#pragma omp simd
      for (std::size_t j = 0; j < m; ++j) cr[j] += aip * br[j];
    }
    if (!bias.empty()) {
      for (std::size_t j = 0; j < m; ++j) cr[j] += bias[j];
    }
  }
}

void gemm_tn(const Matrix& a, const Matrix& b, Matrix& c) {
  if (a.rows() != b.rows()) throw std::invalid_argument("gemm_tn: row counts differ");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  c = Matrix(k, m);
  const double* ap = a.data().data();
  const double* bp = b.data().data();
  double* cp = c.data().data();

#pragma omp parallel for schedule(static)
  for (std::size_t ib = 0; ib < k; ib += kRowBlock) {
    const std::size_t ie = std::min(ib + kRowBlock, k);
    for (std::size_t p = 0; p < n; ++p) {
      const double* br = bp + p * m;
      for (std::size_t i = ib; i < ie; ++i) {
        const double api = ap[p * k + i];
        if (api == 0.0) continue;
        double* cr = cp + i * m;
#pragma omp simd
        for (std::size_t j = 0; j < m; ++j) cr[j] += api * br[j];
      }
    }
  }
}

void relu_top_k_rows(const Matrix& pre, std::size_t k, std::vector<SparseRow>& out) {
  if (k == 0 || k > pre.cols()) throw std::invalid_argument("top_k: k out of range");
  out.assign(pre.rows(), {});
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(pre.rows());

#pragma omp parallel
  {
    std::vector<std::uint32_t> idx;
    std::vector<double> act(pre.cols());
#pragma omp for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
      auto row = pre.row(static_cast<std::size_t>(i));
      for (std::size_t j = 0; j < row.size(); ++j) act[j] = std::max(row[j], 0.0);
      serial::top_k_indices(act, k, idx);
      auto& dst = out[static_cast<std::size_t>(i)];
      dst.index.reserve(k);
      dst.value.reserve(k);
      for (auto j : idx) {
        if (act[j] > 0.0) {
          dst.index.push_back(j);
          dst.value.push_back(act[j]);
        }
      }
    }
  }
}

}  // namespace sparsepat::kernels::omp
