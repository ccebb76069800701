#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "sparsepat/kernels/kernels.hpp"

namespace sparsepat::kernels::serial {

namespace {
void check_bias(std::span<const double> bias, std::size_t m) {
  if (!bias.empty() && bias.size() != m) throw std::invalid_argument("bias length mismatch");
}
}  // namespace

void gemm_nt(const Matrix& a, const Matrix& b, std::span<const double> bias, Matrix& c) {
  if (a.cols() != b.cols()) throw std::invalid_argument("gemm_nt: inner dims differ");
  check_bias(bias, b.rows());
  c = Matrix(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.cols(); ++p) s += a(i, p) * b(j, p);
      c(i, j) = s + (bias.empty() ? 0.0 : bias[j]);
    }
  }
}

void gemm_nn(const Matrix& a, const Matrix& b, std::span<const double> bias, Matrix& c) {
  if (a.cols() != b.rows()) throw std::invalid_argument("gemm_nn: inner dims differ");
  check_bias(bias, b.cols());
  c = Matrix(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.cols(); ++p) s += a(i, p) * b(p, j);
      c(i, j) = s + (bias.empty() ? 0.0 : bias[j]);
    }
  }
}

void gemm_tn(const Matrix& a, const Matrix& b, Matrix& c) {
  if (a.rows() != b.rows()) throw std::invalid_argument("gemm_tn: row counts differ");
  c = Matrix(a.cols(), b.cols());
  for (std::size_t i = 0; i < a.cols(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.rows(); ++p) s += a(p, i) * b(p, j);
      c(i, j) = s;
    }
  }
}

void top_k_indices(std::span<const double> v, std::size_t k, std::vector<std::uint32_t>& out) {
  if (k == 0 || k > v.size()) throw std::invalid_argument("top_k: k out of range");
  out.resize(v.size());
  std::iota(out.begin(), out.end(), 0u);
  // Total order: larger value first, then lower index.
  auto before = [&](std::uint32_t x, std::uint32_t y) {
    return v[x] > v[y] || (v[x] == v[y] && x < y);
  };
  if (k < v.size()) {
    std::nth_element(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(k - 1), out.end(),
                     before);
    out.resize(k);
  }
  std::sort(out.begin(), out.end());
}

void relu_top_k_rows(const Matrix& pre, std::size_t k, std::vector<SparseRow>& out) {
  out.assign(pre.rows(), {});
  std::vector<std::uint32_t> idx;
  std::vector<double> act(pre.cols());
  for (std::size_t i = 0; i < pre.rows(); ++i) {
    auto row = pre.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) act[j] = std::max(row[j], 0.0);
    top_k_indices(act, k, idx);
    for (auto j : idx) {
      if (act[j] > 0.0) {
        out[i].index.push_back(j);
        out[i].value.push_back(act[j]);
      }
    }
  }
}

}  // namespace sparsepat::kernels::serial
