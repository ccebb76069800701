#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sparsepat/core/tensor.hpp"

// Dense and top-k kernels used by classifier and transcoder training.
//
// Every kernel has a plain serial reference in `serial::` and an OpenMP
// version in `omp::`. The OpenMP versions partition work by output element,
// so each output is reduced in a fixed order and results do not depend on the
// thread count. The unqualified entry points dispatch to `omp::`.

namespace sparsepat::kernels {

/// Nonzero entries of one sparse row, indices ascending.
struct SparseRow {
  std::vector<std::uint32_t> index;
  std::vector<double> value;

  std::size_t nnz() const noexcept { return index.size(); }
};

namespace serial {
// C[n x m] = A[n x k] * B[m x k]^T (+ bias[m] broadcast over rows when non-empty)
void gemm_nt(const Matrix& a, const Matrix& b, std::span<const double> bias, Matrix& c);
// C[n x m] = A[n x k] * B[k x m] (+ bias)
void gemm_nn(const Matrix& a, const Matrix& b, std::span<const double> bias, Matrix& c);
// C[k x m] = A[n x k]^T * B[n x m]
void gemm_tn(const Matrix& a, const Matrix& b, Matrix& c);
// Indices of the k largest entries; ties go to the lower index. Ascending.
void top_k_indices(std::span<const double> v, std::size_t k, std::vector<std::uint32_t>& out);
// Per row: ReLU, keep the k largest, return the strictly positive survivors.
void relu_top_k_rows(const Matrix& pre, std::size_t k, std::vector<SparseRow>& out);
}  // namespace serial

namespace omp {
void gemm_nt(const Matrix& a, const Matrix& b, std::span<const double> bias, Matrix& c);
void gemm_nn(const Matrix& a, const Matrix& b, std::span<const double> bias, Matrix& c);
void gemm_tn(const Matrix& a, const Matrix& b, Matrix& c);
void relu_top_k_rows(const Matrix& pre, std::size_t k, std::vector<SparseRow>& out);
}  // namespace omp

inline void gemm_nt(const Matrix& a, const Matrix& b, std::span<const double> bias, Matrix& c) {
  omp::gemm_nt(a, b, bias, c);
}
inline void gemm_nn(const Matrix& a, const Matrix& b, std::span<const double> bias, Matrix& c) {
  omp::gemm_nn(a, b, bias, c);
}
inline void gemm_tn(const Matrix& a, const Matrix& b, Matrix& c) { omp::gemm_tn(a, b, c); }
inline void top_k_indices(std::span<const double> v, std::size_t k,
                          std::vector<std::uint32_t>& out) {
  serial::top_k_indices(v, k, out);
}
inline void relu_top_k_rows(const Matrix& pre, std::size_t k, std::vector<SparseRow>& out) {
  omp::relu_top_k_rows(pre, k, out);
}

}  // namespace sparsepat::kernels
