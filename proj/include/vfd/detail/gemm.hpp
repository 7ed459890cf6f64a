#pragma once

#include <cstddef>

#include <Eigen/Core>

namespace vfd::detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using Map = Eigen::Map<RowMat<T>>;

// C[M x N] (+)= op(A) * op(B), all row-major. op(A) is M x K; when trans_a the
// buffer holds A as K x M. Likewise op(B) is K x N, stored N x K if trans_b.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const T* a, const T* b, T* c, bool accumulate) {
  const auto M = static_cast<Eigen::Index>(m);
  const auto N = static_cast<Eigen::Index>(n);
  const auto K = static_cast<Eigen::Index>(k);
  Map<T> C(c, M, N);
  if (!accumulate) C.setZero();
  if (!trans_a && !trans_b) {
    C.noalias() += MapC<T>(a, M, K) * MapC<T>(b, K, N);
  } else if (trans_a && !trans_b) {
    C.noalias() += MapC<T>(a, K, M).transpose() * MapC<T>(b, K, N);
  } else if (!trans_a && trans_b) {
    C.noalias() += MapC<T>(a, M, K) * MapC<T>(b, N, K).transpose();
  } else {
    C.noalias() += MapC<T>(a, K, M).transpose() * MapC<T>(b, N, K).transpose();
  }
}

}  // namespace vfd::detail
