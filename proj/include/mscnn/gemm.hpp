#pragma once

#include <Eigen/Core>

#include <cstddef>

namespace mscnn::detail {

template <typename T>
using RowMajorMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using MatrixView = Eigen::Map<RowMajorMatrix<T>, Eigen::Unaligned, Eigen::OuterStride<>>;

template <typename T>
using ConstMatrixView = Eigen::Map<const RowMajorMatrix<T>, Eigen::Unaligned, Eigen::OuterStride<>>;

/// Row-major C = alpha * op(A) * op(B) + beta * C with BLAS-style leading
/// dimensions. op(A) is m x k, op(B) is k x n.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc) {
  using Index = Eigen::Index;
  const auto mi = static_cast<Index>(m), ni = static_cast<Index>(n), ki = static_cast<Index>(k);
  MatrixView<T> cm(c, mi, ni, Eigen::OuterStride<>(static_cast<Index>(ldc)));
  if (beta == T{0})
    cm.setZero();
  else if (beta != T{1})
    cm *= beta;
  const ConstMatrixView<T> am(a, trans_a ? ki : mi, trans_a ? mi : ki, Eigen::OuterStride<>(static_cast<Index>(lda)));
  const ConstMatrixView<T> bm(b, trans_b ? ni : ki, trans_b ? ki : ni, Eigen::OuterStride<>(static_cast<Index>(ldb)));
  if (!trans_a && !trans_b)
    cm.noalias() += alpha * am * bm;
  else if (trans_a && !trans_b)
    cm.noalias() += alpha * am.transpose() * bm;
  else if (!trans_a && trans_b)
    cm.noalias() += alpha * am * bm.transpose();
  else
    cm.noalias() += alpha * am.transpose() * bm.transpose();
}

}  // namespace mscnn::detail
