#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>

namespace zdtc {

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using Vector = VectorX<double>;
using Matrix = MatrixX<double>;

enum class NormKind {
  L1Max,  // max_i v_i, signed, no absolute value
  L2,
};

/// W^T v for an m x n matrix W and a length-m vector v.
template <typename DerivedM, typename DerivedV>
VectorX<typename DerivedM::Scalar> matvec_t(const Eigen::MatrixBase<DerivedM>& w,
                                            const Eigen::MatrixBase<DerivedV>& v) {
  if (w.rows() != v.size()) {
    throw std::invalid_argument("matvec_t: matrix has " + std::to_string(w.rows()) +
                                " rows but vector has " + std::to_string(v.size()) +
                                " entries");
  }
  return w.transpose() * v;
}

template <typename DerivedA, typename DerivedB>
VectorX<typename DerivedA::Scalar> hadamard(const Eigen::MatrixBase<DerivedA>& a,
                                            const Eigen::MatrixBase<DerivedB>& b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("hadamard: length mismatch " + std::to_string(a.size()) +
                                " vs " + std::to_string(b.size()));
  }
  return a.cwiseProduct(b);
}

template <typename Derived>
typename Derived::Scalar norm(const Eigen::MatrixBase<Derived>& v, NormKind kind) {
  if (v.size() == 0) throw std::invalid_argument("norm: empty vector");
  switch (kind) {
    case NormKind::L1Max:
      return v.maxCoeff();
    case NormKind::L2:
      return v.norm();
  }
  return typename Derived::Scalar(0);
}

template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived>& m, const std::string& what) {
  if (!m.allFinite()) throw std::invalid_argument(what + ": non-finite entry");
}

/// Numerically stable softmax (max-subtracted).
template <typename Derived>
VectorX<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  VectorX<Scalar> e = (logits.array() - logits.maxCoeff()).exp().matrix();
  return e / e.sum();
}

inline int argmax(const Eigen::Ref<const Vector>& v) {
  Eigen::Index idx = 0;
  v.maxCoeff(&idx);
  return static_cast<int>(idx);
}

}  // namespace zdtc
