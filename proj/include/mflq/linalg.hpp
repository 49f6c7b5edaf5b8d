#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <stdexcept>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace mflq {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatXd = Mat<double>;
using VecXd = Vec<double>;

// Eigenvalue threshold below which a symmetric matrix is no longer PSD.
inline constexpr double kPsdTolerance = 1e-10;

template <typename Derived>
[[nodiscard]] auto symmetrize(const Eigen::MatrixBase<Derived>& M)
{
    using Scalar = typename Derived::Scalar;
    return Mat<Scalar>(Scalar(0.5) * (M + M.transpose()));
}

/// Smallest eigenvalue of the symmetric part of M. Empty matrices report +inf.
template <typename Derived>
[[nodiscard]] typename Derived::Scalar min_eigenvalue(const Eigen::MatrixBase<Derived>& M)
{
    using Scalar = typename Derived::Scalar;
    if (M.size() == 0) {
        return std::numeric_limits<Scalar>::infinity();
    }
    Eigen::SelfAdjointEigenSolver<Mat<Scalar>> es(symmetrize(M), Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
}

template <typename Derived>
[[nodiscard]] bool is_psd(const Eigen::MatrixBase<Derived>& M,
                          double tolerance = kPsdTolerance)
{
    return static_cast<double>(min_eigenvalue(M)) >= -tolerance;
}

/// Moore-Penrose inverse of a symmetric matrix through its eigendecomposition.
/// Eigenvalues with magnitude at or below 1e-10 * max(1, ||M||_2) are treated as zero.
template <typename Derived>
[[nodiscard]] Mat<typename Derived::Scalar> symmetric_pseudo_inverse(
    const Eigen::MatrixBase<Derived>& M)
{
    using Scalar = typename Derived::Scalar;
    Mat<Scalar> S = symmetrize(M);
    if (S.size() == 0) {
        return S;
    }
    Eigen::SelfAdjointEigenSolver<Mat<Scalar>> es(S);
    const auto& lambda = es.eigenvalues();
    const Scalar norm = lambda.cwiseAbs().maxCoeff();
    const Scalar cutoff = Scalar(1e-10) * std::max(Scalar(1), norm);
    Vec<Scalar> inv(lambda.size());
    for (Eigen::Index i = 0; i < lambda.size(); ++i) {
        inv(i) = std::abs(lambda(i)) > cutoff ? Scalar(1) / lambda(i) : Scalar(0);
    }
    return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

template <typename DerivedA, typename DerivedB>
[[nodiscard]] Mat<typename DerivedA::Scalar> kron(const Eigen::MatrixBase<DerivedA>& A,
                                                  const Eigen::MatrixBase<DerivedB>& B)
{
    using Scalar = typename DerivedA::Scalar;
    Mat<Scalar> K(A.rows() * B.rows(), A.cols() * B.cols());
    for (Eigen::Index i = 0; i < A.rows(); ++i) {
        for (Eigen::Index j = 0; j < A.cols(); ++j) {
            K.block(i * B.rows(), j * B.cols(), B.rows(), B.cols()) = A(i, j) * B;
        }
    }
    return K;
}

/// Column-major vectorization, matching Eigen's storage order.
template <typename Derived>
[[nodiscard]] Vec<typename Derived::Scalar> vec(const Eigen::MatrixBase<Derived>& M)
{
    using Scalar = typename Derived::Scalar;
    Mat<Scalar> tmp = M;
    return Eigen::Map<const Vec<Scalar>>(tmp.data(), tmp.size());
}

template <typename Derived>
[[nodiscard]] Mat<typename Derived::Scalar> unvec(const Eigen::MatrixBase<Derived>& v,
                                                  Eigen::Index rows,
                                                  Eigen::Index cols)
{
    using Scalar = typename Derived::Scalar;
    Vec<Scalar> tmp = v;
    return Eigen::Map<const Mat<Scalar>>(tmp.data(), rows, cols);
}

/// Basis of the symmetric N x N matrices, as columns of vec-space (N^2 x N(N+1)/2).
/// Off-diagonal basis elements are (E_ij + E_ji)/sqrt(2), so the columns are orthonormal.
template <typename Scalar>
[[nodiscard]] Mat<Scalar> symmetric_basis(Eigen::Index N)
{
    Mat<Scalar> basis = Mat<Scalar>::Zero(N * N, N * (N + 1) / 2);
    const Scalar r = Scalar(1) / std::sqrt(Scalar(2));
    Eigen::Index col = 0;
    for (Eigen::Index j = 0; j < N; ++j) {
        for (Eigen::Index i = j; i < N; ++i) {
            if (i == j) {
                basis(j * N + i, col) = Scalar(1);
            } else {
                basis(j * N + i, col) = r;
                basis(i * N + j, col) = r;
            }
            ++col;
        }
    }
    return basis;
}

/// Maximum real part of the eigenvalues of a square matrix; -inf for an empty one.
template <typename Derived>
[[nodiscard]] typename Derived::Scalar spectral_abscissa(const Eigen::MatrixBase<Derived>& M)
{
    using Scalar = typename Derived::Scalar;
    if (M.size() == 0) {
        return -std::numeric_limits<Scalar>::infinity();
    }
    Eigen::EigenSolver<Mat<Scalar>> es(M, false);
    if (es.info() != Eigen::Success) {
        throw std::runtime_error("spectral_abscissa: eigenvalue solver failed");
    }
    return es.eigenvalues().real().maxCoeff();
}

/// Orthonormal basis for the column span of M, with singular values below
/// rel_tol * sigma_max dropped.
template <typename Derived>
[[nodiscard]] Mat<typename Derived::Scalar> orthonormal_span(const Eigen::MatrixBase<Derived>& M,
                                                             double rel_tol = 1e-8)
{
    using Scalar = typename Derived::Scalar;
    if (M.cols() == 0 || M.rows() == 0) {
        return Mat<Scalar>(M.rows(), 0);
    }
    Eigen::JacobiSVD<Mat<Scalar>> svd(M, Eigen::ComputeThinU);
    const auto& s = svd.singularValues();
    const Scalar smax = s.size() > 0 ? s(0) : Scalar(0);
    if (smax == Scalar(0)) {
        return Mat<Scalar>(M.rows(), 0);
    }
    Eigen::Index rank = 0;
    while (rank < s.size() && s(rank) > Scalar(rel_tol) * smax) {
        ++rank;
    }
    return svd.matrixU().leftCols(rank);
}

/// Orthonormal basis for the null space of a symmetric PSD matrix, using the same
/// relative cutoff as orthonormal_span.
template <typename Derived>
[[nodiscard]] Mat<typename Derived::Scalar> psd_null_space(const Eigen::MatrixBase<Derived>& M,
                                                           double rel_tol = 1e-8)
{
    using Scalar = typename Derived::Scalar;
    Eigen::SelfAdjointEigenSolver<Mat<Scalar>> es(symmetrize(M));
    const auto& lambda = es.eigenvalues();
    const Scalar lmax = lambda.cwiseAbs().maxCoeff();
    std::vector<Eigen::Index> keep;
    for (Eigen::Index i = 0; i < lambda.size(); ++i) {
        if (lmax == Scalar(0) || std::abs(lambda(i)) <= Scalar(rel_tol) * lmax) {
            keep.push_back(i);
        }
    }
    Mat<Scalar> N(M.rows(), static_cast<Eigen::Index>(keep.size()));
    for (std::size_t k = 0; k < keep.size(); ++k) {
        N.col(static_cast<Eigen::Index>(k)) = es.eigenvectors().col(keep[k]);
    }
    return N;
}

template <typename Derived>
[[nodiscard]] bool all_finite(const Eigen::MatrixBase<Derived>& M)
{
    return M.allFinite();
}

} // namespace mflq
