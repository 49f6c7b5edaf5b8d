#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "mflq/linalg.hpp"
#include "mflq/mfcore.hpp"
#include "mflq/riccati.hpp"
#include "mflq/rk4.hpp"
#include "mflq/types.hpp"

namespace mflq {

/// Strict stability margin on the moment-generator abscissa.
inline constexpr double kStabilityMargin = 1e-9;

struct StabilityResult {
    bool stable = false;
    double abscissa = 0.0;
};

/// Mean-square stability of the lifted system: spectral abscissa of the moment
/// generator restricted to symmetric matrices.
template <typename Scalar>
[[nodiscard]] StabilityResult ms_stability(const LiftedSystem<Scalar>& ls)
{
    const double a = static_cast<double>(spectral_abscissa(symmetric_moment_generator(ls)));
    return {a < -kStabilityMargin, a};
}

/// H0(T) and H0(T) + Hbar0(T): output energy of the deviation and mean blocks.
template <typename Scalar = double>
struct GramianPair {
    Mat<Scalar> H0;
    Mat<Scalar> Hsum0;
    double horizon = 0.0;
};

namespace detail {

template <typename Scalar>
auto gramian_flow(const ClosedLoop<Scalar>& cl)
{
    return [&cl](const Mat<Scalar>& Y) {
        const auto n = Y.rows();
        const Mat<Scalar> H = Y.leftCols(n);
        const Mat<Scalar> S = Y.rightCols(n);
        return stack<Scalar>(
            cl.Q + cl.A.transpose() * H + H * cl.A + cl.C.transpose() * H * cl.C,
            cl.Qbar + cl.Abar.transpose() * S + S * cl.Abar + cl.Cbar.transpose() * H * cl.Cbar);
    };
}

[[nodiscard]] inline std::size_t gramian_steps(double T)
{
    return std::max<std::size_t>(1000, static_cast<std::size_t>(std::ceil(1000.0 * T)));
}

/// Walks the Gramian ODE backward in one pass and hands every checkpoint T = 1, 2, 4, ...
/// up to Tmax to `visit`, which returns false to stop early.
template <typename Scalar, typename Visit>
void walk_gramians(const ClosedLoop<Scalar>& cl, double Tmax, Visit&& visit)
{
    const auto n = cl.A.rows();
    auto flow = gramian_flow(cl);
    Mat<Scalar> Y = Mat<Scalar>::Zero(n, 2 * n);
    const Scalar h = Scalar(1e-3);
    double reached = 0.0;
    for (double T = 1.0; T <= Tmax * (1 + 1e-12); T *= 2.0) {
        const auto steps = static_cast<std::size_t>(std::llround((T - reached) / 1e-3));
        for (std::size_t s = 0; s < steps; ++s) {
            Y = rk4_step(Y, h, flow, symmetrize_blocks<Scalar>);
        }
        reached = T;
        if (!Y.allFinite() || static_cast<double>(Y.cwiseAbs().maxCoeff()) > kBlowUpThreshold) {
            return;
        }
        if (!visit(GramianPair<Scalar>{Y.leftCols(n), Y.rightCols(n), T})) {
            return;
        }
    }
}

} // namespace detail

/// Backward RK4 of
///   -dH/dt        = Q    + A'H + HA + C'HC
///   -d(H+Hbar)/dt = Qbar + Abar'(H+Hbar) + (H+Hbar)Abar + Cbar'H Cbar
/// with zero terminal values; returns the values at t = 0.
template <typename Scalar>
[[nodiscard]] GramianPair<Scalar> observability_gramian(const ClosedLoop<Scalar>& cl,
                                                        double T,
                                                        std::size_t steps)
{
    if (!(T > 0.0) || steps < 1) {
        throw Error(ErrorKind::Validation, "observability_gramian: T > 0 and steps >= 1 required");
    }
    const auto n = cl.A.rows();
    auto flow = detail::gramian_flow(cl);
    const Scalar h = Scalar(T) / Scalar(steps);
    Mat<Scalar> Y = Mat<Scalar>::Zero(n, 2 * n);
    for (std::size_t k = 1; k <= steps; ++k) {
        Y = rk4_step(Y, h, flow, detail::symmetrize_blocks<Scalar>);
        detail::check_blow_up(Y, static_cast<double>(Scalar(steps - k) * h));
    }
    return {Y.leftCols(n), Y.rightCols(n), T};
}

/// True iff H0(T) > tol and H0(T) + Hbar0(T) > tol for some T in {1, 2, 4, ..., Tmax}.
template <typename Scalar>
[[nodiscard]] bool exact_observability_test(const ClosedLoop<Scalar>& cl,
                                            double Tmax = 64.0,
                                            double tol = 1e-8)
{
    bool observable = false;
    detail::walk_gramians(cl, Tmax, [&](const GramianPair<Scalar>& g) {
        observable = static_cast<double>(min_eigenvalue(g.H0)) > tol
                     && static_cast<double>(min_eigenvalue(g.Hsum0)) > tol;
        return !observable;
    });
    return observable;
}

template <typename Scalar = double>
struct DetectabilityResult {
    bool detectable = false;
    Mat<Scalar> deviationNullSpace; ///< unobservable directions of x - Ex
    Mat<Scalar> meanNullSpace;      ///< unobservable directions of Ex
    Eigen::Index invariantDimension = 0;
    double restrictedAbscissa = -std::numeric_limits<double>::infinity();
};

/// Unobservable subspace from the Gramian null spaces, closed under the moment generator,
/// then tested for stability. Only block-diagonal second moments are generated: the
/// deviation x - Ex and the mean Ex are uncorrelated.
template <typename Scalar>
[[nodiscard]] DetectabilityResult<Scalar> detectability_analysis(const ClosedLoop<Scalar>& cl,
                                                                 double Tmax = 64.0,
                                                                 double tol = 1e-8)
{
    const auto n = cl.A.rows();
    GramianPair<Scalar> last{Mat<Scalar>::Zero(n, n), Mat<Scalar>::Zero(n, n), 0.0};
    detail::walk_gramians(cl, Tmax, [&](const GramianPair<Scalar>& g) {
        last = g;
        const double big = std::max(static_cast<double>(g.H0.cwiseAbs().maxCoeff()),
                                    static_cast<double>(g.Hsum0.cwiseAbs().maxCoeff()));
        return big < 1e8;
    });

    // Relative cutoff against the largest eigenvalue across both blocks.
    const Scalar scale = std::max(last.H0.size() ? last.H0.norm() : Scalar(0),
                                  last.Hsum0.size() ? last.Hsum0.norm() : Scalar(0));
    auto null_space = [&](const Mat<Scalar>& H) {
        Eigen::SelfAdjointEigenSolver<Mat<Scalar>> es(symmetrize(H));
        std::vector<Eigen::Index> idx;
        for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
            if (scale == Scalar(0) || es.eigenvalues()(i) <= Scalar(tol) * scale) {
                idx.push_back(i);
            }
        }
        Mat<Scalar> N(H.rows(), static_cast<Eigen::Index>(idx.size()));
        for (std::size_t k = 0; k < idx.size(); ++k) {
            N.col(static_cast<Eigen::Index>(k)) = es.eigenvectors().col(idx[k]);
        }
        return N;
    };

    DetectabilityResult<Scalar> out;
    out.deviationNullSpace = null_space(last.H0);
    out.meanNullSpace = null_space(last.Hsum0);
    if (out.deviationNullSpace.cols() == 0 && out.meanNullSpace.cols() == 0) {
        out.detectable = true;
        return out;
    }

    const Eigen::Index N = 2 * n;
    std::vector<Vec<Scalar>> generators;
    auto add_block = [&](const Mat<Scalar>& basis, Eigen::Index offset) {
        for (Eigen::Index i = 0; i < basis.cols(); ++i) {
            for (Eigen::Index j = i; j < basis.cols(); ++j) {
                Mat<Scalar> X = Mat<Scalar>::Zero(N, N);
                X.block(offset, offset, n, n) = basis.col(i) * basis.col(j).transpose()
                                                + basis.col(j) * basis.col(i).transpose();
                generators.push_back(vec(X));
            }
        }
    };
    add_block(out.deviationNullSpace, 0);
    add_block(out.meanNullSpace, n);

    Mat<Scalar> G0(N * N, static_cast<Eigen::Index>(generators.size()));
    for (std::size_t k = 0; k < generators.size(); ++k) {
        G0.col(static_cast<Eigen::Index>(k)) = generators[k];
    }
    const Mat<Scalar> G = moment_generator(lift(cl));
    const Scalar gnorm = std::max(Scalar(1), G.norm());
    Mat<Scalar> V = orthonormal_span(G0);
    for (;;) {
        const Mat<Scalar> GV = G * V;
        const Mat<Scalar> W = GV - V * (V.transpose() * GV);
        if (W.norm() <= Scalar(1e-9) * gnorm) {
            break;
        }
        Mat<Scalar> grow = orthonormal_span(W);
        // Re-orthogonalize against V before appending.
        grow = orthonormal_span(Mat<Scalar>(grow - V * (V.transpose() * grow)));
        if (grow.cols() == 0) {
            break;
        }
        Mat<Scalar> next(V.rows(), V.cols() + grow.cols());
        next << V, grow;
        V = next;
    }
    out.invariantDimension = V.cols();
    out.restrictedAbscissa = static_cast<double>(spectral_abscissa(Mat<Scalar>(V.transpose() * G * V)));
    out.detectable = out.restrictedAbscissa < -kStabilityMargin;
    return out;
}

template <typename Scalar>
[[nodiscard]] bool exact_detectability_test(const ClosedLoop<Scalar>& cl,
                                            double Tmax = 64.0,
                                            double tol = 1e-8)
{
    return detectability_analysis(cl, Tmax, tol).detectable;
}

} // namespace mflq
