#pragma once

#include <algorithm>
#include <cstdio>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>

#include "mflq/linalg.hpp"

namespace mflq {

/// Shortest round-trip-ish rendering for messages: 1e+12 rather than 1000000000000.000000.
[[nodiscard]] inline std::string format_number(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

enum class ErrorKind {
    Validation,    ///< malformed input: dimensions, non-finite entries, bad config
    Diverged,      ///< an integrated matrix exceeded the blow-up threshold
    Irregular,     ///< the regular condition failed where a pseudoinverse was needed
    NonConvergent, ///< horizon doubling did not settle before the maximum horizon
    Numerical,     ///< non-finite intermediate or solver failure
    OffGrid,       ///< a time query that is not a grid point
};

[[nodiscard]] inline const char* to_string(ErrorKind kind)
{
    switch (kind) {
    case ErrorKind::Validation: return "validation";
    case ErrorKind::Diverged: return "diverged";
    case ErrorKind::Irregular: return "irregular";
    case ErrorKind::NonConvergent: return "non-convergent";
    case ErrorKind::Numerical: return "numerical";
    case ErrorKind::OffGrid: return "off-grid";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what, std::optional<double> time = std::nullopt)
        : std::runtime_error(what)
        , m_kind(kind)
        , m_time(time)
    {
    }

    [[nodiscard]] ErrorKind kind() const noexcept { return m_kind; }
    /// Time point attached to Diverged / Irregular errors.
    [[nodiscard]] std::optional<double> time() const noexcept { return m_time; }

private:
    ErrorKind m_kind;
    std::optional<double> m_time;
};

namespace detail {

template <typename Derived>
void require_shape(const Eigen::MatrixBase<Derived>& M, Eigen::Index rows, Eigen::Index cols,
                   const std::string& name)
{
    if (M.rows() != rows || M.cols() != cols) {
        throw Error(ErrorKind::Validation,
                    name + ": expected " + std::to_string(rows) + "x"
                        + std::to_string(cols) + ", got " + std::to_string(M.rows()) + "x"
                        + std::to_string(M.cols()));
    }
    if (!M.allFinite()) {
        throw Error(ErrorKind::Validation, name + ": non-finite entry");
    }
}

} // namespace detail

/// Coefficients of dx = (A x + Abar Ex + B u + Bbar Eu) dt + (C x + Cbar Ex + D u + Dbar Eu) dW
/// driven by a scalar Brownian motion.
template <typename Scalar = double>
struct MeanFieldSystem {
    Mat<Scalar> A, Abar, B, Bbar, C, Cbar, D, Dbar;

    MeanFieldSystem() = default;

    MeanFieldSystem(Mat<Scalar> A_,
                    Mat<Scalar> Abar_,
                    Mat<Scalar> B_,
                    Mat<Scalar> Bbar_,
                    Mat<Scalar> C_,
                    Mat<Scalar> Cbar_,
                    Mat<Scalar> D_,
                    Mat<Scalar> Dbar_)
        : A(std::move(A_))
        , Abar(std::move(Abar_))
        , B(std::move(B_))
        , Bbar(std::move(Bbar_))
        , C(std::move(C_))
        , Cbar(std::move(Cbar_))
        , D(std::move(D_))
        , Dbar(std::move(Dbar_))
    {
        check();
    }

    [[nodiscard]] Eigen::Index n() const { return A.rows(); }
    [[nodiscard]] Eigen::Index m() const { return B.cols(); }

    void check() const
    {
        const Eigen::Index nn = A.rows();
        const Eigen::Index mm = B.cols();
        if (nn <= 0 || mm <= 0) {
            throw Error(ErrorKind::Validation, "system: n and m must be positive");
        }
        detail::require_shape(A, nn, nn, "system.A");
        detail::require_shape(Abar, nn, nn, "system.Abar");
        detail::require_shape(C, nn, nn, "system.C");
        detail::require_shape(Cbar, nn, nn, "system.Cbar");
        detail::require_shape(B, nn, mm, "system.B");
        detail::require_shape(Bbar, nn, mm, "system.Bbar");
        detail::require_shape(D, nn, mm, "system.D");
        detail::require_shape(Dbar, nn, mm, "system.Dbar");
    }

    template <typename Other>
    [[nodiscard]] MeanFieldSystem<Other> cast() const
    {
        return {A.template cast<Other>(),
                Abar.template cast<Other>(),
                B.template cast<Other>(),
                Bbar.template cast<Other>(),
                C.template cast<Other>(),
                Cbar.template cast<Other>(),
                D.template cast<Other>(),
                Dbar.template cast<Other>()};
    }
};

/// Quadratic weights. Every matrix is symmetrized on construction.
template <typename Scalar = double>
struct CostSpec {
    Mat<Scalar> Q, Qbar, R, Rbar, Pterm, Pbarterm;

    CostSpec() = default;

    CostSpec(const Mat<Scalar>& Q_,
             const Mat<Scalar>& Qbar_,
             const Mat<Scalar>& R_,
             const Mat<Scalar>& Rbar_)
        : CostSpec(Q_, Qbar_, R_, Rbar_, Mat<Scalar>::Zero(Q_.rows(), Q_.cols()),
                   Mat<Scalar>::Zero(Q_.rows(), Q_.cols()))
    {
    }

    CostSpec(const Mat<Scalar>& Q_,
             const Mat<Scalar>& Qbar_,
             const Mat<Scalar>& R_,
             const Mat<Scalar>& Rbar_,
             const Mat<Scalar>& Pterm_,
             const Mat<Scalar>& Pbarterm_)
        : Q(symmetrize(Q_))
        , Qbar(symmetrize(Qbar_))
        , R(symmetrize(R_))
        , Rbar(symmetrize(Rbar_))
        , Pterm(symmetrize(Pterm_))
        , Pbarterm(symmetrize(Pbarterm_))
    {
        // Largest asymmetry seen before symmetrization, reported by validate().
        auto asym = [](const Mat<Scalar>& M) {
            return M.size() == 0 ? 0.0
                                 : static_cast<double>((M - M.transpose()).cwiseAbs().maxCoeff());
        };
        inputAsymmetry = std::max({asym(Q_), asym(Qbar_), asym(R_), asym(Rbar_), asym(Pterm_),
                                   asym(Pbarterm_)});
    }

    double inputAsymmetry = 0.0;

    /// Copy with zeroed terminal weights (infinite-horizon use).
    [[nodiscard]] CostSpec without_terminal() const
    {
        CostSpec c = *this;
        c.Pterm.setZero();
        c.Pbarterm.setZero();
        return c;
    }

    template <typename Other>
    [[nodiscard]] CostSpec<Other> cast() const
    {
        return {Q.template cast<Other>(),
                Qbar.template cast<Other>(),
                R.template cast<Other>(),
                Rbar.template cast<Other>(),
                Pterm.template cast<Other>(),
                Pbarterm.template cast<Other>()};
    }
};

/// Feedback u = K x + Kbar Ex.
template <typename Scalar = double>
struct Gains {
    Mat<Scalar> K, Kbar;

    [[nodiscard]] Mat<Scalar> total() const { return K + Kbar; }
};

/// Closed-loop coefficients under u = K x + Kbar Ex. The "mean" entries act on Ex,
/// the plain ones on x - Ex.
template <typename Scalar = double>
struct ClosedLoop {
    Mat<Scalar> A, C, Q;          // deviation block
    Mat<Scalar> Abar, Cbar, Qbar; // mean block
};

/// Dynamics of the stacked state [x - Ex; Ex]:
///   dX = Atil X dt + Ctil X dW,  output weight Qtil.
template <typename Scalar = double>
struct LiftedSystem {
    Mat<Scalar> Atil, Ctil, Qtil;

    [[nodiscard]] Eigen::Index dim() const { return Atil.rows(); }
    [[nodiscard]] Eigen::Index n() const { return Atil.rows() / 2; }
};

using MeanFieldSystemd = MeanFieldSystem<double>;
using CostSpecd = CostSpec<double>;
using Gainsd = Gains<double>;
using ClosedLoopd = ClosedLoop<double>;
using LiftedSystemd = LiftedSystem<double>;

/// 1x1 matrix from a number; scalar systems are common enough to deserve the shorthand.
template <typename Scalar = double>
[[nodiscard]] Mat<Scalar> scalar_matrix(Scalar v)
{
    return Mat<Scalar>::Constant(1, 1, v);
}

} // namespace mflq
