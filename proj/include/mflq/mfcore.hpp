#pragma once

#include <string>
#include <vector>

#include "mflq/linalg.hpp"
#include "mflq/types.hpp"

namespace mflq {

enum class HorizonMode { Finite, Infinite };

struct AssumptionCheck {
    std::string name;   ///< e.g. "Q >= 0"
    bool passed = false;
    double minEigenvalue = 0.0;
};

struct ValidationReport {
    std::vector<AssumptionCheck> checks;
    std::vector<std::string> warnings;

    [[nodiscard]] bool ok() const
    {
        for (const auto& c : checks) {
            if (!c.passed) {
                return false;
            }
        }
        return true;
    }

    [[nodiscard]] std::string summary() const
    {
        std::string s;
        for (const auto& c : checks) {
            if (!c.passed) {
                s += (s.empty() ? "" : "; ") + c.name + " violated (min eig "
                     + format_number(static_cast<double>(c.minEigenvalue)) + ")";
            }
        }
        return s.empty() ? "all assumptions hold" : s;
    }
};

/// Checks sign assumptions on the weights. Finite mode includes the terminal weights.
/// Throws Error(Validation) when the cost dimensions do not match the system.
template <typename Scalar>
[[nodiscard]] ValidationReport validate(const MeanFieldSystem<Scalar>& sys,
                                        const CostSpec<Scalar>& cost,
                                        HorizonMode mode)
{
    sys.check();
    const auto n = sys.n();
    const auto m = sys.m();
    detail::require_shape(cost.Q, n, n, "cost.Q");
    detail::require_shape(cost.Qbar, n, n, "cost.Qbar");
    detail::require_shape(cost.R, m, m, "cost.R");
    detail::require_shape(cost.Rbar, m, m, "cost.Rbar");
    detail::require_shape(cost.Pterm, n, n, "cost.P_T");
    detail::require_shape(cost.Pbarterm, n, n, "cost.Pbar_T");

    ValidationReport report;
    auto add = [&report](std::string name, const Mat<Scalar>& M) {
        const double lo = static_cast<double>(min_eigenvalue(M));
        report.checks.push_back({std::move(name), lo >= -kPsdTolerance, lo});
    };
    add("Q >= 0", cost.Q);
    add("Q + Qbar >= 0", cost.Q + cost.Qbar);
    add("R >= 0", cost.R);
    add("R + Rbar >= 0", cost.R + cost.Rbar);
    if (mode == HorizonMode::Finite) {
        add("P_T >= 0", cost.Pterm);
        add("P_T + Pbar_T >= 0", cost.Pterm + cost.Pbarterm);
    }
    if (cost.inputAsymmetry > 1e-9) {
        report.warnings.push_back("cost weights were asymmetric by up to "
                                  + format_number(static_cast<double>(cost.inputAsymmetry)) + "; symmetrized");
    }
    return report;
}

/// Coefficients of the system under u = K x + Kbar Ex.
template <typename Scalar>
[[nodiscard]] ClosedLoop<Scalar> closed_loop(const MeanFieldSystem<Scalar>& sys,
                                             const CostSpec<Scalar>& cost,
                                             const Gains<Scalar>& g)
{
    detail::require_shape(g.K, sys.m(), sys.n(), "gains.K");
    detail::require_shape(g.Kbar, sys.m(), sys.n(), "gains.Kbar");
    const Mat<Scalar> Ksum = g.K + g.Kbar;
    ClosedLoop<Scalar> cl;
    cl.A = sys.A + sys.B * g.K;
    cl.C = sys.C + sys.D * g.K;
    cl.Abar = (sys.A + sys.Abar) + (sys.B + sys.Bbar) * Ksum;
    cl.Cbar = (sys.C + sys.Cbar) + (sys.D + sys.Dbar) * Ksum;
    cl.Q = symmetrize(cost.Q + g.K.transpose() * cost.R * g.K);
    cl.Qbar = symmetrize((cost.Q + cost.Qbar) + Ksum.transpose() * (cost.R + cost.Rbar) * Ksum);
    return cl;
}

template <typename Scalar>
[[nodiscard]] Gains<Scalar> zero_gains(const MeanFieldSystem<Scalar>& sys)
{
    return {Mat<Scalar>::Zero(sys.m(), sys.n()), Mat<Scalar>::Zero(sys.m(), sys.n())};
}

/// u = 0: drift diag(A, A + Abar), diffusion [[C, C + Cbar], [0, 0]], weight diag(Q, Q + Qbar).
template <typename Scalar>
[[nodiscard]] ClosedLoop<Scalar> open_loop(const MeanFieldSystem<Scalar>& sys,
                                           const CostSpec<Scalar>& cost)
{
    return closed_loop(sys, cost, zero_gains(sys));
}

template <typename Scalar>
[[nodiscard]] LiftedSystem<Scalar> lift(const ClosedLoop<Scalar>& cl)
{
    const auto n = cl.A.rows();
    LiftedSystem<Scalar> ls;
    ls.Atil = Mat<Scalar>::Zero(2 * n, 2 * n);
    ls.Ctil = Mat<Scalar>::Zero(2 * n, 2 * n);
    ls.Qtil = Mat<Scalar>::Zero(2 * n, 2 * n);
    ls.Atil.topLeftCorner(n, n) = cl.A;
    ls.Atil.bottomRightCorner(n, n) = cl.Abar;
    ls.Ctil.topLeftCorner(n, n) = cl.C;
    ls.Ctil.topRightCorner(n, n) = cl.Cbar;
    ls.Qtil.topLeftCorner(n, n) = cl.Q;
    ls.Qtil.bottomRightCorner(n, n) = cl.Qbar;
    return ls;
}

/// Operator G with vec(dX/dt) = G vec(X) for X = E[XX'] of the lifted state, i.e.
/// dX/dt = Atil X + X Atil' + Ctil X Ctil'. Column-major vec.
template <typename Scalar>
[[nodiscard]] Mat<Scalar> moment_generator(const LiftedSystem<Scalar>& ls)
{
    const auto N = ls.dim();
    const Mat<Scalar> I = Mat<Scalar>::Identity(N, N);
    return kron(I, ls.Atil) + kron(ls.Atil, I) + kron(ls.Ctil, ls.Ctil);
}

/// The generator expressed in the orthonormal basis of symmetric matrices.
template <typename Scalar>
[[nodiscard]] Mat<Scalar> symmetric_moment_generator(const LiftedSystem<Scalar>& ls)
{
    const Mat<Scalar> S = symmetric_basis<Scalar>(ls.dim());
    return S.transpose() * moment_generator(ls) * S;
}

} // namespace mflq
