#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "mflq/linalg.hpp"
#include "mflq/mfcore.hpp"
#include "mflq/rk4.hpp"
#include "mflq/types.hpp"

namespace mflq {

/// Magnitude beyond which an integrated matrix is declared divergent.
inline constexpr double kBlowUpThreshold = 1e12;
/// Relative tolerance of the regular condition Ups Ups^+ M = M.
inline constexpr double kRegularTolerance = 1e-8;
/// Strict positivity threshold for Ups in the solvability verdict.
inline constexpr double kSolvabilityThreshold = 1e-10;

/// Default RK4 step count for a horizon T: max(2000, ceil(4000 T)).
[[nodiscard]] inline std::size_t default_riccati_steps(double T)
{
    return std::max<std::size_t>(2000, static_cast<std::size_t>(std::ceil(4000.0 * T)));
}

/// Quantities derived from (P, Pbar) that feed the gains.
template <typename Scalar = double>
struct RiccatiAux {
    Mat<Scalar> Ups1, Ups2; // m x m
    Mat<Scalar> M1, M2;     // m x n
    Mat<Scalar> Ups1Pinv, Ups2Pinv;
    bool regular = true;

    /// K = -Ups1^+ M1, Kbar = -(Ups2^+ M2 - Ups1^+ M1).
    [[nodiscard]] Gains<Scalar> gains() const
    {
        const Mat<Scalar> k1 = Ups1Pinv * M1;
        const Mat<Scalar> k2 = Ups2Pinv * M2;
        return {-k1, -(k2 - k1)};
    }
};

template <typename Scalar>
[[nodiscard]] bool regular_condition(const Mat<Scalar>& Ups,
                                     const Mat<Scalar>& UpsPinv,
                                     const Mat<Scalar>& M)
{
    const Scalar err = (Ups * UpsPinv * M - M).norm();
    return static_cast<double>(err)
           <= kRegularTolerance * std::max(1.0, static_cast<double>(M.norm()));
}

template <typename Scalar>
[[nodiscard]] RiccatiAux<Scalar> riccati_aux(const Mat<Scalar>& P,
                                             const Mat<Scalar>& Pbar,
                                             const MeanFieldSystem<Scalar>& sys,
                                             const CostSpec<Scalar>& cost)
{
    const Mat<Scalar> Dsum = sys.D + sys.Dbar;
    RiccatiAux<Scalar> aux;
    aux.Ups1 = symmetrize(cost.R + sys.D.transpose() * P * sys.D);
    aux.Ups2 = symmetrize(cost.R + cost.Rbar + Dsum.transpose() * P * Dsum);
    aux.M1 = sys.B.transpose() * P + sys.D.transpose() * P * sys.C;
    aux.M2 = (sys.B + sys.Bbar).transpose() * (P + Pbar) + Dsum.transpose() * P * (sys.C + sys.Cbar);
    aux.Ups1Pinv = symmetric_pseudo_inverse(aux.Ups1);
    aux.Ups2Pinv = symmetric_pseudo_inverse(aux.Ups2);
    aux.regular = regular_condition(aux.Ups1, aux.Ups1Pinv, aux.M1)
                  && regular_condition(aux.Ups2, aux.Ups2Pinv, aux.M2);
    return aux;
}

template <typename Scalar = double>
struct CoupledRhs {
    Mat<Scalar> dP;    ///< -dP/dt
    Mat<Scalar> dPbar; ///< -dPbar/dt
    RiccatiAux<Scalar> aux;

    [[nodiscard]] bool regular() const { return aux.regular; }
};

/// Right-hand sides of the coupled Riccati equations in pseudoinverse form, i.e. the
/// negated time derivatives. With positive definite Ups the pseudoinverses are inverses.
template <typename Scalar>
[[nodiscard]] CoupledRhs<Scalar> coupled_rhs(const Mat<Scalar>& P,
                                             const Mat<Scalar>& Pbar,
                                             const MeanFieldSystem<Scalar>& sys,
                                             const CostSpec<Scalar>& cost)
{
    CoupledRhs<Scalar> out;
    out.aux = riccati_aux(P, Pbar, sys, cost);
    const auto& aux = out.aux;
    const Mat<Scalar> Asum = sys.A + sys.Abar;
    const Mat<Scalar> quad1 = aux.M1.transpose() * aux.Ups1Pinv * aux.M1;
    const Mat<Scalar> quad2 = aux.M2.transpose() * aux.Ups2Pinv * aux.M2;

    auto require_finite = [](const Mat<Scalar>& M, const char* term) {
        if (!M.allFinite()) {
            throw Error(ErrorKind::Numerical, std::string("coupled_rhs: non-finite ") + term);
        }
    };
    require_finite(aux.Ups1, "Ups1");
    require_finite(aux.Ups2, "Ups2");
    require_finite(aux.M1, "M1");
    require_finite(aux.M2, "M2");
    require_finite(quad1, "M1' Ups1^+ M1");
    require_finite(quad2, "M2' Ups2^+ M2");

    out.dP = symmetrize(cost.Q + P * sys.A + sys.A.transpose() * P
                        + sys.C.transpose() * P * sys.C - quad1);
    out.dPbar = symmetrize(cost.Qbar + P * sys.Abar + sys.Abar.transpose() * P
                           + Asum.transpose() * Pbar + Pbar * Asum
                           + sys.Cbar.transpose() * P * sys.Cbar
                           + sys.C.transpose() * P * sys.Cbar
                           + sys.Cbar.transpose() * P * sys.C + quad1 - quad2);
    require_finite(out.dP, "dP");
    require_finite(out.dPbar, "dPbar");
    return out;
}

template <typename Scalar = double>
struct RiccatiSolution {
    std::vector<Scalar> grid; ///< t_0 = 0 < ... < t_N = T
    std::vector<Mat<Scalar>> P, Pbar;
    std::vector<Mat<Scalar>> Ups1, Ups2, M1, M2;
    std::vector<Gains<Scalar>> gains;
    std::vector<bool> regular;

    [[nodiscard]] std::size_t size() const { return grid.size(); }
    [[nodiscard]] Scalar horizon() const { return grid.back(); }
    [[nodiscard]] Scalar step() const { return grid[1] - grid[0]; }
};

namespace detail {

// [P | Pbar] stacked side by side so a single RK4 step advances both.
template <typename Scalar>
Mat<Scalar> stack(const Mat<Scalar>& P, const Mat<Scalar>& Pbar)
{
    Mat<Scalar> Y(P.rows(), 2 * P.cols());
    Y << P, Pbar;
    return Y;
}

template <typename Scalar>
auto riccati_flow(const MeanFieldSystem<Scalar>& sys, const CostSpec<Scalar>& cost)
{
    return [&sys, &cost](const Mat<Scalar>& Y) {
        const auto n = Y.rows();
        const auto r = coupled_rhs<Scalar>(Y.leftCols(n), Y.rightCols(n), sys, cost);
        return stack(r.dP, r.dPbar);
    };
}

template <typename Scalar>
Mat<Scalar> symmetrize_blocks(const Mat<Scalar>& Y)
{
    const auto n = Y.rows();
    return stack<Scalar>(symmetrize(Y.leftCols(n)), symmetrize(Y.rightCols(n)));
}

template <typename Scalar>
void check_input(const MeanFieldSystem<Scalar>& sys,
                 const CostSpec<Scalar>& cost,
                 double T,
                 std::size_t steps)
{
    if (!(T > 0.0) || steps < 1) {
        throw Error(ErrorKind::Validation, "riccati: horizon must be positive and steps >= 1");
    }
    const auto report = validate(sys, cost, HorizonMode::Finite);
    if (!report.ok()) {
        throw Error(ErrorKind::Validation, "riccati: " + report.summary());
    }
}

template <typename Scalar>
void check_blow_up(const Mat<Scalar>& Y, double t)
{
    if (!Y.allFinite() || static_cast<double>(Y.cwiseAbs().maxCoeff()) > kBlowUpThreshold) {
        throw Error(ErrorKind::Diverged,
                    "riccati: solution exceeded " + format_number(kBlowUpThreshold)
                        + " at t = " + format_number(t),
                    t);
    }
}

} // namespace detail

/// Backward fixed-step RK4 from t = T (terminal weights) to t = 0, recording every grid
/// point. Throws Diverged on blow-up and Irregular when the regular condition fails.
template <typename Scalar>
[[nodiscard]] RiccatiSolution<Scalar> integrate_backward(const MeanFieldSystem<Scalar>& sys,
                                                         const CostSpec<Scalar>& cost,
                                                         double T,
                                                         std::size_t steps)
{
    detail::check_input(sys, cost, T, steps);
    const auto n = sys.n();
    const Scalar h = Scalar(T) / Scalar(steps);
    auto flow = detail::riccati_flow(sys, cost);

    RiccatiSolution<Scalar> sol;
    const std::size_t N = steps + 1;
    sol.grid.resize(N);
    sol.P.resize(N);
    sol.Pbar.resize(N);
    sol.Ups1.resize(N);
    sol.Ups2.resize(N);
    sol.M1.resize(N);
    sol.M2.resize(N);
    sol.gains.resize(N);
    sol.regular.resize(N);

    Mat<Scalar> Y = detail::stack(cost.Pterm, cost.Pbarterm);
    for (std::size_t j = 0; j < N; ++j) {
        const std::size_t k = steps - j;
        const Scalar t = (k == steps) ? Scalar(T) : Scalar(k) * h;
        if (j > 0) {
            Y = rk4_step(Y, h, flow, detail::symmetrize_blocks<Scalar>);
        }
        detail::check_blow_up(Y, static_cast<double>(t));
        const Mat<Scalar> P = Y.leftCols(n);
        const Mat<Scalar> Pbar = Y.rightCols(n);
        const auto aux = riccati_aux(P, Pbar, sys, cost);
        if (!aux.regular) {
            throw Error(ErrorKind::Irregular,
                        "riccati: regular condition fails at t = "
                            + format_number(static_cast<double>(t)),
                        static_cast<double>(t));
        }
        sol.grid[k] = t;
        sol.P[k] = P;
        sol.Pbar[k] = Pbar;
        sol.Ups1[k] = aux.Ups1;
        sol.Ups2[k] = aux.Ups2;
        sol.M1[k] = aux.M1;
        sol.M2[k] = aux.M2;
        sol.gains[k] = aux.gains();
        sol.regular[k] = aux.regular;
    }
    return sol;
}

/// Same integration as integrate_backward, keeping only (P_0, Pbar_0).
template <typename Scalar>
[[nodiscard]] std::pair<Mat<Scalar>, Mat<Scalar>> integrate_to_origin(
    const MeanFieldSystem<Scalar>& sys,
    const CostSpec<Scalar>& cost,
    double T,
    std::size_t steps)
{
    detail::check_input(sys, cost, T, steps);
    const auto n = sys.n();
    const Scalar h = Scalar(T) / Scalar(steps);
    auto flow = detail::riccati_flow(sys, cost);
    Mat<Scalar> Y = detail::stack(cost.Pterm, cost.Pbarterm);
    for (std::size_t j = 1; j <= steps; ++j) {
        Y = rk4_step(Y, h, flow, detail::symmetrize_blocks<Scalar>);
        const double t = static_cast<double>(Scalar(steps - j) * h);
        detail::check_blow_up(Y, t);
        const auto aux = riccati_aux<Scalar>(Y.leftCols(n), Y.rightCols(n), sys, cost);
        if (!aux.regular) {
            throw Error(ErrorKind::Irregular,
                        "riccati: regular condition fails at t = " + format_number(t), t);
        }
    }
    return {Y.leftCols(n), Y.rightCols(n)};
}

struct SolvabilityVerdict {
    bool uniquelySolvable = true;
    std::vector<double> offendingTimes; ///< grid times where Ups1 or Ups2 is not > 0
};

template <typename Scalar>
[[nodiscard]] SolvabilityVerdict solvability_check(const RiccatiSolution<Scalar>& sol)
{
    SolvabilityVerdict v;
    for (std::size_t k = 0; k < sol.size(); ++k) {
        const bool pd1 = static_cast<double>(min_eigenvalue(sol.Ups1[k])) > kSolvabilityThreshold;
        const bool pd2 = static_cast<double>(min_eigenvalue(sol.Ups2[k])) > kSolvabilityThreshold;
        if (!(pd1 && pd2)) {
            v.uniquelySolvable = false;
            v.offendingTimes.push_back(static_cast<double>(sol.grid[k]));
        }
    }
    return v;
}

/// Index of grid time t; throws OffGrid if t is not (to rounding) a grid point.
template <typename Scalar>
[[nodiscard]] std::size_t grid_index(const RiccatiSolution<Scalar>& sol, double t)
{
    const double T = static_cast<double>(sol.horizon());
    const double h = static_cast<double>(sol.step());
    const double pos = t / h;
    const double k = std::round(pos);
    if (k < 0.0 || k > static_cast<double>(sol.size() - 1)
        || std::abs(t - static_cast<double>(sol.grid[static_cast<std::size_t>(k)]))
               > 1e-9 * std::max(1.0, T)) {
        throw Error(ErrorKind::OffGrid, "gains_at: t = " + format_number(t) + " is not a grid point");
    }
    return static_cast<std::size_t>(k);
}

template <typename Scalar>
[[nodiscard]] Gains<Scalar> gains_at(const RiccatiSolution<Scalar>& sol, double t)
{
    return sol.gains[grid_index(sol, t)];
}

/// E[x0' P0 x0] + Ex0' Pbar0 Ex0 expressed through the first two moments of x0.
template <typename Scalar>
[[nodiscard]] Scalar optimal_cost(const Mat<Scalar>& P0,
                                  const Mat<Scalar>& Pbar0,
                                  const Vec<Scalar>& mean,
                                  const Mat<Scalar>& secondMoment)
{
    if (!is_psd(Mat<Scalar>(secondMoment - mean * mean.transpose()))) {
        throw Error(ErrorKind::Validation,
                    "optimal_cost: second moment must dominate mean * mean'");
    }
    return (P0 * secondMoment).trace() + mean.dot(Pbar0 * mean);
}

/// Pbar = Pbar1 + Pbar2 + Pbar3: the blocks of the costate map
/// p_t = [[P, Pbar1], [Pbar2, Pbar3]] [x; Ex]. The blocks need not be symmetric.
template <typename Scalar = double>
struct CostateSplit {
    std::vector<Scalar> grid;
    std::vector<Mat<Scalar>> Pbar1, Pbar2, Pbar3;
    double maxSumDeviation = 0.0; ///< max over the grid of ||sum - Pbar|| / (1 + ||Pbar||)
};

namespace detail {

template <typename Scalar>
Mat<Scalar> split_rhs(const Mat<Scalar>& Y,
                      const MeanFieldSystem<Scalar>& sys,
                      const CostSpec<Scalar>& cost)
{
    const auto n = Y.rows();
    const Mat<Scalar> P = Y.block(0, 0, n, n);
    const Mat<Scalar> P1 = Y.block(0, n, n, n);
    const Mat<Scalar> P2 = Y.block(0, 2 * n, n, n);
    const Mat<Scalar> P3 = Y.block(0, 3 * n, n, n);
    const Mat<Scalar> Pbar = P1 + P2 + P3;

    const auto r = coupled_rhs(P, symmetrize(Pbar), sys, cost);
    const Gains<Scalar> g = r.aux.gains();
    const Mat<Scalar>& K = g.K;
    const Mat<Scalar>& Kb = g.Kbar;
    const Mat<Scalar> Ks = K + Kb;
    const Mat<Scalar> Asum = sys.A + sys.Abar;
    const Mat<Scalar> Bsum = sys.B + sys.Bbar;
    const auto& A = sys.A;
    const auto& Ab = sys.Abar;
    const auto& B = sys.B;
    const auto& Bb = sys.Bbar;
    const auto& C = sys.C;
    const auto& Cb = sys.Cbar;
    const auto& D = sys.D;
    const auto& Db = sys.Dbar;

    const Mat<Scalar> d1 = cost.Qbar + P * Ab + A.transpose() * P1 + P1 * Asum
                           + C.transpose() * P * Cb + (P * B + C.transpose() * P * D) * Kb
                           + C.transpose() * P * Db * Ks + (P * Bb + P1 * Bsum) * Ks;
    const Mat<Scalar> d2 = P2 * A + Ab.transpose() * P + Asum.transpose() * P2
                           + Cb.transpose() * P * C + (P2 * B + Cb.transpose() * P * D) * K;
    const Mat<Scalar> d3 = P2 * Ab + P3 * Asum + Ab.transpose() * P1 + Asum.transpose() * P3
                           + Cb.transpose() * P * Cb + (P2 * B + Cb.transpose() * P * D) * Kb
                           + (Cb.transpose() * P * Db + P2 * Bb + P3 * Bsum) * Ks;

    Mat<Scalar> out(n, 4 * n);
    out << r.dP, d1, d2, d3;
    return out;
}

} // namespace detail

/// Integrates the three costate-split ODEs backward on sol's grid, alongside P so that
/// RK4 stages see consistent gains. Terminal values (Pbar_T, 0, 0).
template <typename Scalar>
[[nodiscard]] CostateSplit<Scalar> integrate_costate_split(const RiccatiSolution<Scalar>& sol,
                                                           const MeanFieldSystem<Scalar>& sys,
                                                           const CostSpec<Scalar>& cost)
{
    if (!solvability_check(sol).uniquelySolvable) {
        throw Error(ErrorKind::Validation,
                    "integrate_costate_split: Riccati solution is not uniquely solvable");
    }
    const auto n = sys.n();
    const std::size_t N = sol.size();
    const std::size_t steps = N - 1;
    const Scalar h = sol.step();

    CostateSplit<Scalar> split;
    split.grid = sol.grid;
    split.Pbar1.resize(N);
    split.Pbar2.resize(N);
    split.Pbar3.resize(N);

    Mat<Scalar> Y = Mat<Scalar>::Zero(n, 4 * n);
    Y.block(0, 0, n, n) = cost.Pterm;
    Y.block(0, n, n, n) = cost.Pbarterm;

    auto flow = [&sys, &cost](const Mat<Scalar>& S) { return detail::split_rhs(S, sys, cost); };
    auto project = [n](const Mat<Scalar>& S) {
        Mat<Scalar> out = S;
        out.block(0, 0, n, n) = symmetrize(S.block(0, 0, n, n));
        return out;
    };

    for (std::size_t j = 0; j <= steps; ++j) {
        const std::size_t k = steps - j;
        if (j > 0) {
            Y = rk4_step(Y, h, flow, project);
        }
        const double t = static_cast<double>(sol.grid[k]);
        detail::check_blow_up(Y, t);
        split.Pbar1[k] = Y.block(0, n, n, n);
        split.Pbar2[k] = Y.block(0, 2 * n, n, n);
        split.Pbar3[k] = Y.block(0, 3 * n, n, n);
        const Mat<Scalar> sum = split.Pbar1[k] + split.Pbar2[k] + split.Pbar3[k];
        const double dev = static_cast<double>((sum - sol.Pbar[k]).norm())
                           / (1.0 + static_cast<double>(sol.Pbar[k].norm()));
        split.maxSumDeviation = std::max(split.maxSumDeviation, dev);
    }
    return split;
}

template <typename Scalar = double>
struct EquilibriumResidual {
    Vec<Scalar> pathwise; ///< Ups1 (u - Eu) + M1 (x - Ex)
    Vec<Scalar> mean;     ///< Ups2 Eu + M2 Ex
};

/// Residual of the first-order optimality condition with u = K x + Kbar xmean.
template <typename Scalar>
[[nodiscard]] EquilibriumResidual<Scalar> equilibrium_residual(const Vec<Scalar>& x,
                                                               const Vec<Scalar>& xmean,
                                                               const Gains<Scalar>& g,
                                                               const RiccatiAux<Scalar>& aux)
{
    const Vec<Scalar> u = g.K * x + g.Kbar * xmean;
    const Vec<Scalar> Eu = (g.K + g.Kbar) * xmean;
    return {aux.Ups1 * (u - Eu) + aux.M1 * (x - xmean), aux.Ups2 * Eu + aux.M2 * xmean};
}

/// Auxiliary quantities recorded at grid index k, in the form equilibrium_residual expects.
template <typename Scalar>
[[nodiscard]] RiccatiAux<Scalar> aux_at(const RiccatiSolution<Scalar>& sol, std::size_t k)
{
    RiccatiAux<Scalar> aux;
    aux.Ups1 = sol.Ups1[k];
    aux.Ups2 = sol.Ups2[k];
    aux.M1 = sol.M1[k];
    aux.M2 = sol.M2[k];
    aux.Ups1Pinv = symmetric_pseudo_inverse(aux.Ups1);
    aux.Ups2Pinv = symmetric_pseudo_inverse(aux.Ups2);
    aux.regular = sol.regular[k];
    return aux;
}

} // namespace mflq
