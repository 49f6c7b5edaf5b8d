#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mflq/linalg.hpp"
#include "mflq/mfcore.hpp"
#include "mflq/riccati.hpp"
#include "mflq/spectra.hpp"
#include "mflq/types.hpp"

namespace mflq {

enum class Definiteness { PositiveDefinite, PositiveSemiDefinite, Indefinite };

[[nodiscard]] inline const char* to_string(Definiteness d)
{
    switch (d) {
    case Definiteness::PositiveDefinite: return "PositiveDefinite";
    case Definiteness::PositiveSemiDefinite: return "PositiveSemiDefinite";
    case Definiteness::Indefinite: return "Indefinite";
    }
    return "unknown";
}

template <typename Scalar = double>
struct AreResiduals {
    Mat<Scalar> res1, res2;
    bool regular = true;
};

/// Right-hand sides of the stationary coupled equations at (P, Pbar); zero at a solution.
template <typename Scalar>
[[nodiscard]] AreResiduals<Scalar> are_residuals(const Mat<Scalar>& P,
                                                 const Mat<Scalar>& Pbar,
                                                 const MeanFieldSystem<Scalar>& sys,
                                                 const CostSpec<Scalar>& cost)
{
    auto r = coupled_rhs(P, Pbar, sys, cost);
    return {std::move(r.dP), std::move(r.dPbar), r.aux.regular};
}

/// Classifies (P, P + Pbar): PD needs both minimum eigenvalues above 1e-8 (1 + ||.||),
/// PSD needs both above -1e-8 (1 + ||.||).
template <typename Scalar>
[[nodiscard]] Definiteness classify(const Mat<Scalar>& P, const Mat<Scalar>& Pbar)
{
    const Mat<Scalar> S = P + Pbar;
    const double lp = static_cast<double>(min_eigenvalue(P));
    const double ls = static_cast<double>(min_eigenvalue(S));
    const double sp = 1e-8 * (1.0 + static_cast<double>(P.norm()));
    const double ss = 1e-8 * (1.0 + static_cast<double>(S.norm()));
    if (lp > sp && ls > ss) {
        return Definiteness::PositiveDefinite;
    }
    if (lp >= -sp && ls >= -ss) {
        return Definiteness::PositiveSemiDefinite;
    }
    return Definiteness::Indefinite;
}

/// Gains of the stationary feedback u = K x + Kbar Ex. Throws Irregular when the
/// regular condition fails at (P, Pbar).
template <typename Scalar>
[[nodiscard]] Gains<Scalar> stationary_gains(const Mat<Scalar>& P,
                                             const Mat<Scalar>& Pbar,
                                             const MeanFieldSystem<Scalar>& sys,
                                             const CostSpec<Scalar>& cost)
{
    const auto aux = riccati_aux(P, Pbar, sys, cost);
    if (!aux.regular) {
        throw Error(ErrorKind::Irregular, "stationary_gains: regular condition fails");
    }
    return aux.gains();
}

template <typename Scalar = double>
struct AreSolution {
    Mat<Scalar> P, Pbar;
    Mat<Scalar> Ups1, Ups2, M1, M2;
    Gains<Scalar> gains;
    Definiteness classification = Definiteness::Indefinite;
    double horizonUsed = 0.0;
    std::pair<double, double> residualNorms{0.0, 0.0};
};

struct AreOptions {
    double tol = 1e-9;
    double maxHorizon = 16384.0; // 2^14
    double initialHorizon = 8.0;
    /// RK4 steps per unit time; 0 selects default_riccati_steps. Equilibria of the flow are
    /// fixed points of every RK4 step, so the step only has to keep the scheme stable.
    double stepsPerUnit = 100.0;
};

/// Stationary solution as the limit of the finite-horizon solution with zero terminal
/// weights, doubling the horizon until P_0 and P_0 + Pbar_0 both settle. Throws
/// NonConvergent when the maximum horizon is reached or the integration diverges.
template <typename Scalar>
[[nodiscard]] AreSolution<Scalar> solve_coupled_are(const MeanFieldSystem<Scalar>& sys,
                                                    const CostSpec<Scalar>& costIn,
                                                    const AreOptions& opt = {})
{
    const auto report = validate(sys, costIn, HorizonMode::Infinite);
    if (!report.ok()) {
        throw Error(ErrorKind::Validation, "solve_coupled_are: " + report.summary());
    }
    const CostSpec<Scalar> cost = costIn.without_terminal();
    auto steps_for = [&opt](double T) {
        return opt.stepsPerUnit > 0.0
                   ? std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(opt.stepsPerUnit * T)))
                   : default_riccati_steps(T);
    };
    auto solve_at = [&](double T) {
        try {
            return integrate_to_origin(sys, cost, T, steps_for(T));
        } catch (const Error& e) {
            if (e.kind() == ErrorKind::Diverged) {
                throw Error(ErrorKind::NonConvergent,
                            "solve_coupled_are: finite-horizon solution diverges at horizon "
                                + format_number(T) + " (" + e.what() + ")");
            }
            throw;
        }
    };

    double T = opt.initialHorizon;
    auto prev = solve_at(T);
    for (;;) {
        const double T2 = 2.0 * T;
        if (T2 > opt.maxHorizon) {
            throw Error(ErrorKind::NonConvergent,
                        "solve_coupled_are: no convergence up to horizon "
                            + format_number(opt.maxHorizon));
        }
        auto next = solve_at(T2);
        const Mat<Scalar> S1 = prev.first + prev.second;
        const Mat<Scalar> S2 = next.first + next.second;
        const double dP = static_cast<double>((next.first - prev.first).norm());
        const double dS = static_cast<double>((S2 - S1).norm());
        const bool settled = dP < opt.tol * (1.0 + static_cast<double>(prev.first.norm()))
                             && dS < opt.tol * (1.0 + static_cast<double>(S1.norm()));
        if (settled) {
            AreSolution<Scalar> sol;
            sol.P = next.first;
            sol.Pbar = next.second;
            const auto aux = riccati_aux(sol.P, sol.Pbar, sys, cost);
            sol.Ups1 = aux.Ups1;
            sol.Ups2 = aux.Ups2;
            sol.M1 = aux.M1;
            sol.M2 = aux.M2;
            sol.gains = aux.gains();
            sol.classification = classify(sol.P, sol.Pbar);
            sol.horizonUsed = T2;
            const auto res = are_residuals(sol.P, sol.Pbar, sys, cost);
            sol.residualNorms = {static_cast<double>(res.res1.norm()),
                                 static_cast<double>(res.res2.norm())};
            return sol;
        }
        prev = std::move(next);
        T = T2;
    }
}

namespace detail {

/// Real roots of a2 x^2 + a1 x + a0, with a linear fallback when a2 vanishes.
template <typename Scalar>
[[nodiscard]] std::vector<Scalar> real_quadratic_roots(Scalar a2, Scalar a1, Scalar a0)
{
    using std::abs;
    using std::sqrt;
    const Scalar eps = Scalar(1e-12);
    std::vector<Scalar> r;
    const Scalar scale = std::max({abs(a2), abs(a1), abs(a0)});
    if (scale == Scalar(0)) {
        throw Error(ErrorKind::Validation, "scalar_root_oracle: degenerate polynomial");
    }
    if (abs(a2) <= eps * scale) {
        if (abs(a1) > eps * scale) {
            r.push_back(-a0 / a1);
        }
        return r;
    }
    const Scalar disc = a1 * a1 - Scalar(4) * a2 * a0;
    if (disc < Scalar(0)) {
        return r;
    }
    // Cancellation-free pair.
    const Scalar q = Scalar(-0.5) * (a1 + (a1 < Scalar(0) ? -sqrt(disc) : sqrt(disc)));
    r.push_back(q / a2);
    r.push_back(q != Scalar(0) ? a0 / q : Scalar(0));
    if (abs(r[0] - r[1]) <= eps * std::max(Scalar(1), abs(r[0]))) {
        r.pop_back();
    }
    return r;
}

template <typename Scalar>
void require_scalar(const MeanFieldSystem<Scalar>& sys)
{
    if (sys.n() != 1 || sys.m() != 1) {
        throw Error(ErrorKind::Validation, "scalar_root_oracle: requires n = m = 1");
    }
}

} // namespace detail

/// Real roots P of the first stationary equation of a scalar problem. Clearing
/// Ups1 = R + D^2 P gives
///   ((2A + C^2) D^2 - (B + D C)^2) P^2 + (Q D^2 + (2A + C^2) R) P + Q R = 0.
template <typename Scalar>
[[nodiscard]] std::vector<Scalar> scalar_p_roots(const MeanFieldSystem<Scalar>& sys,
                                                 const CostSpec<Scalar>& cost)
{
    detail::require_scalar(sys);
    const Scalar A = sys.A(0, 0), B = sys.B(0, 0), C = sys.C(0, 0), D = sys.D(0, 0);
    const Scalar Q = cost.Q(0, 0), R = cost.R(0, 0);
    const Scalar Ceff = Scalar(2) * A + C * C;
    return detail::real_quadratic_roots<Scalar>(Ceff * D * D - (B + D * C) * (B + D * C),
                                                Q * D * D + Ceff * R, Q * R);
}

/// All real stationary pairs (P, Pbar) of a scalar problem in closed form.
///
/// For each root P of scalar_p_roots, with S = P + Pbar, Bs = B + Bbar,
/// e = (D + Dbar) P (C + Cbar) and Ups2 = R + Rbar + (D + Dbar)^2 P, clearing Ups2 from
/// the second equation gives
///   -Bs^2 S^2 + (2 (A + Abar) Ups2 - 2 Bs e) S + Ups2 k0 - e^2 = 0,
///   k0 = Qbar + 2 Abar P + 2 C Cbar P + Cbar^2 P + M1^2 / Ups1 - 2 (A + Abar) P.
/// Roots that make Ups1 or Ups2 vanish are discarded.
template <typename Scalar>
[[nodiscard]] std::vector<std::pair<Scalar, Scalar>> scalar_root_oracle(
    const MeanFieldSystem<Scalar>& sys,
    const CostSpec<Scalar>& cost)
{
    using std::abs;
    detail::require_scalar(sys);
    const Scalar A = sys.A(0, 0), Ab = sys.Abar(0, 0), B = sys.B(0, 0), Bb = sys.Bbar(0, 0);
    const Scalar C = sys.C(0, 0), Cb = sys.Cbar(0, 0), D = sys.D(0, 0), Db = sys.Dbar(0, 0);
    const Scalar Qb = cost.Qbar(0, 0), R = cost.R(0, 0), Rb = cost.Rbar(0, 0);
    const Scalar eps = Scalar(1e-12);

    std::vector<std::pair<Scalar, Scalar>> out;
    for (const Scalar P : scalar_p_roots(sys, cost)) {
        const Scalar Ups1 = R + D * D * P;
        const Scalar Ds = D + Db;
        const Scalar Ups2 = R + Rb + Ds * Ds * P;
        if (abs(Ups1) <= eps || abs(Ups2) <= eps) {
            continue;
        }
        const Scalar M1 = B * P + D * P * C;
        const Scalar Asum = A + Ab;
        const Scalar Bs = B + Bb;
        const Scalar e = Ds * P * (C + Cb);
        const Scalar k0 = Qb + Scalar(2) * Ab * P + Scalar(2) * C * Cb * P + Cb * Cb * P
                          + M1 * M1 / Ups1 - Scalar(2) * Asum * P;
        std::vector<Scalar> Sroots;
        try {
            Sroots = detail::real_quadratic_roots<Scalar>(
                -Bs * Bs, Scalar(2) * Asum * Ups2 - Scalar(2) * Bs * e, Ups2 * k0 - e * e);
        } catch (const Error&) {
            continue;
        }
        for (const Scalar S : Sroots) {
            out.emplace_back(P, S - P);
        }
    }
    return out;
}

/// The stationary equations rewritten with the closed-loop matrices of the given gains:
///   Q_cl + A_cl' P + P A_cl + C_cl' P C_cl  and
///   Qbar_cl + Abar_cl' (P + Pbar) + (P + Pbar) Abar_cl + Cbar_cl' P Cbar_cl.
template <typename Scalar>
[[nodiscard]] std::pair<Mat<Scalar>, Mat<Scalar>> closed_loop_lyapunov_residual(
    const Mat<Scalar>& P,
    const Mat<Scalar>& Pbar,
    const Gains<Scalar>& g,
    const MeanFieldSystem<Scalar>& sys,
    const CostSpec<Scalar>& cost)
{
    const auto cl = closed_loop(sys, cost, g);
    const Mat<Scalar> S = P + Pbar;
    return {cl.Q + cl.A.transpose() * P + P * cl.A + cl.C.transpose() * P * cl.C,
            cl.Qbar + cl.Abar.transpose() * S + S * cl.Abar + cl.Cbar.transpose() * P * cl.Cbar};
}

enum class Verdict {
    StabilizableDetectable,
    StabilizableObservable,
    NotStabilizable,
    AssumptionViolated,
};

[[nodiscard]] inline const char* to_string(Verdict v)
{
    switch (v) {
    case Verdict::StabilizableDetectable: return "StabilizableDetectable";
    case Verdict::StabilizableObservable: return "StabilizableObservable";
    case Verdict::NotStabilizable: return "NotStabilizable";
    case Verdict::AssumptionViolated: return "AssumptionViolated";
    }
    return "unknown";
}

[[nodiscard]] inline bool is_stabilizable(Verdict v)
{
    return v == Verdict::StabilizableDetectable || v == Verdict::StabilizableObservable;
}

template <typename Scalar = double>
struct StabilizationReport {
    Verdict verdict = Verdict::AssumptionViolated;
    ValidationReport validation;
    bool observable = false;
    bool detectable = false;
    std::optional<AreSolution<Scalar>> are;
    /// Closed-loop moment-generator abscissa under the ARE gains (NaN without a solution).
    double abscissa = std::numeric_limits<double>::quiet_NaN();
    /// Verdict agrees with the sign of the abscissa.
    bool consistent = true;
    std::string detail;
};

struct VerdictOptions {
    AreOptions are;
    double gramianHorizon = 64.0;
    double gramianTol = 1e-8;
};

/// Decides mean-square stabilizability: detectability / observability of the open loop,
/// then the sign structure of the stationary solution, cross-checked against the
/// closed-loop moment generator.
template <typename Scalar>
[[nodiscard]] StabilizationReport<Scalar> stabilization_verdict(const MeanFieldSystem<Scalar>& sys,
                                                                const CostSpec<Scalar>& cost,
                                                                const VerdictOptions& opt = {})
{
    StabilizationReport<Scalar> rep;
    rep.validation = validate(sys, cost, HorizonMode::Infinite);
    if (!rep.validation.ok()) {
        rep.verdict = Verdict::AssumptionViolated;
        rep.detail = rep.validation.summary();
        return rep;
    }
    const auto open = open_loop(sys, cost);
    rep.observable = exact_observability_test(open, opt.gramianHorizon, opt.gramianTol);
    rep.detectable = rep.observable || exact_detectability_test(open, opt.gramianHorizon, opt.gramianTol);
    if (!rep.detectable) {
        rep.verdict = Verdict::AssumptionViolated;
        rep.detail = "open loop is not exactly detectable";
        return rep;
    }

    try {
        rep.are = solve_coupled_are(sys, cost, opt.are);
    } catch (const Error& e) {
        if (e.kind() != ErrorKind::NonConvergent && e.kind() != ErrorKind::Irregular) {
            throw;
        }
        rep.verdict = Verdict::NotStabilizable;
        rep.detail = e.what();
        return rep;
    }

    const auto& sol = *rep.are;
    rep.abscissa = ms_stability(lift(closed_loop(sys, cost, sol.gains))).abscissa;
    const bool needPd = rep.observable;
    const bool signOk = needPd ? sol.classification == Definiteness::PositiveDefinite
                               : sol.classification != Definiteness::Indefinite;
    if (signOk) {
        rep.verdict = needPd ? Verdict::StabilizableObservable : Verdict::StabilizableDetectable;
        rep.detail = std::string("stationary solution is ") + to_string(sol.classification);
    } else {
        rep.verdict = Verdict::NotStabilizable;
        rep.detail = std::string("stationary solution is ") + to_string(sol.classification);
    }
    rep.consistent = is_stabilizable(rep.verdict) == (rep.abscissa < -kStabilityMargin);
    return rep;
}

} // namespace mflq
