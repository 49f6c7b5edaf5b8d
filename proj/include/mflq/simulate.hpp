#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "mflq/linalg.hpp"
#include "mflq/riccati.hpp"
#include "mflq/types.hpp"

namespace mflq {

struct Deterministic {
    VecXd x0;
};

struct Gaussian {
    VecXd mean;
    MatXd covariance;
};

using InitialState = std::variant<Deterministic, Gaussian>;

struct SimConfig {
    double dt = 1e-3;
    double T = 1.0;
    std::size_t paths = 5000;
    std::uint64_t seed = 0;
    InitialState initial = Deterministic{};
    /// Number of evenly spaced points at which full path states are kept (plus t = 0).
    std::size_t records = 100;
    /// 0 = one worker per hardware thread. Results do not depend on this.
    unsigned threads = 0;

    void check(Eigen::Index n) const;
    [[nodiscard]] std::size_t steps() const;
    [[nodiscard]] VecXd initial_mean() const;
};

/// Gains as a function of time; piecewise constant over each simulation step.
using GainSchedule = std::function<Gainsd(double t)>;

/// Left-continuous lookup into a finite-horizon solution: gains at the last grid
/// point not after t.
[[nodiscard]] GainSchedule schedule_from(const RiccatiSolution<double>& sol);
[[nodiscard]] GainSchedule constant_schedule(const Gainsd& g);

struct MeanTrajectory {
    std::vector<double> t;
    MatXd x; ///< n x (N+1), Ex_t
    MatXd u; ///< m x (N+1), Eu_t
};

struct Ensemble {
    std::vector<double> t;            ///< uniform grid 0 .. T
    MeanTrajectory mean;              ///< propagated mean, fed to the controller
    MatXd empiricalMean;              ///< n x (N+1), cross-path average of x
    std::vector<double> secondMoment; ///< E(x'x) on the grid
    std::vector<double> secondMomentSe;

    std::vector<std::size_t> recordIndex; ///< grid indices of the stored states
    std::vector<MatXd> states;            ///< per record point, n x paths

    // Per-path trapezoid integrals and terminal states for cost evaluation.
    std::vector<MatXd> intXX; ///< int x x' dt
    std::vector<MatXd> intUU; ///< int u u' dt
    MatXd terminal;           ///< n x paths
    MatXd intMeanXX;          ///< int Ex Ex' dt
    MatXd intMeanUU;          ///< int Eu Eu' dt

    [[nodiscard]] std::size_t paths() const { return intXX.size(); }
    [[nodiscard]] double dt() const { return t.size() > 1 ? t[1] - t[0] : 0.0; }
};

/// RK4 of d Ex/dt = [(A + Abar) + (B + Bbar)(K + Kbar)] Ex on the grid of cfg.
[[nodiscard]] MeanTrajectory propagate_mean(const MeanFieldSystemd& sys,
                                            const GainSchedule& g,
                                            const VecXd& x0,
                                            const SimConfig& cfg);
[[nodiscard]] MeanTrajectory propagate_mean(const MeanFieldSystemd& sys,
                                            const std::optional<Gainsd>& g,
                                            const VecXd& x0,
                                            const SimConfig& cfg);

/// Euler-Maruyama paths under u = K x + Kbar Ex (u = 0 without gains). Path i draws
/// from its own generator seeded from (seed, i). Throws Numerical on a non-finite state.
[[nodiscard]] Ensemble simulate_paths(const MeanFieldSystemd& sys,
                                      const GainSchedule& g,
                                      const SimConfig& cfg);
[[nodiscard]] Ensemble simulate_paths(const MeanFieldSystemd& sys,
                                      const std::optional<Gainsd>& g,
                                      const SimConfig& cfg);

struct CostEstimate {
    double estimate = 0.0;
    double standardError = 0.0;
    std::vector<double> perPath;
};

[[nodiscard]] CostEstimate estimate_cost(const Ensemble& ens,
                                         const CostSpecd& cost,
                                         bool includeTerminal);

/// Mean and standard error of the per-path difference b - a (common random numbers).
[[nodiscard]] CostEstimate paired_difference(const CostEstimate& a, const CostEstimate& b);

struct LyapunovTrace {
    std::vector<double> t;
    std::vector<double> V;
    std::vector<double> standardError;
};

/// V(t) = E(x'Px) + Ex'Pbar Ex at the record points.
[[nodiscard]] LyapunovTrace lyapunov_trace(const Ensemble& ens, const MatXd& P, const MatXd& Pbar);

/// CSV with columns t, mean_norm_sq, second_moment and optionally V, one row per record point.
void write_ensemble_csv(std::ostream& os, const Ensemble& ens, const LyapunovTrace* V = nullptr);

} // namespace mflq
