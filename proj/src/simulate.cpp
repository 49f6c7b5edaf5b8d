#include "mflq/simulate.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <iomanip>
#include <mutex>
#include <ostream>
#include <random>
#include <thread>

#include "mflq/rk4.hpp"

namespace mflq {

namespace {

constexpr std::size_t kChunk = 64;

std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

std::mt19937_64 path_generator(std::uint64_t seed, std::size_t path)
{
    return std::mt19937_64(splitmix64(splitmix64(seed) ^ static_cast<std::uint64_t>(path)));
}

MatXd covariance_root(const MatXd& S)
{
    Eigen::SelfAdjointEigenSolver<MatXd> es(symmetrize(S));
    const VecXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * root.asDiagonal();
}

// Trapezoid weight of grid point k out of 0..N.
double trap_weight(std::size_t k, std::size_t N, double h)
{
    return (k == 0 || k == N) ? 0.5 * h : h;
}

std::vector<std::size_t> record_points(std::size_t N, std::size_t records)
{
    std::vector<std::size_t> idx{0};
    for (std::size_t r = 1; r <= records; ++r) {
        const auto k = static_cast<std::size_t>(std::llround(static_cast<double>(r) * N / records));
        if (k > idx.back()) {
            idx.push_back(k);
        }
    }
    return idx;
}

struct ChunkStats {
    MatXd sumX;                // n x (N+1)
    std::vector<double> sumSq; // sum of x'x
    std::vector<double> sumSq2;
};

} // namespace

void SimConfig::check(Eigen::Index n) const
{
    if (!(dt > 0.0) || !std::isfinite(dt)) {
        throw Error(ErrorKind::Validation, "simulation.dt: must be positive");
    }
    if (!(T >= dt * (1.0 - 1e-12)) || !std::isfinite(T)) {
        throw Error(ErrorKind::Validation, "simulation.T: must be at least dt");
    }
    if (paths < 1) {
        throw Error(ErrorKind::Validation, "simulation.paths: must be at least 1");
    }
    if (records < 1) {
        throw Error(ErrorKind::Validation, "simulation.records: must be at least 1");
    }
    if (const auto* d = std::get_if<Deterministic>(&initial)) {
        detail::require_shape(d->x0, n, 1, "simulation.x0");
    } else {
        const auto& g = std::get<Gaussian>(initial);
        detail::require_shape(g.mean, n, 1, "simulation.x0_mean");
        detail::require_shape(g.covariance, n, n, "simulation.x0_covariance");
        if (!is_psd(g.covariance)) {
            throw Error(ErrorKind::Validation, "simulation.x0_covariance: not positive semi-definite");
        }
    }
}

std::size_t SimConfig::steps() const
{
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(T / dt)));
}

VecXd SimConfig::initial_mean() const
{
    if (const auto* d = std::get_if<Deterministic>(&initial)) {
        return d->x0;
    }
    return std::get<Gaussian>(initial).mean;
}

GainSchedule constant_schedule(const Gainsd& g)
{
    return [g](double) { return g; };
}

GainSchedule schedule_from(const RiccatiSolution<double>& sol)
{
    // Captures by reference; sol must outlive the schedule.
    return [&sol](double t) {
        const auto& grid = sol.grid;
        auto it = std::upper_bound(grid.begin(), grid.end(), t + 1e-12 * std::max(1.0, std::abs(t)));
        const auto k = it == grid.begin() ? 0 : static_cast<std::size_t>(it - grid.begin()) - 1;
        return sol.gains[std::min(k, grid.size() - 1)];
    };
}

MeanTrajectory propagate_mean(const MeanFieldSystemd& sys,
                              const GainSchedule& g,
                              const VecXd& x0,
                              const SimConfig& cfg)
{
    detail::require_shape(x0, sys.n(), 1, "x0");
    const std::size_t N = cfg.steps();
    const double h = cfg.T / static_cast<double>(N);
    MeanTrajectory mt;
    mt.t.resize(N + 1);
    mt.x.resize(sys.n(), static_cast<Eigen::Index>(N + 1));
    mt.u.resize(sys.m(), static_cast<Eigen::Index>(N + 1));
    VecXd x = x0;
    const MatXd As = sys.A + sys.Abar;
    const MatXd Bs = sys.B + sys.Bbar;
    for (std::size_t k = 0;; ++k) {
        const double t = static_cast<double>(k) * h;
        const Gainsd gk = g(t);
        const MatXd Ks = gk.total();
        mt.t[k] = t;
        mt.x.col(static_cast<Eigen::Index>(k)) = x;
        mt.u.col(static_cast<Eigen::Index>(k)) = Ks * x;
        if (k == N) {
            break;
        }
        const MatXd F = As + Bs * Ks;
        x = rk4_step(x, h, [&F](const VecXd& y) -> VecXd { return F * y; });
    }
    mt.t[N] = cfg.T;
    return mt;
}

MeanTrajectory propagate_mean(const MeanFieldSystemd& sys,
                              const std::optional<Gainsd>& g,
                              const VecXd& x0,
                              const SimConfig& cfg)
{
    return propagate_mean(sys, constant_schedule(g ? *g : Gainsd{MatXd::Zero(sys.m(), sys.n()),
                                                                 MatXd::Zero(sys.m(), sys.n())}),
                          x0, cfg);
}

Ensemble simulate_paths(const MeanFieldSystemd& sys, const GainSchedule& g, const SimConfig& cfg)
{
    sys.check();
    cfg.check(sys.n());
    const Eigen::Index n = sys.n();
    const Eigen::Index m = sys.m();
    const std::size_t N = cfg.steps();
    const double h = cfg.T / static_cast<double>(N);
    const double sqh = std::sqrt(h);
    const std::size_t P = cfg.paths;

    // Gains and mean-driven offsets are shared by all paths; evaluate them once.
    std::vector<Gainsd> gains(N + 1);
    for (std::size_t k = 0; k <= N; ++k) {
        gains[k] = g(static_cast<double>(k) * h);
        detail::require_shape(gains[k].K, m, n, "gains.K");
        detail::require_shape(gains[k].Kbar, m, n, "gains.Kbar");
    }

    Ensemble ens;
    ens.mean = propagate_mean(sys, g, cfg.initial_mean(), cfg);
    ens.t = ens.mean.t;
    ens.recordIndex = record_points(N, cfg.records);
    ens.states.assign(ens.recordIndex.size(), MatXd(n, static_cast<Eigen::Index>(P)));
    ens.intXX.assign(P, MatXd::Zero(n, n));
    ens.intUU.assign(P, MatXd::Zero(m, m));
    ens.terminal.resize(n, static_cast<Eigen::Index>(P));

    MatXd driftOffset(n, static_cast<Eigen::Index>(N + 1));
    MatXd diffOffset(n, static_cast<Eigen::Index>(N + 1));
    MatXd uOffset(m, static_cast<Eigen::Index>(N + 1));
    for (std::size_t k = 0; k <= N; ++k) {
        const auto kk = static_cast<Eigen::Index>(k);
        const VecXd xb = ens.mean.x.col(kk);
        const VecXd ub = ens.mean.u.col(kk);
        uOffset.col(kk) = gains[k].Kbar * xb;
        driftOffset.col(kk) = sys.Abar * xb + sys.Bbar * ub;
        diffOffset.col(kk) = sys.Cbar * xb + sys.Dbar * ub;
    }

    const std::size_t chunks = (P + kChunk - 1) / kChunk;
    std::vector<ChunkStats> stats(chunks);
    std::vector<std::exception_ptr> errors(chunks);
    const bool gaussian = std::holds_alternative<Gaussian>(cfg.initial);
    const MatXd L = gaussian ? covariance_root(std::get<Gaussian>(cfg.initial).covariance) : MatXd();

    auto run_chunk = [&](std::size_t c) {
        const std::size_t first = c * kChunk;
        const auto cols = static_cast<Eigen::Index>(std::min(kChunk, P - first));
        // One generator and one distribution per path: the distribution caches a
        // second variate, so sharing it would leak draws between paths.
        std::vector<std::mt19937_64> rng;
        std::vector<std::normal_distribution<double>> normal(static_cast<std::size_t>(cols));
        rng.reserve(static_cast<std::size_t>(cols));
        MatXd X(n, cols);
        for (Eigen::Index j = 0; j < cols; ++j) {
            rng.push_back(path_generator(cfg.seed, first + static_cast<std::size_t>(j)));
            if (gaussian) {
                VecXd xi(n);
                for (Eigen::Index i = 0; i < n; ++i) {
                    xi(i) = normal[static_cast<std::size_t>(j)](rng.back());
                }
                X.col(j) = std::get<Gaussian>(cfg.initial).mean + L * xi;
            } else {
                X.col(j) = std::get<Deterministic>(cfg.initial).x0;
            }
        }
        ChunkStats& st = stats[c];
        st.sumX = MatXd::Zero(n, static_cast<Eigen::Index>(N + 1));
        st.sumSq.assign(N + 1, 0.0);
        st.sumSq2.assign(N + 1, 0.0);

        MatXd U(m, cols), drift(n, cols), diff(n, cols);
        VecXd dW(cols);
        std::size_t nextRecord = 0;
        for (std::size_t k = 0;; ++k) {
            const auto kk = static_cast<Eigen::Index>(k);
            U.noalias() = gains[k].K * X;
            U.colwise() += uOffset.col(kk);

            st.sumX.col(kk) = X.rowwise().sum();
            const double w = trap_weight(k, N, h);
            for (Eigen::Index j = 0; j < cols; ++j) {
                const double q = X.col(j).squaredNorm();
                st.sumSq[k] += q;
                st.sumSq2[k] += q * q;
                const auto p = first + static_cast<std::size_t>(j);
                ens.intXX[p].noalias() += w * X.col(j) * X.col(j).transpose();
                ens.intUU[p].noalias() += w * U.col(j) * U.col(j).transpose();
            }
            if (nextRecord < ens.recordIndex.size() && ens.recordIndex[nextRecord] == k) {
                ens.states[nextRecord].middleCols(static_cast<Eigen::Index>(first), cols) = X;
                ++nextRecord;
            }
            if (k == N) {
                break;
            }

            drift.noalias() = sys.A * X;
            drift.noalias() += sys.B * U;
            drift.colwise() += driftOffset.col(kk);
            diff.noalias() = sys.C * X;
            diff.noalias() += sys.D * U;
            diff.colwise() += diffOffset.col(kk);
            for (Eigen::Index j = 0; j < cols; ++j) {
                const auto jj = static_cast<std::size_t>(j);
                dW(j) = sqh * normal[jj](rng[jj]);
            }
            X += h * drift + diff * dW.asDiagonal();
            if (!X.allFinite()) {
                Eigen::Index bad = 0;
                while (bad < cols && X.col(bad).allFinite()) {
                    ++bad;
                }
                throw Error(ErrorKind::Numerical,
                            "simulate_paths: non-finite state on path "
                                + std::to_string(first + static_cast<std::size_t>(bad)) + " at step "
                                + std::to_string(k + 1));
            }
        }
        ens.terminal.middleCols(static_cast<Eigen::Index>(first), cols) = X;
    };

    unsigned workers = cfg.threads ? cfg.threads : std::max(1u, std::thread::hardware_concurrency());
    workers = static_cast<unsigned>(std::min<std::size_t>(workers, chunks));
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t c; (c = next.fetch_add(1)) < chunks;) {
            try {
                run_chunk(c);
            } catch (...) {
                errors[c] = std::current_exception();
            }
        }
    };
    if (workers <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (unsigned w = 0; w < workers; ++w) {
            pool.emplace_back(worker);
        }
        for (auto& t : pool) {
            t.join();
        }
    }
    for (const auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }

    // Merge in chunk order so the result does not depend on the thread count.
    ens.empiricalMean = MatXd::Zero(n, static_cast<Eigen::Index>(N + 1));
    std::vector<double> sumSq(N + 1, 0.0), sumSq2(N + 1, 0.0);
    for (const auto& st : stats) {
        ens.empiricalMean += st.sumX;
        for (std::size_t k = 0; k <= N; ++k) {
            sumSq[k] += st.sumSq[k];
            sumSq2[k] += st.sumSq2[k];
        }
    }
    const auto Pd = static_cast<double>(P);
    ens.empiricalMean /= Pd;
    ens.secondMoment.resize(N + 1);
    ens.secondMomentSe.resize(N + 1);
    for (std::size_t k = 0; k <= N; ++k) {
        const double mean = sumSq[k] / Pd;
        ens.secondMoment[k] = mean;
        const double var = P > 1 ? std::max(0.0, (sumSq2[k] - Pd * mean * mean) / (Pd - 1.0)) : 0.0;
        ens.secondMomentSe[k] = std::sqrt(var / Pd);
    }

    ens.intMeanXX = MatXd::Zero(n, n);
    ens.intMeanUU = MatXd::Zero(m, m);
    for (std::size_t k = 0; k <= N; ++k) {
        const auto kk = static_cast<Eigen::Index>(k);
        const double w = trap_weight(k, N, h);
        ens.intMeanXX.noalias() += w * ens.mean.x.col(kk) * ens.mean.x.col(kk).transpose();
        ens.intMeanUU.noalias() += w * ens.mean.u.col(kk) * ens.mean.u.col(kk).transpose();
    }
    return ens;
}

Ensemble simulate_paths(const MeanFieldSystemd& sys,
                        const std::optional<Gainsd>& g,
                        const SimConfig& cfg)
{
    return simulate_paths(sys,
                          constant_schedule(g ? *g : Gainsd{MatXd::Zero(sys.m(), sys.n()),
                                                            MatXd::Zero(sys.m(), sys.n())}),
                          cfg);
}

namespace {

CostEstimate summarize(std::vector<double> perPath)
{
    CostEstimate ce;
    const auto P = static_cast<double>(perPath.size());
    double sum = 0.0;
    for (double v : perPath) {
        sum += v;
    }
    ce.estimate = sum / P;
    if (perPath.size() > 1) {
        double ss = 0.0;
        for (double v : perPath) {
            ss += (v - ce.estimate) * (v - ce.estimate);
        }
        ce.standardError = std::sqrt(ss / (P - 1.0) / P);
    }
    ce.perPath = std::move(perPath);
    return ce;
}

} // namespace

CostEstimate estimate_cost(const Ensemble& ens, const CostSpecd& cost, bool includeTerminal)
{
    if (ens.paths() == 0) {
        throw Error(ErrorKind::Validation, "estimate_cost: empty ensemble");
    }
    const Eigen::Index n = ens.intXX.front().rows();
    const Eigen::Index m = ens.intUU.front().rows();
    detail::require_shape(cost.Q, n, n, "cost.Q");
    detail::require_shape(cost.Qbar, n, n, "cost.Qbar");
    detail::require_shape(cost.R, m, m, "cost.R");
    detail::require_shape(cost.Rbar, m, m, "cost.Rbar");
    detail::require_shape(cost.Pterm, n, n, "cost.P_T");
    detail::require_shape(cost.Pbarterm, n, n, "cost.Pbar_T");

    double common = (cost.Qbar * ens.intMeanXX).trace() + (cost.Rbar * ens.intMeanUU).trace();
    if (includeTerminal) {
        const VecXd xT = ens.mean.x.col(ens.mean.x.cols() - 1);
        common += xT.dot(cost.Pbarterm * xT);
    }
    std::vector<double> perPath(ens.paths());
    for (std::size_t p = 0; p < ens.paths(); ++p) {
        double v = (cost.Q * ens.intXX[p]).trace() + (cost.R * ens.intUU[p]).trace() + common;
        if (includeTerminal) {
            const auto xT = ens.terminal.col(static_cast<Eigen::Index>(p));
            v += xT.dot(cost.Pterm * xT);
        }
        perPath[p] = v;
    }
    return summarize(std::move(perPath));
}

CostEstimate paired_difference(const CostEstimate& a, const CostEstimate& b)
{
    if (a.perPath.size() != b.perPath.size() || a.perPath.empty()) {
        throw Error(ErrorKind::Validation, "paired_difference: ensembles differ in size");
    }
    std::vector<double> d(a.perPath.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] = b.perPath[i] - a.perPath[i];
    }
    return summarize(std::move(d));
}

LyapunovTrace lyapunov_trace(const Ensemble& ens, const MatXd& P, const MatXd& Pbar)
{
    const Eigen::Index n = ens.mean.x.rows();
    detail::require_shape(P, n, n, "P");
    detail::require_shape(Pbar, n, n, "Pbar");
    LyapunovTrace lt;
    for (std::size_t r = 0; r < ens.recordIndex.size(); ++r) {
        const auto k = ens.recordIndex[r];
        const VecXd xb = ens.mean.x.col(static_cast<Eigen::Index>(k));
        const MatXd& X = ens.states[r];
        std::vector<double> v(static_cast<std::size_t>(X.cols()));
        for (Eigen::Index j = 0; j < X.cols(); ++j) {
            v[static_cast<std::size_t>(j)] = X.col(j).dot(P * X.col(j));
        }
        const auto ce = summarize(std::move(v));
        lt.t.push_back(ens.t[k]);
        lt.V.push_back(ce.estimate + xb.dot(Pbar * xb));
        lt.standardError.push_back(ce.standardError);
    }
    return lt;
}

void write_ensemble_csv(std::ostream& os, const Ensemble& ens, const LyapunovTrace* V)
{
    const auto old = os.precision(17);
    os << "t,mean_norm_sq,second_moment" << (V ? ",V" : "") << '\n';
    for (std::size_t r = 0; r < ens.recordIndex.size(); ++r) {
        const auto k = ens.recordIndex[r];
        os << ens.t[k] << ',' << ens.mean.x.col(static_cast<Eigen::Index>(k)).squaredNorm() << ','
           << ens.secondMoment[k];
        if (V) {
            os << ',' << V->V[r];
        }
        os << '\n';
    }
    os.precision(old);
}

} // namespace mflq
