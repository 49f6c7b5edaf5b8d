// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mflq/are.hpp"
#include "mflq/cli.hpp"
#include "mflq/simulate.hpp"
#include "test_util.hpp"

using namespace mflq;
using namespace mflq::test;

namespace {

// Reported values for the two worked examples.
constexpr double kEx2P[] = {-0.2356, -2.4679};
constexpr double kEx2Pbar[] = {4.7637, -0.0869};
constexpr double kEx2K = 0.2552;
constexpr double kEx1ReportedP = 18.4500;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0)
{
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
    bool pass = true;
    std::vector<std::string> notes;

    void require(bool ok, const std::string& what)
    {
        pass = pass && ok;
        notes.push_back(std::string(ok ? "" : "!") + what);
    }
};

std::string fmt(const char* f, double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

bool near(double a, double b, double tol)
{
    return std::abs(a - b) < tol;
}

SimConfig sim(double T, double dt, std::size_t paths, const VecXd& x0, std::uint64_t seed)
{
    SimConfig c;
    c.T = T;
    c.dt = dt;
    c.paths = paths;
    c.seed = seed;
    c.initial = Deterministic{x0};
    c.records = 10;
    return c;
}

// ---------------------------------------------------------------------------

Outcome example2_reproduction()
{
    Outcome o;
    const auto t0 = Clock::now();
    const auto sys = example2_system();
    const auto cost = example2_cost();

    const auto ps = scalar_p_roots(sys, cost);
    for (double target : kEx2P) {
        bool found = false;
        for (double p : ps) {
            found = found || near(p, target, 1e-3);
        }
        o.require(found, "P root " + fmt("%.4f", target));
    }
    const auto pairs = scalar_root_oracle(sys, cost);
    for (double target : kEx2Pbar) {
        bool found = false;
        for (const auto& [p, pb] : pairs) {
            if (near(p, kEx2P[0], 1e-3) && near(pb, target, 1e-3)) {
                const auto r = are_residuals(s1(p), s1(pb), sys, cost);
                found = found || (r.res1.norm() < 1e-10 && r.res2.norm() < 1e-10);
            }
        }
        o.require(found, "Pbar root " + fmt("%.4f", target));
    }
    bool secondRootPaired = false;
    for (const auto& [p, pb] : pairs) {
        secondRootPaired = secondRootPaired || near(p, kEx2P[1], 1e-3);
    }
    o.require(!secondRootPaired, "no real Pbar for P = -2.4679");

    const auto g = stationary_gains(s1(kEx2P[0]), s1(kEx2Pbar[0]), sys, cost);
    o.require(near(g.K(0, 0), kEx2K, 1e-3), "K = " + fmt("%.5f", g.K(0, 0)));
    const auto rep = stabilization_verdict(sys, cost);
    o.require(rep.verdict == Verdict::NotStabilizable, std::string("verdict ") + to_string(rep.verdict));
    const double dt = seconds_since(t0);
    o.require(dt < 1.0, "runtime " + fmt("%.2fs", dt));
    return o;
}

Outcome example1_reproduction()
{
    Outcome o;
    const auto t0 = Clock::now();
    const auto sys = example1_system();
    const auto cost = example1_cost();
    const auto sol = solve_coupled_are(sys, cost);
    o.require(sol.residualNorms.first < 1e-8 && sol.residualNorms.second < 1e-8,
              "residuals " + fmt("%.1e", sol.residualNorms.first) + "/" + fmt("%.1e", sol.residualNorms.second));
    o.require(sol.classification == Definiteness::PositiveDefinite, to_string(sol.classification));
    const double a = ms_stability(lift(closed_loop(sys, cost, sol.gains))).abscissa;
    o.require(a < 0.0, "abscissa " + fmt("%.6f", a));
    const auto ens = simulate_paths(sys, sol.gains, sim(10.0, 1e-3, 5000, VecXd::Ones(1), 1));
    o.require(ens.secondMoment.back() < 0.01,
              "MC E(x_T'x_T) = " + fmt("%.4f", ens.secondMoment.back()) + " +- "
                  + fmt("%.4f", ens.secondMomentSe.back()));
    const double dt = seconds_since(t0);
    o.require(dt < 30.0, "runtime " + fmt("%.1fs", dt));

    // The reproduce report shows the reported values next to the solver's.
    cli::Options opt;
    opt.command = "reproduce";
    std::ostringstream out, err;
    (void)cli::run(opt, out, err);
    bool shown = false;
    try {
        const auto doc = nlohmann::json::parse(out.str());
        for (const auto& c : doc["checks"]) {
            if (c["check"] == "ex1.P" && c.contains("reported") && c.contains("solver")) {
                shown = near(c["reported"].get<double>(), kEx1ReportedP, 1e-12)
                        && near(c["solver"].get<double>(), sol.P(0, 0), 1e-9);
            }
        }
    } catch (const std::exception&) {
        shown = false;
    }
    o.require(shown, "reproduce report lists reported and solver P");
    return o;
}

Outcome example2_divergence()
{
    Outcome o;
    const auto t0 = Clock::now();
    for (double Kbar : {-0.1106, -2.9453}) {
        const Gainsd g{s1(kEx2K), s1(Kbar)};
        const auto ens = simulate_paths(example2_system(), g, sim(5.0, 1e-3, 5000, VecXd::Ones(1), 2));
        const double ratio = ens.secondMoment.back() / ens.secondMoment.front();
        o.require(ratio > 10.0, "Kbar " + fmt("%.4f", Kbar) + ": growth " + fmt("%.2e", ratio));
        const double a = ms_stability(lift(closed_loop(example2_system(), example2_cost(), g))).abscissa;
        o.require(a > 0.0, "abscissa " + fmt("%.4f", a));
    }
    const double dt = seconds_since(t0);
    o.require(dt < 30.0, "runtime " + fmt("%.1fs", dt));
    return o;
}

// Monte-Carlo cost against the finite-horizon value; +0.1 on every entry of K must cost more.
void optimality_case(Outcome& o, const std::string& label, const MeanFieldSystemd& sys, const CostSpecd& cost,
                     double T, double dt, std::size_t paths, const VecXd& x0, std::uint64_t seed)
{
    const auto steps = static_cast<std::size_t>(std::llround(T / dt));
    const auto sol = integrate_backward(sys, cost, T, steps);
    const MatXd S = x0 * x0.transpose();
    const double predicted = optimal_cost(sol.P.front(), sol.Pbar.front(), x0, S);
    const auto cfg = sim(T, dt, paths, x0, seed);
    const auto opt = estimate_cost(simulate_paths(sys, schedule_from(sol), cfg), cost, true);
    const GainSchedule base = schedule_from(sol);
    const GainSchedule perturbed = [base](double t) {
        auto g = base(t);
        g.K.array() += 0.1;
        return g;
    };
    const auto pert = estimate_cost(simulate_paths(sys, perturbed, cfg), cost, true);
    const auto gap = paired_difference(opt, pert);
    const double z = (opt.estimate - predicted) / opt.standardError;
    const bool within = std::abs(opt.estimate - predicted) <= 3 * opt.standardError;
    const bool worse = gap.estimate > 3 * gap.standardError;
    if (!within || !worse || label == "example1") {
        o.require(within && worse, label + ": z = " + fmt("%.2f", z) + ", gap/se = "
                                       + fmt("%.1f", gap.estimate / gap.standardError));
    }
}

Outcome finite_horizon_optimality()
{
    Outcome o;
    optimality_case(o, "example1", example1_system(), example1_cost(), 20.0, 1e-3, 5000, VecXd::Ones(1), 3);
    Random rnd(9001);
    int count = 0;
    while (count < 20) {
        const Eigen::Index n = count % 2 == 0 ? 1 : 2;
        const auto inst = rnd.instance(n, n == 1 ? 1 : rnd.integer(1, 2));
        const VecXd x0 = rnd.matrix(n, 1);
        try {
            optimality_case(o, "instance " + std::to_string(count), inst.sys, inst.cost, 2.0, 1e-3, 2000, x0,
                            100 + static_cast<std::uint64_t>(count));
        } catch (const Error& e) {
            // Unsolvable draws (blow-up) are redrawn.
            if (e.kind() != ErrorKind::Diverged) {
                throw;
            }
            continue;
        }
        ++count;
    }
    o.notes.push_back(std::to_string(count) + " random instances");
    return o;
}

Outcome monotonicity_positivity()
{
    Outcome o;
    Random rnd(5150);
    int ok = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const auto n = rnd.integer(1, 3);
        const auto m = rnd.integer(1, 2);
        const auto inst = rnd.instance(n, m);
        bool good = true;
        MatXd prevP, prevS;
        for (double T : {0.5, 1.0, 2.0, 4.0}) {
            const auto sol = integrate_backward(inst.sys, inst.cost, T, static_cast<std::size_t>(1000 * T));
            for (std::size_t k = 0; k < sol.size(); ++k) {
                good = good && min_eigenvalue(sol.P[k]) >= -1e-8
                       && min_eigenvalue(MatXd(sol.P[k] + sol.Pbar[k])) >= -1e-8;
            }
            const MatXd P0 = sol.P.front();
            const MatXd S0 = sol.P.front() + sol.Pbar.front();
            if (prevP.size()) {
                good = good && min_eigenvalue(MatXd(P0 - prevP)) >= -1e-8
                       && min_eigenvalue(MatXd(S0 - prevS)) >= -1e-8;
            }
            prevP = P0;
            prevS = S0;
        }
        ok += good ? 1 : 0;
    }
    o.require(ok == 50, std::to_string(ok) + "/50 instances");
    return o;
}

Outcome mean_field_free_reduction()
{
    Outcome o;
    Random rnd(606);
    double worstBar = 0.0, worstRel = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
        const double A = rnd.uniform(-1, 1), B = rnd.uniform(0.2, 1.5), C = rnd.uniform(-0.5, 0.5);
        const double Q = rnd.uniform(0.2, 2), R = rnd.uniform(0.2, 2), T = rnd.uniform(0.5, 3);
        const auto sys = scalar_system(A, 0, B, 0, C, 0, 0, 0);
        const auto sol = integrate_backward(sys, CostSpecd(s1(Q), s1(0), s1(R), s1(0)), T, default_riccati_steps(T));
        for (std::size_t k = 0; k < sol.size(); ++k) {
            worstBar = std::max({worstBar, std::abs(sol.Pbar[k](0, 0)), std::abs(sol.gains[k].Kbar(0, 0))});
        }
        // Scalar Riccati dP/ds = a (P - r1)(P - r2) in backward time, P(0) = 0.
        const double a = -B * B / R;
        const double b = 2 * A + C * C;
        const double disc = std::sqrt(b * b - 4 * a * Q);
        const double r1 = (-b - disc) / (2 * a);
        const double r2 = (-b + disc) / (2 * a);
        const double c = (r1 / r2) * std::exp(a * (r1 - r2) * T);
        const double exact = (r1 - r2 * c) / (1 - c);
        worstRel = std::max(worstRel, std::abs(sol.P.front()(0, 0) - exact) / std::abs(exact));
    }
    o.require(worstBar <= 1e-8, "max |Pbar|, |Kbar| = " + fmt("%.1e", worstBar));
    o.require(worstRel <= 1e-9, "closed form rel. error " + fmt("%.1e", worstRel));
    return o;
}

Outcome consistency_identities()
{
    Outcome o;
    Random rnd(777);

    double worstEq = 0.0, worstSplit = 0.0;
    std::vector<Instance> cases{{example1_system(), example1_cost()}};
    for (int i = 0; i < 5; ++i) {
        const auto n = rnd.integer(1, 3);
        cases.push_back(rnd.instance(n, rnd.integer(1, 2)));
    }
    for (const auto& c : cases) {
        const auto sol = integrate_backward(c.sys, c.cost, 5.0, 5000);
        for (std::size_t k = 0; k < sol.size(); k += 50) {
            const VecXd x = rnd.matrix(c.sys.n(), 1, 2.0);
            const VecXd xm = rnd.matrix(c.sys.n(), 1, 2.0);
            const auto r = equilibrium_residual(x, xm, sol.gains[k], aux_at(sol, k));
            worstEq = std::max({worstEq, r.pathwise.norm(), r.mean.norm()});
        }
        worstSplit = std::max(worstSplit, integrate_costate_split(sol, c.sys, c.cost).maxSumDeviation);
    }
    o.require(worstEq < 1e-9, "equilibrium residual " + fmt("%.1e", worstEq));
    o.require(worstSplit < 1e-6, "costate split " + fmt("%.1e", worstSplit));

    double worstForm = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const auto n = rnd.integer(1, 3);
        const auto inst = rnd.instance(n, rnd.integer(1, 2));
        const MatXd P = rnd.psd(n);
        const MatXd Pbar = rnd.symmetric(n);
        const auto are = are_residuals(P, Pbar, inst.sys, inst.cost);
        const auto g = stationary_gains(P, Pbar, inst.sys, inst.cost);
        const auto [l1, l2] = closed_loop_lyapunov_residual(P, Pbar, g, inst.sys, inst.cost);
        worstForm = std::max({worstForm, (l1 - are.res1).norm(), (l2 - (are.res1 + are.res2)).norm()});
    }
    o.require(worstForm < 1e-10, "residual forms differ by " + fmt("%.1e", worstForm));
    return o;
}

Outcome observability_detectability()
{
    Outcome o;
    o.require(exact_observability_test(open_loop(example1_system(), example1_cost())), "example 1 observable");
    o.require(!exact_observability_test(open_loop(example1_system(), CostSpecd(s1(0), s1(0), s1(1), s1(0)))),
              "zero weights unobservable");

    Random rnd(31337);
    int observable = 0, implied = 0;
    for (int trial = 0; trial < 30; ++trial) {
        const auto n = rnd.integer(1, 2);
        const auto inst = rnd.instance(n, 1);
        const Gainsd g{rnd.matrix(1, n, 0.5), rnd.matrix(1, n, 0.5)};
        const auto cl = closed_loop(inst.sys, inst.cost, g);
        if (exact_observability_test(cl, 16.0)) {
            ++observable;
            implied += exact_detectability_test(cl, 16.0) ? 1 : 0;
        }
    }
    o.require(observable > 0 && implied == observable,
              "observable => detectable " + std::to_string(implied) + "/" + std::to_string(observable));

    // Second moments started in the unobservable subspace must vanish exactly when the
    // test reports detectability. Draws with a near-zero rate are redrawn.
    int agree = 0, tested = 0;
    while (tested < 20) {
        const double a = rnd.uniform(-1, 1), c = rnd.uniform(-0.5, 0.5);
        const double ab = rnd.uniform(-1, 1), cb = rnd.uniform(-0.5, 0.5);
        const double qbar = tested % 2 == 0 ? 0.0 : 1.0;
        const double rate = std::max(2 * a + c * c, qbar == 0.0 ? 2 * ab : -1.0);
        if (std::abs(rate) < 0.02) {
            continue;
        }
        const ClosedLoopd cl{s1(a), s1(c), s1(0), s1(ab), s1(cb), s1(qbar)};
        const bool detectable = exact_detectability_test(cl);
        double sig = 1.0;
        double mean2 = qbar == 0.0 ? 1.0 : 0.0;
        const double T = detectable ? 30.0 / std::abs(rate) : 5.0;
        const int steps = static_cast<int>(std::ceil(T / 5e-3));
        const double h = T / steps;
        const double r = 2 * a + c * c;
        for (int k = 0; k < steps; ++k) {
            const double m0 = mean2;
            mean2 *= std::exp(2 * ab * h);
            sig += h * (r * (sig + 0.5 * h * (r * sig + cb * cb * m0)) + cb * cb * 0.5 * (m0 + mean2));
        }
        const double start = 1.0 + (qbar == 0.0 ? 1.0 : 0.0);
        const bool decays = sig + mean2 < 1e-3 * start;
        agree += decays == detectable ? 1 : 0;
        ++tested;
    }
    o.require(agree == 20, "trajectory falsification " + std::to_string(agree) + "/20");
    return o;
}

} // namespace

int main()
{
    struct Criterion {
        const char* name;
        std::function<Outcome()> run;
    };
    const std::vector<Criterion> criteria{
        {"1 example-2 reproduction", example2_reproduction},
        {"2 example-1 reproduction", example1_reproduction},
        {"3 example-2 divergence", example2_divergence},
        {"4 finite-horizon optimality", finite_horizon_optimality},
        {"5 monotonicity and positivity", monotonicity_positivity},
        {"6 mean-field-free reduction", mean_field_free_reduction},
        {"7 consistency identities", consistency_identities},
        {"8 observability and detectability", observability_detectability},
    };

    int failed = 0;
    for (const auto& c : criteria) {
        const auto t0 = Clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o.pass = false;
            o.notes.push_back(std::string("!exception: ") + e.what());
        }
        std::string detail;
        for (const auto& n : o.notes) {
            detail += (detail.empty() ? "" : "; ") + n;
        }
        std::printf("%s criterion %s (%.1fs): %s\n", o.pass ? "PASS" : "FAIL", c.name, seconds_since(t0),
                    detail.c_str());
        std::fflush(stdout);
        failed += o.pass ? 0 : 1;
    }
    std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
    return failed == 0 ? 0 : 1;
}
