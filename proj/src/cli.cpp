#include "mflq/cli.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "mflq/are.hpp"
#include "mflq/mfcore.hpp"
#include "mflq/riccati.hpp"
#include "mflq/simulate.hpp"
#include "mflq/spectra.hpp"

namespace mflq::cli {

using nlohmann::json;

namespace {

// Reported values of the two worked examples.
constexpr double kReportedEx1P = 18.4500;
constexpr double kReportedEx1Pbar = -1.6609;
constexpr double kReportedEx1K = -0.7986;
constexpr double kReportedEx1Kbar = -0.2915;
constexpr double kReportedEx2Proots[] = {-0.2356, -2.4679};
constexpr double kReportedEx2Pbar[] = {4.7637, -0.0869};
constexpr double kReportedEx2K = 0.2552;
constexpr double kReportedEx2Kbar[] = {-0.1106, -2.9453};

json gains_json(const Gainsd& g)
{
    return {{"K", matrix_to_json(g.K)}, {"Kbar", matrix_to_json(g.Kbar)}};
}

std::string indexed(const std::string& name, Eigen::Index i, Eigen::Index k)
{
    return name + "_" + std::to_string(i + 1) + "_" + std::to_string(k + 1);
}

void write_csv_header(std::ostream& os, const char* name, Eigen::Index r, Eigen::Index c)
{
    for (Eigen::Index i = 0; i < r; ++i) {
        for (Eigen::Index k = 0; k < c; ++k) {
            os << ',' << indexed(name, i, k);
        }
    }
}

void write_csv_row(std::ostream& os, const MatXd& M)
{
    for (Eigen::Index i = 0; i < M.rows(); ++i) {
        for (Eigen::Index k = 0; k < M.cols(); ++k) {
            os << ',' << M(i, k);
        }
    }
}

void flatten(const json& j, const std::string& key, std::ostream& os)
{
    if (j.is_object()) {
        for (auto it = j.begin(); it != j.end(); ++it) {
            flatten(it.value(), key.empty() ? it.key() : key + "." + it.key(), os);
        }
    } else if (j.is_array()) {
        for (std::size_t i = 0; i < j.size(); ++i) {
            flatten(j[i], key + "[" + std::to_string(i) + "]", os);
        }
    } else if (j.is_string()) {
        os << key << ',' << j.get<std::string>() << '\n';
    } else {
        os << key << ',' << j.dump() << '\n';
    }
}

Scenario require_scenario(const Options& opt)
{
    if (!opt.config) {
        throw Error(ErrorKind::Validation, "--config: required for command " + opt.command);
    }
    Scenario s = load_scenario(*opt.config);
    apply_overrides(s, opt);
    return s;
}

std::optional<std::ofstream> artifact(const Options& opt, const std::string& file)
{
    if (!opt.out) {
        return std::nullopt;
    }
    std::filesystem::create_directories(*opt.out);
    const auto path = std::filesystem::path(*opt.out) / file;
    std::ofstream f(path);
    if (!f) {
        throw Error(ErrorKind::Validation, "--out: cannot write " + path.string());
    }
    f << std::setprecision(17);
    return f;
}

void emit(const Options& opt, std::ostream& out, const json& summary, const std::function<void(std::ostream&)>& csv)
{
    if (auto f = artifact(opt, opt.command + ".json")) {
        *f << summary.dump(2) << '\n';
    }
    if (opt.format == "csv") {
        const auto old = out.precision(17);
        csv(out);
        out.precision(old);
    } else {
        out << summary.dump(2) << '\n';
    }
}

json base_summary(const Options& opt, const Scenario& s)
{
    return {{"command", opt.command}, {"scenario", to_json(s)}};
}

AreOptions are_options(const Scenario& s)
{
    AreOptions o;
    o.tol = s.solver.tol;
    o.maxHorizon = s.solver.maxHorizon;
    return o;
}

json are_json(const AreSolution<double>& sol)
{
    return {{"P", matrix_to_json(sol.P)},
            {"Pbar", matrix_to_json(sol.Pbar)},
            {"Ups1", matrix_to_json(sol.Ups1)},
            {"Ups2", matrix_to_json(sol.Ups2)},
            {"gains", gains_json(sol.gains)},
            {"classification", to_string(sol.classification)},
            {"residualNorms", {sol.residualNorms.first, sol.residualNorms.second}},
            {"horizonUsed", sol.horizonUsed}};
}

// ---------------------------------------------------------------------------

int cmd_riccati(const Options& opt, std::ostream& out)
{
    const Scenario s = require_scenario(opt);
    if (!s.horizon) {
        throw Error(ErrorKind::Validation, "horizon: required for command riccati (scenario or --horizon)");
    }
    const double T = *s.horizon;
    const std::size_t steps = s.solver.steps.value_or(default_riccati_steps(T));
    const auto sol = integrate_backward(s.system, s.cost, T, steps);
    const auto verdict = solvability_check(sol);

    json res = {{"horizon", T},
                {"steps", steps},
                {"P0", matrix_to_json(sol.P.front())},
                {"Pbar0", matrix_to_json(sol.Pbar.front())},
                {"gains0", gains_json(sol.gains.front())},
                {"uniquelySolvable", verdict.uniquelySolvable},
                {"offendingTimes", verdict.offendingTimes.size()}};
    if (s.simulation) {
        const auto& init = s.simulation->config.initial;
        const VecXd mu = s.simulation->config.initial_mean();
        MatXd S = mu * mu.transpose();
        if (const auto* g = std::get_if<Gaussian>(&init)) {
            S += g->covariance;
        }
        res["optimalCost"] = optimal_cost(sol.P.front(), sol.Pbar.front(), mu, S);
    }
    json summary = base_summary(opt, s);
    summary["result"] = res;

    auto csv = [&](std::ostream& os) {
        const auto n = s.system.n();
        const auto m = s.system.m();
        os << 't';
        write_csv_header(os, "P", n, n);
        write_csv_header(os, "Pbar", n, n);
        write_csv_header(os, "K", m, n);
        write_csv_header(os, "Kbar", m, n);
        os << ",min_eig_ups1,min_eig_ups2\n";
        for (std::size_t k = 0; k < sol.size(); ++k) {
            os << sol.grid[k];
            write_csv_row(os, sol.P[k]);
            write_csv_row(os, sol.Pbar[k]);
            write_csv_row(os, sol.gains[k].K);
            write_csv_row(os, sol.gains[k].Kbar);
            os << ',' << min_eigenvalue(sol.Ups1[k]) << ',' << min_eigenvalue(sol.Ups2[k]) << '\n';
        }
    };
    if (auto f = artifact(opt, "riccati.csv")) {
        csv(*f);
    }
    emit(opt, out, summary, csv);
    return kOk;
}

int cmd_are(const Options& opt, std::ostream& out)
{
    const Scenario s = require_scenario(opt);
    const auto sol = solve_coupled_are(s.system, s.cost, are_options(s));
    json summary = base_summary(opt, s);
    summary["result"] = are_json(sol);
    emit(opt, out, summary, [&](std::ostream& os) { write_flat_csv(os, summary["result"]); });
    return kOk;
}

int cmd_check(const Options& opt, std::ostream& out)
{
    const Scenario s = require_scenario(opt);
    VerdictOptions vo;
    vo.are = are_options(s);
    const auto rep = stabilization_verdict(s.system, s.cost, vo);
    json checks = json::array();
    for (const auto& c : rep.validation.checks) {
        checks.push_back({{"name", c.name}, {"passed", c.passed}, {"minEigenvalue", c.minEigenvalue}});
    }
    json res = {{"verdict", to_string(rep.verdict)},
                {"stabilizable", is_stabilizable(rep.verdict)},
                {"observable", rep.observable},
                {"detectable", rep.detectable},
                {"assumptions", checks},
                {"openLoopAbscissa", ms_stability(lift(open_loop(s.system, s.cost))).abscissa},
                {"consistent", rep.consistent},
                {"detail", rep.detail}};
    res["closedLoopAbscissa"] = std::isnan(rep.abscissa) ? json(nullptr) : json(rep.abscissa);
    if (rep.are) {
        res["are"] = are_json(*rep.are);
    }
    json summary = base_summary(opt, s);
    summary["result"] = res;
    emit(opt, out, summary, [&](std::ostream& os) { write_flat_csv(os, summary["result"]); });
    switch (rep.verdict) {
    case Verdict::StabilizableDetectable:
    case Verdict::StabilizableObservable: return kOk;
    case Verdict::NotStabilizable: return kNotStabilizable;
    case Verdict::AssumptionViolated: return kValidation;
    }
    return kOk;
}

struct SimRun {
    std::string name;
    Ensemble ens;
    CostEstimate cost;
    std::optional<LyapunovTrace> V;
    json info;
};

int cmd_simulate(const Options& opt, std::ostream& out)
{
    const Scenario s = require_scenario(opt);
    if (!s.simulation) {
        throw Error(ErrorKind::Validation, "simulation: required for command simulate");
    }
    const auto& sim = *s.simulation;
    const auto& cfg = sim.config;
    std::vector<SimRun> runs;

    auto add_constant = [&](const std::string& name, const std::optional<Gainsd>& g,
                            const std::optional<AreSolution<double>>& are) {
        SimRun r;
        r.name = name;
        r.ens = simulate_paths(s.system, g, cfg);
        r.cost = estimate_cost(r.ens, s.cost, false);
        const Gainsd gg = g ? *g : zero_gains(s.system);
        r.info["gains"] = gains_json(gg);
        r.info["closedLoopAbscissa"] = ms_stability(lift(closed_loop(s.system, s.cost, gg))).abscissa;
        if (are) {
            r.V = lyapunov_trace(r.ens, are->P, are->Pbar);
        }
        runs.push_back(std::move(r));
    };

    if (!sim.gains.empty()) {
        for (const auto& ng : sim.gains) {
            add_constant(ng.name, ng.gains, std::nullopt);
        }
    } else if (sim.policy == Policy::OpenLoop) {
        add_constant("open_loop", std::nullopt, std::nullopt);
    } else if (sim.policy == Policy::Stationary) {
        const auto are = solve_coupled_are(s.system, s.cost, are_options(s));
        add_constant("stationary", are.gains, are);
    } else {
        const auto sol = integrate_backward(s.system, s.cost, cfg.T, cfg.steps());
        SimRun r;
        r.name = "finite_horizon";
        r.ens = simulate_paths(s.system, schedule_from(sol), cfg);
        r.cost = estimate_cost(r.ens, s.cost, true);
        const VecXd mu = cfg.initial_mean();
        MatXd S = mu * mu.transpose();
        if (const auto* g = std::get_if<Gaussian>(&cfg.initial)) {
            S += g->covariance;
        }
        r.info["optimalCost"] = optimal_cost(sol.P.front(), sol.Pbar.front(), mu, S);
        runs.push_back(std::move(r));
    }

    json sets = json::array();
    for (const auto& r : runs) {
        json j = r.info;
        j["name"] = r.name;
        j["cost"] = {{"estimate", r.cost.estimate}, {"standardError", r.cost.standardError}};
        j["secondMomentInitial"] = r.ens.secondMoment.front();
        j["secondMomentFinal"] = r.ens.secondMoment.back();
        j["secondMomentFinalSe"] = r.ens.secondMomentSe.back();
        j["meanNormSqFinal"] = r.ens.mean.x.col(r.ens.mean.x.cols() - 1).squaredNorm();
        sets.push_back(std::move(j));
        if (auto f = artifact(opt, "simulate_" + r.name + ".csv")) {
            write_ensemble_csv(*f, r.ens, r.V ? &*r.V : nullptr);
        }
    }
    json summary = base_summary(opt, s);
    summary["result"] = {{"steps", cfg.steps()}, {"paths", cfg.paths}, {"runs", sets}};
    emit(opt, out, summary, [&](std::ostream& os) {
        if (runs.size() == 1) {
            write_ensemble_csv(os, runs.front().ens, runs.front().V ? &*runs.front().V : nullptr);
            return;
        }
        for (std::size_t i = 0; i < runs.size(); ++i) {
            std::ostringstream body;
            write_ensemble_csv(body, runs[i].ens);
            std::istringstream lines(body.str());
            std::string line;
            std::getline(lines, line);
            if (i == 0) {
                os << "set," << line << '\n';
            }
            while (std::getline(lines, line)) {
                os << runs[i].name << ',' << line << '\n';
            }
        }
    });
    return kOk;
}

// ---------------------------------------------------------------------------

struct Report {
    json checks = json::array();
    bool failed = false;

    void add(const std::string& name, bool pass, json solver, json reported = nullptr, const std::string& note = "")
    {
        json c = {{"check", name}, {"status", pass ? "pass" : "fail"}, {"solver", std::move(solver)}};
        if (!reported.is_null()) {
            c["reported"] = std::move(reported);
        }
        if (!note.empty()) {
            c["note"] = note;
        }
        failed = failed || !pass;
        checks.push_back(std::move(c));
    }

    // Reported value that disagrees with the stationary equations; shown, not scored.
    void flag(const std::string& name, json solver, json reported, const std::string& note)
    {
        checks.push_back({{"check", name}, {"status", "flagged"}, {"solver", std::move(solver)},
                          {"reported", std::move(reported)}, {"note", note}});
    }
};

double s11(const MatXd& M)
{
    return M(0, 0);
}

int cmd_reproduce(const Options& opt, std::ostream& out)
{
    Report rep;

    // Example 1: stabilizable.
    Scenario e1 = example1_scenario();
    apply_overrides(e1, opt);
    const auto sol1 = solve_coupled_are(e1.system, e1.cost, are_options(e1));
    rep.add("ex1.are_residuals_below_1e-8",
            sol1.residualNorms.first < 1e-8 && sol1.residualNorms.second < 1e-8,
            {sol1.residualNorms.first, sol1.residualNorms.second});
    rep.add("ex1.classification_positive_definite",
            sol1.classification == Definiteness::PositiveDefinite, to_string(sol1.classification));
    const auto reportedRes = are_residuals(scalar_matrix(kReportedEx1P), scalar_matrix(kReportedEx1Pbar), e1.system, e1.cost);
    const std::string why = "reported value leaves stationary residuals ("
                            + format_number(s11(reportedRes.res1)) + ", " + format_number(s11(reportedRes.res2))
                            + "); the solver value satisfies them";
    rep.flag("ex1.P", s11(sol1.P), kReportedEx1P, why);
    rep.flag("ex1.P_plus_Pbar", s11(sol1.P) + s11(sol1.Pbar), kReportedEx1P + kReportedEx1Pbar, why);
    rep.flag("ex1.K", s11(sol1.gains.K), kReportedEx1K, "follows from the P discrepancy");
    rep.flag("ex1.Kbar", s11(sol1.gains.Kbar), kReportedEx1Kbar, "follows from the P discrepancy");
    VerdictOptions vo;
    vo.are = are_options(e1);
    const auto v1 = stabilization_verdict(e1.system, e1.cost, vo);
    rep.add("ex1.verdict_stabilizable", is_stabilizable(v1.verdict), to_string(v1.verdict), "stabilizable");
    rep.add("ex1.closed_loop_abscissa_negative", v1.abscissa < 0.0, v1.abscissa);

    const auto& cfg1 = e1.simulation->config;
    const auto ens1 = simulate_paths(e1.system, sol1.gains, cfg1);
    rep.add("ex1.mc_second_moment_at_T_below_0.01", ens1.secondMoment.back() < 0.01,
            {{"value", ens1.secondMoment.back()}, {"standardError", ens1.secondMomentSe.back()},
             {"T", cfg1.T}, {"paths", cfg1.paths}, {"dt", cfg1.dt}});
    const Gainsd reportedGains1{scalar_matrix(kReportedEx1K), scalar_matrix(kReportedEx1Kbar)};
    const auto ensReported1 = simulate_paths(e1.system, reportedGains1, cfg1);
    rep.flag("ex1.mc_second_moment_at_T_with_reported_gains", ensReported1.secondMoment.back(), nullptr,
             "reported gains, for comparison");

    // Example 2: not stabilizable.
    Scenario e2 = example2_scenario();
    apply_overrides(e2, opt);
    const auto roots = scalar_root_oracle(e2.system, e2.cost);
    auto near = [](double a, double b) { return std::abs(a - b) < 1e-3; };
    json rootsJson = json::array();
    for (const auto& [p, pb] : roots) {
        rootsJson.push_back({p, pb});
    }
    bool root1 = false;
    bool pbar1 = false;
    bool pbar2 = false;
    bool secondHasPair = false;
    for (const auto& [p, pb] : roots) {
        if (near(p, kReportedEx2Proots[0])) {
            root1 = true;
            pbar1 = pbar1 || near(pb, kReportedEx2Pbar[0]);
            pbar2 = pbar2 || near(pb, kReportedEx2Pbar[1]);
        }
        secondHasPair = secondHasPair || near(p, kReportedEx2Proots[1]);
    }
    const auto pRoots = scalar_p_roots(e2.system, e2.cost);
    bool root2 = false;
    json pJson = json::array();
    for (double p : pRoots) {
        root2 = root2 || near(p, kReportedEx2Proots[1]);
        pJson.push_back(p);
    }
    rep.add("ex2.P_roots", root1 && root2, pJson, {kReportedEx2Proots[0], kReportedEx2Proots[1]});
    rep.add("ex2.no_real_Pbar_for_second_root", !secondHasPair, rootsJson);
    rep.add("ex2.Pbar_roots_for_first_root", pbar1 && pbar2, rootsJson, {kReportedEx2Pbar[0], kReportedEx2Pbar[1]});
    const auto res = are_residuals(scalar_matrix(kReportedEx2Proots[0]), scalar_matrix(kReportedEx2Pbar[0]), e2.system, e2.cost);
    rep.add("ex2.residuals_at_reported_pair_below_5e-4",
            std::abs(s11(res.res1)) < 5e-4 && std::abs(s11(res.res2)) < 5e-4,
            {s11(res.res1), s11(res.res2)});
    json kbars = json::array();
    double K2 = 0.0;
    for (const auto& [p, pb] : roots) {
        if (near(p, kReportedEx2Proots[0])) {
            const auto g = stationary_gains(scalar_matrix(p), scalar_matrix(pb), e2.system, e2.cost);
            K2 = s11(g.K);
            kbars.push_back({{"Pbar", pb}, {"Kbar", s11(g.Kbar)}});
        }
    }
    rep.add("ex2.K", near(K2, kReportedEx2K), K2, kReportedEx2K);
    rep.flag("ex2.Kbar_pairing", kbars, {{{"Pbar", kReportedEx2Pbar[0]}, {"Kbar", kReportedEx2Kbar[0]}},
                                          {{"Pbar", kReportedEx2Pbar[1]}, {"Kbar", kReportedEx2Kbar[1]}}},
             "the reported Kbar values are attached to the opposite Pbar roots");
    vo.are = are_options(e2);
    const auto v2 = stabilization_verdict(e2.system, e2.cost, vo);
    rep.add("ex2.verdict_not_stabilizable", v2.verdict == Verdict::NotStabilizable, to_string(v2.verdict),
            "not stabilizable");
    const auto& cfg2 = e2.simulation->config;
    for (const auto& ng : e2.simulation->gains) {
        const auto ens = simulate_paths(e2.system, ng.gains, cfg2);
        const double ratio = ens.secondMoment.back() / ens.secondMoment.front();
        rep.add("ex2.mc_divergence[" + ng.name + "]", ratio > 10.0,
                {{"ratio", ratio}, {"T", cfg2.T}});
        const double a = ms_stability(lift(closed_loop(e2.system, e2.cost, ng.gains))).abscissa;
        rep.add("ex2.abscissa_positive[" + ng.name + "]", a > 0.0, a);
    }

    json summary = {{"command", "reproduce"}, {"checks", rep.checks}, {"allPassed", !rep.failed}};
    if (auto f = artifact(opt, "reproduce.json")) {
        *f << summary.dump(2) << '\n';
    }
    if (opt.format == "csv") {
        const auto old = out.precision(17);
        out << "check,status,solver,reported\n";
        for (const auto& c : rep.checks) {
            auto cell = [](const json& j) {
                std::string s = j.is_null() ? "" : j.dump();
                return s.find(',') == std::string::npos ? s : "\"" + [&] {
                    std::string e;
                    for (char ch : s) {
                        e += ch == '"' ? std::string("\"\"") : std::string(1, ch);
                    }
                    return e;
                }() + "\"";
            };
            out << c["check"].get<std::string>() << ',' << c["status"].get<std::string>() << ','
                << cell(c["solver"]) << ',' << cell(c.value("reported", json(nullptr))) << '\n';
        }
        out.precision(old);
    } else {
        out << summary.dump(2) << '\n';
    }
    return rep.failed ? kCriteriaFailed : kOk;
}

} // namespace

int exit_code(ErrorKind kind)
{
    switch (kind) {
    case ErrorKind::Validation:
    case ErrorKind::OffGrid: return kValidation;
    case ErrorKind::NonConvergent: return kNotStabilizable;
    case ErrorKind::Diverged:
    case ErrorKind::Irregular:
    case ErrorKind::Numerical: return kNumerical;
    }
    return kNumerical;
}

void apply_overrides(Scenario& s, const Options& opt)
{
    if (opt.horizon) {
        if (!(*opt.horizon > 0.0)) {
            throw Error(ErrorKind::Validation, "--horizon: must be positive");
        }
        s.horizon = *opt.horizon;
        if (s.simulation) {
            s.simulation->config.T = *opt.horizon;
        }
    }
    if (opt.tol) {
        if (!(*opt.tol > 0.0)) {
            throw Error(ErrorKind::Validation, "--tol: must be positive");
        }
        s.solver.tol = *opt.tol;
    }
    if (s.simulation) {
        auto& c = s.simulation->config;
        if (opt.seed) {
            c.seed = *opt.seed;
        }
        if (opt.paths) {
            c.paths = *opt.paths;
        }
        if (opt.dt) {
            c.dt = *opt.dt;
        }
        c.check(s.system.n());
    }
}

void write_flat_csv(std::ostream& os, const json& j)
{
    os << "key,value\n";
    flatten(j, "", os);
}

Scenario example1_scenario()
{
    auto s1 = [](double v) { return scalar_matrix(v); };
    Scenario s;
    s.name = "example1";
    s.system = MeanFieldSystemd(s1(0.2), s1(0.4), s1(0.6), s1(0.2), s1(0.1), s1(0.7), s1(0.9), s1(0.3));
    s.cost = CostSpecd(s1(1), s1(1), s1(1), s1(1));
    SimulationSettings sim;
    sim.config.dt = 1e-3;
    sim.config.T = 10.0;
    sim.config.paths = 5000;
    sim.config.seed = 1;
    sim.config.initial = Deterministic{VecXd::Ones(1)};
    s.simulation = sim;
    return s;
}

Scenario example2_scenario()
{
    auto s1 = [](double v) { return scalar_matrix(v); };
    Scenario s;
    s.name = "example2";
    s.system = MeanFieldSystemd(s1(2.0), s1(0.8), s1(1.0), s1(1.2), s1(0.1), s1(0.6), s1(-0.8), s1(-0.2));
    s.cost = CostSpecd(s1(1), s1(1), s1(1), s1(3));
    SimulationSettings sim;
    sim.config.dt = 1e-3;
    sim.config.T = 5.0;
    sim.config.paths = 5000;
    sim.config.seed = 1;
    sim.config.initial = Deterministic{VecXd::Ones(1)};
    sim.gains = {{"reported_pair_1", {s1(kReportedEx2K), s1(kReportedEx2Kbar[0])}},
                 {"reported_pair_2", {s1(kReportedEx2K), s1(kReportedEx2Kbar[1])}}};
    s.simulation = sim;
    return s;
}

int run(const Options& opt, std::ostream& out, std::ostream& err)
{
    try {
        if (opt.format != "json" && opt.format != "csv") {
            throw Error(ErrorKind::Validation, "--format: expected csv or json");
        }
        if (opt.command == "riccati") {
            return cmd_riccati(opt, out);
        }
        if (opt.command == "are") {
            return cmd_are(opt, out);
        }
        if (opt.command == "check") {
            return cmd_check(opt, out);
        }
        if (opt.command == "simulate") {
            return cmd_simulate(opt, out);
        }
        if (opt.command == "reproduce") {
            return cmd_reproduce(opt, out);
        }
        throw Error(ErrorKind::Validation, "unknown command: " + opt.command);
    } catch (const Error& e) {
        err << "error (" << to_string(e.kind()) << "): " << e.what() << '\n';
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kNumerical;
    }
}

} // namespace mflq::cli
