#include "mflq/scenario.hpp"

#include <fstream>
#include <initializer_list>
#include <limits>
#include <sstream>

namespace mflq {

using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& field, const std::string& what)
{
    throw Error(ErrorKind::Validation, field + ": " + what);
}

void reject_unknown(const json& obj, const std::string& prefix, std::initializer_list<const char*> known)
{
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const char* k : known) {
            ok = ok || it.key() == k;
        }
        if (!ok) {
            fail(prefix.empty() ? it.key() : prefix + "." + it.key(), "unknown key");
        }
    }
}

const json& require(const json& obj, const std::string& prefix, const char* key)
{
    if (!obj.contains(key)) {
        fail(prefix.empty() ? std::string(key) : prefix + "." + key, "required");
    }
    return obj.at(key);
}

const json& require_object(const json& j, const std::string& field)
{
    if (!j.is_object()) {
        fail(field, "expected an object");
    }
    return j;
}

double number(const json& j, const std::string& field)
{
    if (!j.is_number()) {
        fail(field, "expected a number");
    }
    const double v = j.get<double>();
    if (!std::isfinite(v)) {
        fail(field, "non-finite value");
    }
    return v;
}

std::size_t count(const json& j, const std::string& field)
{
    if (!j.is_number_integer() && !j.is_number_unsigned()) {
        fail(field, "expected a non-negative integer");
    }
    if (j.is_number_integer() && j.get<std::int64_t>() < 0) {
        fail(field, "expected a non-negative integer");
    }
    return j.get<std::size_t>();
}

std::string shape(Eigen::Index r, Eigen::Index c)
{
    return std::to_string(r) + "x" + std::to_string(c);
}

MatXd matrix(const json& j, Eigen::Index rows, Eigen::Index cols, const std::string& field)
{
    if (j.is_number()) {
        if (rows != 1 || cols != 1) {
            fail(field, "expected " + shape(rows, cols) + ", got a scalar");
        }
        return MatXd::Constant(1, 1, number(j, field));
    }
    if (!j.is_array() || j.empty() || !j.front().is_array()) {
        fail(field, "expected a nested array of rows");
    }
    const auto r = static_cast<Eigen::Index>(j.size());
    const auto c = static_cast<Eigen::Index>(j.front().size());
    for (const auto& row : j) {
        if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != c) {
            fail(field, "rows have different lengths");
        }
    }
    if (r != rows || c != cols) {
        fail(field, "expected " + shape(rows, cols) + ", got " + shape(r, c));
    }
    MatXd M(r, c);
    for (Eigen::Index i = 0; i < r; ++i) {
        for (Eigen::Index k = 0; k < c; ++k) {
            M(i, k) = number(j[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)],
                             field + "[" + std::to_string(i) + "][" + std::to_string(k) + "]");
        }
    }
    return M;
}

VecXd vector(const json& j, Eigen::Index n, const std::string& field)
{
    if (j.is_number()) {
        if (n != 1) {
            fail(field, "expected " + std::to_string(n) + " entries, got a scalar");
        }
        return VecXd::Constant(1, number(j, field));
    }
    if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != n) {
        fail(field, "expected an array of " + std::to_string(n) + " numbers");
    }
    VecXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        v(i) = number(j[static_cast<std::size_t>(i)], field + "[" + std::to_string(i) + "]");
    }
    return v;
}

MatXd optional_matrix(const json& obj, const char* key, Eigen::Index r, Eigen::Index c, const std::string& prefix)
{
    return obj.contains(key) ? matrix(obj.at(key), r, c, prefix + "." + key) : MatXd::Zero(r, c);
}

Gainsd parse_gains(const json& j, Eigen::Index n, Eigen::Index m, const std::string& prefix)
{
    require_object(j, prefix);
    reject_unknown(j, prefix, {"name", "K", "Kbar"});
    return {matrix(require(j, prefix, "K"), m, n, prefix + ".K"),
            matrix(require(j, prefix, "Kbar"), m, n, prefix + ".Kbar")};
}

SimulationSettings parse_simulation(const json& j, Eigen::Index n, Eigen::Index m, std::optional<double> horizon)
{
    const std::string p = "simulation";
    require_object(j, p);
    reject_unknown(j, p, {"dt", "T", "paths", "seed", "records", "x0", "x0_mean", "x0_covariance", "policy", "gains"});
    SimulationSettings s;
    SimConfig& c = s.config;
    if (j.contains("dt")) {
        c.dt = number(j.at("dt"), p + ".dt");
    }
    if (j.contains("T")) {
        c.T = number(j.at("T"), p + ".T");
    } else if (horizon) {
        c.T = *horizon;
    } else {
        fail(p + ".T", "required");
    }
    if (j.contains("paths")) {
        c.paths = count(j.at("paths"), p + ".paths");
    }
    if (j.contains("seed")) {
        c.seed = j.at("seed").is_number_unsigned() ? j.at("seed").get<std::uint64_t>()
                                                  : static_cast<std::uint64_t>(count(j.at("seed"), p + ".seed"));
    }
    if (j.contains("records")) {
        c.records = count(j.at("records"), p + ".records");
    }
    if (j.contains("x0")) {
        if (j.contains("x0_mean") || j.contains("x0_covariance")) {
            fail(p + ".x0", "give either x0 or x0_mean/x0_covariance");
        }
        c.initial = Deterministic{vector(j.at("x0"), n, p + ".x0")};
    } else {
        const auto& mu = require(j, p, "x0_mean");
        const auto& cov = require(j, p, "x0_covariance");
        c.initial = Gaussian{vector(mu, n, p + ".x0_mean"), matrix(cov, n, n, p + ".x0_covariance")};
    }
    if (j.contains("policy")) {
        const auto& pol = j.at("policy");
        const std::string v = pol.is_string() ? pol.get<std::string>() : "";
        if (v == "stationary") {
            s.policy = Policy::Stationary;
        } else if (v == "finite_horizon") {
            s.policy = Policy::FiniteHorizon;
        } else if (v == "open_loop") {
            s.policy = Policy::OpenLoop;
        } else {
            fail(p + ".policy", "expected \"stationary\", \"finite_horizon\" or \"open_loop\"");
        }
    }
    if (j.contains("gains")) {
        const auto& g = j.at("gains");
        if (!g.is_array()) {
            fail(p + ".gains", "expected an array of gain sets");
        }
        for (std::size_t i = 0; i < g.size(); ++i) {
            const std::string gp = p + ".gains[" + std::to_string(i) + "]";
            NamedGains ng;
            ng.gains = parse_gains(g[i], n, m, gp);
            ng.name = g[i].contains("name") && g[i].at("name").is_string() ? g[i].at("name").get<std::string>()
                                                                         : "gains" + std::to_string(i);
            s.gains.push_back(std::move(ng));
        }
    }
    c.check(n);
    return s;
}

Scenario from_json(const json& doc)
{
    require_object(doc, "scenario");
    reject_unknown(doc, "", {"name", "system", "cost", "horizon", "simulation", "solver"});
    Scenario s;
    s.name = doc.contains("name") && doc.at("name").is_string() ? doc.at("name").get<std::string>() : "";

    const auto& sys = require_object(require(doc, "", "system"), "system");
    reject_unknown(sys, "system", {"n", "m", "A", "Abar", "B", "Bbar", "C", "Cbar", "D", "Dbar"});
    const auto n = static_cast<Eigen::Index>(count(require(sys, "system", "n"), "system.n"));
    const auto m = static_cast<Eigen::Index>(count(require(sys, "system", "m"), "system.m"));
    if (n < 1 || m < 1) {
        fail(n < 1 ? "system.n" : "system.m", "must be positive");
    }
    auto sq = [&](const char* k) { return matrix(require(sys, "system", k), n, n, std::string("system.") + k); };
    auto in = [&](const char* k) { return matrix(require(sys, "system", k), n, m, std::string("system.") + k); };
    s.system = MeanFieldSystemd(sq("A"), sq("Abar"), in("B"), in("Bbar"), sq("C"), sq("Cbar"), in("D"), in("Dbar"));

    const auto& cost = require_object(require(doc, "", "cost"), "cost");
    reject_unknown(cost, "cost", {"Q", "Qbar", "R", "Rbar", "P_T", "Pbar_T"});
    s.cost = CostSpecd(matrix(require(cost, "cost", "Q"), n, n, "cost.Q"),
                       matrix(require(cost, "cost", "Qbar"), n, n, "cost.Qbar"),
                       matrix(require(cost, "cost", "R"), m, m, "cost.R"),
                       matrix(require(cost, "cost", "Rbar"), m, m, "cost.Rbar"),
                       optional_matrix(cost, "P_T", n, n, "cost"),
                       optional_matrix(cost, "Pbar_T", n, n, "cost"));

    if (doc.contains("horizon")) {
        const double T = number(doc.at("horizon"), "horizon");
        if (!(T > 0.0)) {
            fail("horizon", "must be positive");
        }
        s.horizon = T;
    }
    if (doc.contains("solver")) {
        const auto& sv = require_object(doc.at("solver"), "solver");
        reject_unknown(sv, "solver", {"tol", "steps", "maxHorizon"});
        if (sv.contains("tol")) {
            s.solver.tol = number(sv.at("tol"), "solver.tol");
        }
        if (sv.contains("steps")) {
            s.solver.steps = count(sv.at("steps"), "solver.steps");
        }
        if (sv.contains("maxHorizon")) {
            s.solver.maxHorizon = number(sv.at("maxHorizon"), "solver.maxHorizon");
        }
        if (!(s.solver.tol > 0.0)) {
            fail("solver.tol", "must be positive");
        }
    }
    if (doc.contains("simulation")) {
        s.simulation = parse_simulation(doc.at("simulation"), n, m, s.horizon);
    }
    return s;
}

std::string locate(const std::string& text, std::size_t byte)
{
    std::size_t line = 1;
    std::size_t col = 1;
    for (std::size_t i = 0; i + 1 < byte && i < text.size(); ++i) {
        if (text[i] == '\n') {
            ++line;
            col = 1;
        } else {
            ++col;
        }
    }
    return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

} // namespace

const char* to_string(Policy p)
{
    switch (p) {
    case Policy::Stationary: return "stationary";
    case Policy::FiniteHorizon: return "finite_horizon";
    case Policy::OpenLoop: return "open_loop";
    }
    return "unknown";
}

Scenario parse_scenario(const std::string& text, const std::string& source)
{
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw Error(ErrorKind::Validation, source + ": parse error at " + locate(text, e.byte) + ": " + e.what());
    }
    try {
        if (doc.is_object() && doc.contains("scenario")) {
            return from_json(doc.at("scenario"));
        }
        return from_json(doc);
    } catch (const Error& e) {
        throw Error(e.kind(), source + ": " + e.what());
    } catch (const json::exception& e) {
        throw Error(ErrorKind::Validation, source + ": " + e.what());
    }
}

Scenario load_scenario(const std::string& path)
{
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorKind::Validation, path + ": cannot open");
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_scenario(ss.str(), path);
}

json matrix_to_json(const MatXd& M)
{
    json rows = json::array();
    for (Eigen::Index i = 0; i < M.rows(); ++i) {
        json row = json::array();
        for (Eigen::Index k = 0; k < M.cols(); ++k) {
            row.push_back(M(i, k));
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

json to_json(const Scenario& s)
{
    auto vec_json = [](const VecXd& v) {
        json a = json::array();
        for (Eigen::Index i = 0; i < v.size(); ++i) {
            a.push_back(v(i));
        }
        return a;
    };
    const auto& y = s.system;
    json j;
    j["name"] = s.name;
    j["system"] = {{"n", y.n()},
                   {"m", y.m()},
                   {"A", matrix_to_json(y.A)},
                   {"Abar", matrix_to_json(y.Abar)},
                   {"B", matrix_to_json(y.B)},
                   {"Bbar", matrix_to_json(y.Bbar)},
                   {"C", matrix_to_json(y.C)},
                   {"Cbar", matrix_to_json(y.Cbar)},
                   {"D", matrix_to_json(y.D)},
                   {"Dbar", matrix_to_json(y.Dbar)}};
    const auto& c = s.cost;
    j["cost"] = {{"Q", matrix_to_json(c.Q)},
                 {"Qbar", matrix_to_json(c.Qbar)},
                 {"R", matrix_to_json(c.R)},
                 {"Rbar", matrix_to_json(c.Rbar)},
                 {"P_T", matrix_to_json(c.Pterm)},
                 {"Pbar_T", matrix_to_json(c.Pbarterm)}};
    if (s.horizon) {
        j["horizon"] = *s.horizon;
    }
    j["solver"] = {{"tol", s.solver.tol}, {"maxHorizon", s.solver.maxHorizon}};
    if (s.solver.steps) {
        j["solver"]["steps"] = *s.solver.steps;
    }
    if (s.simulation) {
        const auto& sim = *s.simulation;
        const auto& cfg = sim.config;
        json js = {{"dt", cfg.dt},
                   {"T", cfg.T},
                   {"paths", cfg.paths},
                   {"seed", cfg.seed},
                   {"records", cfg.records},
                   {"policy", to_string(sim.policy)}};
        if (const auto* d = std::get_if<Deterministic>(&cfg.initial)) {
            js["x0"] = vec_json(d->x0);
        } else {
            const auto& g = std::get<Gaussian>(cfg.initial);
            js["x0_mean"] = vec_json(g.mean);
            js["x0_covariance"] = matrix_to_json(g.covariance);
        }
        if (!sim.gains.empty()) {
            js["gains"] = json::array();
            for (const auto& ng : sim.gains) {
                js["gains"].push_back(
                    {{"name", ng.name}, {"K", matrix_to_json(ng.gains.K)}, {"Kbar", matrix_to_json(ng.gains.Kbar)}});
            }
        }
        j["simulation"] = std::move(js);
    }
    return j;
}

} // namespace mflq
