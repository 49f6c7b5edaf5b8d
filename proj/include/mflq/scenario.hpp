#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mflq/simulate.hpp"
#include "mflq/types.hpp"

namespace mflq {

struct SolverSettings {
    double tol = 1e-9;
    std::optional<std::size_t> steps; ///< RK4 steps for finite-horizon runs
    double maxHorizon = 16384.0;
};

struct NamedGains {
    std::string name;
    Gainsd gains;
};

enum class Policy { Stationary, FiniteHorizon, OpenLoop };

struct SimulationSettings {
    SimConfig config;
    Policy policy = Policy::Stationary;
    /// Explicit gain sets; when present they replace the policy.
    std::vector<NamedGains> gains;
};

struct Scenario {
    std::string name;
    MeanFieldSystemd system;
    CostSpecd cost;
    std::optional<double> horizon;
    std::optional<SimulationSettings> simulation;
    SolverSettings solver;
};

/// Parses a scenario document. Matrices are nested row-major arrays; a 1x1 matrix may
/// be a plain number. `source` prefixes error messages. A document with a top-level
/// "scenario" member (an emitted summary) is read through that member.
[[nodiscard]] Scenario parse_scenario(const std::string& text, const std::string& source = "<input>");
[[nodiscard]] Scenario load_scenario(const std::string& path);

/// Normalized form that parse_scenario accepts back.
[[nodiscard]] nlohmann::json to_json(const Scenario& s);

[[nodiscard]] nlohmann::json matrix_to_json(const MatXd& M);
[[nodiscard]] const char* to_string(Policy p);

} // namespace mflq
