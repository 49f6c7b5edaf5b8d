#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>

#include <json.hpp>

#include "mflq/scenario.hpp"
#include "mflq/types.hpp"

namespace mflq::cli {

enum ExitCode : int {
    kOk = 0,
    kCriteriaFailed = 1, ///< reproduce: at least one check failed
    kValidation = 2,
    kNotStabilizable = 3,
    kNumerical = 4,
};

[[nodiscard]] int exit_code(ErrorKind kind);

struct Options {
    std::string command;
    std::optional<std::string> config;
    std::optional<std::string> out;
    std::string format = "json";
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> paths;
    std::optional<double> dt;
    std::optional<double> horizon;
    std::optional<double> tol;
};

/// Runs one command. The summary goes to `out` in the requested format; artifacts are
/// written to Options::out when set. Errors are reported on `err` and mapped to exit codes.
[[nodiscard]] int run(const Options& opt, std::ostream& out, std::ostream& err);

/// Applies the command-line overrides to a loaded scenario.
void apply_overrides(Scenario& s, const Options& opt);

/// Flattens a JSON document to "key,value" rows with dotted keys.
void write_flat_csv(std::ostream& os, const nlohmann::json& j);

/// The two bundled worked examples, as scenarios.
[[nodiscard]] Scenario example1_scenario();
[[nodiscard]] Scenario example2_scenario();

} // namespace mflq::cli
