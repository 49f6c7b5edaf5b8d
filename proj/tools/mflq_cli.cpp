#include <iostream>

#include <CLI11.hpp>

#include "mflq/cli.hpp"

int main(int argc, char** argv)
{
    mflq::cli::Options opt;
    CLI::App app{"Mean-field LQ solver: Riccati flows, stationary gains, stabilizability, Monte Carlo"};
    app.require_subcommand(1, 1);
    app.set_help_all_flag("--help-all");

    // Every subcommand accepts the same flags.
    auto add_common = [&opt](CLI::App* sub) {
        sub->add_option("--config", opt.config, "scenario file (JSON)");
        sub->add_option("--out", opt.out, "directory for artifacts");
        sub->add_option("--format", opt.format, "stdout format")->check(CLI::IsMember({"csv", "json"}));
        sub->add_option("--seed", opt.seed, "simulation seed");
        sub->add_option("--paths", opt.paths, "simulation paths");
        sub->add_option("--dt", opt.dt, "simulation step");
        sub->add_option("--horizon", opt.horizon, "finite horizon T");
        sub->add_option("--tol", opt.tol, "stationary solver tolerance");
    };
    add_common(app.add_subcommand("riccati", "integrate the coupled Riccati equations backward"));
    add_common(app.add_subcommand("are", "solve the stationary coupled equations"));
    add_common(app.add_subcommand("check", "decide mean-square stabilizability"));
    add_common(app.add_subcommand("simulate", "Monte Carlo simulation of the closed loop"));
    add_common(app.add_subcommand("reproduce", "run both worked examples and compare with reported values"));

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return mflq::cli::kValidation;
    }
    opt.command = app.get_subcommands().front()->get_name();
    return mflq::cli::run(opt, std::cout, std::cerr);
}
