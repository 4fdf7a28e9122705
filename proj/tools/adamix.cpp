#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "adamix/commands.hpp"

int main(int argc, char** argv) {
    using namespace adamix;
    CLI::App app{"Mixture-of-adaptations fine-tuning on a frozen toy encoder"};
    app.require_subcommand(1);

    std::string config_path;
    auto* train = app.add_subcommand("train", "train a mixture and write checkpoint + metrics CSV");
    train->add_option("--config", config_path, "run config file")->required();

    std::string in_path, out_path;
    auto* merge = app.add_subcommand("merge", "average each site's modules into one");
    merge->add_option("--in", in_path, "input checkpoint")->required();
    merge->add_option("--out", out_path, "output checkpoint")->required();

    std::string ckpt_path, mode = "merge", report_path;
    std::optional<std::size_t> passes;
    std::uint64_t seed = 0;
    auto* eval = app.add_subcommand("eval", "accuracy of a checkpoint under one inference mode");
    eval->add_option("--ckpt", ckpt_path, "checkpoint")->required();
    eval->add_option("--mode", mode, "merge | random_route | fixed_route | ensemble | ensemble(T)");
    eval->add_option("--T", passes, "ensemble passes (default 4)");
    eval->add_option("--seed", seed, "routing seed for random_route and ensemble");
    eval->add_option("--report", report_path, "JSON report path");

    std::string grid_path;
    auto* ablate = app.add_subcommand("ablate", "run an ablation grid and write its CSV");
    ablate->add_option("--grid", grid_path, "grid config file")->required();

    auto* inspect = app.add_subcommand("inspect", "summarize a checkpoint");
    inspect->add_option("--ckpt", ckpt_path, "checkpoint")->required();

    std::string csv_path, svg_path;
    auto* plot = app.add_subcommand("plot", "render a metrics or ablation CSV as SVG");
    plot->add_option("--csv", csv_path, "metrics or ablation CSV")->required();
    plot->add_option("--out", svg_path, "SVG output path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    const Logger log;
    try {
        if (*train) {
            cmd_train(config_path, log);
        } else if (*merge) {
            cmd_merge(in_path, out_path, log);
        } else if (*eval) {
            InferenceSpec spec;
            apply_mode_string(mode, spec);
            if (passes) spec.passes = *passes;
            spec.seed = seed;
            const EvalOutcome r = cmd_eval(ckpt_path, spec, report_path, log);
            std::cout << format_double(r.accuracy) << '\n';
        } else if (*ablate) {
            cmd_ablate(grid_path, log);
        } else if (*inspect) {
            cmd_inspect(ckpt_path, std::cout);
        } else if (*plot) {
            cmd_plot(csv_path, svg_path, log);
        }
    } catch (const std::exception& e) {
        log.error(e.what());
        return exit_code(e);
    }
    return 0;
}
