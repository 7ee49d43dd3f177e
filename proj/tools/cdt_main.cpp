// cdt: simulate a perturbation screen with a planted regulatory network,
// train the dual-modality model on it, and run the recovery analyses.

#include <CLI11.hpp>
#include <cstdio>
#include <exception>

#include "cdt/error.hpp"
#include "cdt/pipeline.hpp"

int main(int argc, char** argv) {
    CLI::App app{"cdt: perturbation-screen simulator, model trainer, and analysis suite"};
    app.require_subcommand(1);

    std::string config_path, out_dir;
    std::uint64_t seed = 0;
    bool seed_set = false;

    const auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "run configuration JSON")->required();
        cmd->add_option("--out", out_dir, "output directory (must exist)");
        cmd->add_option("--seed", seed, "override the config seeds")->each([&](const std::string&) {
            seed_set = true;
        });
    };

    auto* sim = app.add_subcommand("simulate", "generate a synthetic screen with ground truth");
    auto* train = app.add_subcommand("train", "train the model on a simulated screen");
    auto* analyze = app.add_subcommand("analyze", "run attention, enrichment, and attribution analyses");
    auto* report = app.add_subcommand("report", "summarize a completed run");
    for (auto* cmd : {sim, train, analyze, report}) add_common(cmd);

    CLI11_PARSE(app, argc, argv);

    try {
        cdt::RunConfig cfg = cdt::load_run_config(config_path);
        if (!out_dir.empty()) cfg.out_dir = out_dir;
        if (seed_set) cdt::override_seed(cfg, seed);
        if (sim->parsed()) cdt::cmd_simulate(cfg);
        if (train->parsed()) cdt::cmd_train(cfg);
        if (analyze->parsed()) cdt::cmd_analyze(cfg);
        if (report->parsed()) cdt::cmd_report(cfg);
        return 0;
    } catch (const cdt::ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const cdt::LeakageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const cdt::MismatchError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    } catch (const cdt::MissingInputError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 5;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
