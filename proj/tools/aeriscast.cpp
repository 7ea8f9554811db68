// Copyright 2026 The aeriscast Authors
// SPDX-License-Identifier: Apache-2.0

// aeriscast <command> --config <path> [--set key=value ...]

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "aeriscast/pipeline.hpp"

namespace {

using namespace aeriscast;

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kNumeric = 3, kIo = 4 };

struct Common {
    std::string config;
    std::vector<std::string> sets;
    bool quiet = false;
};

void add_common(CLI::App *cmd, Common &c) {
    cmd->add_option("--config", c.config, "run configuration (JSON)");
    cmd->add_option("--set", c.sets, "override a config field, e.g. --set train.epochs=5")->take_all();
    cmd->add_flag("-q,--quiet", c.quiet, "suppress progress output");
}

int run(CLI::App &app, const Common &c) {
    std::vector<std::string> sets = c.sets;
    auto sub = app.get_subcommands().front();
    const std::string name = sub->get_name();

    if (name == "gradcheck") {
        const int steps = sub->get_option("--steps")->as<int>();
        const auto seed = sub->get_option("--seed")->as<std::uint64_t>();
        const auto rep = gradient_check(seed, steps);
        for (const auto &t : rep.tensors)
            std::printf("%-32s checked %5zu  max rel err %.3e\n", t.name.c_str(), t.checked, t.max_rel_error);
        std::printf("max relative error %.3e over %zu coordinates (%.1fs)\n", rep.max_rel_error, rep.coordinates,
                    rep.seconds);
        const double tol = steps == 1 ? 2e-3 : 5e-3;
        return rep.max_rel_error < tol ? kOk : kNumeric;
    }

    if (name == "rollout") {
        if (auto *o = sub->get_option("--inits"); o->count()) sets.push_back("evaluate.n_inits=" + o->as<std::string>());
        if (auto *o = sub->get_option("--lead-days"); o->count())
            sets.push_back("evaluate.lead_days=" + o->as<std::string>());
    }
    int ft_steps = 0;
    if (name == "finetune") ft_steps = sub->get_option("--steps")->as<int>();

    const auto cfg = load_run_config(c.config, sets);
    Pipeline p(cfg, !c.quiet);
    std::filesystem::path out;
    if (name == "generate-data") out = p.generate_data();
    else if (name == "compute-stats") out = p.compute_stats();
    else if (name == "train") out = p.train();
    else if (name == "finetune") out = p.finetune(ft_steps);
    else if (name == "rollout") out = p.rollout();
    else if (name == "evaluate") out = p.evaluate();
    else if (name == "report") out = p.report();
    else if (name == "ablate") out = p.ablate();
    std::printf("%s\n", out.string().c_str());
    return kOk;
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"aeriscast: shifted-window transformer forecasting lab on a toy atmosphere"};
    app.require_subcommand(1);
    Common common;
    for (const char *cmd : {"generate-data", "compute-stats", "train", "evaluate", "report", "ablate"})
        add_common(app.add_subcommand(cmd), common);
    auto *ft = app.add_subcommand("finetune", "multi-step fine-tuning of the previous model in finetune.chain");
    add_common(ft, common);
    ft->add_option("--steps", "unrolled steps (an entry of finetune.chain)")->required()->check(CLI::PositiveNumber);
    auto *ro = app.add_subcommand("rollout", "forecasts from evenly spaced initial conditions");
    add_common(ro, common);
    ro->add_option("--inits", "number of initial conditions (default 11)")->check(CLI::PositiveNumber);
    ro->add_option("--lead-days", "forecast length in days (default 7)")->check(CLI::PositiveNumber);
    auto *gc = app.add_subcommand("gradcheck", "finite-difference check of the analytic gradients");
    gc->add_option("--steps", "unrolled steps in the loss")->default_val(1)->check(CLI::Range(1, 8));
    gc->add_option("--seed", "problem seed")->default_val(0);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        return app.exit(e) == 0 ? kOk : kConfig;
    }
    try {
        return run(app, common);
    } catch (const ConfigError &e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kConfig;
    } catch (const NumericFailure &e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return kNumeric;
    } catch (const PersistenceError &e) {
        std::fprintf(stderr, "I/O error: %s\n", e.what());
        return kIo;
    } catch (const std::filesystem::filesystem_error &e) {
        std::fprintf(stderr, "I/O error: %s\n", e.what());
        return kIo;
    } catch (const std::exception &e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kFailure;
    }
}
