// Copyright 2026 The aeriscast Authors
// SPDX-License-Identifier: Apache-2.0

// Config-driven experiment stages. Every stage writes into
// <output_dir>/<kind>-<hash>/ where the hash covers exactly the configuration
// that determines the stage's outputs, so reruns are cache hits and ablation
// cells share their common upstream stages.

#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "aeriscast/data.hpp"
#include "aeriscast/grid.hpp"
#include "aeriscast/loss.hpp"
#include "aeriscast/model.hpp"
#include "aeriscast/rollout.hpp"
#include "aeriscast/svg.hpp"
#include "aeriscast/training.hpp"
#include "aeriscast/verify.hpp"

namespace aeriscast {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Run configuration

struct DataConfig {
    std::string path; // existing dataset directory; empty -> generate toy data
    int n_lat = 32;
    int n_lon = 64;
    ToyConfig toy;
};

struct FinetuneConfig {
    std::vector<int> chain = {4, 8}; // each entry fine-tunes the previous one
    double learning_rate = 1e-4;
    int epochs = 3;
    int samples_per_epoch = 0;
    int val_samples = 0;
};

struct EvalConfig {
    std::string split = "val";
    int n_inits = 11;
    double lead_days = 7.0;
    std::vector<std::int64_t> init_times; // unix seconds; overrides n_inits when non-empty
    std::vector<std::string> channels = {"z500", "t850", "t2m"};
    int ensemble_members = 9;
    int ensemble_lag_steps = 1;
    bool fair_crps = false;
    int model_steps = 1; // 1 -> pretrained model, otherwise a fine-tune chain entry
    std::vector<int> report_lead_hours = {48, 96, 168};
};

struct AblateConfig {
    std::vector<int> n_steps = {1, 8};
    std::string channel = "z500";
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string output_dir = "runs";
    DataConfig data;
    ModelConfig model;
    TrainConfig train;
    FinetuneConfig finetune;
    EvalConfig evaluate;
    AblateConfig ablate;

    void validate() const;
};

inline void to_json(json &j, const DataConfig &c) {
    j = {{"path", c.path}, {"n_lat", c.n_lat}, {"n_lon", c.n_lon}, {"toy", c.toy}};
}
inline void from_json(const json &j, DataConfig &c) {
    c.path = j.at("path").get<std::string>();
    c.n_lat = j.at("n_lat").get<int>();
    c.n_lon = j.at("n_lon").get<int>();
    c.toy = j.at("toy").get<ToyConfig>();
}

inline void to_json(json &j, const FinetuneConfig &c) {
    j = {{"chain", c.chain}, {"learning_rate", c.learning_rate}, {"epochs", c.epochs},
         {"samples_per_epoch", c.samples_per_epoch}, {"val_samples", c.val_samples}};
}
inline void from_json(const json &j, FinetuneConfig &c) {
    c.chain = j.at("chain").get<std::vector<int>>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.epochs = j.at("epochs").get<int>();
    c.samples_per_epoch = j.at("samples_per_epoch").get<int>();
    c.val_samples = j.at("val_samples").get<int>();
}

inline void to_json(json &j, const EvalConfig &c) {
    j = {{"split", c.split},
         {"n_inits", c.n_inits},
         {"lead_days", c.lead_days},
         {"init_times", c.init_times},
         {"channels", c.channels},
         {"ensemble_members", c.ensemble_members},
         {"ensemble_lag_steps", c.ensemble_lag_steps},
         {"fair_crps", c.fair_crps},
         {"model_steps", c.model_steps},
         {"report_lead_hours", c.report_lead_hours}};
}
inline void from_json(const json &j, EvalConfig &c) {
    c.split = j.at("split").get<std::string>();
    c.n_inits = j.at("n_inits").get<int>();
    c.lead_days = j.at("lead_days").get<double>();
    c.init_times = j.at("init_times").get<std::vector<std::int64_t>>();
    c.channels = j.at("channels").get<std::vector<std::string>>();
    c.ensemble_members = j.at("ensemble_members").get<int>();
    c.ensemble_lag_steps = j.at("ensemble_lag_steps").get<int>();
    c.fair_crps = j.at("fair_crps").get<bool>();
    c.model_steps = j.at("model_steps").get<int>();
    c.report_lead_hours = j.at("report_lead_hours").get<std::vector<int>>();
}

inline void to_json(json &j, const AblateConfig &c) { j = {{"n_steps", c.n_steps}, {"channel", c.channel}}; }
inline void from_json(const json &j, AblateConfig &c) {
    c.n_steps = j.at("n_steps").get<std::vector<int>>();
    c.channel = j.at("channel").get<std::string>();
}

inline void to_json(json &j, const RunConfig &c) {
    j = {{"seed", c.seed},         {"output_dir", c.output_dir}, {"data", c.data},         {"model", c.model},
         {"train", c.train},       {"finetune", c.finetune},     {"evaluate", c.evaluate}, {"ablate", c.ablate}};
}
inline void from_json(const json &j, RunConfig &c) {
    c.seed = j.at("seed").get<std::uint64_t>();
    c.output_dir = j.at("output_dir").get<std::string>();
    c.data = j.at("data").get<DataConfig>();
    c.model = j.at("model").get<ModelConfig>();
    c.train = j.at("train").get<TrainConfig>();
    c.finetune = j.at("finetune").get<FinetuneConfig>();
    c.evaluate = j.at("evaluate").get<EvalConfig>();
    c.ablate = j.at("ablate").get<AblateConfig>();
}

inline void RunConfig::validate() const {
    if (data.path.empty()) {
        if (data.n_lat < 2) throw ConfigError("data.n_lat", "must be >= 2");
        if (data.n_lon < 2) throw ConfigError("data.n_lon", "must be >= 2");
        try {
            data.toy.validate();
        } catch (const ConfigError &e) {
            throw ConfigError("data.toy." + e.field(), e.constraint());
        }
        const auto schema = toy_schema(data.toy.n_prog_channels);
        if (model.in_channels != schema.size())
            throw ConfigError("model.in_channels", "must equal the schema's channel count (" +
                                                       std::to_string(schema.size()) + ")");
        if (model.out_channels != schema.n_prognostic())
            throw ConfigError("model.out_channels", "must equal the prognostic channel count (" +
                                                        std::to_string(schema.n_prognostic()) + ")");
        for (const auto &ch : evaluate.channels)
            if (schema.index_of(ch) < 0 || schema.index_of(ch) >= schema.n_prognostic())
                throw ConfigError("evaluate.channels", "'" + ch + "' is not a prognostic channel of the toy schema");
        if (schema.index_of(ablate.channel) < 0 || schema.index_of(ablate.channel) >= schema.n_prognostic())
            throw ConfigError("ablate.channel", "'" + ablate.channel + "' is not a prognostic channel");
        try {
            model.check_grid(make_grid(data.n_lat, data.n_lon));
        } catch (const InvalidArgument &e) {
            throw ConfigError("model.patch_size", e.what());
        }
    }
    model.validate();
    train.validate();
    if (train.n_steps != 1) throw ConfigError("train.n_steps", "pre-training is single-step; use finetune.chain");
    for (std::size_t i = 0; i < finetune.chain.size(); ++i)
        if (finetune.chain[i] < 2 || (i > 0 && finetune.chain[i] <= finetune.chain[i - 1]))
            throw ConfigError("finetune.chain", "must be strictly increasing step counts >= 2");
    if (!(finetune.learning_rate >= 0.0)) throw ConfigError("finetune.learning_rate", "must be >= 0");
    if (finetune.epochs < 0) throw ConfigError("finetune.epochs", "must be >= 0");
    if (evaluate.split != "train" && evaluate.split != "val" && evaluate.split != "test")
        throw ConfigError("evaluate.split", "must be train, val or test");
    if (evaluate.n_inits < 1) throw ConfigError("evaluate.n_inits", "must be >= 1");
    if (!(evaluate.lead_days > 0.0)) throw ConfigError("evaluate.lead_days", "must be > 0");
    if (evaluate.channels.empty()) throw ConfigError("evaluate.channels", "must name at least one channel");
    if (evaluate.ensemble_members < 1) throw ConfigError("evaluate.ensemble_members", "must be >= 1");
    if (evaluate.ensemble_lag_steps < 1) throw ConfigError("evaluate.ensemble_lag_steps", "must be >= 1");
    if (evaluate.model_steps != 1 &&
        std::find(finetune.chain.begin(), finetune.chain.end(), evaluate.model_steps) == finetune.chain.end())
        throw ConfigError("evaluate.model_steps", "must be 1 or an entry of finetune.chain");
    for (int n : ablate.n_steps)
        if (n != 1 && std::find(finetune.chain.begin(), finetune.chain.end(), n) == finetune.chain.end())
            throw ConfigError("ablate.n_steps", "entries must be 1 or in finetune.chain");
    if (ablate.n_steps.empty()) throw ConfigError("ablate.n_steps", "must not be empty");
}

namespace detail {

// Fields whose keys are free-form rather than fixed by the defaults.
inline bool free_form(const std::string &path) { return path == "train.surface_emphasis"; }

inline void merge_strict(json &base, const json &over, const std::string &path) {
    if (!over.is_object()) throw ConfigError(path.empty() ? "config" : path, "must be a JSON object");
    for (auto it = over.begin(); it != over.end(); ++it) {
        const std::string key = path.empty() ? it.key() : path + "." + it.key();
        if (!base.contains(it.key())) {
            if (!free_form(path)) throw ConfigError(key, "unknown field");
            base[it.key()] = it.value();
        } else if (base[it.key()].is_object() && !free_form(key)) {
            merge_strict(base[it.key()], it.value(), key);
        } else {
            base[it.key()] = it.value();
        }
    }
}

} // namespace detail

inline RunConfig run_config_from_json(const json &j) {
    json base = RunConfig{};
    detail::merge_strict(base, j, "");
    RunConfig c;
    try {
        c = base.get<RunConfig>();
    } catch (const json::exception &e) {
        throw ConfigError("config", std::string("type error: ") + e.what());
    } catch (const InvalidArgument &e) {
        throw ConfigError("config", e.what());
    }
    c.validate();
    return c;
}

/// Applies "a.b.c=value" overrides; the value is parsed as JSON when
/// possible and taken as a string otherwise.
inline json apply_overrides(json j, const std::vector<std::string> &sets) {
    for (const auto &s : sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError(s, "override must look like key=value");
        const std::string key = s.substr(0, eq), raw = s.substr(eq + 1);
        json value = json::parse(raw, nullptr, false);
        if (value.is_discarded()) value = raw;
        std::vector<std::string> parts;
        for (std::size_t a = 0, b; a <= key.size(); a = b + 1) {
            b = key.find('.', a);
            if (b == std::string::npos) b = key.size();
            parts.push_back(key.substr(a, b - a));
        }
        json *node = &j;
        for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
            if (!node->contains(parts[i])) (*node)[parts[i]] = json::object();
            node = &(*node)[parts[i]];
            if (!node->is_object()) throw ConfigError(key, "'" + parts[i] + "' is not an object");
        }
        (*node)[parts.back()] = value;
    }
    return j;
}

inline RunConfig load_run_config(const fs::path &path, const std::vector<std::string> &sets = {}) {
    json j;
    if (!path.empty()) {
        j = json::parse(read_text(path), nullptr, false);
        if (j.is_discarded()) throw ConfigError("config", "file " + path.string() + " is not valid JSON");
    } else {
        j = json::object();
    }
    // Overrides are checked against the defaults the same way file fields are.
    try {
        j = apply_overrides(std::move(j), sets);
    } catch (const json::exception &e) {
        throw ConfigError("--set", e.what());
    }
    return run_config_from_json(j);
}

inline std::string config_hash(const json &j) {
    const std::string s = j.dump();
    return hex64(fnv1a64(std::as_bytes(std::span(s.data(), s.size())))).substr(0, 12);
}

// ---------------------------------------------------------------------------
// Stage directories

inline constexpr const char *kDoneMarker = "DONE";
inline constexpr const char *kFailedMarker = "FAILED";
inline constexpr const char *kIncompleteMarker = "INCOMPLETE";

struct StageResult {
    fs::path dir;
    bool cached = false;
};

/// Runs `body(dir)` unless dir/DONE exists. While running, dir/INCOMPLETE
/// marks the directory; an exception leaves dir/FAILED with the message.
/// Resumable stages keep earlier partial contents instead of wiping them.
template <class F>
StageResult run_stage(const fs::path &root, const std::string &kind, const json &key, F &&body,
                      bool resumable = false, bool verbose = true) {
    const std::string hash = config_hash(key);
    const fs::path dir = root / (kind + "-" + hash);
    if (fs::exists(dir / kDoneMarker)) {
        static std::set<std::string> announced;
        if (verbose && announced.insert(dir.string()).second)
            std::fprintf(stderr, "[%s] cached: %s\n", kind.c_str(), dir.c_str());
        return {dir, true};
    }
    if (!resumable && fs::exists(dir)) fs::remove_all(dir);
    fs::create_directories(dir);
    fs::remove(dir / kFailedMarker);
    write_text(dir / kIncompleteMarker, "stage " + kind + " started\n");
    write_text(dir / "run.json", json{{"kind", kind}, {"hash", hash}, {"key", key}}.dump(1) + "\n");
    if (verbose) std::fprintf(stderr, "[%s] running: %s\n", kind.c_str(), dir.c_str());
    try {
        body(dir);
    } catch (const std::exception &e) {
        write_text(dir / kFailedMarker, std::string(e.what()) + "\n");
        fs::remove(dir / kIncompleteMarker);
        throw;
    }
    write_text(dir / kDoneMarker, hash + "\n");
    fs::remove(dir / kIncompleteMarker);
    return {dir, false};
}

// ---------------------------------------------------------------------------
// Pipeline

class Pipeline {
public:
    explicit Pipeline(RunConfig cfg, bool verbose = true) : cfg_(std::move(cfg)), verbose_(verbose) {
        cfg_.validate();
    }

    const RunConfig &config() const { return cfg_; }
    fs::path root() const { return cfg_.output_dir; }

    // Stage keys -------------------------------------------------------------

    json data_key() const {
        if (!cfg_.data.path.empty()) return {{"path", fs::absolute(cfg_.data.path).lexically_normal().string()}};
        return {{"toy", cfg_.data.toy}, {"n_lat", cfg_.data.n_lat}, {"n_lon", cfg_.data.n_lon}};
    }
    json stats_key() const { return {{"data", config_hash(data_key())}}; }
    json train_key() const {
        return {{"data", config_hash(data_key())}, {"model", cfg_.model}, {"train", cfg_.train}, {"seed", cfg_.seed}};
    }
    json finetune_key(int steps) const {
        return {{"parent", config_hash(model_key(parent_steps(steps)))}, {"steps", steps},
                {"train", finetune_train_config(steps)}};
    }
    json model_key(int steps) const { return steps == 1 ? train_key() : finetune_key(steps); }
    json rollout_key() const {
        const auto &e = cfg_.evaluate;
        return {{"model", config_hash(model_key(e.model_steps))},
                {"model_steps", e.model_steps},
                {"split", e.split},
                {"n_inits", e.n_inits},
                {"lead_days", e.lead_days},
                {"init_times", e.init_times},
                {"ensemble_members", e.ensemble_members},
                {"ensemble_lag_steps", e.ensemble_lag_steps}};
    }
    json evaluate_key() const {
        return {{"rollout", config_hash(rollout_key())}, {"channels", cfg_.evaluate.channels},
                {"fair_crps", cfg_.evaluate.fair_crps}};
    }
    json report_key() const {
        return {{"evaluate", config_hash(evaluate_key())}, {"report_lead_hours", cfg_.evaluate.report_lead_hours}};
    }
    json ablate_key() const {
        json j = cfg_;
        j.erase("output_dir");
        j["evaluate"].erase("model_steps");
        j["train"].erase("lat_weighting");
        j["train"].erase("channel_weighting");
        j["model"].erase("prediction_mode");
        return j;
    }

    int parent_steps(int steps) const {
        const auto &ch = cfg_.finetune.chain;
        const auto it = std::find(ch.begin(), ch.end(), steps);
        if (it == ch.end()) throw ConfigError("finetune.chain", "does not contain " + std::to_string(steps) + " steps");
        return it == ch.begin() ? 1 : *(it - 1);
    }

    TrainConfig finetune_train_config(int steps) const {
        TrainConfig tc = cfg_.train;
        tc.n_steps = steps;
        tc.learning_rate = cfg_.finetune.learning_rate;
        tc.epochs = cfg_.finetune.epochs;
        tc.samples_per_epoch = cfg_.finetune.samples_per_epoch;
        tc.val_samples = cfg_.finetune.val_samples;
        tc.seed = derive_seed(cfg_.train.seed, 0xf17e, static_cast<std::uint64_t>(steps));
        return tc;
    }

    // Stages -----------------------------------------------------------------

    fs::path generate_data() {
        if (!cfg_.data.path.empty()) {
            load_meta(cfg_.data.path); // validates the directory
            return cfg_.data.path;
        }
        return run_stage(root(), "data", data_key(), [&](const fs::path &dir) {
            const auto grid = make_grid(cfg_.data.n_lat, cfg_.data.n_lon);
            auto ds = generate_toy_dataset(cfg_.data.toy, grid);
            save_dataset(dir / "dataset", ds, static_cast<std::size_t>(cfg_.data.toy.times_per_shard));
            dataset_ = std::make_shared<Dataset>(std::move(ds));
        }, false, verbose_).dir / "dataset";
    }

    fs::path compute_stats() {
        const auto data_dir = generate_data();
        return run_stage(root(), "stats", stats_key(), [&](const fs::path &dir) {
            const Dataset &ds = raw_dataset(data_dir);
            const auto st = compute_norm_stats(ds, ds.meta.train);
            json j = {{"data_hash", config_hash(data_key())}, {"split", "train"}, {"schema", ds.meta.schema},
                      {"stats", st}};
            write_text(dir / "stats.json", j.dump(1) + "\n");
        }, false, verbose_).dir / "stats.json";
    }

    /// Dataset with training-split statistics attached.
    const Dataset &dataset() {
        const auto data_dir = generate_data();
        const auto stats_path = compute_stats();
        Dataset &ds = raw_dataset(data_dir);
        if (!ds.meta.stats) ds.meta.stats = json::parse(read_text(stats_path)).at("stats").get<NormStats>();
        return ds;
    }

    fs::path train() {
        const auto &ds = dataset();
        return run_stage(root(), "train", train_key(), [&](const fs::path &dir) {
            const auto ckdir = dir / "checkpoint";
            Checkpoint ck;
            if (fs::exists(ckdir / "state.json")) {
                ck = load_checkpoint(ckdir);
                if (verbose_) std::fprintf(stderr, "[train] resuming after epoch %d\n", ck.epoch);
            } else {
                ck.model = cfg_.model;
                ck.grid = ds.meta.grid;
                ck.stats = ds.stats();
                ck.train = cfg_.train;
                ck.rng_seed = cfg_.train.seed;
                ck.params = init_parameters<float>(cfg_.model, ds.meta.grid, cfg_.seed);
                ck.optimizer = OptimizerState<float>(ck.params.size());
            }
            finish_training(ck, ds, dir);
        }, true, verbose_).dir;
    }

    fs::path finetune(int steps) {
        const int parent = parent_steps(steps);
        const auto parent_dir = model_dir(parent);
        const auto &ds = dataset();
        return run_stage(root(), "finetune" + std::to_string(steps), finetune_key(steps), [&](const fs::path &dir) {
            const auto ckdir = dir / "checkpoint";
            Checkpoint ck;
            if (fs::exists(ckdir / "state.json")) {
                ck = load_checkpoint(ckdir);
                if (verbose_) std::fprintf(stderr, "[finetune] resuming after epoch %d\n", ck.epoch);
            } else {
                const auto p = load_checkpoint(parent_dir / "checkpoint");
                const auto tc = finetune_train_config(steps);
                ck.model = p.model;
                ck.grid = p.grid;
                ck.stats = p.stats;
                ck.train = tc;
                ck.rng_seed = tc.seed;
                ck.params = inference_params(p);
                ck.optimizer = OptimizerState<float>(ck.params.size());
            }
            finish_training(ck, ds, dir);
        }, true, verbose_).dir;
    }

    fs::path model_dir(int steps) { return steps == 1 ? train() : finetune(steps); }

    struct InitPlan {
        std::vector<Timestamp> main;            // scored initial conditions
        std::map<std::int64_t, int> n_steps;    // every init to roll out -> length
    };

    /// Evenly spaced initial conditions inside the evaluation split, leaving
    /// room for the full lead and for the older lagged members.
    InitPlan plan_inits(const Dataset &ds) const {
        const auto &e = cfg_.evaluate;
        const auto split = ds.meta.split(e.split);
        const std::int64_t dt = ds.meta.dt_seconds();
        const int lead_steps = lead_steps_for(ds);
        const int back = (e.ensemble_members - 1) * e.ensemble_lag_steps;
        InitPlan plan;
        if (!e.init_times.empty()) {
            for (auto s : e.init_times) plan.main.push_back({s});
        } else {
            const std::int64_t lo = static_cast<std::int64_t>(split.begin) + back;
            const std::int64_t hi = static_cast<std::int64_t>(split.end) - 1 - lead_steps;
            if (hi < lo)
                throw ConfigError("evaluate.lead_days", "split '" + e.split + "' is too short for the lead and ensemble");
            for (int i = 0; i < e.n_inits; ++i) {
                const std::int64_t idx = e.n_inits == 1 ? lo : lo + (hi - lo) * i / (e.n_inits - 1);
                plan.main.push_back(ds.meta.times[static_cast<std::size_t>(idx)]);
            }
        }
        for (auto t0 : plan.main)
            for (int k = 0; k < e.ensemble_members; ++k) {
                const int lag = k * e.ensemble_lag_steps;
                auto &n = plan.n_steps[(t0 - lag * dt).seconds];
                n = std::max(n, lead_steps + lag);
            }
        return plan;
    }

    int lead_steps_for(const Dataset &ds) const {
        const double steps = cfg_.evaluate.lead_days * 24.0 * 3600.0 / static_cast<double>(ds.meta.dt_seconds());
        const int n = static_cast<int>(std::llround(steps));
        if (n < 1 || std::abs(steps - n) > 1e-9)
            throw ConfigError("evaluate.lead_days", "must be a whole number of time steps");
        return n;
    }

    fs::path rollout() {
        const auto mdir = model_dir(cfg_.evaluate.model_steps);
        const auto &ds = dataset();
        return run_stage(root(), "rollout", rollout_key(), [&](const fs::path &dir) {
            const auto m = load_model(mdir / "model");
            const auto plan = plan_inits(ds);
            const SwinForecaster<float> model(m.config, m.grid);
            std::vector<std::pair<std::int64_t, int>> jobs(plan.n_steps.begin(), plan.n_steps.end());
            json manifest = json::array();
            std::vector<std::string> names(jobs.size());
            parallel_for(jobs.size(), [&](std::size_t i) {
                const Timestamp t0{jobs[i].first};
                const auto idx = detail::truth_index(ds, t0);
                const auto f = aeriscast::rollout(model, m.params, m.stats, ds.meta.schema, ds.meta.grid,
                                                  ds.state(idx), jobs[i].second, ds.meta.dt_seconds(),
                                                  "model_steps_" + std::to_string(cfg_.evaluate.model_steps));
                names[i] = "init_" + std::to_string(t0.seconds);
                save_forecast(dir / names[i], f, ds.meta.schema, ds.meta.grid);
            });
            json main = json::array();
            for (auto t : plan.main) main.push_back(t.seconds);
            for (std::size_t i = 0; i < jobs.size(); ++i)
                manifest.push_back({{"dir", names[i]}, {"init_time", jobs[i].first},
                                    {"init_time_iso", iso8601({jobs[i].first})}, {"n_steps", jobs[i].second}});
            write_text(dir / "forecasts.json",
                       json{{"config_hash", config_hash(rollout_key())},
                            {"model_dir", mdir.string()},
                            {"lead_steps", lead_steps_for(ds)},
                            {"main_inits", main},
                            {"forecasts", manifest}}
                               .dump(1) +
                           "\n");
        }, false, verbose_).dir;
    }

    fs::path evaluate() {
        const auto rdir = rollout();
        const auto &ds = dataset();
        return run_stage(root(), "evaluate", evaluate_key(), [&](const fs::path &dir) {
            const json man = json::parse(read_text(rdir / "forecasts.json"));
            std::vector<Forecast> store;
            for (const auto &f : man.at("forecasts")) store.push_back(load_forecast(rdir / f.at("dir").get<std::string>()));
            const int lead_steps = man.at("lead_steps").get<int>();
            std::vector<Timestamp> main;
            for (const auto &t : man.at("main_inits")) main.push_back({t.get<std::int64_t>()});
            const auto metrics = evaluate_forecasts(ds, store, main, lead_steps);
            json out = metrics;
            out["config_hash"] = config_hash(evaluate_key());
            write_text(dir / "metrics.json", out.dump(1) + "\n");
        }, false, verbose_).dir;
    }

    /// Scores the main forecasts, the persistence and climatology baselines
    /// and the lagged ensembles built from `store`.
    json evaluate_forecasts(const Dataset &ds, const std::vector<Forecast> &store, const std::vector<Timestamp> &main,
                            int lead_steps) const {
        const auto &e = cfg_.evaluate;
        const int cp = ds.meta.schema.n_prognostic();
        const std::int64_t dt = ds.meta.dt_seconds();
        std::map<std::int64_t, const Forecast *> by_init;
        for (const auto &f : store) by_init[f.init_time.seconds] = &f;
        std::vector<Forecast> fc, pers, clim;
        const auto climatology = compute_climatology(ds, ds.meta.train);
        for (auto t0 : main) {
            const auto it = by_init.find(t0.seconds);
            if (it == by_init.end()) throw MissingInitError({t0});
            Forecast f = *it->second;
            f.states.resize(static_cast<std::size_t>(lead_steps));
            fc.push_back(std::move(f));
            pers.push_back(persistence_forecast(ds.state(detail::truth_index(ds, t0)), cp, lead_steps, dt));
            clim.push_back(climatology_forecast(climatology, t0, lead_steps, dt));
        }
        json j;
        j["n_inits"] = main.size();
        j["lead_hours"] = lat_rmse(fc, ds, e.channels.front()).lead_hours;
        j["normalized_rmse"] = normalized_rmse(fc, ds).values;
        j["persistence_normalized_rmse"] = normalized_rmse(pers, ds).values;
        json chans = json::object();
        for (const auto &ch : e.channels) {
            const int c = ds.meta.schema.index_of(ch);
            json cj;
            cj["rmse"] = lat_rmse(fc, ds, ch).values;
            cj["acc"] = acc(fc, ds, climatology, ch).values;
            cj["persistence_rmse"] = lat_rmse(pers, ds, ch).values;
            cj["climatology_rmse"] = lat_rmse(clim, ds, ch).values;
            cj["persistence_acc"] = acc(pers, ds, climatology, ch).values;
            const auto pf = mean_forecast_spectrum(fc, c, ds.meta.grid);
            const auto pt = mean_truth_spectrum(fc, ds, c);
            const auto ratio = psd_ratio(pf, pt);
            json rj = json::array();
            for (const auto &r : ratio) rj.push_back(r ? json(*r) : json(nullptr));
            cj["psd"] = {{"forecast", pf}, {"truth", pt}, {"ratio", rj}, {"top_quartile_ratio", top_quartile_mean(ratio)}};
            if (e.ensemble_members >= 2) {
                json ens = {{"newest_lead_hours", json::array()}, {"center_lead_hours", json::array()},
                            {"ens_mean_rmse", json::array()}, {"spread", json::array()},
                            {"spread_skill", json::array()}, {"crps", json::array()}};
                for (int L = 1; L <= lead_steps; ++L) {
                    double r = 0, s = 0, c2 = 0;
                    double center = 0;
                    for (auto t0 : main) {
                        const auto le = build_lagged_ensemble(store, t0 + L * dt, e.ensemble_members,
                                                              e.ensemble_lag_steps * dt, L);
                        const auto sc = ensemble_scores(le, ds, ch, e.fair_crps);
                        r += sc.ens_mean_rmse;
                        s += sc.spread;
                        c2 += sc.crps;
                        center = le.center_lead_hours;
                    }
                    const double n = static_cast<double>(main.size());
                    ens["newest_lead_hours"].push_back(static_cast<double>(L * dt) / kSecondsPerHour);
                    ens["center_lead_hours"].push_back(center);
                    ens["ens_mean_rmse"].push_back(r / n);
                    ens["spread"].push_back(s / n);
                    ens["spread_skill"].push_back(r > 0 ? json(s / r) : json(nullptr));
                    ens["crps"].push_back(c2 / n);
                }
                cj["ensemble"] = ens;
            }
            chans[ch] = cj;
        }
        j["channels"] = chans;
        return j;
    }

    fs::path report() {
        const auto edir = evaluate();
        return run_stage(root(), "report", report_key(), [&](const fs::path &dir) {
            const json m = json::parse(read_text(edir / "metrics.json"));
            write_report(dir, m, cfg_.evaluate.report_lead_hours,
                         "model_steps_" + std::to_string(cfg_.evaluate.model_steps), cfg_);
        }, false, verbose_).dir;
    }

    /// 2 x |n_steps| x 2 grid over channel weighting (with residual
    /// prediction), fine-tune depth and latitude weighting.
    fs::path ablate() {
        return run_stage(root(), "ablate", ablate_key(), [&](const fs::path &dir) {
            std::vector<RunScores> runs;
            json cells = json::array();
            for (int cw : {0, 1})
                for (int n : cfg_.ablate.n_steps)
                    for (int lw : {0, 1}) {
                        RunConfig c = cfg_;
                        c.train.channel_weighting = cw;
                        c.model.prediction_mode = cw ? PredictionMode::residual : PredictionMode::direct;
                        c.train.lat_weighting = lw;
                        c.evaluate.model_steps = n;
                        RunScores rs;
                        rs.name = "cw" + std::to_string(cw) + "_n" + std::to_string(n) + "_lw" + std::to_string(lw);
                        rs.channel_weighting = cw;
                        rs.n_step = n;
                        rs.lat_weighting = lw;
                        json cell = {{"run", rs.name}};
                        try {
                            Pipeline p(c, verbose_);
                            p.share_dataset(*this);
                            const auto edir = p.evaluate();
                            const json m = json::parse(read_text(edir / "metrics.json"));
                            rs.by_lead = scores_by_lead(m, cfg_.ablate.channel);
                            cell["model_dir"] = p.model_dir(n).string();
                            cell["evaluate_dir"] = edir.string();
                            share_dataset(p);
                        } catch (const NumericFailure &e) {
                            cell["error"] = e.what();
                            std::fprintf(stderr, "[ablate] %s failed: %s\n", rs.name.c_str(), e.what());
                        }
                        cells.push_back(cell);
                        runs.push_back(rs);
                    }
            const auto rep = score_report(runs, cfg_.evaluate.report_lead_hours, "rmse", cfg_.ablate.channel);
            write_text(dir / "ablation.csv", rep.csv());
            json j = rep.to_json();
            j["config_hash"] = config_hash(ablate_key());
            j["cells"] = cells;
            write_text(dir / "ablation.json", j.dump(1) + "\n");
        }, false, verbose_).dir;
    }

    /// Reuses another pipeline's in-memory dataset when both name the same data.
    void share_dataset(Pipeline &other) {
        if (config_hash(data_key()) != config_hash(other.data_key())) return;
        if (!dataset_ && other.dataset_) dataset_ = other.dataset_;
        if (dataset_ && !other.dataset_) other.dataset_ = dataset_;
    }

    static std::map<int, double> scores_by_lead(const json &metrics, const std::string &channel) {
        std::map<int, double> out;
        const auto hours = metrics.at("lead_hours").get<std::vector<double>>();
        const auto vals = metrics.at("channels").at(channel).at("rmse").get<std::vector<double>>();
        for (std::size_t i = 0; i < hours.size(); ++i) out[static_cast<int>(std::llround(hours[i]))] = vals[i];
        return out;
    }

private:
    Dataset &raw_dataset(const fs::path &data_dir) {
        if (!dataset_) dataset_ = std::make_shared<Dataset>(load_dataset(data_dir));
        return *dataset_;
    }

    void finish_training(Checkpoint &ck, const Dataset &ds, const fs::path &dir) {
        TrainHooks hooks;
        hooks.verbose = verbose_;
        hooks.on_epoch = [&](const Checkpoint &c) {
            save_checkpoint(dir / "checkpoint", c);
            std::ofstream log(dir / "log.jsonl", std::ios::app);
            log << to_json_line(c.log.back()).dump() << "\n";
        };
        run_training(ck, ds, hooks);
        save_checkpoint(dir / "checkpoint", ck);
        save_model(dir / "model", ck.model, ck.grid, ck.stats, inference_params(ck));
    }

    RunConfig cfg_;
    bool verbose_ = true;
    std::shared_ptr<Dataset> dataset_;

public:
    static void write_report(const fs::path &dir, const json &m, const std::vector<int> &leads, const std::string &name,
                             const RunConfig &cfg) {
        json bundle = json::object();
        std::string csv;
        for (const auto &[ch, cj] : m.at("channels").items()) {
            RunScores rs;
            rs.name = name;
            rs.channel_weighting = cfg.train.channel_weighting;
            rs.n_step = cfg.evaluate.model_steps;
            rs.lat_weighting = cfg.train.lat_weighting;
            rs.by_lead = scores_by_lead(m, ch);
            const auto rep = score_report({rs}, leads, "rmse", ch);
            write_text(dir / ("report_" + ch + ".csv"), rep.csv());
            bundle[ch] = rep.to_json();
        }
        write_text(dir / "report.json", bundle.dump(1) + "\n");
        write_plots(dir, m);
    }

    static void write_plots(const fs::path &dir, const json &m) {
        const auto hours = m.at("lead_hours").get<std::vector<double>>();
        std::vector<svg::Panel> rmse_panels, psd_panels, ens_panels;
        for (const auto &[ch, cj] : m.at("channels").items()) {
            svg::Panel p{"RMSE " + ch, "lead (h)", "RMSE"};
            p.series.push_back(svg::make_series("model", hours, cj.at("rmse").get<std::vector<double>>()));
            p.series.push_back(svg::make_series("persistence", hours, cj.at("persistence_rmse").get<std::vector<double>>()));
            p.series.push_back(svg::make_series("climatology", hours, cj.at("climatology_rmse").get<std::vector<double>>()));
            rmse_panels.push_back(p);

            const auto pf = cj.at("psd").at("forecast").get<std::vector<double>>();
            const auto pt = cj.at("psd").at("truth").get<std::vector<double>>();
            std::vector<double> k;
            for (std::size_t i = 1; i < pf.size(); ++i) k.push_back(static_cast<double>(i));
            svg::Panel ps{"PS1D " + ch, "zonal wavenumber", "power"};
            ps.log_x = ps.log_y = true;
            ps.series.push_back(svg::make_series("forecast", k, std::vector<double>(pf.begin() + 1, pf.end())));
            ps.series.push_back(svg::make_series("truth", k, std::vector<double>(pt.begin() + 1, pt.end())));
            svg::Panel pr{"PS1D ratio " + ch, "zonal wavenumber", "forecast / truth"};
            pr.log_x = true;
            pr.reference_y = 1.0;
            svg::Series rs{"ratio", k, {}};
            const auto &ratio = cj.at("psd").at("ratio");
            for (std::size_t i = 1; i < ratio.size(); ++i)
                rs.y.push_back(ratio[i].is_null() ? std::nullopt : std::optional<double>(ratio[i].get<double>()));
            pr.series.push_back(rs);
            psd_panels.push_back(ps);
            psd_panels.push_back(pr);

            if (cj.contains("ensemble")) {
                const auto &e = cj.at("ensemble");
                const auto lh = e.at("center_lead_hours").get<std::vector<double>>();
                svg::Panel a{ch + " ensemble", "center lead (h)", "RMSE / spread"};
                a.series.push_back(svg::make_series("ens-mean RMSE", lh, e.at("ens_mean_rmse").get<std::vector<double>>()));
                a.series.push_back(svg::make_series("spread", lh, e.at("spread").get<std::vector<double>>()));
                svg::Panel b{ch + " spread/skill", "center lead (h)", "ratio"};
                b.reference_y = 1.0;
                svg::Series ss{"spread-skill", lh, {}};
                for (const auto &v : e.at("spread_skill"))
                    ss.y.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
                b.series.push_back(ss);
                svg::Panel c{ch + " CRPS", "center lead (h)", "CRPS"};
                c.series.push_back(svg::make_series("CRPS", lh, e.at("crps").get<std::vector<double>>()));
                ens_panels.insert(ens_panels.end(), {a, b, c});
            }
        }
        write_text(dir / "rmse.svg", svg::render(rmse_panels, 3));
        write_text(dir / "psd.svg", svg::render(psd_panels, 2));
        if (!ens_panels.empty()) write_text(dir / "ensemble.svg", svg::render(ens_panels, 3));
    }
};

} // namespace aeriscast
