// Copyright 2026 The aeriscast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "aeriscast/data.hpp"
#include "aeriscast/loss.hpp"
#include "aeriscast/model.hpp"

namespace aeriscast {

// ---------------------------------------------------------------------------
// Optimizer

template <class S>
struct OptimizerState {
    std::vector<S> m, v;
    std::int64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    OptimizerState() = default;
    explicit OptimizerState(std::size_t n) : m(n, S(0)), v(n, S(0)) {}

    friend bool operator==(const OptimizerState &, const OptimizerState &) = default;
};

/// Global L2 norm of all gradients, accumulated in float64.
template <class S>
double global_norm(const ParameterSet<S> &g) {
    double s = 0.0;
    for (S x : g.data) s += static_cast<double>(x) * static_cast<double>(x);
    return std::sqrt(s);
}

/// Bias-corrected Adam update. A positive clip_norm rescales the gradient to
/// that global norm first when it is larger.
template <class S>
void adam_step(ParameterSet<S> &params, const ParameterSet<S> &grads, OptimizerState<S> &st, double lr,
               double clip_norm = 0.0) {
    if (grads.size() != params.size() || st.m.size() != params.size() || st.v.size() != params.size())
        throw InvalidArgument("adam_step: parameter, gradient and moment shapes differ");
    for (const auto &t : grads.index) {
        auto g = grads.tensor(t);
        for (S x : g)
            if (!std::isfinite(static_cast<double>(x))) throw NumericFailure("non-finite gradient in tensor '" + t.name + "'");
    }
    double scale = 1.0;
    if (clip_norm > 0.0) {
        const double n = global_norm(grads);
        if (n > clip_norm) scale = clip_norm / n;
    }
    st.step += 1;
    const double b1 = st.beta1, b2 = st.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = static_cast<double>(grads.data[i]) * scale;
        const double m = b1 * st.m[i] + (1.0 - b1) * g;
        const double v = b2 * st.v[i] + (1.0 - b2) * g * g;
        st.m[i] = static_cast<S>(m);
        st.v[i] = static_cast<S>(v);
        params.data[i] = static_cast<S>(params.data[i] - lr * (m / c1) / (std::sqrt(v / c2) + st.eps));
    }
}

// ---------------------------------------------------------------------------
// Training configuration

struct TrainConfig {
    double learning_rate = 1e-3;
    int batch_size = 16;
    int epochs = 20;
    int n_steps = 1;
    std::uint64_t seed = 0;
    bool lat_weighting = true;
    bool channel_weighting = true;
    SurfaceEmphasis surface_emphasis;
    double grad_clip_norm = 0.0; // 0 = off; 32 is the usual escape hatch
    std::string schedule = "cosine"; // cosine | constant
    double warmup_fraction = 0.05;
    int samples_per_epoch = 0; // 0 = every available sequence
    int val_samples = 0;       // 0 = every available sequence
    bool recompute_activations = false;
    bool detach_steps = false;

    void validate() const {
        if (!(learning_rate >= 0.0)) throw ConfigError("train.learning_rate", "must be >= 0");
        if (batch_size < 1) throw ConfigError("train.batch_size", "must be >= 1");
        if (epochs < 0) throw ConfigError("train.epochs", "must be >= 0");
        if (n_steps < 1) throw ConfigError("train.n_steps", "must be >= 1");
        if (schedule != "cosine" && schedule != "constant") throw ConfigError("train.schedule", "must be cosine or constant");
        if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ConfigError("train.warmup_fraction", "must lie in [0, 1)");
        if (!(grad_clip_norm >= 0.0)) throw ConfigError("train.grad_clip_norm", "must be >= 0");
        if (samples_per_epoch < 0 || val_samples < 0) throw ConfigError("train.samples_per_epoch", "must be >= 0");
    }

    friend bool operator==(const TrainConfig &, const TrainConfig &) = default;
};

inline void to_json(json &j, const TrainConfig &c) {
    j = {{"learning_rate", c.learning_rate},
         {"batch_size", c.batch_size},
         {"epochs", c.epochs},
         {"n_steps", c.n_steps},
         {"seed", c.seed},
         {"lat_weighting", c.lat_weighting},
         {"channel_weighting", c.channel_weighting},
         {"surface_emphasis", c.surface_emphasis},
         {"grad_clip_norm", c.grad_clip_norm},
         {"schedule", c.schedule},
         {"warmup_fraction", c.warmup_fraction},
         {"samples_per_epoch", c.samples_per_epoch},
         {"val_samples", c.val_samples},
         {"recompute_activations", c.recompute_activations},
         {"detach_steps", c.detach_steps}};
}

inline void from_json(const json &j, TrainConfig &c) {
    c.learning_rate = j.at("learning_rate").get<double>();
    c.batch_size = j.at("batch_size").get<int>();
    c.epochs = j.at("epochs").get<int>();
    c.n_steps = j.at("n_steps").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.lat_weighting = j.at("lat_weighting").get<bool>();
    c.channel_weighting = j.at("channel_weighting").get<bool>();
    c.surface_emphasis = j.at("surface_emphasis").get<SurfaceEmphasis>();
    c.grad_clip_norm = j.at("grad_clip_norm").get<double>();
    c.schedule = j.at("schedule").get<std::string>();
    c.warmup_fraction = j.at("warmup_fraction").get<double>();
    c.samples_per_epoch = j.at("samples_per_epoch").get<int>();
    c.val_samples = j.at("val_samples").get<int>();
    c.recompute_activations = j.at("recompute_activations").get<bool>();
    c.detach_steps = j.at("detach_steps").get<bool>();
}

/// Linear warmup over the first warmup_fraction of steps, then cosine decay to 0.
inline double learning_rate_at(const TrainConfig &tc, std::int64_t step, std::int64_t total_steps) {
    if (tc.schedule == "constant" || total_steps <= 0) return tc.learning_rate;
    const auto warm = static_cast<std::int64_t>(std::ceil(tc.warmup_fraction * static_cast<double>(total_steps)));
    if (step < warm) return tc.learning_rate * static_cast<double>(step + 1) / static_cast<double>(warm);
    const double span = static_cast<double>(std::max<std::int64_t>(1, total_steps - warm));
    const double progress = std::min(1.0, static_cast<double>(step - warm) / span);
    return tc.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------
// Checkpoint

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double lr = 0.0;
    friend bool operator==(const EpochRecord &, const EpochRecord &) = default;
};

inline json to_json_line(const EpochRecord &r) {
    return {{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"val_loss", r.val_loss}, {"lr", r.lr}};
}

struct Checkpoint {
    ModelConfig model;
    GridSpec grid;
    NormStats stats;
    ParameterSet<float> params;
    OptimizerState<float> optimizer;
    TrainConfig train;
    int epoch = 0;               // completed epochs
    std::uint64_t rng_seed = 0;  // streams are derived from (seed, epoch, batch)
    int best_epoch = 0;
    double best_val_loss = std::numeric_limits<double>::infinity();
    ParameterSet<float> best_params;
    std::vector<EpochRecord> log;
};

inline constexpr int kCheckpointFormatVersion = 1;

namespace detail {

inline void write_floats(const std::filesystem::path &p, std::span<const float> v) {
    write_checksummed(p, std::as_bytes(v));
}

inline std::vector<float> read_floats(const std::filesystem::path &p, std::size_t n) {
    const auto bytes = read_checksummed(p, n * sizeof(float));
    std::vector<float> v(n);
    std::memcpy(v.data(), bytes.data(), bytes.size());
    return v;
}

inline double json_double(const json &j) {
    // Non-finite values are stored as strings so the JSON stays standard.
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
        return std::numeric_limits<double>::quiet_NaN();
    }
    return j.get<double>();
}

inline json double_json(double v) {
    if (std::isfinite(v)) return v;
    return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
}

} // namespace detail

/// model.json + weights.bin: the model alone, enough for inference.
inline void save_model(const std::filesystem::path &dir, const ModelConfig &cfg, const GridSpec &grid,
                       const NormStats &stats, const ParameterSet<float> &params) {
    std::filesystem::create_directories(dir);
    json tensors = json::array();
    for (const auto &t : params.index) tensors.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", t.offset}});
    detail::write_floats(dir / "weights.bin", params.data);
    json j = {{"format_version", kCheckpointFormatVersion},
              {"config", cfg},
              {"grid", {{"n_lat", grid.n_lat}, {"n_lon", grid.n_lon}}},
              {"stats", stats},
              {"dtype", "float32"},
              {"n_values", params.size()},
              {"weights_checksum", hex64(fnv1a64(std::as_bytes(std::span(params.data))))},
              {"tensors", tensors}};
    write_text(dir / "model.json", j.dump(1) + "\n");
}

struct LoadedModel {
    ModelConfig config;
    GridSpec grid;
    NormStats stats;
    ParameterSet<float> params;
};

inline LoadedModel load_model(const std::filesystem::path &dir) {
    const auto path = dir / "model.json";
    json j;
    try {
        j = json::parse(read_text(path));
    } catch (const json::parse_error &e) {
        throw PersistenceError(std::string("malformed model.json (") + e.what() + ")", path);
    }
    const int version = j.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion)
        throw VersionMismatchError("checkpoint format " + std::to_string(version), path);
    LoadedModel m;
    m.config = j.at("config").get<ModelConfig>();
    m.grid = make_grid(j.at("grid").at("n_lat").get<int>(), j.at("grid").at("n_lon").get<int>());
    m.stats = j.at("stats").get<NormStats>();
    m.params = ParameterSet<float>(parameter_layout(m.config, m.grid));
    const auto &tensors = j.at("tensors");
    if (tensors.size() != m.params.index.size()) throw VersionMismatchError("tensor index does not match layout", path);
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        const auto &t = m.params.index[i];
        if (tensors[i].at("name").get<std::string>() != t.name || tensors[i].at("shape").get<std::vector<int>>() != t.shape ||
            tensors[i].at("offset").get<std::size_t>() != t.offset)
            throw VersionMismatchError("tensor '" + t.name + "' differs from layout", path);
    }
    const auto w = detail::read_floats(dir / "weights.bin", m.params.size());
    m.params.data.assign(w.begin(), w.end());
    return m;
}

inline void save_checkpoint(const std::filesystem::path &dir, const Checkpoint &ck) {
    save_model(dir, ck.model, ck.grid, ck.stats, ck.params);
    std::vector<float> moments(ck.optimizer.m);
    moments.insert(moments.end(), ck.optimizer.v.begin(), ck.optimizer.v.end());
    detail::write_floats(dir / "optimizer.bin", moments);
    if (!ck.best_params.data.empty()) detail::write_floats(dir / "best_weights.bin", ck.best_params.data);
    json log = json::array();
    for (const auto &r : ck.log) {
        auto e = to_json_line(r);
        e["val_loss"] = detail::double_json(r.val_loss);
        log.push_back(e);
    }
    json j = {{"format_version", kCheckpointFormatVersion},
              {"train_config", ck.train},
              {"epoch", ck.epoch},
              {"rng", {{"seed", ck.rng_seed}, {"epoch", ck.epoch}}},
              {"optimizer",
               {{"step", ck.optimizer.step}, {"beta1", ck.optimizer.beta1}, {"beta2", ck.optimizer.beta2},
                {"eps", ck.optimizer.eps}, {"has_moments", !ck.optimizer.m.empty()}}},
              {"best", {{"epoch", ck.best_epoch}, {"val_loss", detail::double_json(ck.best_val_loss)},
                        {"has_weights", !ck.best_params.data.empty()}}},
              {"log", log}};
    write_text(dir / "state.json", j.dump(1) + "\n");
}

inline Checkpoint load_checkpoint(const std::filesystem::path &dir) {
    auto m = load_model(dir);
    Checkpoint ck;
    ck.model = m.config;
    ck.grid = m.grid;
    ck.stats = m.stats;
    ck.params = std::move(m.params);
    const auto path = dir / "state.json";
    json j;
    try {
        j = json::parse(read_text(path));
    } catch (const json::parse_error &e) {
        throw PersistenceError(std::string("malformed state.json (") + e.what() + ")", path);
    }
    if (j.at("format_version").get<int>() != kCheckpointFormatVersion)
        throw VersionMismatchError("checkpoint state format", path);
    ck.train = j.at("train_config").get<TrainConfig>();
    ck.epoch = j.at("epoch").get<int>();
    ck.rng_seed = j.at("rng").at("seed").get<std::uint64_t>();
    const auto &o = j.at("optimizer");
    ck.optimizer.step = o.at("step").get<std::int64_t>();
    ck.optimizer.beta1 = o.at("beta1").get<double>();
    ck.optimizer.beta2 = o.at("beta2").get<double>();
    ck.optimizer.eps = o.at("eps").get<double>();
    if (o.at("has_moments").get<bool>()) {
        const auto n = ck.params.size();
        auto mv = detail::read_floats(dir / "optimizer.bin", 2 * n);
        ck.optimizer.m.assign(mv.begin(), mv.begin() + static_cast<std::ptrdiff_t>(n));
        ck.optimizer.v.assign(mv.begin() + static_cast<std::ptrdiff_t>(n), mv.end());
    }
    ck.best_epoch = j.at("best").at("epoch").get<int>();
    ck.best_val_loss = detail::json_double(j.at("best").at("val_loss"));
    if (j.at("best").at("has_weights").get<bool>()) {
        ck.best_params = ParameterSet<float>(ck.params.index);
        const auto w = detail::read_floats(dir / "best_weights.bin", ck.params.size());
        ck.best_params.data.assign(w.begin(), w.end());
    }
    for (const auto &e : j.at("log"))
        ck.log.push_back({e.at("epoch").get<int>(), e.at("train_loss").get<double>(),
                          detail::json_double(e.at("val_loss")), e.at("lr").get<double>()});
    return ck;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainHooks {
    /// Called after each epoch with the up-to-date checkpoint.
    std::function<void(const Checkpoint &)> on_epoch;
    /// Stop after this many epochs in this call (for interruption tests); -1 = no limit.
    int stop_after = -1;
    bool verbose = false;
};

/// Validation objective: the training objective on evenly spaced val
/// sequences, evaluated without stochastic depth.
inline double validation_loss(const SwinForecaster<float> &model, const ParameterSet<float> &params,
                              const Dataset &data, const LossWeights &weights, const TrainConfig &tc) {
    const auto split = data.meta.val;
    const std::size_t avail = sequence_count(split, tc.n_steps);
    if (avail == 0) return std::numeric_limits<double>::quiet_NaN();
    const std::size_t n = tc.val_samples > 0 ? std::min<std::size_t>(avail, tc.val_samples) : avail;
    double total = 0.0;
    std::size_t counted = 0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(tc.batch_size)) {
        std::vector<Sequence> seqs;
        for (std::size_t i = start; i < std::min(n, start + tc.batch_size); ++i)
            seqs.push_back(sample_sequence(data, split, i * avail / n, tc.n_steps));
        std::vector<const Sequence *> ptrs;
        for (const auto &s : seqs) ptrs.push_back(&s);
        const auto r = multi_step_loss<float>(model, params, ptrs, tc.n_steps, weights, data.stats(), nullptr,
                                              UnrollOptions{false});
        total += r.loss * static_cast<double>(ptrs.size());
        counted += ptrs.size();
    }
    return total / static_cast<double>(counted);
}

inline std::int64_t batches_per_epoch(const Dataset &data, const TrainConfig &tc) {
    const std::size_t avail = sequence_count(data.meta.train, tc.n_steps);
    const std::size_t n = tc.samples_per_epoch > 0 ? std::min<std::size_t>(avail, tc.samples_per_epoch) : avail;
    return static_cast<std::int64_t>((n + tc.batch_size - 1) / tc.batch_size);
}

/// Runs (or resumes) the epoch loop on `ck` in place. The trajectory is a pure
/// function of the checkpoint contents, the data and the config.
inline void run_training(Checkpoint &ck, const Dataset &data, const TrainHooks &hooks = {}) {
    const auto &tc = ck.train;
    tc.validate();
    if (data.meta.train.size() < 2) throw InvalidArgument("train: dataset has no usable train split");
    if (data.meta.val.size() < 2) throw InvalidArgument("train: dataset has no usable val split");
    SwinForecaster<float> model(ck.model, ck.grid);
    const auto &stats = data.stats();
    const auto weights = make_loss_weights(data.meta.schema, stats, data.meta.grid, tc.channel_weighting,
                                           tc.lat_weighting, tc.surface_emphasis);
    const std::size_t avail = sequence_count(data.meta.train, tc.n_steps);
    if (avail == 0) throw InvalidArgument("train: train split shorter than n_steps + 1");
    const std::size_t per_epoch =
        tc.samples_per_epoch > 0 ? std::min<std::size_t>(avail, tc.samples_per_epoch) : avail;
    const std::int64_t nb = batches_per_epoch(data, tc);
    const std::int64_t total_steps = nb * tc.epochs;
    if (ck.optimizer.m.size() != ck.params.size()) ck.optimizer = OptimizerState<float>(ck.params.size());
    ParameterSet<float> grads(ck.params.index);

    int ran = 0;
    while (ck.epoch < tc.epochs) {
        if (hooks.stop_after >= 0 && ran >= hooks.stop_after) break;
        const auto t0 = std::chrono::steady_clock::now();
        const int epoch = ck.epoch;
        std::vector<std::size_t> order(avail);
        for (std::size_t i = 0; i < avail; ++i) order[i] = i;
        Rng shuffle(derive_seed(ck.rng_seed, 0x5ff1e, static_cast<std::uint64_t>(epoch)));
        shuffle.shuffle(order);
        order.resize(per_epoch);

        double loss_sum = 0.0;
        double lr = 0.0;
        for (std::int64_t bidx = 0; bidx < nb; ++bidx) {
            std::vector<Sequence> seqs;
            const std::size_t lo = static_cast<std::size_t>(bidx) * tc.batch_size;
            for (std::size_t i = lo; i < std::min(per_epoch, lo + tc.batch_size); ++i)
                seqs.push_back(sample_sequence(data, data.meta.train, order[i], tc.n_steps));
            std::vector<const Sequence *> ptrs;
            for (const auto &s : seqs) ptrs.push_back(&s);
            grads.zero();
            UnrollOptions uo;
            uo.training = true;
            uo.rng_seed = derive_seed(ck.rng_seed, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(bidx));
            uo.detach_steps = tc.detach_steps;
            uo.recompute_activations = tc.recompute_activations;
            UnrollResult r;
            try {
                r = multi_step_loss<float>(model, ck.params, ptrs, tc.n_steps, weights, stats, &grads, uo);
                lr = learning_rate_at(tc, epoch * nb + bidx, total_steps);
                adam_step(ck.params, grads, ck.optimizer, lr, tc.grad_clip_norm);
            } catch (const NumericFailure &e) {
                throw NumericFailure("epoch " + std::to_string(epoch) + " batch " + std::to_string(bidx) + ": " + e.what(),
                                     e.index());
            }
            loss_sum += r.loss * static_cast<double>(ptrs.size());
        }
        EpochRecord rec;
        rec.epoch = epoch + 1;
        rec.train_loss = loss_sum / static_cast<double>(per_epoch);
        rec.val_loss = validation_loss(model, ck.params, data, weights, tc);
        rec.lr = lr;
        ck.log.push_back(rec);
        ck.epoch = epoch + 1;
        if (rec.val_loss < ck.best_val_loss || ck.best_params.data.empty()) {
            ck.best_val_loss = rec.val_loss;
            ck.best_epoch = rec.epoch;
            ck.best_params = ck.params;
        }
        if (hooks.verbose) {
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            std::fprintf(stderr, "epoch %d/%d  train %.6g  val %.6g  lr %.3g  (%.1fs)\n", rec.epoch, tc.epochs,
                         rec.train_loss, rec.val_loss, rec.lr, secs);
        }
        if (hooks.on_epoch) hooks.on_epoch(ck);
        ++ran;
    }
}

/// Fresh model, single- or multi-step training from scratch.
inline Checkpoint train(const ModelConfig &mc, const Dataset &data, const TrainConfig &tc,
                        std::uint64_t init_seed, const TrainHooks &hooks = {}) {
    Checkpoint ck;
    ck.model = mc;
    ck.grid = data.meta.grid;
    ck.stats = data.stats();
    ck.train = tc;
    ck.rng_seed = tc.seed;
    ck.params = init_parameters<float>(mc, data.meta.grid, init_seed);
    ck.optimizer = OptimizerState<float>(ck.params.size());
    run_training(ck, data, hooks);
    return ck;
}

/// Continues from a checkpoint's parameters (best ones when recorded) with
/// fresh optimizer moments and an n_steps unrolled objective.
inline Checkpoint fine_tune(const Checkpoint &parent, const Dataset &data, int n_steps, TrainConfig tc,
                            const TrainHooks &hooks = {}) {
    tc.n_steps = n_steps;
    Checkpoint ck;
    ck.model = parent.model;
    ck.grid = parent.grid;
    ck.stats = parent.stats;
    ck.train = tc;
    ck.rng_seed = tc.seed;
    ck.params = parent.best_params.data.empty() ? parent.params : parent.best_params;
    ck.optimizer = OptimizerState<float>(ck.params.size());
    run_training(ck, data, hooks);
    return ck;
}

/// Parameters to use for inference: best-validation weights when recorded.
inline const ParameterSet<float> &inference_params(const Checkpoint &ck) {
    return ck.best_params.data.empty() ? ck.params : ck.best_params;
}

// ---------------------------------------------------------------------------
// Gradient verification

struct TensorGradError {
    std::string name;
    std::size_t checked = 0;
    double max_rel_error = 0.0;
};

struct GradCheckReport {
    std::vector<TensorGradError> tensors;
    double max_rel_error = 0.0;
    std::size_t coordinates = 0;
    double seconds = 0.0;
};

/// |a - n| / max(|a|, |n|, floor); the floor keeps coordinates whose true
/// gradient is at round-off level from dominating the report.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Central differences of `f` at the given coordinates compared with `grad`.
inline double finite_difference_max_error(const std::function<double(std::span<const double>)> &f,
                                          std::vector<double> x, std::span<const double> grad,
                                          std::span<const std::size_t> coords, double h, double floor = 1e-6) {
    double worst = 0.0;
    for (std::size_t i : coords) {
        const double x0 = x[i];
        x[i] = x0 + h;
        const double fp = f(x);
        x[i] = x0 - h;
        const double fm = f(x);
        x[i] = x0;
        worst = std::max(worst, relative_error(grad[i], (fp - fm) / (2.0 * h), floor));
    }
    return worst;
}

struct GradCheckSetup {
    ModelConfig model;
    GridSpec grid;
    NormStats stats;
    LossWeights weights;
    std::vector<Sequence> sequences;
};

/// Tiny 64-bit problem: D=16, depth 2, 8x16 grid, patch 2, window 2x4, two
/// prognostic and three static channels, both loss weightings on, random
/// (non-zero) parameters everywhere including the head.
inline GradCheckSetup gradcheck_problem(std::uint64_t seed, int n_steps, PredictionMode mode) {
    GradCheckSetup s;
    s.grid = make_grid(8, 16);
    s.model.embed_dim = 16;
    s.model.depth = 2;
    s.model.patch_size = 2;
    s.model.n_heads = 2;
    s.model.window_h = 2;
    s.model.window_w = 4;
    s.model.drop_path_rate = 0.5;
    s.model.prediction_mode = mode;
    s.model.out_channels = 2;
    s.model.in_channels = 5;
    s.stats.mean = {0.0, 0.0};
    s.stats.std = {1.0, 2.0};
    s.stats.diff_std = {0.5, 1.0};
    s.weights.channel_weighting = s.weights.lat_weighting = true;
    s.weights.channel = {0.6, 1.4};
    s.weights.lat = latitude_weights(s.grid);
    Rng rng(derive_seed(seed, 0x9c));
    const std::size_t plane = s.grid.cells();
    for (int b = 0; b < 2; ++b) {
        Sequence q;
        q.n_steps = n_steps;
        q.input.resize(2 * plane);
        for (auto &v : q.input) v = static_cast<float>(rng.normal());
        for (int k = 0; k < n_steps; ++k) {
            std::vector<float> t(2 * plane);
            for (auto &v : t) v = static_cast<float>(rng.normal());
            q.targets.push_back(t);
        }
        for (int k = 0; k <= n_steps; ++k) {
            std::vector<float> st(3 * plane);
            for (auto &v : st) v = static_cast<float>(rng.normal());
            q.statics.push_back(st);
        }
        s.sequences.push_back(q);
    }
    return s;
}

inline ParameterSet<double> gradcheck_parameters(const GradCheckSetup &s, std::uint64_t seed) {
    auto ps = init_parameters<double>(s.model, s.grid, seed);
    Rng rng(derive_seed(seed, 0x9d));
    for (const auto &t : ps.index) {
        const bool gain = t.name.find("norm") != std::string::npos && t.name.ends_with(".weight");
        const double sd = t.name.ends_with("logit_scale") ? 0.5 : (t.name.ends_with(".weight") && !gain ? 0.3 : 0.1);
        for (auto &v : ps.tensor(t)) v += sd * rng.normal();
    }
    return ps;
}

/// Analytic gradients of the n-step loss versus central finite differences
/// (step h) on up to `per_tensor` random coordinates of every tensor.
inline GradCheckReport gradient_check(std::uint64_t seed, int n_steps = 1, int per_tensor = 200, double h = 1e-4,
                                      PredictionMode mode = PredictionMode::residual) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto setup = gradcheck_problem(seed, n_steps, mode);
    SwinForecaster<double> model(setup.model, setup.grid);
    auto params = gradcheck_parameters(setup, seed);
    std::vector<const Sequence *> batch;
    for (const auto &q : setup.sequences) batch.push_back(&q);
    UnrollOptions uo;
    uo.training = true; // exercise stochastic depth with a fixed stream
    uo.rng_seed = derive_seed(seed, 0xd9);
    auto loss = [&](const ParameterSet<double> &p) {
        return multi_step_loss<double>(model, p, batch, n_steps, setup.weights, setup.stats, nullptr, uo).loss;
    };
    ParameterSet<double> grads(params.index);
    multi_step_loss<double>(model, params, batch, n_steps, setup.weights, setup.stats, &grads, uo);

    GradCheckReport rep;
    Rng pick(derive_seed(seed, 0xc0));
    for (const auto &t : params.index) {
        std::vector<std::size_t> coords(t.size);
        for (std::size_t i = 0; i < t.size; ++i) coords[i] = t.offset + i;
        if (coords.size() > static_cast<std::size_t>(per_tensor)) {
            pick.shuffle(coords);
            coords.resize(static_cast<std::size_t>(per_tensor));
        }
        TensorGradError te{t.name, coords.size(), 0.0};
        for (std::size_t i : coords) {
            const double x0 = params.data[i];
            params.data[i] = x0 + h;
            const double fp = loss(params);
            params.data[i] = x0 - h;
            const double fm = loss(params);
            params.data[i] = x0;
            te.max_rel_error = std::max(te.max_rel_error, relative_error(grads.data[i], (fp - fm) / (2.0 * h)));
        }
        rep.coordinates += te.checked;
        rep.max_rel_error = std::max(rep.max_rel_error, te.max_rel_error);
        rep.tensors.push_back(te);
    }
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

} // namespace aeriscast
