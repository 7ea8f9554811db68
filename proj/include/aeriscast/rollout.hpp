// Copyright 2026 The aeriscast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "aeriscast/data.hpp"
#include "aeriscast/model.hpp"

namespace aeriscast {

/// Autoregressive trajectory in raw units. states[k] is valid at
/// init_time + (k + 1) * dt and holds the prognostic channels only.
struct Forecast {
    Timestamp init_time;
    std::int64_t dt_seconds = 6 * kSecondsPerHour;
    std::vector<StateTensor> states;
    std::string tag;

    int n_steps() const { return static_cast<int>(states.size()); }
    Timestamp valid_time(int lead_steps) const { return init_time + lead_steps * dt_seconds; }

    /// State valid at t, or nullptr when t is not one of the forecast leads.
    const StateTensor *at_valid(Timestamp t) const {
        const std::int64_t d = t.seconds - init_time.seconds;
        if (d <= 0 || d % dt_seconds) return nullptr;
        const std::int64_t k = d / dt_seconds;
        return k <= n_steps() ? &states[static_cast<std::size_t>(k - 1)] : nullptr;
    }
};

/// Prognostic channels of a full-schema state.
inline StateTensor prognostic_part(const StateTensor &full, int n_prognostic) {
    StateTensor s(n_prognostic, full.n_lat, full.n_lon, full.valid_time);
    std::copy_n(full.values.begin(), s.values.size(), s.values.begin());
    return s;
}

/// Rolls the model forward from a full-schema raw state. Residual mode
/// accumulates X += sigma_dX * output in raw units, so a zero output keeps the
/// state bitwise; direct mode de-normalizes the output. Each step re-attaches
/// static inputs with cos_zenith recomputed at the step's input time.
inline Forecast rollout(const SwinForecaster<float> &model, const ParameterSet<float> &params, const NormStats &stats,
                        const ChannelSchema &schema, const GridSpec &grid, const StateTensor &init, int n_steps,
                        std::int64_t dt_seconds, std::string tag = "model") {
    const auto &cfg = model.config();
    const int cp = schema.n_prognostic();
    if (init.channels != schema.size() || init.n_lat != grid.n_lat || init.n_lon != grid.n_lon)
        throw InvalidArgument("rollout: initial state does not match schema/grid");
    if (cfg.out_channels != cp || cfg.in_channels != schema.size())
        throw InvalidArgument("rollout: model channels do not match schema");
    if (n_steps < 0) throw InvalidArgument("rollout: n_steps must be >= 0");
    const std::size_t plane = grid.cells();
    const StaticInputs statics(schema, grid, init.values);

    Forecast f;
    f.init_time = init.valid_time;
    f.dt_seconds = dt_seconds;
    f.tag = std::move(tag);
    StateTensor x = prognostic_part(init, cp);
    std::vector<float> input(model.in_size()), out(model.out_size());
    for (int k = 0; k < n_steps; ++k) {
        const Timestamp t = init.valid_time + k * dt_seconds;
        normalize_prognostic(x.values, stats, plane, std::span(input).first(cp * plane));
        statics.fill(t, std::span(input).subspan(cp * plane));
        try {
            model.forward(params, input, 1, out);
        } catch (const NumericFailure &e) {
            throw NumericFailure("rollout step " + std::to_string(k) + ": " + e.what(), k);
        }
        StateTensor next(cp, grid.n_lat, grid.n_lon, t + dt_seconds);
        if (cfg.prediction_mode == PredictionMode::residual) {
            for (int c = 0; c < cp; ++c)
                for (std::size_t q = 0; q < plane; ++q) {
                    const std::size_t i = c * plane + q;
                    next.values[i] = static_cast<float>(x.values[i] + stats.diff_std[c] * static_cast<double>(out[i]));
                }
        } else {
            denormalize_prognostic(out, stats, plane, next.values);
        }
        if (!next.finite()) throw NumericFailure("non-finite state at rollout step " + std::to_string(k), k);
        f.states.push_back(next);
        x = std::move(next);
    }
    return f;
}

inline Forecast persistence_forecast(const StateTensor &init, int n_prognostic, int n_steps, std::int64_t dt_seconds) {
    Forecast f;
    f.init_time = init.valid_time;
    f.dt_seconds = dt_seconds;
    f.tag = "persistence";
    for (int k = 1; k <= n_steps; ++k) {
        auto s = prognostic_part(init, n_prognostic);
        s.valid_time = init.valid_time + k * dt_seconds;
        f.states.push_back(std::move(s));
    }
    return f;
}

/// Per-channel, per-cell time mean of the prognostic channels over a split.
inline StateTensor compute_climatology(const Dataset &ds, const Split &split) {
    if (split.size() == 0) throw InvalidArgument("compute_climatology: empty split");
    const int cp = ds.meta.schema.n_prognostic();
    const std::size_t plane = ds.meta.grid.cells();
    std::vector<double> acc(cp * plane, 0.0);
    for (std::size_t t = split.begin; t < split.end; ++t) {
        const auto f = ds.frame(t);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += f[i];
    }
    StateTensor clim(cp, ds.meta.grid.n_lat, ds.meta.grid.n_lon);
    for (std::size_t i = 0; i < acc.size(); ++i) clim.values[i] = static_cast<float>(acc[i] / static_cast<double>(split.size()));
    return clim;
}

inline Forecast climatology_forecast(const StateTensor &climatology, Timestamp init_time, int n_steps,
                                     std::int64_t dt_seconds) {
    Forecast f;
    f.init_time = init_time;
    f.dt_seconds = dt_seconds;
    f.tag = "climatology";
    for (int k = 1; k <= n_steps; ++k) {
        auto s = climatology;
        s.valid_time = init_time + k * dt_seconds;
        f.states.push_back(std::move(s));
    }
    return f;
}

// ---------------------------------------------------------------------------
// Forecast directories: meta.json plus one [L, C, H, W] shard.

inline constexpr int kForecastFormatVersion = 1;

inline void save_forecast(const std::filesystem::path &dir, const Forecast &f, const ChannelSchema &schema,
                          const GridSpec &grid) {
    std::filesystem::create_directories(dir);
    std::vector<float> values;
    for (const auto &s : f.states) values.insert(values.end(), s.values.begin(), s.values.end());
    const auto bytes = std::as_bytes(std::span(values));
    write_checksummed(dir / "shard_0000.bin", bytes);
    ChannelSchema prog;
    prog.channels.assign(schema.channels.begin(), schema.channels.begin() + schema.n_prognostic());
    std::vector<std::int64_t> leads;
    for (int k = 1; k <= f.n_steps(); ++k) leads.push_back(k * f.dt_seconds / kSecondsPerHour);
    json j = {{"format_version", kForecastFormatVersion},
              {"kind", "forecast"},
              {"tag", f.tag},
              {"schema", prog},
              {"grid", {{"n_lat", grid.n_lat}, {"n_lon", grid.n_lon}}},
              {"init_time", f.init_time.seconds},
              {"init_time_iso", iso8601(f.init_time)},
              {"dt_hours", static_cast<double>(f.dt_seconds) / kSecondsPerHour},
              {"lead_hours", leads},
              {"layout", "LCHW little-endian float32, trailing fnv1a64 checksum"},
              {"shards", json::array({{{"file", "shard_0000.bin"}, {"first", 0}, {"count", f.n_steps()},
                                       {"checksum", hex64(fnv1a64(bytes))}}})}};
    write_text(dir / "meta.json", j.dump(1) + "\n");
}

inline Forecast load_forecast(const std::filesystem::path &dir) {
    const auto path = dir / "meta.json";
    const json j = json::parse(read_text(path));
    if (j.at("format_version").get<int>() != kForecastFormatVersion) throw VersionMismatchError("forecast format", path);
    const auto schema = j.at("schema").get<ChannelSchema>();
    const int h = j.at("grid").at("n_lat").get<int>(), w = j.at("grid").at("n_lon").get<int>();
    Forecast f;
    f.init_time = {j.at("init_time").get<std::int64_t>()};
    f.dt_seconds = static_cast<std::int64_t>(std::llround(j.at("dt_hours").get<double>() * kSecondsPerHour));
    f.tag = j.at("tag").get<std::string>();
    const auto n = j.at("lead_hours").size();
    const std::size_t frame = static_cast<std::size_t>(schema.size()) * h * w;
    const auto bytes = read_checksummed(dir / "shard_0000.bin", n * frame * sizeof(float));
    for (std::size_t k = 0; k < n; ++k) {
        StateTensor s(schema.size(), h, w, f.valid_time(static_cast<int>(k + 1)));
        std::memcpy(s.values.data(), bytes.data() + k * frame * sizeof(float), frame * sizeof(float));
        f.states.push_back(std::move(s));
    }
    return f;
}

} // namespace aeriscast
