// Copyright 2026 The aeriscast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <complex>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "aeriscast/common.hpp"
#include "aeriscast/fft.hpp"
#include "aeriscast/grid.hpp"

namespace aeriscast {

using json = nlohmann::json;

inline constexpr std::array<int, 13> kPressureLevels = {50, 100, 150, 200, 250, 300, 400,
                                                        500, 600, 700, 850, 925, 1000};

// ---------------------------------------------------------------------------
// Channel schema

enum class ChannelKind { prognostic, static_input };

struct ChannelDef {
    std::string name;
    std::optional<int> level_hPa;
    ChannelKind kind = ChannelKind::prognostic;

    /// "z500" for level channels, the bare name otherwise.
    std::string label() const { return level_hPa ? name + std::to_string(*level_hPa) : name; }
};

/// Ordered channel list. Prognostic channels precede static ones, which is what
/// lets model outputs (prognostic only) index the same channel numbers.
struct ChannelSchema {
    std::vector<ChannelDef> channels;

    int size() const { return static_cast<int>(channels.size()); }
    int n_prognostic() const {
        return static_cast<int>(std::count_if(channels.begin(), channels.end(),
                                              [](const ChannelDef &c) { return c.kind == ChannelKind::prognostic; }));
    }
    int n_static() const { return size() - n_prognostic(); }

    int index_of(const std::string &label) const {
        for (int i = 0; i < size(); ++i)
            if (channels[i].label() == label) return i;
        return -1;
    }

    void validate() const {
        std::set<std::pair<std::string, int>> seen;
        bool in_static = false;
        for (const auto &c : channels) {
            if (c.name.empty()) throw InvalidArgument("channel with empty name");
            if (c.kind == ChannelKind::static_input) {
                in_static = true;
                if (c.level_hPa) throw InvalidArgument("static channel '" + c.name + "' must not carry a level");
            } else if (in_static) {
                throw InvalidArgument("prognostic channel '" + c.label() + "' listed after static channels");
            }
            if (c.level_hPa && *c.level_hPa <= 0) throw InvalidArgument("non-positive level on '" + c.name + "'");
            if (!seen.emplace(c.name, c.level_hPa.value_or(-1)).second)
                throw InvalidArgument("duplicate channel '" + c.label() + "'");
        }
        if (n_prognostic() < 1) throw InvalidArgument("schema needs at least one prognostic channel");
    }

    friend bool operator==(const ChannelSchema &a, const ChannelSchema &b) {
        if (a.channels.size() != b.channels.size()) return false;
        for (std::size_t i = 0; i < a.channels.size(); ++i)
            if (a.channels[i].label() != b.channels[i].label() || a.channels[i].kind != b.channels[i].kind)
                return false;
        return true;
    }
};

inline constexpr const char *kCosZenith = "cos_zenith";

/// The 73-channel layout (z, u, v, t, q on 13 levels plus 8 surface fields)
/// followed by the three static inputs.
inline ChannelSchema era5_like_schema() {
    ChannelSchema s;
    for (const char *v : {"z", "u", "v", "t", "q"})
        for (int lev : kPressureLevels) s.channels.push_back({v, lev, ChannelKind::prognostic});
    for (const char *v : {"u10", "v10", "u100", "v100", "t2m", "sp", "msl", "tcwv"})
        s.channels.push_back({v, std::nullopt, ChannelKind::prognostic});
    for (const char *v : {"lsm", "orography", kCosZenith})
        s.channels.push_back({v, std::nullopt, ChannelKind::static_input});
    return s;
}

/// Toy schema: t2m and u10 first, then (variable, level) pairs cycling over
/// z/t/u/v at 500 and 850 hPa, then the three static inputs.
inline ChannelSchema toy_schema(int n_prognostic) {
    if (n_prognostic < 1) throw InvalidArgument("toy_schema: need at least one prognostic channel");
    ChannelSchema s;
    const std::vector<ChannelDef> surface = {{"t2m", std::nullopt, ChannelKind::prognostic},
                                             {"u10", std::nullopt, ChannelKind::prognostic}};
    std::vector<ChannelDef> all = surface;
    for (int lev : {500, 850, 250, 1000, 700, 300, 925, 100})
        for (const char *v : {"z", "t", "u", "v"}) all.push_back({v, lev, ChannelKind::prognostic});
    if (n_prognostic > static_cast<int>(all.size())) throw InvalidArgument("toy_schema: too many channels");
    // Keep the level channels grouped by variable for readability.
    std::vector<ChannelDef> chosen(all.begin(), all.begin() + n_prognostic);
    std::stable_sort(chosen.begin() + std::min<int>(2, n_prognostic), chosen.end(),
                     [](const ChannelDef &a, const ChannelDef &b) { return a.name < b.name; });
    s.channels = chosen;
    for (const char *v : {"lsm", "orography", kCosZenith})
        s.channels.push_back({v, std::nullopt, ChannelKind::static_input});
    s.validate();
    return s;
}

inline void to_json(json &j, const ChannelSchema &s) {
    j = json::array();
    for (const auto &c : s.channels) {
        json e = {{"name", c.name}, {"kind", c.kind == ChannelKind::prognostic ? "prognostic" : "static"}};
        e["level_hPa"] = c.level_hPa ? json(*c.level_hPa) : json(nullptr);
        j.push_back(e);
    }
}

inline void from_json(const json &j, ChannelSchema &s) {
    s.channels.clear();
    for (const auto &e : j) {
        ChannelDef c;
        c.name = e.at("name").get<std::string>();
        const auto kind = e.at("kind").get<std::string>();
        if (kind == "prognostic")
            c.kind = ChannelKind::prognostic;
        else if (kind == "static")
            c.kind = ChannelKind::static_input;
        else
            throw InvalidArgument("unknown channel kind '" + kind + "'");
        if (!e.at("level_hPa").is_null()) c.level_hPa = e.at("level_hPa").get<int>();
        s.channels.push_back(c);
    }
    s.validate();
}

// ---------------------------------------------------------------------------
// Normalization statistics

/// Per prognostic channel: mean, std and std of one-step differences, all in
/// field units.
struct NormStats {
    std::vector<double> mean;
    std::vector<double> std;
    std::vector<double> diff_std;

    int size() const { return static_cast<int>(mean.size()); }

    /// diff_std / std: converts a residual in sigma_dX units to normalized-state units.
    double residual_scale(int c) const { return diff_std[c] / std[c]; }

    void validate(const ChannelSchema &schema) const {
        if (size() != schema.n_prognostic() || std.size() != mean.size() || diff_std.size() != mean.size())
            throw InvalidArgument("norm stats do not match the prognostic channel count");
        for (int c = 0; c < size(); ++c) {
            if (!(std[c] > 0.0) || !std::isfinite(std[c]))
                throw DegenerateChannelError(schema.channels[c].label(), "std must be positive");
            if (!(diff_std[c] > 0.0) || !std::isfinite(diff_std[c]))
                throw DegenerateChannelError(schema.channels[c].label(), "temporal-difference std must be positive");
        }
    }

    friend bool operator==(const NormStats &, const NormStats &) = default;
};

inline void to_json(json &j, const NormStats &s) {
    j = {{"mean", s.mean}, {"std", s.std}, {"diff_std", s.diff_std}};
}
inline void from_json(const json &j, NormStats &s) {
    s.mean = j.at("mean").get<std::vector<double>>();
    s.std = j.at("std").get<std::vector<double>>();
    s.diff_std = j.at("diff_std").get<std::vector<double>>();
}

// ---------------------------------------------------------------------------
// State tensor

/// One snapshot: [channels x n_lat x n_lon] floats, row-major.
struct StateTensor {
    int channels = 0;
    int n_lat = 0;
    int n_lon = 0;
    std::vector<float> values;
    Timestamp valid_time;

    StateTensor() = default;
    StateTensor(int c, int h, int w, Timestamp t = {})
        : channels(c), n_lat(h), n_lon(w), values(static_cast<std::size_t>(c) * h * w, 0.0f), valid_time(t) {}

    std::size_t plane() const { return static_cast<std::size_t>(n_lat) * n_lon; }
    std::span<float> channel(int c) { return {values.data() + c * plane(), plane()}; }
    std::span<const float> channel(int c) const { return {values.data() + c * plane(), plane()}; }
    float &at(int c, int i, int j) { return values[c * plane() + static_cast<std::size_t>(i) * n_lon + j]; }
    float at(int c, int i, int j) const { return values[c * plane() + static_cast<std::size_t>(i) * n_lon + j]; }

    bool finite() const { return all_finite(values); }

    friend bool operator==(const StateTensor &, const StateTensor &) = default;
};

// ---------------------------------------------------------------------------
// Toy atmosphere

struct ToyConfig {
    int n_prog_channels = 8;
    double spectral_slope = 3.0;
    /// Rotation rates in degrees of longitude per step; empty -> drawn from the seed.
    std::vector<double> omega0;
    std::vector<double> omega1;
    double nu = 2e-4;
    double dt_hours = 6.0;
    std::uint64_t seed = 1;
    int n_times = 2601;
    int n_train = 2001;
    int n_val = 300;
    Timestamp start = from_civil(2018, 1, 1);
    int times_per_shard = 256;

    void validate() const {
        if (n_prog_channels < 1) throw ConfigError("n_prog_channels", "must be >= 1");
        if (!(spectral_slope > 0.0)) throw ConfigError("spectral_slope", "must be > 0");
        if (!(nu >= 0.0 && nu < 1.0)) throw ConfigError("nu", "must lie in [0, 1)");
        if (!(dt_hours > 0.0) || std::fmod(dt_hours * 3600.0, 1.0) != 0.0)
            throw ConfigError("dt_hours", "must be a positive whole number of seconds");
        if (!omega0.empty() && static_cast<int>(omega0.size()) != n_prog_channels)
            throw ConfigError("omega0", "needs one entry per prognostic channel");
        if (!omega1.empty() && static_cast<int>(omega1.size()) != n_prog_channels)
            throw ConfigError("omega1", "needs one entry per prognostic channel");
        if (n_train < 2) throw ConfigError("n_train", "must be >= 2");
        if (n_val < 0 || n_train + n_val > n_times) throw ConfigError("n_val", "splits exceed n_times");
        if (times_per_shard < 1) throw ConfigError("times_per_shard", "must be >= 1");
    }
};

inline void to_json(json &j, const ToyConfig &c) {
    j = {{"n_prog_channels", c.n_prog_channels}, {"spectral_slope", c.spectral_slope}, {"omega0", c.omega0},
         {"omega1", c.omega1}, {"nu", c.nu}, {"dt_hours", c.dt_hours}, {"seed", c.seed},
         {"n_times", c.n_times}, {"n_train", c.n_train}, {"n_val", c.n_val}, {"start", c.start.seconds},
         {"times_per_shard", c.times_per_shard}};
}

inline void from_json(const json &j, ToyConfig &c) {
    c.n_prog_channels = j.at("n_prog_channels").get<int>();
    c.spectral_slope = j.at("spectral_slope").get<double>();
    c.omega0 = j.at("omega0").get<std::vector<double>>();
    c.omega1 = j.at("omega1").get<std::vector<double>>();
    c.nu = j.at("nu").get<double>();
    c.dt_hours = j.at("dt_hours").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.n_times = j.at("n_times").get<int>();
    c.n_train = j.at("n_train").get<int>();
    c.n_val = j.at("n_val").get<int>();
    c.start = {j.at("start").get<std::int64_t>()};
    c.times_per_shard = j.at("times_per_shard").get<int>();
}

/// Field units for toy channels: (mean, std) by variable name.
inline std::pair<double, double> toy_channel_units(const std::string &name) {
    static const std::map<std::string, std::pair<double, double>> table = {
        {"z", {54000.0, 900.0}}, {"t", {255.0, 12.0}}, {"u", {6.0, 9.0}},    {"v", {0.0, 7.0}},
        {"q", {0.004, 0.002}},   {"t2m", {281.0, 16.0}}, {"u10", {1.5, 5.0}}};
    auto it = table.find(name);
    return it == table.end() ? std::pair{0.0, 1.0} : it->second;
}

/// Shifts each latitude row east by omega(lat) = omega0 + omega1 cos(lat)
/// degrees (Fourier phase shift, exact for fractional shifts) and damps zonal
/// wavenumber k by exp(-nu k^2 / k_max^2). Row means (k = 0) are untouched.
/// The Nyquist bin of an even-length row can only be shifted by its real
/// part, so rows with Nyquist content keep their variance only for integer
/// shifts.
inline void advect_step(std::span<double> field, const GridSpec &grid, double omega0, double omega1, double nu) {
    const int n = grid.n_lon;
    const int nk = n / 2 + 1;
    const double kmax = n / 2;
    std::vector<fft::cplx> spec(static_cast<std::size_t>(nk));
    for (int i = 0; i < grid.n_lat; ++i) {
        auto row = field.subspan(static_cast<std::size_t>(i) * n, static_cast<std::size_t>(n));
        const double shift = (omega0 + omega1 * std::cos(deg2rad(grid.lat_centers[i]))) / grid.dlon();
        if (shift == 0.0 && nu == 0.0) continue;
        fft::rfft(row, spec);
        for (int k = 1; k < nk; ++k) {
            const double damp = std::exp(-nu * k * k / (kmax * kmax));
            const double angle = -2.0 * std::numbers::pi * k * shift / n;
            if (n % 2 == 0 && k == n / 2)
                spec[k] *= damp * std::cos(angle);
            else
                spec[k] *= damp * fft::cplx(std::cos(angle), std::sin(angle));
        }
        fft::irfft(spec, row);
    }
}

namespace detail {

/// Rows with zonal power ~ k^-slope (Nyquist and k = 0 left empty),
/// correlated between neighbouring rows so the field is smooth meridionally.
inline std::vector<double> random_zonal_field(const GridSpec &grid, double slope, Rng &rng) {
    const int n = grid.n_lon;
    const int nk = n / 2 + 1;
    std::vector<fft::cplx> coef(static_cast<std::size_t>(nk)), spec(static_cast<std::size_t>(nk));
    std::vector<double> out(grid.cells());
    for (int i = 0; i < grid.n_lat; ++i) {
        for (int k = 1; k < nk; ++k) {
            if (n % 2 == 0 && k == n / 2) continue;
            const double rho = std::exp(-4.0 * k / n);
            const double innov = i == 0 ? 1.0 : std::sqrt(1.0 - rho * rho);
            const fft::cplx xi(rng.normal(), rng.normal());
            coef[k] = (i == 0 ? 0.0 : rho) * coef[k] + innov * xi;
        }
        for (int k = 0; k < nk; ++k) spec[k] = coef[k] * std::pow(static_cast<double>(std::max(k, 1)), -slope / 2.0);
        spec[0] = 0.0;
        fft::irfft(spec, std::span(out).subspan(static_cast<std::size_t>(i) * n, static_cast<std::size_t>(n)));
    }
    return out;
}

inline void standardize(std::vector<double> &f) {
    double m = 0.0;
    for (double v : f) m += v;
    m /= static_cast<double>(f.size());
    double s = 0.0;
    for (double v : f) s += (v - m) * (v - m);
    s = std::sqrt(s / static_cast<double>(f.size()));
    for (double &v : f) v = s > 0.0 ? (v - m) / s : 0.0;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Dataset

struct Split {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t size() const { return end - begin; }
    friend bool operator==(const Split &, const Split &) = default;
};

struct ShardInfo {
    std::string file;
    std::size_t first = 0;
    std::size_t count = 0;
    std::uint64_t checksum = 0;
    friend bool operator==(const ShardInfo &, const ShardInfo &) = default;
};

inline constexpr int kDatasetFormatVersion = 1;

struct DatasetMeta {
    ChannelSchema schema;
    GridSpec grid;
    double dt_hours = 6.0;
    std::vector<Timestamp> times;
    Split train, val, test;
    std::optional<NormStats> stats;
    std::vector<ShardInfo> shards;
    json generator; // ToyConfig used to build the data, if any

    std::int64_t dt_seconds() const { return static_cast<std::int64_t>(std::llround(dt_hours * 3600.0)); }

    Split split(const std::string &name) const {
        if (name == "train") return train;
        if (name == "val") return val;
        if (name == "test") return test;
        throw InvalidArgument("unknown split '" + name + "'");
    }

    void validate() const {
        schema.validate();
        for (std::size_t i = 1; i < times.size(); ++i)
            if (times[i].seconds - times[i - 1].seconds != dt_seconds())
                throw InvalidArgument("dataset times must be strictly increasing with uniform spacing");
        auto ok = [&](const Split &s) { return s.begin <= s.end && s.end <= times.size(); };
        if (!ok(train) || !ok(val) || !ok(test)) throw InvalidArgument("split outside the time axis");
        if (train.end > val.begin || val.end > test.begin) throw InvalidArgument("splits must be disjoint and ordered");
        if (stats) stats->validate(schema);
    }
};

/// In-memory dataset: meta plus [T, C, H, W] float values.
class Dataset {
public:
    DatasetMeta meta;
    std::vector<float> values;

    std::size_t n_times() const { return meta.times.size(); }
    std::size_t frame_size() const { return static_cast<std::size_t>(meta.schema.size()) * meta.grid.cells(); }

    std::span<const float> frame(std::size_t t) const {
        if (t >= n_times()) throw BoundsError("time index " + std::to_string(t) + " out of range");
        return {values.data() + t * frame_size(), frame_size()};
    }

    StateTensor state(std::size_t t) const {
        StateTensor s(meta.schema.size(), meta.grid.n_lat, meta.grid.n_lon, meta.times.at(t));
        auto f = frame(t);
        std::copy(f.begin(), f.end(), s.values.begin());
        return s;
    }

    const NormStats &stats() const {
        if (!meta.stats) throw InvalidArgument("dataset has no normalization statistics; run compute-stats");
        return *meta.stats;
    }
};

/// Builds the static input channels for any valid time: cos_zenith is
/// recomputed, every other static channel is held at its stored value.
class StaticInputs {
public:
    StaticInputs() = default;
    StaticInputs(const ChannelSchema &schema, const GridSpec &grid, std::span<const float> reference_frame)
        : grid_(grid), n_prog_(schema.n_prognostic()) {
        const std::size_t plane = grid.cells();
        for (int c = n_prog_; c < schema.size(); ++c) {
            const bool zen = schema.channels[c].name == kCosZenith;
            is_zenith_.push_back(zen);
            fixed_.emplace_back();
            if (!zen) fixed_.back().assign(reference_frame.begin() + c * plane, reference_frame.begin() + (c + 1) * plane);
        }
    }

    int size() const { return static_cast<int>(is_zenith_.size()); }

    /// Writes [n_static x H x W] for time t into out.
    void fill(Timestamp t, std::span<float> out) const {
        const std::size_t plane = grid_.cells();
        std::vector<double> zen;
        for (int s = 0; s < size(); ++s) {
            auto dst = out.subspan(s * plane, plane);
            if (is_zenith_[s]) {
                if (zen.empty()) zen = cos_zenith(t, grid_);
                std::transform(zen.begin(), zen.end(), dst.begin(), [](double v) { return static_cast<float>(v); });
            } else {
                std::copy(fixed_[s].begin(), fixed_[s].end(), dst.begin());
            }
        }
    }

    std::vector<float> at(Timestamp t) const {
        std::vector<float> out(static_cast<std::size_t>(size()) * grid_.cells());
        fill(t, out);
        return out;
    }

private:
    GridSpec grid_;
    int n_prog_ = 0;
    std::vector<bool> is_zenith_;
    std::vector<std::vector<float>> fixed_;
};

/// Deterministic toy rotation rates (degrees/step) when the config leaves them empty.
inline std::pair<std::vector<double>, std::vector<double>> toy_rotation_rates(const ToyConfig &cfg,
                                                                             const GridSpec &grid) {
    std::vector<double> w0 = cfg.omega0, w1 = cfg.omega1;
    Rng rng(derive_seed(cfg.seed, 0x0e3e6a));
    for (int c = 0; c < cfg.n_prog_channels; ++c) {
        // Up to ~1.5 grid columns of solid-body rotation plus up to ~1.5 of differential rotation.
        const double a = (2.0 * rng.uniform() - 1.0) * 1.5 * grid.dlon();
        const double b = (rng.uniform() < 0.5 ? -1.0 : 1.0) * (0.5 + rng.uniform()) * grid.dlon();
        if (cfg.omega0.empty()) w0.push_back(a);
        if (cfg.omega1.empty()) w1.push_back(b);
    }
    return {w0, w1};
}

inline Dataset generate_toy_dataset(const ToyConfig &cfg, const GridSpec &grid) {
    cfg.validate();
    Dataset ds;
    auto &m = ds.meta;
    m.schema = toy_schema(cfg.n_prog_channels);
    m.grid = grid;
    m.dt_hours = cfg.dt_hours;
    const auto dt = m.dt_seconds();
    for (int t = 0; t < cfg.n_times; ++t) m.times.push_back(cfg.start + t * dt);
    m.train = {0, static_cast<std::size_t>(cfg.n_train)};
    m.val = {m.train.end, m.train.end + static_cast<std::size_t>(cfg.n_val)};
    m.test = {m.val.end, static_cast<std::size_t>(cfg.n_times)};
    m.generator = cfg;

    const auto [w0, w1] = toy_rotation_rates(cfg, grid);
    m.generator["omega0"] = w0;
    m.generator["omega1"] = w1;

    const int cp = cfg.n_prog_channels;
    const int ctot = m.schema.size();
    const std::size_t plane = grid.cells();
    ds.values.assign(static_cast<std::size_t>(cfg.n_times) * ctot * plane, 0.0f);
    auto put = [&](std::size_t t, int c, std::span<const double> f) {
        float *dst = ds.values.data() + (t * ctot + c) * plane;
        for (std::size_t k = 0; k < plane; ++k) dst[k] = static_cast<float>(f[k]);
    };

    // Prognostic channels evolve independently; each owns its seeded stream,
    // so the worker count cannot change the result.
    parallel_for(static_cast<std::size_t>(cp), [&](std::size_t c) {
        Rng rng(derive_seed(cfg.seed, 1, c));
        auto field = detail::random_zonal_field(grid, cfg.spectral_slope, rng);
        detail::standardize(field);
        const auto [mean, scale] = toy_channel_units(m.schema.channels[c].name);
        // Zonal-mean meridional profile, steady under advection.
        for (int i = 0; i < grid.n_lat; ++i) {
            const double prof = 0.5 * (std::cos(deg2rad(grid.lat_centers[i])) - 0.6366);
            for (int j = 0; j < grid.n_lon; ++j) {
                double &v = field[static_cast<std::size_t>(i) * grid.n_lon + j];
                v = mean + scale * (v + prof);
            }
        }
        for (int t = 0; t < cfg.n_times; ++t) {
            if (t > 0) advect_step(field, grid, w0[c], w1[c], cfg.nu);
            put(static_cast<std::size_t>(t), static_cast<int>(c), field);
        }
    });

    Rng srng(derive_seed(cfg.seed, 2));
    auto lsm = detail::random_zonal_field(grid, 2.0, srng);
    for (double &v : lsm) v = v > 0.0 ? 1.0 : 0.0;
    auto orog = detail::random_zonal_field(grid, 2.0, srng);
    detail::standardize(orog);
    for (std::size_t k = 0; k < plane; ++k) orog[k] = std::max(0.0, orog[k]) * lsm[k];
    for (int t = 0; t < cfg.n_times; ++t) {
        for (int c = cp; c < ctot; ++c) {
            const auto &name = m.schema.channels[c].name;
            if (name == "lsm") put(t, c, lsm);
            else if (name == "orography") put(t, c, orog);
            else put(t, c, cos_zenith(m.times[t], grid));
        }
    }
    m.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// Statistics

namespace detail {

/// Neumaier-compensated running sum.
struct CompensatedSum {
    double sum = 0.0;
    double c = 0.0;
    void add(double x) {
        const double t = sum + x;
        if (std::abs(sum) >= std::abs(x))
            c += (sum - t) + x;
        else
            c += (x - t) + sum;
        sum = t;
    }
    double value() const { return sum + c; }
};

} // namespace detail

/// Two-pass mean / std and std of one-step differences over a split, with
/// compensated float64 accumulation.
inline NormStats compute_norm_stats(const Dataset &ds, const Split &split) {
    if (split.size() < 2) throw InvalidArgument("compute_norm_stats: split needs at least two times");
    const int cp = ds.meta.schema.n_prognostic();
    const int ctot = ds.meta.schema.size();
    const std::size_t plane = ds.meta.grid.cells();
    NormStats st;
    st.mean.assign(cp, 0.0);
    st.std.assign(cp, 0.0);
    st.diff_std.assign(cp, 0.0);
    auto at = [&](std::size_t t, int c) { return ds.values.data() + (t * ctot + c) * plane; };

    parallel_for(static_cast<std::size_t>(cp), [&](std::size_t cc) {
        const int c = static_cast<int>(cc);
        detail::CompensatedSum s, d;
        for (std::size_t t = split.begin; t < split.end; ++t) {
            const float *p = at(t, c);
            for (std::size_t k = 0; k < plane; ++k) s.add(p[k]);
            if (t + 1 < split.end) {
                const float *q = at(t + 1, c);
                for (std::size_t k = 0; k < plane; ++k) d.add(static_cast<double>(q[k]) - p[k]);
            }
        }
        const double n = static_cast<double>(split.size() * plane);
        const double nd = static_cast<double>((split.size() - 1) * plane);
        const double mean = s.value() / n;
        const double dmean = d.value() / nd;
        detail::CompensatedSum v, dv;
        for (std::size_t t = split.begin; t < split.end; ++t) {
            const float *p = at(t, c);
            for (std::size_t k = 0; k < plane; ++k) v.add((p[k] - mean) * (p[k] - mean));
            if (t + 1 < split.end) {
                const float *q = at(t + 1, c);
                for (std::size_t k = 0; k < plane; ++k) {
                    const double e = static_cast<double>(q[k]) - p[k] - dmean;
                    dv.add(e * e);
                }
            }
        }
        st.mean[c] = mean;
        st.std[c] = std::sqrt(v.value() / n);
        st.diff_std[c] = std::sqrt(dv.value() / nd);
    });

    for (int c = 0; c < cp; ++c) {
        const auto label = ds.meta.schema.channels[c].label();
        if (!(st.std[c] > 1e-10 * std::max(1.0, std::abs(st.mean[c]))))
            throw DegenerateChannelError(label, "constant field (std = 0)");
        if (!(st.diff_std[c] > 1e-10 * st.std[c]))
            throw DegenerateChannelError(label, "no temporal variation (temporal-difference std = 0)");
    }
    return st;
}

// ---------------------------------------------------------------------------
// Normalization and sampling

/// Normalizes the prognostic channels of a full frame into out[0 .. C_p).
inline void normalize_prognostic(std::span<const float> frame, const NormStats &st, std::size_t plane,
                                 std::span<float> out) {
    for (int c = 0; c < st.size(); ++c) {
        const double m = st.mean[c], inv = 1.0 / st.std[c];
        for (std::size_t k = 0; k < plane; ++k)
            out[c * plane + k] = static_cast<float>((frame[c * plane + k] - m) * inv);
    }
}

/// Raw units from normalized prognostic channels.
inline void denormalize_prognostic(std::span<const float> z, const NormStats &st, std::size_t plane,
                                   std::span<float> out) {
    for (int c = 0; c < st.size(); ++c)
        for (std::size_t k = 0; k < plane; ++k)
            out[c * plane + k] = static_cast<float>(z[c * plane + k] * st.std[c] + st.mean[c]);
}

/// A training window: normalized input at t, normalized prognostic targets
/// at t + dt .. t + n dt, and the static inputs for every time t .. t + n dt.
struct Sequence {
    int n_steps = 0;
    Timestamp init_time;
    std::int64_t dt_seconds = 0;
    std::vector<float> input;                 // [C_p x H x W], normalized
    std::vector<std::vector<float>> targets;  // n_steps x [C_p x H x W], normalized
    std::vector<std::vector<float>> statics;  // (n_steps + 1) x [C_s x H x W]
};

/// `index` counts from the start of `split`; the whole window must fit inside it.
inline Sequence sample_sequence(const Dataset &ds, const Split &split, std::size_t index, int n_steps) {
    if (n_steps < 1) throw InvalidArgument("sample_sequence: n_steps must be >= 1");
    if (split.begin + index + static_cast<std::size_t>(n_steps) >= split.end)
        throw BoundsError("sample_sequence: index " + std::to_string(index) + " + " + std::to_string(n_steps) +
                          " steps exceeds split of " + std::to_string(split.size()) + " times");
    const auto &st = ds.stats();
    const std::size_t plane = ds.meta.grid.cells();
    const int cp = ds.meta.schema.n_prognostic();
    const std::size_t t0 = split.begin + index;
    Sequence s;
    s.n_steps = n_steps;
    s.init_time = ds.meta.times[t0];
    s.dt_seconds = ds.meta.dt_seconds();
    s.input.resize(cp * plane);
    normalize_prognostic(ds.frame(t0), st, plane, s.input);
    StaticInputs statics(ds.meta.schema, ds.meta.grid, ds.frame(t0));
    for (int k = 0; k <= n_steps; ++k) {
        s.statics.push_back(statics.at(ds.meta.times[t0 + k]));
        if (k == 0) continue;
        std::vector<float> tgt(cp * plane);
        normalize_prognostic(ds.frame(t0 + k), st, plane, tgt);
        s.targets.push_back(std::move(tgt));
    }
    return s;
}

/// Number of sequence start indices available in a split for n_steps targets.
inline std::size_t sequence_count(const Split &split, int n_steps) {
    return split.size() > static_cast<std::size_t>(n_steps) ? split.size() - n_steps : 0;
}

// ---------------------------------------------------------------------------
// Persistence

inline json meta_to_json(const DatasetMeta &m) {
    json j;
    j["format_version"] = kDatasetFormatVersion;
    j["schema"] = m.schema;
    j["grid"] = {{"n_lat", m.grid.n_lat}, {"n_lon", m.grid.n_lon}};
    j["dt_hours"] = m.dt_hours;
    std::vector<std::int64_t> t;
    for (auto ts : m.times) t.push_back(ts.seconds);
    j["times"] = t;
    j["splits"] = {{"train", {m.train.begin, m.train.end}},
                   {"val", {m.val.begin, m.val.end}},
                   {"test", {m.test.begin, m.test.end}}};
    j["stats"] = m.stats ? json(*m.stats) : json(nullptr);
    json shards = json::array();
    for (const auto &s : m.shards)
        shards.push_back({{"file", s.file}, {"first", s.first}, {"count", s.count}, {"checksum", hex64(s.checksum)}});
    j["shards"] = shards;
    j["layout"] = "TCHW little-endian float32, trailing fnv1a64 checksum";
    j["generator"] = m.generator;
    return j;
}

inline DatasetMeta meta_from_json(const json &j, const std::filesystem::path &path) {
    const int version = j.at("format_version").get<int>();
    if (version != kDatasetFormatVersion)
        throw VersionMismatchError("dataset format " + std::to_string(version) + ", expected " +
                                       std::to_string(kDatasetFormatVersion),
                                   path);
    DatasetMeta m;
    m.schema = j.at("schema").get<ChannelSchema>();
    m.grid = make_grid(j.at("grid").at("n_lat").get<int>(), j.at("grid").at("n_lon").get<int>());
    m.dt_hours = j.at("dt_hours").get<double>();
    for (auto s : j.at("times").get<std::vector<std::int64_t>>()) m.times.push_back({s});
    auto split = [&](const char *name) {
        const auto v = j.at("splits").at(name).get<std::vector<std::size_t>>();
        return Split{v.at(0), v.at(1)};
    };
    m.train = split("train");
    m.val = split("val");
    m.test = split("test");
    if (!j.at("stats").is_null()) m.stats = j.at("stats").get<NormStats>();
    for (const auto &s : j.at("shards"))
        m.shards.push_back({s.at("file").get<std::string>(), s.at("first").get<std::size_t>(),
                            s.at("count").get<std::size_t>(),
                            std::stoull(s.at("checksum").get<std::string>(), nullptr, 16)});
    m.generator = j.value("generator", json(nullptr));
    m.validate();
    return m;
}

inline void save_meta(const std::filesystem::path &dir, const DatasetMeta &m) {
    write_text(dir / "meta.json", meta_to_json(m).dump(1) + "\n");
}

/// Writes meta.json plus shard_NNNN.bin files into `dir`. Shard checksums are
/// recorded in the meta as well as trailing each shard.
inline void save_dataset(const std::filesystem::path &dir, Dataset &ds, std::size_t times_per_shard = 256) {
    std::filesystem::create_directories(dir);
    ds.meta.shards.clear();
    const std::size_t fs = ds.frame_size();
    for (std::size_t first = 0, idx = 0; first < ds.n_times(); first += times_per_shard, ++idx) {
        const std::size_t count = std::min(times_per_shard, ds.n_times() - first);
        char name[32];
        std::snprintf(name, sizeof name, "shard_%04zu.bin", idx);
        const auto bytes = std::as_bytes(std::span(ds.values.data() + first * fs, count * fs));
        write_checksummed(dir / name, bytes);
        ds.meta.shards.push_back({name, first, count, fnv1a64(bytes)});
    }
    save_meta(dir, ds.meta);
}

inline DatasetMeta load_meta(const std::filesystem::path &dir) {
    const auto path = dir / "meta.json";
    json j;
    try {
        j = json::parse(read_text(path));
    } catch (const json::exception &e) {
        throw PersistenceError(std::string("malformed meta.json (") + e.what() + ")", path);
    }
    try {
        return meta_from_json(j, path);
    } catch (const json::exception &e) {
        throw PersistenceError(std::string("invalid meta.json (") + e.what() + ")", path);
    }
}

inline Dataset load_dataset(const std::filesystem::path &dir) {
    Dataset ds;
    ds.meta = load_meta(dir);
    const std::size_t fs = ds.frame_size();
    ds.values.assign(ds.n_times() * fs, 0.0f);
    std::size_t covered = 0;
    for (const auto &s : ds.meta.shards) {
        if (s.first != covered || s.first + s.count > ds.n_times())
            throw PersistenceError("shard list does not tile the time axis", dir / s.file);
        const auto bytes = read_checksummed(dir / s.file, s.count * fs * sizeof(float));
        if (fnv1a64(bytes) != s.checksum) throw ChecksumError(dir / s.file);
        std::memcpy(ds.values.data() + s.first * fs, bytes.data(), bytes.size());
        covered += s.count;
    }
    if (covered != ds.n_times()) throw TruncatedError(dir / "meta.json");
    return ds;
}

inline Dataset generate_toy_dataset(const ToyConfig &cfg, const GridSpec &grid, const std::filesystem::path &dir) {
    auto ds = generate_toy_dataset(cfg, grid);
    save_dataset(dir, ds, static_cast<std::size_t>(cfg.times_per_shard));
    return ds;
}

} // namespace aeriscast
