// Copyright 2026 The aeriscast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "aeriscast/data.hpp"
#include "aeriscast/fft.hpp"
#include "aeriscast/grid.hpp"
#include "aeriscast/rollout.hpp"

namespace aeriscast {

class MissingInitError : public Error {
public:
    explicit MissingInitError(std::vector<Timestamp> missing)
        : Error(describe(missing)), missing_(std::move(missing)) {}
    const std::vector<Timestamp> &missing() const { return missing_; }

private:
    static std::string describe(const std::vector<Timestamp> &m) {
        std::string s = "lagged ensemble is missing forecasts initialized at:";
        for (auto t : m) s += " " + iso8601(t);
        return s;
    }
    std::vector<Timestamp> missing_;
};

/// One score per lead time, averaged over `n_inits` initial conditions.
struct MetricSeries {
    std::string metric;
    std::string channel;
    std::vector<double> lead_hours;
    std::vector<double> values;
    int n_inits = 0;
};

inline json to_json(const MetricSeries &m) {
    return {{"metric", m.metric}, {"channel", m.channel}, {"lead_hours", m.lead_hours}, {"values", m.values},
            {"n_inits", m.n_inits}};
}

// ---------------------------------------------------------------------------
// Field-level scores. Fields are [n_lat x n_lon], weights have one entry per row.

inline double lat_weighted_mean(std::span<const double> per_cell, std::span<const double> lat_w, int n_lon) {
    double acc = 0.0;
    for (std::size_t i = 0; i < lat_w.size(); ++i) {
        double row = 0.0;
        for (int j = 0; j < n_lon; ++j) row += per_cell[i * n_lon + j];
        acc += lat_w[i] * row;
    }
    return acc / static_cast<double>(per_cell.size());
}

/// sqrt of the latitude-weighted spatial mean of squared error.
inline double lat_rmse_field(std::span<const float> pred, std::span<const float> truth, std::span<const double> lat_w,
                             int n_lon) {
    if (pred.size() != truth.size() || pred.size() != lat_w.size() * n_lon)
        throw InvalidArgument("lat_rmse: field shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < lat_w.size(); ++i) {
        double row = 0.0;
        for (int j = 0; j < n_lon; ++j) {
            const double d = static_cast<double>(pred[i * n_lon + j]) - truth[i * n_lon + j];
            row += d * d;
        }
        acc += lat_w[i] * row;
    }
    return std::sqrt(acc / static_cast<double>(pred.size()));
}

/// Latitude-weighted anomaly correlation; 0 when either anomaly has zero norm.
inline double acc_field(std::span<const float> pred, std::span<const float> truth, std::span<const float> clim,
                        std::span<const double> lat_w, int n_lon) {
    if (pred.size() != truth.size() || pred.size() != clim.size() || pred.size() != lat_w.size() * n_lon)
        throw InvalidArgument("acc: field shape mismatch");
    double fo = 0.0, ff = 0.0, oo = 0.0;
    for (std::size_t i = 0; i < lat_w.size(); ++i)
        for (int j = 0; j < n_lon; ++j) {
            const std::size_t k = i * n_lon + j;
            const double af = static_cast<double>(pred[k]) - clim[k];
            const double ao = static_cast<double>(truth[k]) - clim[k];
            fo += lat_w[i] * af * ao;
            ff += lat_w[i] * af * af;
            oo += lat_w[i] * ao * ao;
        }
    if (ff <= 0.0 || oo <= 0.0) return 0.0;
    return fo / std::sqrt(ff * oo);
}

// ---------------------------------------------------------------------------
// Forecast-level scores

namespace detail {

inline int channel_index(const ChannelSchema &schema, const std::string &channel) {
    const int c = schema.index_of(channel);
    if (c < 0 || c >= schema.n_prognostic()) throw InvalidArgument("unknown prognostic channel '" + channel + "'");
    return c;
}

inline std::size_t truth_index(const Dataset &truth, Timestamp t) {
    const auto &times = truth.meta.times;
    auto it = std::lower_bound(times.begin(), times.end(), t);
    if (it == times.end() || *it != t) throw AlignmentError("no verifying truth at " + iso8601(t));
    return static_cast<std::size_t>(it - times.begin());
}

template <class F>
MetricSeries per_lead_mean(const std::vector<Forecast> &forecasts, const std::string &metric, const std::string &channel,
                           int max_lead, F &&score) {
    if (forecasts.empty()) throw InvalidArgument(metric + ": no forecasts");
    int n = max_lead > 0 ? max_lead : forecasts.front().n_steps();
    for (const auto &f : forecasts) {
        if (f.n_steps() < n) throw AlignmentError(metric + ": forecasts shorter than the requested lead");
        if (f.dt_seconds != forecasts.front().dt_seconds) throw AlignmentError(metric + ": mixed forecast time steps");
    }
    MetricSeries m;
    m.metric = metric;
    m.channel = channel;
    m.n_inits = static_cast<int>(forecasts.size());
    for (int k = 0; k < n; ++k) {
        double acc = 0.0;
        for (const auto &f : forecasts) acc += score(f, k);
        m.lead_hours.push_back(static_cast<double>((k + 1) * forecasts.front().dt_seconds) / kSecondsPerHour);
        m.values.push_back(acc / static_cast<double>(forecasts.size()));
    }
    return m;
}

} // namespace detail

/// Per lead: latitude-weighted RMSE of one channel, averaged over init times
/// (mean of per-forecast RMSEs).
inline MetricSeries lat_rmse(const std::vector<Forecast> &forecasts, const Dataset &truth, const std::string &channel,
                             int max_lead = 0) {
    const int c = detail::channel_index(truth.meta.schema, channel);
    const auto w = latitude_weights(truth.meta.grid);
    const std::size_t plane = truth.meta.grid.cells();
    return detail::per_lead_mean(forecasts, "rmse", channel, max_lead, [&](const Forecast &f, int k) {
        const auto &s = f.states[k];
        if (s.valid_time != f.valid_time(k + 1)) throw AlignmentError("forecast state valid time mismatch");
        const auto frame = truth.frame(detail::truth_index(truth, s.valid_time));
        return lat_rmse_field(s.channel(c), frame.subspan(c * plane, plane), w, truth.meta.grid.n_lon);
    });
}

inline MetricSeries acc(const std::vector<Forecast> &forecasts, const Dataset &truth, const StateTensor &climatology,
                        const std::string &channel, int max_lead = 0) {
    const int c = detail::channel_index(truth.meta.schema, channel);
    const auto w = latitude_weights(truth.meta.grid);
    const std::size_t plane = truth.meta.grid.cells();
    return detail::per_lead_mean(forecasts, "acc", channel, max_lead, [&](const Forecast &f, int k) {
        const auto &s = f.states[k];
        const auto frame = truth.frame(detail::truth_index(truth, s.valid_time));
        return acc_field(s.channel(c), frame.subspan(c * plane, plane), climatology.channel(c), w,
                         truth.meta.grid.n_lon);
    });
}

/// RMSE pooled over all prognostic channels in normalized units, per lead.
inline MetricSeries normalized_rmse(const std::vector<Forecast> &forecasts, const Dataset &truth, int max_lead = 0) {
    const auto &st = truth.stats();
    const auto w = latitude_weights(truth.meta.grid);
    const std::size_t plane = truth.meta.grid.cells();
    const int cp = truth.meta.schema.n_prognostic();
    const int n_lon = truth.meta.grid.n_lon;
    return detail::per_lead_mean(forecasts, "normalized_rmse", "all", max_lead, [&](const Forecast &f, int k) {
        const auto &s = f.states[k];
        const auto frame = truth.frame(detail::truth_index(truth, s.valid_time));
        double acc = 0.0;
        for (int c = 0; c < cp; ++c) {
            const double r = lat_rmse_field(s.channel(c), frame.subspan(c * plane, plane), w, n_lon) / st.std[c];
            acc += r * r;
        }
        return std::sqrt(acc / cp);
    });
}

// ---------------------------------------------------------------------------
// Zonal power spectra

/// One-sided zonal power spectrum, k = 0..n_lon/2, averaged over rows with
/// latitude weights. Normalization: P_k = 2|X_k|^2 / n^2 for 0 < k < n/2,
/// |X_k|^2 / n^2 at k = 0 and at the Nyquist bin, so that sum_{k>0} P_k is
/// the row variance (Parseval) and P_0 the squared row mean.
inline std::vector<double> ps1d(std::span<const double> field, const GridSpec &grid) {
    if (field.size() != grid.cells()) throw InvalidArgument("ps1d: field shape mismatch");
    const int n = grid.n_lon, nk = n / 2 + 1;
    const auto w = latitude_weights(grid);
    std::vector<double> out(static_cast<std::size_t>(nk), 0.0);
    std::vector<fft::cplx> spec(static_cast<std::size_t>(nk));
    const double n2 = static_cast<double>(n) * n;
    for (int i = 0; i < grid.n_lat; ++i) {
        fft::rfft(field.subspan(static_cast<std::size_t>(i) * n, static_cast<std::size_t>(n)), spec);
        for (int k = 0; k < nk; ++k) {
            const bool single = k == 0 || (n % 2 == 0 && k == n / 2);
            out[k] += w[i] * (single ? 1.0 : 2.0) * std::norm(spec[k]) / n2;
        }
    }
    for (double &v : out) v /= grid.n_lat;
    return out;
}

inline std::vector<double> ps1d(std::span<const float> field, const GridSpec &grid) {
    std::vector<double> d(field.begin(), field.end());
    return ps1d(std::span<const double>(d), grid);
}

/// Spectrum averaged over every lead of every forecast for one channel.
inline std::vector<double> mean_forecast_spectrum(const std::vector<Forecast> &forecasts, int channel,
                                                  const GridSpec &grid, int max_lead = 0) {
    std::vector<double> acc;
    std::size_t n = 0;
    for (const auto &f : forecasts)
        for (int k = 0; k < (max_lead > 0 ? std::min(max_lead, f.n_steps()) : f.n_steps()); ++k) {
            const auto p = ps1d(f.states[k].channel(channel), grid);
            if (acc.empty()) acc.assign(p.size(), 0.0);
            for (std::size_t i = 0; i < p.size(); ++i) acc[i] += p[i];
            ++n;
        }
    for (double &v : acc) v /= static_cast<double>(std::max<std::size_t>(n, 1));
    return acc;
}

/// Verifying-truth spectrum over the same valid times as the forecasts.
inline std::vector<double> mean_truth_spectrum(const std::vector<Forecast> &forecasts, const Dataset &truth,
                                               int channel, int max_lead = 0) {
    std::vector<double> acc;
    std::size_t n = 0;
    const std::size_t plane = truth.meta.grid.cells();
    for (const auto &f : forecasts)
        for (int k = 0; k < (max_lead > 0 ? std::min(max_lead, f.n_steps()) : f.n_steps()); ++k) {
            const auto frame = truth.frame(detail::truth_index(truth, f.states[k].valid_time));
            const auto p = ps1d(frame.subspan(channel * plane, plane), truth.meta.grid);
            if (acc.empty()) acc.assign(p.size(), 0.0);
            for (std::size_t i = 0; i < p.size(); ++i) acc[i] += p[i];
            ++n;
        }
    for (double &v : acc) v /= static_cast<double>(std::max<std::size_t>(n, 1));
    return acc;
}

inline constexpr double kMinTruthPower = 1e-30;

/// pred / truth per wavenumber; missing where truth power is below 1e-30.
inline std::vector<std::optional<double>> psd_ratio(std::span<const double> pred, std::span<const double> truth) {
    if (pred.size() != truth.size()) throw InvalidArgument("psd_ratio: wavenumber axes differ");
    std::vector<std::optional<double>> r(pred.size());
    for (std::size_t k = 0; k < pred.size(); ++k)
        if (truth[k] >= kMinTruthPower) r[k] = pred[k] / truth[k];
    return r;
}

/// Mean ratio over the top quartile of wavenumbers k in (3/4 k_hi, k_hi].
/// k_hi defaults to the last bin below Nyquist: a real field on an even grid
/// cannot carry a rotating Nyquist wave, so the toy truth has no power there
/// and the ratio at that bin is round-off over round-off.
inline double top_quartile_mean(const std::vector<std::optional<double>> &ratio, int k_hi = -1) {
    if (k_hi < 0) k_hi = static_cast<int>(ratio.size()) - 2;
    double acc = 0.0;
    int n = 0;
    for (int k = k_hi - k_hi / 4 + 1; k <= k_hi; ++k)
        if (ratio[k]) {
            acc += *ratio[k];
            ++n;
        }
    return n ? acc / n : std::numeric_limits<double>::quiet_NaN();
}

/// Least-squares slope of log P against log k over k in [k_lo, k_hi].
inline double spectral_slope(std::span<const double> power, int k_lo, int k_hi) {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int n = 0;
    for (int k = k_lo; k <= k_hi; ++k) {
        const double x = std::log(static_cast<double>(k)), y = std::log(power[k]);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
        ++n;
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

// ---------------------------------------------------------------------------
// Lagged ensembles

/// Members are forecasts initialized at newest_init - k * lag, k = 0..M-1,
/// each taken at the lead that lands on valid_time.
struct LaggedEnsemble {
    Timestamp valid_time;
    std::vector<StateTensor> members;
    std::vector<Timestamp> member_inits;
    double newest_lead_hours = 0.0;
    double center_lead_hours = 0.0;

    int size() const { return static_cast<int>(members.size()); }
};

/// Looks up the M lagged members. The center lead reported is the newest
/// member's lead plus (M - 1) / 2 lags.
inline LaggedEnsemble build_lagged_ensemble(const std::vector<Forecast> &store, Timestamp valid_time, int M,
                                            std::int64_t lag_seconds, int newest_lead_steps) {
    if (M < 1) throw InvalidArgument("build_lagged_ensemble: M must be >= 1");
    if (store.empty()) throw InvalidArgument("build_lagged_ensemble: empty forecast store");
    const std::int64_t dt = store.front().dt_seconds;
    const Timestamp newest = valid_time - newest_lead_steps * dt;
    std::map<std::int64_t, const Forecast *> by_init;
    for (const auto &f : store) by_init[f.init_time.seconds] = &f;
    LaggedEnsemble e;
    e.valid_time = valid_time;
    std::vector<Timestamp> missing;
    for (int k = 0; k < M; ++k) {
        const Timestamp init = newest - k * lag_seconds;
        auto it = by_init.find(init.seconds);
        const StateTensor *s = it == by_init.end() ? nullptr : it->second->at_valid(valid_time);
        if (!s) {
            missing.push_back(init);
            continue;
        }
        e.members.push_back(*s);
        e.member_inits.push_back(init);
    }
    if (!missing.empty()) throw MissingInitError(missing);
    e.newest_lead_hours = static_cast<double>(newest_lead_steps * dt) / kSecondsPerHour;
    e.center_lead_hours = e.newest_lead_hours + 0.5 * (M - 1) * static_cast<double>(lag_seconds) / kSecondsPerHour;
    return e;
}

struct EnsembleScores {
    double ens_mean_rmse = 0.0;
    double spread = 0.0;
    std::optional<double> spread_skill;
    double crps = 0.0;
};

namespace detail {

inline void check_members(std::span<const std::span<const float>> members, std::span<const float> truth) {
    if (members.empty()) throw InvalidArgument("ensemble has no members");
    for (auto m : members)
        if (m.size() != truth.size()) throw InvalidArgument("ensemble member shape mismatch");
}

} // namespace detail

inline double ensemble_mean_rmse(std::span<const std::span<const float>> members, std::span<const float> truth,
                                 std::span<const double> lat_w, int n_lon) {
    detail::check_members(members, truth);
    std::vector<float> mean(truth.size());
    for (std::size_t k = 0; k < truth.size(); ++k) {
        double s = 0.0;
        for (auto m : members) s += m[k];
        mean[k] = static_cast<float>(s / static_cast<double>(members.size()));
    }
    return lat_rmse_field(mean, truth, lat_w, n_lon);
}

/// sqrt of the latitude-weighted mean of per-cell sample variances (divisor M - 1).
inline double ensemble_spread(std::span<const std::span<const float>> members, std::span<const double> lat_w, int n_lon) {
    const std::size_t M = members.size();
    if (M < 2) throw InvalidArgument("ensemble spread needs at least 2 members");
    const std::size_t n = members.front().size();
    std::vector<double> var(n);
    for (std::size_t k = 0; k < n; ++k) {
        double s = 0.0;
        for (auto m : members) s += m[k];
        const double mean = s / static_cast<double>(M);
        double v = 0.0;
        for (auto m : members) v += (m[k] - mean) * (m[k] - mean);
        var[k] = v / static_cast<double>(M - 1);
    }
    return std::sqrt(lat_weighted_mean(var, lat_w, n_lon));
}

/// CRPS of an ensemble at one point: (1/M) sum|x_i - y| - (1/(2 M^2)) sum sum|x_i - x_j|,
/// or with the fair divisor 2 M (M - 1) for the second term.
inline double crps_point(std::span<const double> x, double y, bool fair = false) {
    const std::size_t M = x.size();
    double a = 0.0, b = 0.0;
    for (std::size_t i = 0; i < M; ++i) {
        a += std::abs(x[i] - y);
        for (std::size_t j = 0; j < M; ++j) b += std::abs(x[i] - x[j]);
    }
    const double md = static_cast<double>(M);
    if (fair) {
        if (M < 2) throw InvalidArgument("fair CRPS needs at least 2 members");
        return a / md - b / (2.0 * md * (md - 1.0));
    }
    return a / md - b / (2.0 * md * md);
}

inline double ensemble_crps(std::span<const std::span<const float>> members, std::span<const float> truth,
                            std::span<const double> lat_w, int n_lon, bool fair = false) {
    detail::check_members(members, truth);
    std::vector<double> c(truth.size()), x(members.size());
    for (std::size_t k = 0; k < truth.size(); ++k) {
        for (std::size_t i = 0; i < members.size(); ++i) x[i] = members[i][k];
        c[k] = crps_point(x, truth[k], fair);
    }
    return lat_weighted_mean(c, lat_w, n_lon);
}

inline EnsembleScores ensemble_scores(std::span<const std::span<const float>> members, std::span<const float> truth,
                                      std::span<const double> lat_w, int n_lon, bool fair_crps = false) {
    EnsembleScores s;
    s.ens_mean_rmse = ensemble_mean_rmse(members, truth, lat_w, n_lon);
    s.spread = ensemble_spread(members, lat_w, n_lon);
    if (s.ens_mean_rmse > 0.0) s.spread_skill = s.spread / s.ens_mean_rmse;
    s.crps = ensemble_crps(members, truth, lat_w, n_lon, fair_crps);
    return s;
}

/// Scores one channel of a lagged ensemble against the dataset truth.
inline EnsembleScores ensemble_scores(const LaggedEnsemble &e, const Dataset &truth, const std::string &channel,
                                      bool fair_crps = false) {
    const int c = detail::channel_index(truth.meta.schema, channel);
    const std::size_t plane = truth.meta.grid.cells();
    std::vector<std::span<const float>> members;
    for (const auto &m : e.members) members.push_back(m.channel(c));
    const auto frame = truth.frame(detail::truth_index(truth, e.valid_time));
    return ensemble_scores(members, frame.subspan(c * plane, plane), latitude_weights(truth.meta.grid),
                           truth.meta.grid.n_lon, fair_crps);
}

// ---------------------------------------------------------------------------
// Ablation report

/// One trained configuration with its score per requested lead (hours).
struct RunScores {
    std::string name;
    bool channel_weighting = false;
    int n_step = 1;
    bool lat_weighting = false;
    std::map<int, double> by_lead; // empty -> run missing
};

struct ReportRow {
    RunScores run;
    std::vector<double> values;
    std::vector<bool> group_min;
};

struct ScoreReport {
    std::string metric;
    std::string channel;
    std::vector<int> leads;
    std::vector<ReportRow> rows;
    std::vector<std::string> missing;

    /// Columns: run,channel_weighting,n_step,lat_weighting, then for every
    /// lead L: <metric>_<L>h and <metric>_<L>h_min (1 for the group minimum).
    std::string csv() const {
        std::ostringstream o;
        o << "run,channel_weighting,n_step,lat_weighting";
        for (int l : leads) o << "," << metric << "_" << l << "h," << metric << "_" << l << "h_min";
        o << "\n";
        char buf[64];
        for (const auto &r : rows) {
            o << r.run.name << "," << int(r.run.channel_weighting) << "," << r.run.n_step << ","
              << int(r.run.lat_weighting);
            for (std::size_t i = 0; i < leads.size(); ++i) {
                std::snprintf(buf, sizeof buf, "%.6f", r.values[i]);
                o << "," << buf << "," << int(r.group_min[i]);
            }
            o << "\n";
        }
        for (const auto &m : missing) o << "# missing run: " << m << "\n";
        return o.str();
    }

    json to_json() const {
        json rs = json::array();
        for (const auto &r : rows)
            rs.push_back({{"run", r.run.name},
                          {"channel_weighting", r.run.channel_weighting},
                          {"n_step", r.run.n_step},
                          {"lat_weighting", r.run.lat_weighting},
                          {"values", r.values},
                          {"group_min", r.group_min}});
        return {{"metric", metric}, {"channel", channel}, {"lead_hours", leads}, {"rows", rs}, {"missing", missing}};
    }
};

/// Builds the ablation table; rows are grouped by n_step and the minimum of
/// each lead column within a group is flagged. Runs lacking a requested lead
/// are listed as missing instead of failing the report.
inline ScoreReport score_report(const std::vector<RunScores> &runs, const std::vector<int> &leads,
                                std::string metric = "rmse", std::string channel = "") {
    ScoreReport rep;
    rep.metric = std::move(metric);
    rep.channel = std::move(channel);
    rep.leads = leads;
    for (const auto &r : runs) {
        ReportRow row;
        row.run = r;
        bool ok = true;
        for (int l : leads) {
            auto it = r.by_lead.find(l);
            if (it == r.by_lead.end()) {
                ok = false;
                break;
            }
            row.values.push_back(it->second);
        }
        if (!ok) {
            rep.missing.push_back(r.name);
            continue;
        }
        row.group_min.assign(leads.size(), false);
        rep.rows.push_back(std::move(row));
    }
    std::stable_sort(rep.rows.begin(), rep.rows.end(),
                     [](const ReportRow &a, const ReportRow &b) { return a.run.n_step < b.run.n_step; });
    std::set<int> groups;
    for (const auto &r : rep.rows) groups.insert(r.run.n_step);
    for (int g : groups)
        for (std::size_t i = 0; i < leads.size(); ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto &r : rep.rows)
                if (r.run.n_step == g) best = std::min(best, r.values[i]);
            for (auto &r : rep.rows)
                if (r.run.n_step == g && r.values[i] == best) r.group_min[i] = true;
        }
    return rep;
}

} // namespace aeriscast
