// Copyright 2026 The aeriscast Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include "aeriscast/verify.hpp"
#include "oracles.hpp"

using namespace aeriscast;
using Catch::Approx;

namespace {

std::vector<float> noise(std::size_t n, Rng &rng, double scale = 1.0, double offset = 0.0) {
    std::vector<float> v(n);
    for (auto &x : v) x = static_cast<float>(offset + scale * rng.normal());
    return v;
}

std::vector<std::span<const float>> spans(const std::vector<std::vector<float>> &m) {
    return {m.begin(), m.end()};
}

// Toy dataset plus a store of persistence forecasts every step.
struct Store {
    Dataset ds;
    std::vector<Forecast> forecasts;

    Store() {
        ToyConfig t;
        t.n_prog_channels = 4;
        t.n_times = 80;
        t.n_train = 50;
        t.n_val = 30;
        ds = generate_toy_dataset(t, make_grid(8, 16));
        ds.meta.stats = compute_norm_stats(ds, ds.meta.train);
        for (std::size_t i = 40; i < 60; ++i)
            forecasts.push_back(persistence_forecast(ds.state(i), 4, 20, ds.meta.dt_seconds()));
    }
};

} // namespace

TEST_CASE("latitude-weighted RMSE matches a brute-force oracle on random fields") {
    Rng rng(1);
    for (int trial = 0; trial < 120; ++trial) {
        const int h = 2 + static_cast<int>(rng.below(63)), w = 2 + static_cast<int>(rng.below(127));
        const auto a = noise(static_cast<std::size_t>(h) * w, rng, 3.0, 5.0);
        const auto b = noise(a.size(), rng);
        const auto lw = oracle::lat_weights(h);
        CHECK(lat_rmse_field(a, b, latitude_weights(make_grid(h, w)), w) ==
              Approx(oracle::weighted_rmse(a, b, lw, w)).epsilon(1e-12));
    }
    const std::vector<float> x = {1, 2, 3, 4}, y = {1, 2, 3};
    const std::vector<double> lw = {1.0, 1.0};
    CHECK_THROWS_AS(lat_rmse_field(x, y, lw, 2), InvalidArgument);
}

TEST_CASE("anomaly correlation matches a brute-force oracle") {
    Rng rng(2);
    for (int trial = 0; trial < 100; ++trial) {
        const int h = 2 + static_cast<int>(rng.below(40)), w = 2 + static_cast<int>(rng.below(80));
        const std::size_t n = static_cast<std::size_t>(h) * w;
        const auto truth = noise(n, rng), clim = noise(n, rng, 0.5);
        auto pred = truth;
        for (auto &v : pred) v += static_cast<float>(rng.normal() * rng.uniform() * 2);
        const auto lw = oracle::lat_weights(h);
        long double fo = 0, ff = 0, oo = 0;
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                const std::size_t k = static_cast<std::size_t>(i) * w + j;
                const long double af = static_cast<long double>(pred[k]) - clim[k], ao = static_cast<long double>(truth[k]) - clim[k];
                fo += lw[i] * af * ao;
                ff += lw[i] * af * af;
                oo += lw[i] * ao * ao;
            }
        CHECK(acc_field(pred, truth, clim, lw, w) == Approx(static_cast<double>(fo / std::sqrt(ff * oo))).epsilon(1e-10));
    }
    // Perfect, anti-correlated and degenerate cases.
    Rng r2(3);
    const auto t = noise(64, r2), c = noise(64, r2);
    std::vector<float> anti(64);
    for (int k = 0; k < 64; ++k) anti[k] = 2 * c[k] - t[k];
    const auto lw = oracle::lat_weights(8);
    CHECK(acc_field(t, t, c, lw, 8) == Approx(1.0).epsilon(1e-12));
    CHECK(acc_field(anti, t, c, lw, 8) == Approx(-1.0).epsilon(1e-6));
    CHECK(acc_field(c, t, c, lw, 8) == 0.0);
}

TEST_CASE("forecast-level RMSE averages per-init scores at each lead") {
    Store s;
    const auto r = lat_rmse(s.forecasts, s.ds, "z500", 8);
    REQUIRE(r.values.size() == 8);
    CHECK(r.lead_hours.front() == 6.0);
    CHECK(r.lead_hours.back() == 48.0);
    CHECK(r.n_inits == static_cast<int>(s.forecasts.size()));
    const int c = s.ds.meta.schema.index_of("z500");
    const std::size_t plane = s.ds.meta.grid.cells();
    const auto lw = oracle::lat_weights(8);
    for (int k : {0, 3, 7}) {
        double m = 0;
        for (const auto &f : s.forecasts) {
            const auto truth = s.ds.frame(40 + (&f - s.forecasts.data()) + k + 1);
            m += oracle::weighted_rmse(f.states[k].channel(c), truth.subspan(c * plane, plane), lw, 16);
        }
        CHECK(r.values[k] == Approx(m / s.forecasts.size()).epsilon(1e-10));
    }
    // RMSE of persistence grows with lead on the advecting toy.
    CHECK(r.values[7] > r.values[0]);

    const auto nr = normalized_rmse(s.forecasts, s.ds, 2);
    double per_init = 0;
    for (const auto &f : s.forecasts) {
        const auto truth = s.ds.frame(40 + (&f - s.forecasts.data()) + 2);
        double acc2 = 0;
        for (int ch = 0; ch < 4; ++ch) {
            const double e = oracle::weighted_rmse(f.states[1].channel(ch), truth.subspan(ch * plane, plane), lw, 16) /
                              s.ds.stats().std[ch];
            acc2 += e * e;
        }
        per_init += std::sqrt(acc2 / 4);
    }
    CHECK(nr.values[1] == Approx(per_init / s.forecasts.size()).epsilon(1e-10));

    CHECK_THROWS_AS(lat_rmse(s.forecasts, s.ds, "lsm"), InvalidArgument);
    CHECK_THROWS_AS(lat_rmse(s.forecasts, s.ds, "z500", 21), AlignmentError);
    std::vector<Forecast> late = {persistence_forecast(s.ds.state(75), 4, 10, s.ds.meta.dt_seconds())};
    CHECK_THROWS_AS(lat_rmse(late, s.ds, "z500"), AlignmentError);
}

TEST_CASE("CRPS hand example and the single-member limit") {
    const std::vector<double> x = {0.0, 2.0};
    CHECK(crps_point(x, 1.0) == Approx(0.5));
    CHECK(crps_point(x, 1.0, true) == Approx(0.0).margin(1e-15));
    Rng rng(4);
    for (int i = 0; i < 50; ++i) {
        const std::vector<double> one = {rng.normal()};
        const double y = rng.normal();
        CHECK(crps_point(one, y) == Approx(std::abs(one[0] - y)).epsilon(1e-15));
    }
    CHECK_THROWS_AS(crps_point(std::vector<double>{1.0}, 0.0, true), InvalidArgument);
}

TEST_CASE("CRPS equals the integral of the squared CDF difference") {
    Rng rng(5);
    for (int trial = 0; trial < 12; ++trial) {
        const int M = 1 + static_cast<int>(rng.below(9));
        std::vector<double> x(M);
        for (auto &v : x) v = rng.normal() * 2.0;
        const double y = rng.normal();
        CHECK(crps_point(x, y) == Approx(oracle::crps_integral(x, y)).margin(1e-3));
    }
}

TEST_CASE("ensemble scores on fields: lat weighting, Jensen and the M-1 spread divisor") {
    Rng rng(6);
    const int h = 16, w = 32, M = 5;
    const auto lw = oracle::lat_weights(h);
    const auto truth = noise(h * w, rng);
    std::vector<std::vector<float>> members;
    for (int m = 0; m < M; ++m) members.push_back(noise(h * w, rng, 1.0, 0.3));
    const auto sp = spans(members);

    double mean_member_rmse = 0;
    for (const auto &m : members) mean_member_rmse += oracle::weighted_rmse(m, truth, lw, w);
    mean_member_rmse /= M;
    const double em = ensemble_mean_rmse(sp, truth, lw, w);
    CHECK(em <= mean_member_rmse);

    long double var_acc = 0, crps_acc = 0;
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const std::size_t k = static_cast<std::size_t>(i) * w + j;
            long double mu = 0;
            for (const auto &m : members) mu += m[k];
            mu /= M;
            long double v = 0;
            for (const auto &m : members) v += (m[k] - mu) * (m[k] - mu);
            var_acc += lw[i] * v / (M - 1);
            std::vector<double> xs;
            for (const auto &m : members) xs.push_back(m[k]);
            long double a = 0, b = 0;
            for (double xi : xs) {
                a += std::abs(xi - truth[k]);
                for (double xj : xs) b += std::abs(xi - xj);
            }
            crps_acc += lw[i] * (a / M - b / (2.0L * M * M));
        }
    CHECK(ensemble_spread(sp, lw, w) == Approx(std::sqrt(static_cast<double>(var_acc / (h * w)))).epsilon(1e-10));
    CHECK(ensemble_crps(sp, truth, lw, w) == Approx(static_cast<double>(crps_acc / (h * w))).epsilon(1e-10));

    const auto scores = ensemble_scores(sp, truth, lw, w);
    REQUIRE(scores.spread_skill);
    CHECK(*scores.spread_skill == Approx(scores.spread / scores.ens_mean_rmse));

    std::vector<std::vector<float>> single = {members[0]};
    CHECK_THROWS_AS(ensemble_spread(spans(single), lw, w), InvalidArgument);
    std::vector<std::vector<float>> same = {truth, truth};
    CHECK(!ensemble_scores(spans(same), truth, lw, w).spread_skill);
}

TEST_CASE("a calibrated ensemble has spread/skill near sqrt(M / (M + 1))") {
    // Truth and members drawn from the same distribution: E spread^2 = 1 and
    // E (mean - truth)^2 = 1 + 1/M.
    Rng rng(7);
    const int h = 64, w = 128, M = 9;
    const auto lw = oracle::lat_weights(h);
    const auto truth = noise(h * w, rng);
    std::vector<std::vector<float>> members;
    for (int m = 0; m < M; ++m) members.push_back(noise(h * w, rng));
    const auto sc = ensemble_scores(spans(members), truth, lw, w);
    REQUIRE(sc.spread_skill);
    CHECK(std::abs(*sc.spread_skill - std::sqrt(0.9)) < 0.03);
}

TEST_CASE("zonal spectra: Parseval, pure waves and constant fields") {
    const auto g = make_grid(6, 32);
    const auto lw = oracle::lat_weights(6);
    Rng rng(8);
    std::vector<double> f(g.cells());
    for (auto &v : f) v = rng.normal() + 0.7;
    const auto p = ps1d(std::span<const double>(f), g);
    REQUIRE(p.size() == 17);
    long double var = 0, mean2 = 0;
    for (int i = 0; i < 6; ++i) {
        long double m = 0, v = 0;
        for (int j = 0; j < 32; ++j) m += f[i * 32 + j];
        m /= 32;
        for (int j = 0; j < 32; ++j) v += (f[i * 32 + j] - m) * (f[i * 32 + j] - m);
        var += lw[i] * v / 32;
        mean2 += lw[i] * m * m;
    }
    double tail = 0;
    for (std::size_t k = 1; k < p.size(); ++k) tail += p[k];
    CHECK(tail == Approx(static_cast<double>(var / 6)).epsilon(1e-10));
    CHECK(p[0] == Approx(static_cast<double>(mean2 / 6)).epsilon(1e-10));

    std::vector<double> wave(g.cells());
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 32; ++j) wave[i * 32 + j] = 2.5 * std::cos(3.0 * g.lon_centers[j] * std::numbers::pi / 180.0);
    const auto pw = ps1d(std::span<const double>(wave), g);
    for (std::size_t k = 0; k < pw.size(); ++k) CHECK(pw[k] == Approx(k == 3 ? 2.5 * 2.5 / 2 : 0.0).margin(1e-12));

    const std::vector<double> flat(g.cells(), -4.0);
    const auto pf = ps1d(std::span<const double>(flat), g);
    CHECK(pf[0] == Approx(16.0).epsilon(1e-12));
    for (std::size_t k = 1; k < pf.size(); ++k) CHECK(pf[k] == Approx(0.0).margin(1e-20));
}

TEST_CASE("PSD ratio flags empty truth bins and rejects mismatched axes") {
    const std::vector<double> pred = {1.0, 2.0, 3.0, 4.0}, truth = {2.0, 0.0, 1e-31, 8.0};
    const auto r = psd_ratio(pred, truth);
    CHECK(r[0] == 0.5);
    CHECK(!r[1]);
    CHECK(!r[2]);
    CHECK(r[3] == 0.5);
    const std::vector<double> short_truth = {1.0};
    CHECK_THROWS_AS(psd_ratio(pred, short_truth), InvalidArgument);
}

TEST_CASE("top-quartile ratio skips the Nyquist bin by default") {
    std::vector<std::optional<double>> r(33, 1.0); // 64-point rows
    r[32] = 1e9;
    for (int k = 25; k <= 31; ++k) r[k] = 0.5 + 0.01 * k;
    double expect = 0;
    for (int k = 25; k <= 31; ++k) expect += 0.5 + 0.01 * k;
    CHECK(top_quartile_mean(r) == Approx(expect / 7));
    CHECK(top_quartile_mean(r, 32) > 1e8);
    r[27].reset();
    CHECK(top_quartile_mean(r) == Approx((expect - 0.77) / 6));
}

TEST_CASE("a zonal low-pass filter lowers the high-wavenumber power ratio") {
    const auto g = make_grid(16, 64);
    Rng rng(9);
    std::vector<double> f(g.cells()), smooth(g.cells());
    for (auto &v : f) v = rng.normal();
    for (int i = 0; i < 16; ++i)
        for (int j = 0; j < 64; ++j)
            smooth[i * 64 + j] = 0.25 * f[i * 64 + (j + 63) % 64] + 0.5 * f[i * 64 + j] + 0.25 * f[i * 64 + (j + 1) % 64];
    const auto r = psd_ratio(ps1d(std::span<const double>(smooth), g), ps1d(std::span<const double>(f), g));
    CHECK(top_quartile_mean(r) < 0.2);
    CHECK(*r[1] == Approx(std::pow(0.5 + 0.5 * std::cos(2 * std::numbers::pi / 64), 2)).epsilon(1e-9));
}

TEST_CASE("spectral slope recovers an exact power law") {
    std::vector<double> p(40);
    for (int k = 1; k < 40; ++k) p[k] = 7.0 * std::pow(k, -3.0);
    CHECK(spectral_slope(p, 2, 30) == Approx(-3.0).epsilon(1e-12));
}

TEST_CASE("lagged ensembles collect members at the lead that lands on the valid time") {
    Store s;
    const auto dt = s.ds.meta.dt_seconds();
    const Timestamp valid = s.ds.meta.times[62];

    const auto one = build_lagged_ensemble(s.forecasts, valid, 1, dt, 4);
    REQUIRE(one.size() == 1);
    CHECK(one.member_inits[0] == s.ds.meta.times[58]);
    CHECK(one.newest_lead_hours == 24.0);
    CHECK(one.center_lead_hours == 24.0);
    CHECK(one.members[0].values == s.forecasts[18].states[3].values);

    const auto nine = build_lagged_ensemble(s.forecasts, valid, 9, dt, 4);
    REQUIRE(nine.size() == 9);
    CHECK(nine.member_inits.front().seconds - nine.member_inits.back().seconds == 48 * 3600);
    CHECK(nine.center_lead_hours == 48.0);
    for (const auto &m : nine.members) CHECK(m.valid_time == valid);
    // Persistence members are the truth at their inits.
    const int c = s.ds.meta.schema.index_of("t500");
    const std::size_t plane = s.ds.meta.grid.cells();
    const auto init_frame = s.ds.frame(50);
    CHECK(std::equal(nine.members[8].channel(c).begin(), nine.members[8].channel(c).end(),
                     init_frame.begin() + c * plane));
    const auto sc = ensemble_scores(nine, s.ds, "t500");
    CHECK(sc.spread > 0);
    CHECK(sc.crps > 0);

    try {
        build_lagged_ensemble(s.forecasts, s.ds.meta.times[44], 9, dt, 2);
        FAIL("expected MissingInitError");
    } catch (const MissingInitError &e) {
        // Newest init is time 42; inits before 40 precede the store.
        REQUIRE(e.missing().size() == 6);
        CHECK(e.missing().front() == s.ds.meta.times[39]);
        CHECK(e.missing().back() == s.ds.meta.times[34]);
    }
}

TEST_CASE("score report groups by n_step, flags group minima and lists missing runs") {
    std::vector<RunScores> runs = {
        {"cw_n8", true, 8, true, {{48, 1.5}, {96, 2.5}}},
        {"cw_n1", true, 1, true, {{48, 1.0}, {96, 3.0}}},
        {"plain_n1", false, 1, false, {{48, 1.2}, {96, 2.0}}},
        {"broken", false, 8, false, {{48, 1.1}}},
        {"plain_n8", false, 8, true, {{48, 1.4}, {96, 2.6}}},
    };
    const auto rep = score_report(runs, {48, 96}, "rmse", "z500");
    REQUIRE(rep.rows.size() == 4);
    CHECK(rep.missing == std::vector<std::string>{"broken"});
    CHECK(rep.rows[0].run.name == "cw_n1");
    CHECK(rep.rows[1].run.name == "plain_n1");
    CHECK(rep.rows[2].run.name == "cw_n8");
    CHECK(rep.rows[3].run.name == "plain_n8");
    CHECK(rep.rows[0].group_min == std::vector<bool>{true, false});
    CHECK(rep.rows[1].group_min == std::vector<bool>{false, true});
    CHECK(rep.rows[2].group_min == std::vector<bool>{false, true});
    CHECK(rep.rows[3].group_min == std::vector<bool>{true, false});
    const std::string csv = rep.csv();
    CHECK(csv.starts_with("run,channel_weighting,n_step,lat_weighting,rmse_48h,rmse_48h_min,rmse_96h,rmse_96h_min\n"));
    CHECK(csv.find("cw_n1,1,1,1,1.000000,1,3.000000,0\n") != std::string::npos);
    CHECK(csv.ends_with("# missing run: broken\n"));
    CHECK(rep.to_json().at("rows").size() == 4);
}
