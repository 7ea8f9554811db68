// Copyright 2026 The aeriscast Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cstring>
#include <fstream>

#include "aeriscast/data.hpp"
#include "oracles.hpp"

using namespace aeriscast;
using Catch::Approx;

namespace {

ToyConfig small_toy(int n_times = 40) {
    ToyConfig c;
    c.n_prog_channels = 4;
    c.n_times = n_times;
    c.n_train = n_times * 3 / 4;
    c.n_val = n_times / 8;
    c.times_per_shard = 7;
    return c;
}

std::vector<double> random_field(const GridSpec &g, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    std::normal_distribution<double> nd;
    std::vector<double> f(g.cells());
    for (double &v : f) v = nd(gen);
    return f;
}

double row_variance(std::span<const double> r) {
    double m = 0.0, v = 0.0;
    for (double x : r) m += x;
    m /= r.size();
    for (double x : r) v += (x - m) * (x - m);
    return v / r.size();
}

} // namespace

TEST_CASE("toy schema lists prognostic channels before statics") {
    const auto s = toy_schema(8);
    REQUIRE(s.size() == 11);
    CHECK(s.n_prognostic() == 8);
    CHECK(s.n_static() == 3);
    CHECK(s.channels[0].label() == "t2m");
    CHECK(s.channels[1].label() == "u10");
    CHECK(s.index_of("z500") >= 2);
    CHECK(s.index_of("z500") < 8);
    CHECK(s.channels.back().name == "cos_zenith");
    for (int c = 8; c < 11; ++c) CHECK(!s.channels[c].level_hPa);
}

TEST_CASE("ERA5-like schema has 73 prognostic channels on 13 levels") {
    const auto s = era5_like_schema();
    CHECK(s.n_prognostic() == 73);
    CHECK(s.n_static() == 3);
    CHECK(kPressureLevels.size() == 13);
}

TEST_CASE("schema validation rejects malformed layouts") {
    ChannelSchema dup;
    dup.channels = {{"z", 500, ChannelKind::prognostic}, {"z", 500, ChannelKind::prognostic}};
    CHECK_THROWS_AS(dup.validate(), InvalidArgument);

    ChannelSchema leveled_static;
    leveled_static.channels = {{"z", 500, ChannelKind::prognostic}, {"lsm", 100, ChannelKind::static_input}};
    CHECK_THROWS_AS(leveled_static.validate(), InvalidArgument);

    ChannelSchema no_prog;
    no_prog.channels = {{"lsm", std::nullopt, ChannelKind::static_input}};
    CHECK_THROWS_AS(no_prog.validate(), InvalidArgument);

    ChannelSchema misordered;
    misordered.channels = {{"lsm", std::nullopt, ChannelKind::static_input}, {"t2m", std::nullopt, ChannelKind::prognostic}};
    CHECK_THROWS_AS(misordered.validate(), InvalidArgument);

    // Same name on different levels is fine.
    ChannelSchema ok;
    ok.channels = {{"z", 500, ChannelKind::prognostic}, {"z", 850, ChannelKind::prognostic}};
    CHECK_NOTHROW(ok.validate());
}

TEST_CASE("schema JSON round trip") {
    const auto s = toy_schema(6);
    const json j = s;
    CHECK(j.get<ChannelSchema>() == s);
}

TEST_CASE("advect_step with no motion and no diffusion is the identity") {
    const auto g = make_grid(8, 32);
    auto f = random_field(g, 1);
    const auto ref = f;
    advect_step(f, g, 0.0, 0.0, 0.0);
    CHECK(f == ref);
}

TEST_CASE("advect_step by whole columns is a roll") {
    const auto g = make_grid(6, 24);
    auto f = random_field(g, 2);
    const auto ref = f;
    const int k = 5;
    advect_step(f, g, k * g.dlon(), 0.0, 0.0);
    for (int i = 0; i < g.n_lat; ++i)
        for (int j = 0; j < g.n_lon; ++j)
            CHECK(f[i * 24 + j] == Approx(ref[i * 24 + (j - k + 24) % 24]).margin(1e-12));
}

TEST_CASE("advect_step matches a band-limited shift oracle row by row") {
    const auto g = make_grid(6, 20);
    auto f = random_field(g, 3);
    const auto ref = f;
    const double w0 = 7.3, w1 = -4.1;
    advect_step(f, g, w0, w1, 0.0);
    for (int i = 0; i < g.n_lat; ++i) {
        const std::vector<double> row(ref.begin() + i * 20, ref.begin() + (i + 1) * 20);
        const double s = (w0 + w1 * oracle::cosd(g.lat_centers[i])) / g.dlon();
        for (int j = 0; j < 20; ++j) CHECK(f[i * 20 + j] == Approx(oracle::shifted_sample(row, j - s)).margin(1e-10));
    }
}

TEST_CASE("advect_step without diffusion preserves row variance and mean") {
    const auto g = make_grid(16, 64);
    Rng rng(11);
    auto f = detail::random_zonal_field(g, 3.0, rng); // no Nyquist content
    for (std::size_t k = 0; k < f.size(); ++k) f[k] += 3.0 + 0.1 * (k / 64);
    const auto ref = f;
    advect_step(f, g, 3.7, 2.2, 0.0);
    for (int i = 0; i < g.n_lat; ++i) {
        const std::span<const double> a(ref.data() + i * 64, 64), b(f.data() + i * 64, 64);
        CHECK(row_variance(b) == Approx(row_variance(a)).epsilon(1e-6));
        double ma = 0.0, mb = 0.0;
        for (int j = 0; j < 64; ++j) {
            ma += a[j];
            mb += b[j];
        }
        CHECK(mb == Approx(ma).epsilon(1e-6));
    }
}

TEST_CASE("advect_step with diffusion never increases zonal power") {
    const auto g = make_grid(4, 32);
    auto f = random_field(g, 4);
    const auto ref = f;
    advect_step(f, g, 2.5, 1.0, 0.3);
    for (int i = 0; i < g.n_lat; ++i) {
        const auto A = oracle::dft({ref.begin() + i * 32, ref.begin() + (i + 1) * 32});
        const auto B = oracle::dft({f.begin() + i * 32, f.begin() + (i + 1) * 32});
        for (std::size_t k = 1; k < A.size(); ++k) CHECK(std::norm(B[k]) <= std::norm(A[k]) * (1 + 1e-12) + 1e-20);
        CHECK(std::abs(B[0] - A[0]) < 1e-9);
    }
}

TEST_CASE("toy generation is deterministic and independent of worker count") {
    const auto g = make_grid(8, 16);
    const auto cfg = small_toy(20);
    const auto a = generate_toy_dataset(cfg, g);
    const auto b = generate_toy_dataset(cfg, g);
    CHECK(a.values == b.values);
    setenv("AERISCAST_THREADS", "1", 1);
    const auto c = generate_toy_dataset(cfg, g);
    unsetenv("AERISCAST_THREADS");
    CHECK(a.values == c.values);
    auto other = cfg;
    other.seed = 2;
    CHECK(generate_toy_dataset(other, g).values != a.values);
}

TEST_CASE("toy initial fields follow the configured zonal spectral slope") {
    const auto g = make_grid(64, 128);
    for (double slope : {2.0, 3.0, 4.0}) {
        auto cfg = small_toy(2);
        cfg.n_train = 2;
        cfg.n_val = 0;
        cfg.spectral_slope = slope;
        cfg.n_prog_channels = 8;
        const auto ds = generate_toy_dataset(cfg, g);
        const auto frame = ds.frame(0);
        // Pool |X_k|^2 over rows and channels with a direct DFT, then fit
        // log P against log k on [4, n_lon / 4].
        std::vector<double> power(65, 0.0);
        for (int c = 0; c < 8; ++c)
            for (int i = 0; i < 64; ++i) {
                const auto *row = frame.data() + c * g.cells() + i * 128;
                const auto X = oracle::dft(std::vector<double>(row, row + 128));
                for (int k = 0; k <= 64; ++k) power[k] += std::norm(X[k]);
            }
        double sx = 0, sy = 0, sxx = 0, sxy = 0;
        int n = 0;
        for (int k = 4; k <= 32; ++k) {
            const double x = std::log(k), y = std::log(power[k]);
            sx += x, sy += y, sxx += x * x, sxy += x * y, ++n;
        }
        const double fitted = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        CHECK(std::abs(fitted + slope) < 0.3);
    }
}

TEST_CASE("toy dataset evolves by advect_step and carries static inputs") {
    const auto g = make_grid(8, 16);
    auto cfg = small_toy(6);
    cfg.omega0 = {0.0, 22.5, 0.0, 11.0};
    cfg.omega1 = {0.0, 0.0, 5.0, -3.0};
    cfg.nu = 0.0;
    const auto ds = generate_toy_dataset(cfg, g);
    const std::size_t plane = g.cells();
    // Channel 1 moves exactly one column per step.
    for (int t = 1; t < 6; ++t)
        for (int i = 0; i < 8; ++i)
            for (int j = 0; j < 16; ++j) {
                const float now = ds.frame(t)[plane + i * 16 + j];
                const float before = ds.frame(t - 1)[plane + i * 16 + (j + 15) % 16];
                CHECK(now == Approx(before).margin(1e-3));
            }
    // Channel 0 is steady.
    CHECK(std::equal(ds.frame(0).begin(), ds.frame(0).begin() + plane, ds.frame(5).begin()));
    // Static land-sea mask and orography are constant; cos_zenith follows the clock.
    const int lsm = ds.meta.schema.index_of("lsm"), zen = ds.meta.schema.index_of("cos_zenith");
    CHECK(std::equal(ds.frame(0).begin() + lsm * plane, ds.frame(0).begin() + (lsm + 1) * plane,
                     ds.frame(3).begin() + lsm * plane));
    const auto cz = cos_zenith(ds.meta.times[3], g);
    for (std::size_t k = 0; k < plane; ++k) CHECK(ds.frame(3)[zen * plane + k] == static_cast<float>(cz[k]));
}

TEST_CASE("toy config validation names the offending field") {
    auto c = small_toy();
    c.spectral_slope = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = small_toy();
    c.nu = 1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = small_toy();
    c.omega0 = {1.0};
    try {
        c.validate();
        FAIL("expected a config error");
    } catch (const ConfigError &e) {
        CHECK(e.field() == "omega0");
    }
}

TEST_CASE("norm stats match a brute-force two-pass oracle") {
    const auto g = make_grid(8, 16);
    auto cfg = small_toy(30);
    const auto ds = generate_toy_dataset(cfg, g);
    const auto st = compute_norm_stats(ds, ds.meta.train);
    const std::size_t plane = g.cells();
    const int ctot = ds.meta.schema.size();
    for (int c = 0; c < 4; ++c) {
        long double s = 0, sd = 0;
        std::size_t n = 0, nd = 0;
        for (std::size_t t = ds.meta.train.begin; t < ds.meta.train.end; ++t)
            for (std::size_t k = 0; k < plane; ++k) {
                s += ds.values[(t * ctot + c) * plane + k];
                ++n;
                if (t + 1 < ds.meta.train.end) {
                    sd += static_cast<long double>(ds.values[((t + 1) * ctot + c) * plane + k]) -
                          ds.values[(t * ctot + c) * plane + k];
                    ++nd;
                }
            }
        const long double mean = s / n, dmean = sd / nd;
        long double v = 0, dv = 0;
        for (std::size_t t = ds.meta.train.begin; t < ds.meta.train.end; ++t)
            for (std::size_t k = 0; k < plane; ++k) {
                const long double x = ds.values[(t * ctot + c) * plane + k];
                v += (x - mean) * (x - mean);
                if (t + 1 < ds.meta.train.end) {
                    const long double d = static_cast<long double>(ds.values[((t + 1) * ctot + c) * plane + k]) - x - dmean;
                    dv += d * d;
                }
            }
        CHECK(st.mean[c] == Approx(static_cast<double>(mean)).epsilon(1e-5));
        CHECK(st.std[c] == Approx(static_cast<double>(std::sqrt(v / n))).epsilon(1e-5));
        CHECK(st.diff_std[c] == Approx(static_cast<double>(std::sqrt(dv / nd))).epsilon(1e-5));
    }
}

TEST_CASE("norm stats reject constant and frozen channels") {
    const auto g = make_grid(4, 8);
    auto ds = generate_toy_dataset(small_toy(16), g);
    const std::size_t plane = g.cells();
    const int ctot = ds.meta.schema.size();

    auto constant = ds;
    for (std::size_t t = 0; t < constant.n_times(); ++t)
        std::fill_n(constant.values.begin() + (t * ctot + 2) * plane, plane, 5.0f);
    try {
        compute_norm_stats(constant, constant.meta.train);
        FAIL("expected a degenerate channel error");
    } catch (const DegenerateChannelError &e) {
        CHECK(e.channel() == constant.meta.schema.channels[2].label());
    }

    auto frozen = ds;
    for (std::size_t t = 1; t < frozen.n_times(); ++t)
        std::copy_n(frozen.values.begin(), frozen.frame_size(), frozen.values.begin() + t * frozen.frame_size());
    CHECK_THROWS_AS(compute_norm_stats(frozen, frozen.meta.train), DegenerateChannelError);
}

TEST_CASE("sample_sequence windows, normalization and bounds") {
    const auto g = make_grid(8, 16);
    auto ds = generate_toy_dataset(small_toy(40), g);
    ds.meta.stats = compute_norm_stats(ds, ds.meta.train);
    const auto &st = *ds.meta.stats;
    const std::size_t plane = g.cells();

    const auto one = sample_sequence(ds, ds.meta.train, 3, 1);
    CHECK(one.targets.size() == 1);
    CHECK(one.statics.size() == 2);
    CHECK(one.init_time == ds.meta.times[3]);
    for (std::size_t k = 0; k < plane; ++k) {
        CHECK(one.input[k] == Approx((ds.frame(3)[k] - st.mean[0]) / st.std[0]).margin(1e-5));
        CHECK(one.targets[0][plane + k] == Approx((ds.frame(4)[plane + k] - st.mean[1]) / st.std[1]).margin(1e-5));
    }

    const auto eight = sample_sequence(ds, ds.meta.train, 0, 8);
    CHECK(eight.targets.size() == 8);
    CHECK(eight.dt_seconds * 8 == 48 * 3600);
    // cos_zenith is recomputed for every target time.
    const auto cz = cos_zenith(ds.meta.times[5], g);
    const int zs = ds.meta.schema.index_of("cos_zenith") - ds.meta.schema.n_prognostic();
    for (std::size_t k = 0; k < plane; ++k) CHECK(eight.statics[5][zs * plane + k] == static_cast<float>(cz[k]));

    const auto last = ds.meta.train.size() - 2;
    CHECK_NOTHROW(sample_sequence(ds, ds.meta.train, last, 1));
    CHECK_THROWS_AS(sample_sequence(ds, ds.meta.train, last + 1, 1), BoundsError);
    CHECK_THROWS_AS(sample_sequence(ds, ds.meta.val, ds.meta.val.size(), 1), BoundsError);
    CHECK(sequence_count(ds.meta.train, 8) == ds.meta.train.size() - 8);
}

TEST_CASE("normalized train split has zero mean and unit variance") {
    const auto g = make_grid(8, 16);
    auto ds = generate_toy_dataset(small_toy(60), g);
    ds.meta.stats = compute_norm_stats(ds, ds.meta.train);
    const std::size_t plane = g.cells();
    std::vector<double> s(4, 0.0), ss(4, 0.0);
    std::vector<float> z(4 * plane);
    for (std::size_t t = ds.meta.train.begin; t < ds.meta.train.end; ++t) {
        normalize_prognostic(ds.frame(t), *ds.meta.stats, plane, z);
        for (int c = 0; c < 4; ++c)
            for (std::size_t k = 0; k < plane; ++k) {
                s[c] += z[c * plane + k];
                ss[c] += double(z[c * plane + k]) * z[c * plane + k];
            }
    }
    const double n = static_cast<double>(ds.meta.train.size() * plane);
    for (int c = 0; c < 4; ++c) {
        const double m = s[c] / n;
        CHECK(std::abs(m) < 1e-3);
        CHECK(std::abs(std::sqrt(ss[c] / n - m * m) - 1.0) < 1e-3);
    }
}

TEST_CASE("normalize and denormalize round trip") {
    NormStats st{{281.0, 54000.0}, {16.0, 900.0}, {1.0, 50.0}};
    std::vector<float> raw = {270.5f, 290.25f, 53100.0f, 55012.5f}, z(4), back(4);
    normalize_prognostic(raw, st, 2, z);
    denormalize_prognostic(z, st, 2, back);
    for (int k = 0; k < 4; ++k) CHECK(back[k] == Approx(raw[k]).epsilon(1e-6));
}

TEST_CASE("dataset save/load round trip is bit-exact") {
    const auto dir = oracle::scratch("dataset_rt");
    const auto g = make_grid(8, 16);
    auto ds = generate_toy_dataset(small_toy(30), g);
    ds.meta.stats = compute_norm_stats(ds, ds.meta.train);
    save_dataset(dir, ds, 7);
    CHECK(ds.meta.shards.size() == 5);
    const auto back = load_dataset(dir);
    CHECK(back.values == ds.values);
    CHECK(back.meta.times == ds.meta.times);
    CHECK(back.meta.schema == ds.meta.schema);
    CHECK(back.meta.train == ds.meta.train);
    CHECK(back.meta.val == ds.meta.val);
    CHECK(*back.meta.stats == *ds.meta.stats);
}

TEST_CASE("dataset loading reports corruption with distinct errors") {
    const auto g = make_grid(4, 8);
    auto ds = generate_toy_dataset(small_toy(16), g);

    SECTION("flipped byte") {
        const auto dir = oracle::scratch("dataset_flip");
        save_dataset(dir, ds, 8);
        std::fstream f(dir / "shard_0001.bin", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(17);
        char b;
        f.read(&b, 1);
        b ^= 0x40;
        f.seekp(17);
        f.write(&b, 1);
        f.close();
        CHECK_THROWS_AS(load_dataset(dir), ChecksumError);
    }
    SECTION("truncated shard") {
        const auto dir = oracle::scratch("dataset_trunc");
        save_dataset(dir, ds, 8);
        const auto p = dir / "shard_0000.bin";
        std::filesystem::resize_file(p, std::filesystem::file_size(p) - 100);
        CHECK_THROWS_AS(load_dataset(dir), TruncatedError);
    }
    SECTION("missing meta") {
        const auto dir = oracle::scratch("dataset_missing");
        CHECK_THROWS_AS(load_dataset(dir), NotFoundError);
    }
    SECTION("future format version") {
        const auto dir = oracle::scratch("dataset_version");
        save_dataset(dir, ds, 8);
        auto j = json::parse(read_text(dir / "meta.json"));
        j["format_version"] = 99;
        write_text(dir / "meta.json", j.dump());
        CHECK_THROWS_AS(load_dataset(dir), VersionMismatchError);
    }
}
