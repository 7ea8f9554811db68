// Copyright 2026 The aeriscast Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>
#include <numbers>

#include "aeriscast/grid.hpp"

using namespace aeriscast;
using Catch::Approx;

TEST_CASE("make_grid places cell centers away from the poles") {
    const auto g = make_grid(2, 4);
    CHECK(g.lat_centers == std::vector<double>{45.0, -45.0});
    CHECK(g.lon_centers == std::vector<double>{0.0, 90.0, 180.0, 270.0});

    CHECK(make_grid(4, 8).lat_centers.front() == 67.5);

    const auto full = make_grid(720, 1440);
    CHECK(full.dlat() == 0.25);
    CHECK(full.dlon() == 0.25);
    CHECK(std::abs(full.lat_centers.front()) < 90.0);
    CHECK(std::abs(full.lat_centers.back()) < 90.0);
}

TEST_CASE("make_grid geometry invariants") {
    for (int nlat : {2, 3, 7, 32, 181}) {
        const auto g = make_grid(nlat, 2 * nlat);
        for (int i = 1; i < nlat; ++i) CHECK(g.lat_centers[i] < g.lat_centers[i - 1]);
        for (int i = 0; i < nlat; ++i) CHECK(g.lat_centers[i] == Approx(-g.lat_centers[nlat - 1 - i]).margin(1e-12));
        const double step = 360.0 / g.n_lon;
        for (int j = 0; j < g.n_lon; ++j) CHECK(g.lon_centers[j] == Approx(j * step).margin(1e-12));
        CHECK(g.lon_centers.back() + step == Approx(360.0));
    }
}

TEST_CASE("make_grid rejects degenerate sizes") {
    CHECK_THROWS_AS(make_grid(0, 4), InvalidArgument);
    CHECK_THROWS_AS(make_grid(4, -1), InvalidArgument);
    CHECK_THROWS_AS(make_grid(1, 4), InvalidArgument);
}

TEST_CASE("latitude weights for hand-picked rows") {
    const std::vector<double> lat = {60.0, 0.0, -60.0};
    const auto w = latitude_weights(lat);
    REQUIRE(w.size() == 3);
    CHECK(w[0] == Approx(0.75).epsilon(1e-12));
    CHECK(w[1] == Approx(1.5).epsilon(1e-12));
    CHECK(w[2] == Approx(0.75).epsilon(1e-12));

    const std::vector<double> equator = {0.0};
    CHECK(latitude_weights(equator) == std::vector<double>{1.0});
}

TEST_CASE("latitude weights have mean one and are symmetric") {
    for (int nlat = 2; nlat <= 1024; nlat += (nlat < 40 ? 1 : 37)) {
        const auto g = make_grid(nlat, 4);
        const auto w = latitude_weights(g);
        double sum = 0.0;
        for (double v : w) sum += v;
        CHECK(std::abs(sum / nlat - 1.0) < 1e-12);
        for (int i = 0; i < nlat; ++i) CHECK(std::abs(w[i] - w[nlat - 1 - i]) < 1e-12);
    }
}

TEST_CASE("latitude weights on the 0.25 degree grid peak at the equator") {
    const auto g = make_grid(720, 1440);
    const auto w = latitude_weights(g);
    double sum = 0.0;
    std::size_t arg = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        sum += w[i];
        if (w[i] > w[arg]) arg = i;
    }
    CHECK(std::abs(sum / 720.0 - 1.0) < 1e-12);
    // Rows 359 and 360 straddle the equator at +-0.125 degrees.
    CHECK((arg == 359 || arg == 360));
    CHECK(std::abs(g.lat_centers[arg]) == 0.125);
}

TEST_CASE("cos_zenith reduces to cos(lat) at equinox noon and -cos(lat) at midnight") {
    const auto g = make_grid(18, 36);
    const auto noon = cos_zenith(0.0, 12.0, g);
    const auto midnight = cos_zenith(0.0, 0.0, g);
    for (int i = 0; i < g.n_lat; ++i) {
        const double c = std::cos(g.lat_centers[i] * std::numbers::pi / 180.0);
        CHECK(noon[static_cast<std::size_t>(i) * g.n_lon] == Approx(c).margin(1e-12));
        CHECK(midnight[static_cast<std::size_t>(i) * g.n_lon] == Approx(-c).margin(1e-12));
    }
}

TEST_CASE("cos_zenith matches the spherical formula at arbitrary times") {
    const auto g = make_grid(9, 20);
    const Timestamp t = from_civil(2021, 7, 4, 15, 30);
    const auto cz = cos_zenith(t, g);
    // Independent evaluation: fractional day of year and hour angle from scratch.
    const double day = 184.0 + 15.5 / 24.0; // 4 July is day 185, counted from zero here
    const double decl = -23.44 * std::numbers::pi / 180.0 * std::cos(2.0 * std::numbers::pi * (day + 10.0) / 365.25);
    CHECK(solar_declination(t) == Approx(decl).margin(1e-12));
    for (int i = 0; i < g.n_lat; ++i)
        for (int j = 0; j < g.n_lon; ++j) {
            const double phi = g.lat_centers[i] * std::numbers::pi / 180.0;
            const double h = (15.0 * (15.5 - 12.0) + g.lon_centers[j]) * std::numbers::pi / 180.0;
            const double ref = std::sin(phi) * std::sin(decl) + std::cos(phi) * std::cos(decl) * std::cos(h);
            CHECK(cz[static_cast<std::size_t>(i) * g.n_lon + j] == Approx(ref).margin(1e-12));
        }
}

TEST_CASE("cos_zenith stays in [-1, 1] and drifts slowly between days") {
    const auto g = make_grid(32, 64);
    for (int d = 0; d < 366; d += 5) {
        const Timestamp t = from_civil(2019, 1, 1) + d * 86400 + (d % 24) * 3600;
        const auto a = cos_zenith(t, g);
        const auto b = cos_zenith(t + 86400, g);
        double worst = 0.0;
        for (std::size_t k = 0; k < a.size(); ++k) {
            CHECK(a[k] <= 1.0);
            CHECK(a[k] >= -1.0);
            worst = std::max(worst, std::abs(a[k] - b[k]));
        }
        CHECK(worst < 0.05);
    }
}
