// Copyright 2026 The aeriscast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "aeriscast/common.hpp"

namespace aeriscast {

/// Cell-centered equiangular lat-lon grid. Latitudes run north to south and
/// never touch the poles; longitudes start at 0 and cover [0, 360) once.
struct GridSpec {
    int n_lat = 0;
    int n_lon = 0;
    std::vector<double> lat_centers; // degrees, strictly decreasing
    std::vector<double> lon_centers; // degrees

    std::size_t cells() const { return static_cast<std::size_t>(n_lat) * static_cast<std::size_t>(n_lon); }
    double dlat() const { return 180.0 / n_lat; }
    double dlon() const { return 360.0 / n_lon; }

    friend bool operator==(const GridSpec &a, const GridSpec &b) { return a.n_lat == b.n_lat && a.n_lon == b.n_lon; }
};

inline GridSpec make_grid(int n_lat, int n_lon) {
    if (n_lat < 2 || n_lon < 2)
        throw InvalidArgument("make_grid: need n_lat >= 2 and n_lon >= 2, got " + std::to_string(n_lat) + "x" +
                              std::to_string(n_lon));
    GridSpec g;
    g.n_lat = n_lat;
    g.n_lon = n_lon;
    const double dphi = 180.0 / n_lat;
    const double dlam = 360.0 / n_lon;
    g.lat_centers.resize(static_cast<std::size_t>(n_lat));
    g.lon_centers.resize(static_cast<std::size_t>(n_lon));
    for (int i = 0; i < n_lat; ++i) g.lat_centers[i] = 90.0 - dphi / 2.0 - i * dphi;
    for (int j = 0; j < n_lon; ++j) g.lon_centers[j] = j * dlam;
    return g;
}

inline double deg2rad(double d) { return d * std::numbers::pi / 180.0; }

/// cos(lat) weights rescaled to mean 1.
inline std::vector<double> latitude_weights(std::span<const double> lat_deg) {
    std::vector<double> w(lat_deg.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] = std::cos(deg2rad(lat_deg[i]));
        sum += w[i];
    }
    const double mean = sum / static_cast<double>(w.size());
    for (double &v : w) v /= mean;
    return w;
}

inline std::vector<double> latitude_weights(const GridSpec &grid) { return latitude_weights(grid.lat_centers); }

/// Solar declination in radians, delta = -23.44 deg * cos(2 pi (d + 10) / 365.25).
inline double solar_declination(Timestamp t) {
    const double d = day_of_year(t);
    return deg2rad(-23.44) * std::cos(2.0 * std::numbers::pi * (d + 10.0) / 365.25);
}

/// cos Z = sin(lat) sin(decl) + cos(lat) cos(decl) cos(h), h = 15 deg/hour * (utc - 12) + lon.
inline std::vector<double> cos_zenith(double declination_rad, double utc_hour, const GridSpec &grid) {
    std::vector<double> out(grid.cells());
    const double sd = std::sin(declination_rad);
    const double cd = std::cos(declination_rad);
    for (int i = 0; i < grid.n_lat; ++i) {
        const double phi = deg2rad(grid.lat_centers[i]);
        const double a = std::sin(phi) * sd;
        const double b = std::cos(phi) * cd;
        for (int j = 0; j < grid.n_lon; ++j) {
            const double h = deg2rad(15.0 * (utc_hour - 12.0) + grid.lon_centers[j]);
            out[static_cast<std::size_t>(i) * grid.n_lon + j] = std::clamp(a + b * std::cos(h), -1.0, 1.0);
        }
    }
    return out;
}

inline std::vector<double> cos_zenith(Timestamp t, const GridSpec &grid) {
    return cos_zenith(solar_declination(t), utc_hours(t), grid);
}

} // namespace aeriscast
