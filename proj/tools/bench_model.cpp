// Copyright 2026 The aeriscast Authors
// SPDX-License-Identifier: Apache-2.0
//
// Times one forward/backward pass of the toy-benchmark model.

#include <chrono>
#include <cstdio>

#include "aeriscast/model.hpp"

int main(int argc, char **argv) {
    using namespace aeriscast;
    const int batch = argc > 1 ? std::atoi(argv[1]) : 16;
    const auto grid = make_grid(32, 64);
    ModelConfig cfg;
    cfg.in_channels = 11;
    cfg.out_channels = 8;
    SwinForecaster<float> model(cfg, grid);
    auto ps = init_parameters<float>(cfg, grid, 1);
    for (auto &v : ps.tensor("head.weight")) v = 0.01f;
    ParameterSet<float> g(ps.index);
    std::vector<float> x(model.in_size() * batch), y(model.out_size() * batch), dy(model.out_size() * batch, 1e-3f);
    Rng rng(3);
    for (auto &v : x) v = static_cast<float>(rng.normal());
    SwinForecaster<float>::Cache cache;
    const int reps = 5;
    auto t0 = std::chrono::steady_clock::now();
    for (int r = 0; r < reps; ++r) model.forward(ps, x, batch, y, &cache, {true, 7});
    auto t1 = std::chrono::steady_clock::now();
    for (int r = 0; r < reps; ++r) model.backward(ps, cache, dy, g);
    auto t2 = std::chrono::steady_clock::now();
    const double f = std::chrono::duration<double>(t1 - t0).count() / reps / batch;
    const double b = std::chrono::duration<double>(t2 - t1).count() / reps / batch;
    std::printf("params %zu  per-sample forward %.2f ms  backward %.2f ms\n", ps.size(), f * 1e3, b * 1e3);
}
