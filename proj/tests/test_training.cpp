// Copyright 2026 The aeriscast Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include "aeriscast/training.hpp"
#include "oracles.hpp"

using namespace aeriscast;
using Catch::Approx;

namespace {

struct Setup {
    Dataset ds;
    ModelConfig model;
    TrainConfig train;

    Setup() {
        ToyConfig t;
        t.n_prog_channels = 4;
        t.n_times = 48;
        t.n_train = 36;
        t.n_val = 8;
        ds = generate_toy_dataset(t, make_grid(8, 16));
        ds.meta.stats = compute_norm_stats(ds, ds.meta.train);
        model.embed_dim = 8;
        model.depth = 2;
        model.patch_size = 2;
        model.n_heads = 2;
        model.window_h = 2;
        model.window_w = 4;
        model.mlp_ratio = 2;
        model.in_channels = 7;
        model.out_channels = 4;
        train.learning_rate = 3e-3;
        train.batch_size = 4;
        train.epochs = 4;
        train.samples_per_epoch = 16;
        train.seed = 5;
    }
};

ParameterSet<double> one_tensor(std::vector<double> values) {
    ParameterSet<double> p({TensorInfo{"w", {static_cast<int>(values.size())}, 0, values.size()}});
    p.data.assign(values.begin(), values.end());
    return p;
}

} // namespace

TEST_CASE("Adam leaves parameters alone under a zero gradient") {
    auto p = one_tensor({1.0, -2.0, 3.0});
    const auto before = p.data;
    const auto g = one_tensor({0.0, 0.0, 0.0});
    OptimizerState<double> st(3);
    for (int i = 0; i < 5; ++i) adam_step(p, g, st, 0.1);
    CHECK(p.data == before);
    CHECK(st.step == 5);
}

TEST_CASE("the first Adam step moves each coordinate by lr against the gradient sign") {
    auto p = one_tensor({0.5, 0.5, 0.5, 0.5});
    const auto g = one_tensor({3.0, -0.01, 1e-3, -250.0});
    OptimizerState<double> st(4);
    adam_step(p, g, st, 0.01);
    CHECK(p.data[0] == Approx(0.49).margin(1e-7));
    CHECK(p.data[1] == Approx(0.51).margin(1e-7));
    CHECK(p.data[2] == Approx(0.49).margin(1e-7));
    CHECK(p.data[3] == Approx(0.51).margin(1e-7));
}

TEST_CASE("Adam matches a scalar reference over several steps") {
    auto p = one_tensor({0.3, -1.2});
    OptimizerState<double> st(2);
    double x[2] = {0.3, -1.2}, m[2] = {0, 0}, v[2] = {0, 0};
    for (int t = 1; t <= 6; ++t) {
        const double grad[2] = {std::sin(t * 1.3), 0.5 * t - 1.0};
        adam_step(p, one_tensor({grad[0], grad[1]}), st, 0.05);
        for (int i = 0; i < 2; ++i) {
            m[i] = 0.9 * m[i] + 0.1 * grad[i];
            v[i] = 0.999 * v[i] + 0.001 * grad[i] * grad[i];
            const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
            x[i] -= 0.05 * mh / (std::sqrt(vh) + 1e-8);
            CHECK(p.data[i] == Approx(x[i]).epsilon(1e-14));
        }
    }
}

TEST_CASE("Adam decreases a quadratic monotonically from far away") {
    auto p = one_tensor({1.0, -2.0, 0.75});
    OptimizerState<double> st(3);
    auto f = [&] {
        double s = 0;
        for (double x : p.data) s += x * x;
        return s;
    };
    double prev = f();
    for (int i = 0; i < 50; ++i) {
        auto g = one_tensor({2 * p.data[0], 2 * p.data[1], 2 * p.data[2]});
        adam_step(p, g, st, 0.01);
        const double now = f();
        CHECK(now < prev);
        prev = now;
    }
}

TEST_CASE("non-finite gradients are reported with the tensor name") {
    Setup s;
    auto p = init_parameters<float>(s.model, s.ds.meta.grid, 0);
    ParameterSet<float> g(p.index);
    g.tensor("blocks.1.mlp.fc1.bias")[3] = std::numeric_limits<float>::infinity();
    OptimizerState<float> st(p.size());
    try {
        adam_step(p, g, st, 1e-3);
        FAIL("expected NumericFailure");
    } catch (const NumericFailure &e) {
        CHECK(std::string(e.what()).find("blocks.1.mlp.fc1.bias") != std::string::npos);
    }
}

TEST_CASE("gradient clipping rescales to the global norm") {
    auto p = one_tensor({0.0, 0.0});
    OptimizerState<double> st(2);
    adam_step(p, one_tensor({30.0, 40.0}), st, 0.1, 5.0);
    CHECK(global_norm(one_tensor({30.0, 40.0})) == 50.0);
    CHECK(st.m[0] == Approx(0.1 * 3.0));
    CHECK(st.m[1] == Approx(0.1 * 4.0));
    OptimizerState<double> st2(2);
    adam_step(p, one_tensor({3.0, 4.0}), st2, 0.1, 32.0);
    CHECK(st2.m[0] == Approx(0.3));
}

TEST_CASE("learning-rate schedule: linear warmup then cosine decay") {
    TrainConfig tc;
    tc.learning_rate = 1.0;
    tc.warmup_fraction = 0.1;
    const std::int64_t total = 100;
    CHECK(learning_rate_at(tc, 0, total) == Approx(0.1));
    CHECK(learning_rate_at(tc, 4, total) == Approx(0.5));
    CHECK(learning_rate_at(tc, 9, total) == Approx(1.0));
    CHECK(learning_rate_at(tc, 10, total) == Approx(1.0));
    CHECK(learning_rate_at(tc, 55, total) == Approx(0.5));
    CHECK(learning_rate_at(tc, 100, total) == Approx(0.0).margin(1e-12));
    for (std::int64_t s = 10; s < 100; ++s) CHECK(learning_rate_at(tc, s + 1, total) <= learning_rate_at(tc, s, total));
    tc.schedule = "constant";
    CHECK(learning_rate_at(tc, 77, total) == 1.0);
}

TEST_CASE("a zero learning rate leaves the weights untouched") {
    Setup s;
    s.train.learning_rate = 0.0;
    s.train.epochs = 1;
    const auto init = init_parameters<float>(s.model, s.ds.meta.grid, 3);
    const auto ck = train(s.model, s.ds, s.train, 3);
    CHECK(ck.params.data == init.data);
    CHECK(ck.optimizer.step == batches_per_epoch(s.ds, s.train));
}

TEST_CASE("training lowers the loss and is deterministic") {
    Setup s;
    const auto a = train(s.model, s.ds, s.train, 7);
    const auto b = train(s.model, s.ds, s.train, 7);
    CHECK(a.params.data == b.params.data);
    CHECK(a.log == b.log);
    REQUIRE(a.log.size() == 4);
    CHECK(a.log.back().train_loss < a.log.front().train_loss);
    CHECK(a.best_val_loss <= a.log.front().val_loss);
    CHECK(inference_params(a).data == a.best_params.data);

    auto other = s.train;
    other.seed = 6;
    CHECK(train(s.model, s.ds, other, 7).params.data != a.params.data);
}

TEST_CASE("checkpoint save/load round trip") {
    Setup s;
    s.train.epochs = 2;
    const auto ck = train(s.model, s.ds, s.train, 9);
    const auto dir = oracle::scratch("ckpt_rt");
    save_checkpoint(dir, ck);
    const auto back = load_checkpoint(dir);
    CHECK(back.model == ck.model);
    CHECK(back.grid.n_lat == ck.grid.n_lat);
    CHECK(back.stats == ck.stats);
    CHECK(back.params.data == ck.params.data);
    CHECK(back.best_params.data == ck.best_params.data);
    CHECK(back.optimizer == ck.optimizer);
    CHECK(back.train == ck.train);
    CHECK(back.epoch == 2);
    CHECK(back.rng_seed == ck.rng_seed);
    CHECK(back.best_epoch == ck.best_epoch);
    CHECK(back.best_val_loss == ck.best_val_loss);
    CHECK(back.log == ck.log);

    const auto m = load_model(dir);
    CHECK(m.params.data == ck.params.data);
    CHECK(m.config == ck.model);
}

TEST_CASE("interrupted and resumed training equals uninterrupted training") {
    Setup s;
    const auto straight = train(s.model, s.ds, s.train, 11);

    TrainHooks stop;
    stop.stop_after = 2;
    const auto part = train(s.model, s.ds, s.train, 11, stop);
    REQUIRE(part.epoch == 2);
    const auto dir = oracle::scratch("ckpt_resume");
    save_checkpoint(dir, part);
    auto resumed = load_checkpoint(dir);
    run_training(resumed, s.ds);
    CHECK(resumed.epoch == 4);
    CHECK(resumed.params.data == straight.params.data);
    CHECK(resumed.optimizer == straight.optimizer);
    CHECK(resumed.log == straight.log);
    CHECK(resumed.best_params.data == straight.best_params.data);
}

TEST_CASE("damaged checkpoints fail loudly") {
    Setup s;
    s.train.epochs = 1;
    const auto ck = train(s.model, s.ds, s.train, 12);

    SECTION("truncated weights") {
        const auto dir = oracle::scratch("ckpt_trunc");
        save_checkpoint(dir, ck);
        std::filesystem::resize_file(dir / "weights.bin", std::filesystem::file_size(dir / "weights.bin") / 2);
        CHECK_THROWS_AS(load_checkpoint(dir), TruncatedError);
    }
    SECTION("flipped byte in the optimizer moments") {
        const auto dir = oracle::scratch("ckpt_flip");
        save_checkpoint(dir, ck);
        std::fstream f(dir / "optimizer.bin", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(40);
        f.put('\x7f');
        f.close();
        CHECK_THROWS_AS(load_checkpoint(dir), ChecksumError);
    }
    SECTION("missing directory") {
        CHECK_THROWS_AS(load_checkpoint(oracle::scratch("ckpt_none") / "nothing"), NotFoundError);
    }
}

TEST_CASE("fine-tuning starts from the parent's best weights with fresh moments") {
    Setup s;
    s.train.epochs = 2;
    const auto parent = train(s.model, s.ds, s.train, 13);
    auto tc = s.train;
    tc.epochs = 1;
    tc.learning_rate = 0.0;
    const auto child = fine_tune(parent, s.ds, 4, tc);
    CHECK(child.train.n_steps == 4);
    CHECK(child.params.data == inference_params(parent).data);
    CHECK(child.optimizer.step == batches_per_epoch(s.ds, child.train));
    CHECK(child.epoch == 1);

    tc.learning_rate = 1e-3;
    const auto moved = fine_tune(parent, s.ds, 2, tc);
    CHECK(moved.params.data != inference_params(parent).data);
    REQUIRE(moved.log.size() == 1);
    CHECK(std::isfinite(moved.log[0].val_loss));
}

TEST_CASE("finite differences are exact to round-off on a linear-quadratic function") {
    const std::vector<double> a = {0.3, -1.0, 2.5, 0.0, 7.0};
    auto f = [&](std::span<const double> x) {
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) s += a[i] * x[i] + 0.5 * (i + 1) * x[i] * x[i];
        return s;
    };
    const std::vector<double> x = {1.0, -0.5, 0.25, 3.0, -2.0};
    std::vector<double> grad(5);
    for (std::size_t i = 0; i < 5; ++i) grad[i] = a[i] + (i + 1) * x[i];
    const std::vector<std::size_t> coords = {0, 1, 2, 3, 4};
    CHECK(finite_difference_max_error(f, x, grad, coords, 1e-4) < 1e-8);
}

TEST_CASE("analytic gradients agree with finite differences") {
    const auto one = gradient_check(0, 1, 40);
    CHECK(one.coordinates > 0);
    for (const auto &t : one.tensors) {
        INFO(t.name);
        CHECK(t.max_rel_error < 2e-3);
    }
    const auto two = gradient_check(1, 2, 20);
    CHECK(two.max_rel_error < 5e-3);
    const auto direct = gradient_check(2, 2, 20, 1e-4, PredictionMode::direct);
    CHECK(direct.max_rel_error < 5e-3);
}
