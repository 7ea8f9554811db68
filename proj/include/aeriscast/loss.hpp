// Copyright 2026 The aeriscast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "aeriscast/data.hpp"
#include "aeriscast/grid.hpp"
#include "aeriscast/model.hpp"

namespace aeriscast {

/// Per-channel and per-row loss weights. Both vectors have mean 1 when the
/// corresponding weighting is on and are identically 1 when it is off.
struct LossWeights {
    std::vector<double> channel;
    std::vector<double> lat;
    bool channel_weighting = false;
    bool lat_weighting = false;

    void validate(int channels, int n_lat) const {
        if (static_cast<int>(channel.size()) != channels || static_cast<int>(lat.size()) != n_lat)
            throw InvalidArgument("loss weights do not match tensor shape");
        for (double w : channel)
            if (!(w >= 0.0) || !std::isfinite(w)) throw InvalidArgument("channel weights must be finite and >= 0");
        for (double w : lat)
            if (!(w >= 0.0) || !std::isfinite(w)) throw InvalidArgument("latitude weights must be finite and >= 0");
    }

    LossWeights scaled(double lambda) const {
        LossWeights w = *this;
        for (double &v : w.channel) v *= lambda;
        return w;
    }
};

using SurfaceEmphasis = std::map<std::string, double>;

inline constexpr double kDefaultSurfaceEmphasis = 0.1;
inline constexpr double kT2mEmphasis = 1.0;

/// Pressure-level and surface weights before the global mean-1 rescale:
/// levels of one variable are proportional to pressure and sum to 1; surface
/// channels take `emphasis[label]`, else 1.0 for t2m and 0.1 otherwise.
inline std::vector<double> raw_channel_weights(const ChannelSchema &schema, const SurfaceEmphasis &emphasis = {}) {
    const int cp = schema.n_prognostic();
    for (const auto &[label, w] : emphasis) {
        const int idx = schema.index_of(label);
        if (idx < 0 || idx >= cp)
            throw InvalidArgument("surface emphasis names unknown prognostic channel '" + label + "'");
        if (schema.channels[idx].level_hPa)
            throw InvalidArgument("surface emphasis given for level channel '" + label + "'");
        if (!(w >= 0.0)) throw InvalidArgument("surface emphasis for '" + label + "' must be >= 0");
    }
    std::map<std::string, double> level_sum;
    for (int c = 0; c < cp; ++c)
        if (const auto &ch = schema.channels[c]; ch.level_hPa) level_sum[ch.name] += *ch.level_hPa;
    std::vector<double> w(cp);
    for (int c = 0; c < cp; ++c) {
        const auto &ch = schema.channels[c];
        if (ch.level_hPa) {
            w[c] = *ch.level_hPa / level_sum[ch.name];
        } else if (auto it = emphasis.find(ch.label()); it != emphasis.end()) {
            w[c] = it->second;
        } else {
            w[c] = ch.name == "t2m" ? kT2mEmphasis : kDefaultSurfaceEmphasis;
        }
    }
    return w;
}

/// Channel weights rescaled to mean 1, or all ones when disabled. The
/// temporal-difference std does not appear here: it enters through the
/// residual target normalization.
inline std::vector<double> channel_weights(const ChannelSchema &schema, const NormStats &stats,
                                           const SurfaceEmphasis &emphasis = {}, bool enabled = true) {
    stats.validate(schema);
    const int cp = schema.n_prognostic();
    if (!enabled) {
        if (!emphasis.empty()) raw_channel_weights(schema, emphasis); // still reject unknown names
        return std::vector<double>(cp, 1.0);
    }
    auto w = raw_channel_weights(schema, emphasis);
    double sum = 0.0;
    for (double v : w) sum += v;
    if (!(sum > 0.0)) throw InvalidArgument("channel weights sum to zero");
    const double mean = sum / cp;
    for (double &v : w) v /= mean;
    return w;
}

inline LossWeights make_loss_weights(const ChannelSchema &schema, const NormStats &stats, const GridSpec &grid,
                                     bool channel_weighting, bool lat_weighting, const SurfaceEmphasis &emphasis = {}) {
    LossWeights w;
    w.channel_weighting = channel_weighting;
    w.lat_weighting = lat_weighting;
    w.channel = channel_weights(schema, stats, emphasis, channel_weighting);
    w.lat = lat_weighting ? latitude_weights(grid) : std::vector<double>(grid.n_lat, 1.0);
    return w;
}

// ---------------------------------------------------------------------------
// Targets

/// Target from normalized states z_t, z_{t+dt} ([C_p x H x W]):
///   direct   -> z_{t+dt}
///   residual -> (z_{t+dt} - z_t) / (sigma_dX / sigma), i.e. (X_{t+dt} - X_t) / sigma_dX.
template <class S>
void prediction_target(std::span<const S> z_t, std::span<const S> z_next, PredictionMode mode, const NormStats &stats,
                       std::span<S> out) {
    if (z_t.size() != z_next.size() || out.size() != z_t.size())
        throw InvalidArgument("prediction_target: shape mismatch");
    const std::size_t cp = static_cast<std::size_t>(stats.size());
    if (cp == 0 || z_t.size() % cp) throw InvalidArgument("prediction_target: stats do not match channel count");
    const std::size_t plane = z_t.size() / cp;
    for (std::size_t c = 0; c < cp; ++c) {
        const S r = static_cast<S>(stats.residual_scale(static_cast<int>(c)));
        for (std::size_t k = c * plane; k < (c + 1) * plane; ++k)
            out[k] = mode == PredictionMode::direct ? z_next[k] : (z_next[k] - z_t[k]) / r;
    }
}

/// Same target from raw-unit states ([C_p x H x W], field units).
inline std::vector<double> prediction_target_raw(std::span<const float> x_t, std::span<const float> x_next,
                                                 PredictionMode mode, const NormStats &stats) {
    if (x_t.size() != x_next.size()) throw InvalidArgument("prediction_target: shape mismatch");
    const std::size_t cp = static_cast<std::size_t>(stats.size());
    if (cp == 0 || x_t.size() % cp) throw InvalidArgument("prediction_target: stats do not match channel count");
    const std::size_t plane = x_t.size() / cp;
    std::vector<double> out(x_t.size());
    for (std::size_t c = 0; c < cp; ++c)
        for (std::size_t k = c * plane; k < (c + 1) * plane; ++k)
            out[k] = mode == PredictionMode::direct
                         ? (x_next[k] - stats.mean[c]) / stats.std[c]
                         : (static_cast<double>(x_next[k]) - x_t[k]) / stats.diff_std[c];
    return out;
}

// ---------------------------------------------------------------------------
// Weighted MSE

/// mean over (c, i, j) of w_c * w_lat(i) * (pred - target)^2 for one
/// [C x H x W] sample, accumulated in float64 in c, i, j order.
template <class S>
double weighted_mse(std::span<const S> pred, std::span<const S> target, const LossWeights &w, int n_lon) {
    if (pred.size() != target.size()) throw InvalidArgument("weighted_mse: shape mismatch");
    const int C = static_cast<int>(w.channel.size());
    const int H = static_cast<int>(w.lat.size());
    if (static_cast<std::size_t>(C) * H * n_lon != pred.size())
        throw InvalidArgument("weighted_mse: weights do not match [C x H x W]");
    double acc = 0.0;
    std::size_t k = 0;
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < H; ++i) {
            const double wci = w.channel[c] * w.lat[i];
            double row = 0.0;
            for (int j = 0; j < n_lon; ++j, ++k) {
                const double d = static_cast<double>(pred[k]) - static_cast<double>(target[k]);
                row += d * d;
            }
            acc += wci * row;
        }
    return acc / static_cast<double>(pred.size());
}

/// Adds scale * d(weighted_mse)/d(pred) into grad.
template <class S>
void weighted_mse_grad(std::span<const S> pred, std::span<const S> target, const LossWeights &w, int n_lon,
                       double scale, std::span<S> grad) {
    const int C = static_cast<int>(w.channel.size());
    const int H = static_cast<int>(w.lat.size());
    const double f = 2.0 * scale / static_cast<double>(pred.size());
    std::size_t k = 0;
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < H; ++i) {
            const double wci = f * w.channel[c] * w.lat[i];
            for (int j = 0; j < n_lon; ++j, ++k)
                grad[k] += static_cast<S>(wci * (static_cast<double>(pred[k]) - static_cast<double>(target[k])));
        }
}

// ---------------------------------------------------------------------------
// Multi-step objective

struct UnrollOptions {
    bool training = false;
    std::uint64_t rng_seed = 0;
    bool detach_steps = false;          // stop gradients between steps
    bool recompute_activations = false; // keep only step inputs, re-run forwards in backward
};

struct UnrollResult {
    double loss = 0.0;
    std::vector<double> step_losses;
    std::size_t peak_activation_bytes = 0;
};

template <class S>
std::size_t cache_bytes(const typename SwinForecaster<S>::Cache &c) {
    auto m = [](const RMat<S> &x) { return static_cast<std::size_t>(x.size()) * sizeof(S); };
    std::size_t n = m(c.patches) + m(c.xhat0) + m(c.z_out) + c.rstd0.size() * sizeof(S);
    for (const auto &b : c.blocks) {
        n += m(b.x_in) + m(b.qkv) + m(b.qhat) + m(b.khat) + m(b.attn) + m(b.a) + m(b.xhat1) + m(b.x1) + m(b.u) +
             m(b.h) + m(b.m) + m(b.xhat2);
        n += (b.qn.size() + b.kn.size() + b.rstd1.size() + b.rstd2.size()) * sizeof(S);
        for (const auto &p : b.probs) n += m(p);
    }
    return n;
}

/// Autoregressive n-step loss over a batch of sequences. Each step feeds the
/// model its own reconstructed state plus that step's static inputs; the loss
/// is the equal-weight mean over steps of the batch-mean weighted MSE against
/// prediction_target(previous state, truth). With `grads`, backpropagates
/// through the whole unrolled chain and accumulates into it.
template <class S>
UnrollResult multi_step_loss(const SwinForecaster<S> &model, const ParameterSet<S> &ps,
                             std::span<const Sequence *const> batch, int n_steps, const LossWeights &weights,
                             const NormStats &stats, ParameterSet<S> *grads = nullptr, const UnrollOptions &opt = {}) {
    if (n_steps < 1) throw InvalidArgument("multi_step_loss: n_steps must be >= 1");
    if (batch.empty()) throw InvalidArgument("multi_step_loss: empty batch");
    const auto &cfg = model.config();
    const int B = static_cast<int>(batch.size());
    const int cp = cfg.out_channels;
    const int cs = cfg.in_channels - cp;
    const std::size_t out_n = model.out_size();
    const std::size_t in_n = model.in_size();
    const std::size_t plane = out_n / cp;
    const int n_lon = static_cast<int>(plane / weights.lat.size());
    if (stats.size() != cp) throw InvalidArgument("multi_step_loss: stats do not match model output channels");
    weights.validate(cp, static_cast<int>(weights.lat.size()));
    for (const Sequence *s : batch)
        if (s->n_steps < n_steps || s->input.size() != out_n) throw InvalidArgument("multi_step_loss: sequence too short or wrong shape");

    std::vector<S> r(cp);
    for (int c = 0; c < cp; ++c) r[c] = static_cast<S>(stats.residual_scale(c));
    const bool residual = cfg.prediction_mode == PredictionMode::residual;

    // Per-step buffers: model inputs, outputs and targets, all [B x ...].
    std::vector<std::vector<S>> inputs(n_steps), outputs(n_steps), targets(n_steps);
    std::vector<typename SwinForecaster<S>::Cache> caches(opt.recompute_activations ? 1 : n_steps);
    std::vector<S> state(static_cast<std::size_t>(B) * out_n);
    for (int b = 0; b < B; ++b)
        std::copy(batch[b]->input.begin(), batch[b]->input.end(), state.begin() + b * out_n);

    UnrollResult res;
    auto step_opts = [&](int k) { return ForwardOptions{opt.training, derive_seed(opt.rng_seed, 0x57e9, k)}; };
    auto build_input = [&](int k) {
        auto &x = inputs[k];
        x.resize(static_cast<std::size_t>(B) * in_n);
        for (int b = 0; b < B; ++b) {
            std::copy_n(state.begin() + b * out_n, out_n, x.begin() + b * in_n);
            const auto &st = batch[b]->statics[k];
            std::copy(st.begin(), st.end(), x.begin() + b * in_n + out_n);
        }
    };
    std::size_t held = 0;
    for (int k = 0; k < n_steps; ++k) {
        build_input(k);
        outputs[k].assign(static_cast<std::size_t>(B) * out_n, S(0));
        auto &cache = caches[opt.recompute_activations ? 0 : k];
        try {
            model.forward(ps, inputs[k], B, outputs[k], grads ? &cache : nullptr, step_opts(k));
        } catch (const NumericFailure &e) {
            throw NumericFailure("step " + std::to_string(k) + ": " + e.what(), k);
        }
        if (grads) {
            const std::size_t bytes = cache_bytes<S>(cache);
            held = opt.recompute_activations ? bytes : held + bytes;
            res.peak_activation_bytes = std::max(res.peak_activation_bytes, held);
        }
        targets[k].resize(static_cast<std::size_t>(B) * out_n);
        double step = 0.0;
        for (int b = 0; b < B; ++b) {
            std::vector<S> truth(batch[b]->targets[k].begin(), batch[b]->targets[k].end());
            const std::span<const S> prev(state.data() + b * out_n, out_n);
            const std::span<S> tgt(targets[k].data() + b * out_n, out_n);
            prediction_target<S>(prev, truth, cfg.prediction_mode, stats, tgt);
            step += weighted_mse<S>(std::span<const S>(outputs[k].data() + b * out_n, out_n), tgt, weights, n_lon);
        }
        step /= B;
        if (!std::isfinite(step)) throw NumericFailure("non-finite loss at step " + std::to_string(k), k);
        res.step_losses.push_back(step);
        // advance the state
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < cp; ++c)
                for (std::size_t q = 0; q < plane; ++q) {
                    const std::size_t i = b * out_n + c * plane + q;
                    state[i] = residual ? state[i] + r[c] * outputs[k][i] : outputs[k][i];
                }
    }
    for (double l : res.step_losses) res.loss += l;
    res.loss /= n_steps;
    if (!grads) return res;

    // Reverse sweep. g holds d(loss)/d(state after step k).
    const double scale = 1.0 / (static_cast<double>(n_steps) * B);
    std::vector<S> g(static_cast<std::size_t>(B) * out_n, S(0)), dout(g.size()), dx(static_cast<std::size_t>(B) * in_n);
    for (int k = n_steps - 1; k >= 0; --k) {
        std::fill(dout.begin(), dout.end(), S(0));
        for (int b = 0; b < B; ++b)
            weighted_mse_grad<S>(std::span<const S>(outputs[k].data() + b * out_n, out_n),
                                 std::span<const S>(targets[k].data() + b * out_n, out_n), weights, n_lon, scale,
                                 std::span<S>(dout.data() + b * out_n, out_n));
        // g_prev collects everything that flows into the input state of step k.
        std::vector<S> g_prev(g.size(), S(0));
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < cp; ++c)
                for (std::size_t q = 0; q < plane; ++q) {
                    const std::size_t i = b * out_n + c * plane + q;
                    const S dl = dout[i]; // loss_k gradient w.r.t. output, before chain terms
                    if (residual) {
                        dout[i] += r[c] * g[i];
                        g_prev[i] = g[i] + dl / r[c]; // via state_k = state_{k-1} + r o_k and the target
                    } else {
                        dout[i] += g[i];
                    }
                }
        auto *cache = &caches[opt.recompute_activations ? 0 : k];
        if (opt.recompute_activations) {
            std::vector<S> tmp(static_cast<std::size_t>(B) * out_n);
            model.forward(ps, inputs[k], B, tmp, cache, step_opts(k));
        }
        const bool need_dx = k > 0 && !opt.detach_steps;
        model.backward(ps, *cache, dout, *grads, need_dx ? std::span<S>(dx) : std::span<S>());
        if (!opt.recompute_activations) caches[k] = {};
        if (opt.detach_steps || k == 0) {
            std::fill(g.begin(), g.end(), S(0));
            continue;
        }
        for (int b = 0; b < B; ++b)
            for (std::size_t i = 0; i < out_n; ++i) g_prev[b * out_n + i] += dx[b * in_n + i];
        g = std::move(g_prev);
    }
    return res;
}

} // namespace aeriscast
