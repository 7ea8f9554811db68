// Copyright 2026 The aeriscast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>
#include <json.hpp>

#include "aeriscast/common.hpp"
#include "aeriscast/grid.hpp"

namespace aeriscast {

using json = nlohmann::json;

enum class PredictionMode { direct, residual };

inline std::string to_string(PredictionMode m) { return m == PredictionMode::direct ? "direct" : "residual"; }
inline PredictionMode prediction_mode_from_string(const std::string &s) {
    if (s == "direct") return PredictionMode::direct;
    if (s == "residual") return PredictionMode::residual;
    throw InvalidArgument("unknown prediction mode '" + s + "'");
}

/// Architecture hyperparameters. Window sizes are in token units.
struct ModelConfig {
    int embed_dim = 96;
    int depth = 4;
    int patch_size = 4;
    int n_heads = 4;
    int window_h = 4;
    int window_w = 8;
    double drop_path_rate = 0.1;
    int mlp_ratio = 4;
    PredictionMode prediction_mode = PredictionMode::residual;
    int in_channels = 11;
    int out_channels = 8;

    int head_dim() const { return embed_dim / n_heads; }
    int shift_h() const { return window_h / 2; }
    int shift_w() const { return window_w / 2; }

    void validate() const {
        if (embed_dim < 1) throw ConfigError("model.embed_dim", "must be >= 1");
        if (depth < 1) throw ConfigError("model.depth", "must be >= 1");
        if (patch_size < 1) throw ConfigError("model.patch_size", "must be >= 1");
        if (n_heads < 1 || embed_dim % n_heads != 0) throw ConfigError("model.n_heads", "must divide embed_dim");
        if (window_h < 1 || window_w < 1) throw ConfigError("model.window", "must be positive");
        if (!(drop_path_rate >= 0.0 && drop_path_rate < 1.0)) throw ConfigError("model.drop_path_rate", "must lie in [0, 1)");
        if (mlp_ratio < 1) throw ConfigError("model.mlp_ratio", "must be >= 1");
        if (out_channels < 1 || in_channels < out_channels)
            throw ConfigError("model.in_channels", "must be >= out_channels >= 1");
    }

    /// Checks divisibility against a grid. Throws InvalidArgument.
    void check_grid(const GridSpec &g) const {
        if (g.n_lat % patch_size || g.n_lon % patch_size)
            throw InvalidArgument("grid " + std::to_string(g.n_lat) + "x" + std::to_string(g.n_lon) +
                                  " not divisible by patch size " + std::to_string(patch_size));
        const int th = g.n_lat / patch_size, tw = g.n_lon / patch_size;
        if (th % window_h || tw % window_w)
            throw InvalidArgument("token grid " + std::to_string(th) + "x" + std::to_string(tw) +
                                  " not divisible by window " + std::to_string(window_h) + "x" +
                                  std::to_string(window_w));
    }

    /// Reference configuration of the full-resolution model.
    static ModelConfig baseline(int in_channels, int out_channels) {
        ModelConfig c;
        c.embed_dim = 768;
        c.depth = 12;
        c.patch_size = 4;
        c.n_heads = 8;
        c.window_h = 9;
        c.window_w = 18;
        c.drop_path_rate = 0.1;
        c.in_channels = in_channels;
        c.out_channels = out_channels;
        return c;
    }

    friend bool operator==(const ModelConfig &, const ModelConfig &) = default;
};

inline void to_json(json &j, const ModelConfig &c) {
    j = {{"embed_dim", c.embed_dim},   {"depth", c.depth},
         {"patch_size", c.patch_size}, {"n_heads", c.n_heads},
         {"window", {c.window_h, c.window_w}}, {"drop_path_rate", c.drop_path_rate},
         {"mlp_ratio", c.mlp_ratio},   {"prediction_mode", to_string(c.prediction_mode)},
         {"in_channels", c.in_channels}, {"out_channels", c.out_channels}};
}

inline void from_json(const json &j, ModelConfig &c) {
    c.embed_dim = j.at("embed_dim").get<int>();
    c.depth = j.at("depth").get<int>();
    c.patch_size = j.at("patch_size").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.window_h = j.at("window").at(0).get<int>();
    c.window_w = j.at("window").at(1).get<int>();
    c.drop_path_rate = j.at("drop_path_rate").get<double>();
    c.mlp_ratio = j.at("mlp_ratio").get<int>();
    c.prediction_mode = prediction_mode_from_string(j.at("prediction_mode").get<std::string>());
    c.in_channels = j.at("in_channels").get<int>();
    c.out_channels = j.at("out_channels").get<int>();
}

// ---------------------------------------------------------------------------
// Parameters

struct TensorInfo {
    std::string name;
    std::vector<int> shape;
    std::size_t offset = 0;
    std::size_t size = 0;
};

/// Tensor names, shapes and offsets for a config on a grid, in storage order.
inline std::vector<TensorInfo> parameter_layout(const ModelConfig &cfg, const GridSpec &grid) {
    cfg.validate();
    cfg.check_grid(grid);
    const int D = cfg.embed_dim, p = cfg.patch_size;
    const int T = (grid.n_lat / p) * (grid.n_lon / p);
    const int P = p * p * cfg.in_channels;
    const int Hd = cfg.mlp_ratio * D;
    std::vector<TensorInfo> out;
    std::size_t off = 0;
    auto add = [&](std::string name, std::vector<int> shape) {
        std::size_t n = 1;
        for (int s : shape) n *= static_cast<std::size_t>(s);
        out.push_back({std::move(name), std::move(shape), off, n});
        off += n;
    };
    add("patch_embed.proj.weight", {P, D});
    add("patch_embed.proj.bias", {D});
    add("patch_embed.norm.weight", {D});
    add("patch_embed.norm.bias", {D});
    add("pos_embed", {T, D});
    for (int b = 0; b < cfg.depth; ++b) {
        const std::string pre = "blocks." + std::to_string(b) + ".";
        add(pre + "attn.qkv.weight", {D, 3 * D});
        add(pre + "attn.qkv.bias", {3 * D});
        add(pre + "attn.logit_scale", {cfg.n_heads});
        add(pre + "attn.proj.weight", {D, D});
        add(pre + "attn.proj.bias", {D});
        add(pre + "norm1.weight", {D});
        add(pre + "norm1.bias", {D});
        add(pre + "mlp.fc1.weight", {D, Hd});
        add(pre + "mlp.fc1.bias", {Hd});
        add(pre + "mlp.fc2.weight", {Hd, D});
        add(pre + "mlp.fc2.bias", {D});
        add(pre + "norm2.weight", {D});
        add(pre + "norm2.bias", {D});
    }
    const int out_dim = p * p * cfg.out_channels;
    add("head.weight", {D, out_dim});
    add("head.bias", {out_dim});
    return out;
}

/// Named learnable tensors stored contiguously in layout order.
/// Storage aligned to the widest SIMD packet, so Eigen takes the same
/// vectorized path (and rounds the same way) wherever the buffer lands.
template <class S>
using AlignedVector = std::vector<S, Eigen::aligned_allocator<S>>;

template <class S>
struct ParameterSet {
    std::vector<TensorInfo> index;
    AlignedVector<S> data;

    ParameterSet() = default;
    explicit ParameterSet(std::vector<TensorInfo> layout) : index(std::move(layout)) {
        std::size_t n = 0;
        for (const auto &t : index) n = std::max(n, t.offset + t.size);
        data.assign(n, S(0));
    }

    std::size_t size() const { return data.size(); }

    const TensorInfo &info(const std::string &name) const {
        for (const auto &t : index)
            if (t.name == name) return t;
        throw InvalidArgument("no parameter tensor named '" + name + "'");
    }
    std::span<S> tensor(const std::string &name) {
        const auto &t = info(name);
        return {data.data() + t.offset, t.size};
    }
    std::span<const S> tensor(const std::string &name) const {
        const auto &t = info(name);
        return {data.data() + t.offset, t.size};
    }
    std::span<S> tensor(const TensorInfo &t) { return {data.data() + t.offset, t.size}; }
    std::span<const S> tensor(const TensorInfo &t) const { return {data.data() + t.offset, t.size}; }

    void zero() { std::fill(data.begin(), data.end(), S(0)); }

    template <class T>
    ParameterSet<T> cast() const {
        ParameterSet<T> out;
        out.index = index;
        out.data.assign(data.begin(), data.end());
        return out;
    }

    friend bool operator==(const ParameterSet &a, const ParameterSet &b) { return a.data == b.data; }
};

/// Truncated-normal (std 0.02) linear weights, zero biases, unit norm gains,
/// zero position embedding, zero logit-scale parameters and a zero head.
template <class S = float>
ParameterSet<S> init_parameters(const ModelConfig &cfg, const GridSpec &grid, std::uint64_t seed) {
    ParameterSet<S> ps(parameter_layout(cfg, grid));
    Rng rng(derive_seed(seed, 0x1a17));
    for (const auto &t : ps.index) {
        auto v = ps.tensor(t);
        const bool is_weight = t.name.ends_with(".weight");
        const bool is_norm = t.name.find("norm") != std::string::npos;
        if (t.name.starts_with("head.")) continue;
        if (is_weight && is_norm)
            std::fill(v.begin(), v.end(), S(1));
        else if (is_weight)
            for (auto &x : v) x = static_cast<S>(rng.truncated_normal(0.02));
    }
    return ps;
}

/// Total learnable scalars, computed from the architecture formulas.
inline std::size_t parameter_count(const ModelConfig &c, const GridSpec &g) {
    const std::size_t D = c.embed_dim, p = c.patch_size, H = c.n_heads, r = c.mlp_ratio;
    const std::size_t T = (g.n_lat / p) * (g.n_lon / p);
    const std::size_t embed = p * p * c.in_channels * D + 3 * D + T * D;
    const std::size_t block = (3 * D * D + 3 * D) + H + (D * D + D) + 2 * D + (D * r * D + r * D) + (r * D * D + D) + 2 * D;
    const std::size_t head = D * p * p * c.out_channels + p * p * c.out_channels;
    return embed + c.depth * block + head;
}

// ---------------------------------------------------------------------------
// Token grids and windows

/// [T_h x T_w x D] latent features, row-major.
template <class S>
struct TokenGrid {
    int th = 0, tw = 0, dim = 0;
    std::vector<S> data;

    TokenGrid() = default;
    TokenGrid(int h, int w, int d) : th(h), tw(w), dim(d), data(static_cast<std::size_t>(h) * w * d, S(0)) {}
    S *token(int i, int j) { return data.data() + (static_cast<std::size_t>(i) * tw + j) * dim; }
    const S *token(int i, int j) const { return data.data() + (static_cast<std::size_t>(i) * tw + j) * dim; }
    friend bool operator==(const TokenGrid &, const TokenGrid &) = default;
};

/// For each window slot (window-major, row-major within a window) the index
/// of the source token in the unrolled grid, after rolling the grid by
/// (-shift_h, -shift_w).
inline std::vector<int> window_token_index(int th, int tw, int wh, int ww, int sh, int sw) {
    if (wh < 1 || ww < 1 || th % wh || tw % ww)
        throw InvalidArgument("token grid " + std::to_string(th) + "x" + std::to_string(tw) +
                              " not divisible by window " + std::to_string(wh) + "x" + std::to_string(ww));
    if (sh < 0 || sh >= wh || sw < 0 || sw >= ww) throw InvalidArgument("shift must lie in [0, window)");
    std::vector<int> idx;
    idx.reserve(static_cast<std::size_t>(th) * tw);
    for (int wi = 0; wi < th / wh; ++wi)
        for (int wj = 0; wj < tw / ww; ++wj)
            for (int a = 0; a < wh; ++a)
                for (int b = 0; b < ww; ++b) {
                    const int r = (wi * wh + a + sh) % th;
                    const int c = (wj * ww + b + sw) % tw;
                    idx.push_back(r * tw + c);
                }
    return idx;
}

template <class S>
struct WindowPartition {
    int n_windows = 0;
    int window_tokens = 0;
    int dim = 0;
    int th = 0, tw = 0;
    std::vector<S> windows;   // [n_windows x window_tokens x dim]
    std::vector<int> source;  // token index for each window slot
};

template <class S>
WindowPartition<S> window_partition(const TokenGrid<S> &g, int wh, int ww, int sh, int sw) {
    WindowPartition<S> p;
    p.source = window_token_index(g.th, g.tw, wh, ww, sh, sw);
    p.window_tokens = wh * ww;
    p.n_windows = (g.th / wh) * (g.tw / ww);
    p.dim = g.dim;
    p.th = g.th;
    p.tw = g.tw;
    p.windows.resize(g.data.size());
    for (std::size_t s = 0; s < p.source.size(); ++s)
        std::copy_n(g.data.data() + static_cast<std::size_t>(p.source[s]) * g.dim, g.dim,
                    p.windows.data() + s * g.dim);
    return p;
}

template <class S>
TokenGrid<S> window_reverse(const WindowPartition<S> &p) {
    TokenGrid<S> g(p.th, p.tw, p.dim);
    for (std::size_t s = 0; s < p.source.size(); ++s)
        std::copy_n(p.windows.data() + s * p.dim, p.dim, g.data.data() + static_cast<std::size_t>(p.source[s]) * p.dim);
    return g;
}

inline constexpr double kMaskValue = -1.0e4;

/// Additive attention masks, one [Wt x Wt] block per window. Only pairs that
/// straddle the north/south wrap seam of a meridionally shifted grid are
/// masked; the zonal axis is periodic and never masked.
inline std::vector<float> meridional_mask(int th, int tw, int wh, int ww, int sh) {
    const int nwh = th / wh, nww = tw / ww, wt = wh * ww;
    std::vector<float> mask(static_cast<std::size_t>(nwh) * nww * wt * wt, 0.0f);
    if (sh == 0) return mask;
    for (int wi = 0; wi < nwh; ++wi)
        for (int wj = 0; wj < nww; ++wj) {
            float *m = mask.data() + (static_cast<std::size_t>(wi) * nww + wj) * wt * wt;
            for (int a = 0; a < wt; ++a)
                for (int b = 0; b < wt; ++b) {
                    const int ra = wi * wh + a / ww, rb = wi * wh + b / ww;
                    const bool wa = ra >= th - sh, wb = rb >= th - sh;
                    if (wa != wb) m[a * wt + b] = static_cast<float>(kMaskValue);
                }
        }
    return mask;
}

// ---------------------------------------------------------------------------
// Dense kernels

template <class S>
using RMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using RVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;
template <class S>
using CMapM = Eigen::Map<const RMat<S>>;
template <class S>
using MapM = Eigen::Map<RMat<S>>;
template <class S>
using CMapV = Eigen::Map<const RVec<S>>;
template <class S>
using MapV = Eigen::Map<RVec<S>>;

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kNormalizeEps = 1e-12;
inline const double kMaxLogitScale = std::log(100.0);

namespace detail {

template <class S>
void layer_norm_forward(const RMat<S> &x, CMapV<S> gain, CMapV<S> bias, RMat<S> &xhat, std::vector<S> &rstd,
                        RMat<S> &y) {
    const Eigen::Index n = x.rows(), d = x.cols();
    xhat.resize(n, d);
    y.resize(n, d);
    rstd.resize(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        const S mean = x.row(i).mean();
        const S var = (x.row(i).array() - mean).square().mean();
        const S r = S(1) / std::sqrt(var + S(kLayerNormEps));
        rstd[i] = r;
        xhat.row(i) = (x.row(i).array() - mean) * r;
        y.row(i) = xhat.row(i).cwiseProduct(gain) + bias;
    }
}

/// dy -> dx (overwritten), accumulating gain/bias gradients.
template <class S>
void layer_norm_backward(const RMat<S> &dy, const RMat<S> &xhat, const std::vector<S> &rstd, CMapV<S> gain,
                         MapV<S> dgain, MapV<S> dbias, RMat<S> &dx) {
    const Eigen::Index n = dy.rows(), d = dy.cols();
    dx.resize(n, d);
    dgain += dy.cwiseProduct(xhat).colwise().sum();
    dbias += dy.colwise().sum();
    for (Eigen::Index i = 0; i < n; ++i) {
        const RVec<S> dxh = dy.row(i).cwiseProduct(gain);
        const S m1 = dxh.mean();
        const S m2 = dxh.cwiseProduct(xhat.row(i)).mean();
        dx.row(i) = (dxh.array() - m1 - xhat.row(i).array() * m2) * rstd[i];
    }
}

template <class S>
void gelu_forward(const RMat<S> &u, RMat<S> &h) {
    const S inv_sqrt2 = S(1.0 / std::numbers::sqrt2);
    h = (u.array() * S(0.5) * (S(1) + (u.array() * inv_sqrt2).erf())).matrix();
}

template <class S>
void gelu_backward(const RMat<S> &u, RMat<S> &dh) {
    const S inv_sqrt2 = S(1.0 / std::numbers::sqrt2);
    const S inv_sqrt2pi = S(1.0 / std::sqrt(2.0 * std::numbers::pi));
    auto a = u.array();
    dh.array() *= S(0.5) * (S(1) + (a * inv_sqrt2).erf()) + a * inv_sqrt2pi * (a.square() * S(-0.5)).exp();
}

template <class S>
bool finite(const RMat<S> &m) {
    return m.allFinite();
}

} // namespace detail

/// Scaled-cosine attention for one head of one window.
///   logits = tau * cos(q_i, k_j) + mask_ij, P = softmax_j(logits), out = P v.
/// Inputs are [n x hd] blocks; qn/kn receive the clamped row norms and
/// qhat/khat the unit rows, which the backward pass reuses.
template <class S, class QB, class KB, class VB, class OB>
void cosine_attention_forward(const QB &q, const KB &k, const VB &v, S tau, const float *mask, RMat<S> &qhat,
                              RMat<S> &khat, S *qn, S *kn, RMat<S> &P, OB &&out) {
    const Eigen::Index n = q.rows();
    qhat.resize(n, q.cols());
    khat.resize(n, k.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
        qn[i] = std::max(q.row(i).norm(), S(kNormalizeEps));
        kn[i] = std::max(k.row(i).norm(), S(kNormalizeEps));
        qhat.row(i) = q.row(i) / qn[i];
        khat.row(i) = k.row(i) / kn[i];
    }
    P.noalias() = tau * (qhat * khat.transpose());
    if (mask) P += CMapM<float>(mask, n, n).template cast<S>();
    for (Eigen::Index i = 0; i < n; ++i) {
        const S mx = P.row(i).maxCoeff();
        P.row(i) = (P.row(i).array() - mx).exp().matrix();
        P.row(i) /= P.row(i).sum();
    }
    out.noalias() = P * v;
}

/// Backward of cosine_attention_forward. Writes dq, dk, dv (overwriting) and
/// returns d(loss)/d(tau).
template <class S, class VB, class DOB>
S cosine_attention_backward(const RMat<S> &qhat, const RMat<S> &khat, const S *qn, const S *kn, const RMat<S> &P,
                            const VB &v, const DOB &dout, S tau, RMat<S> &dq, RMat<S> &dk, RMat<S> &dv) {
    const Eigen::Index n = P.rows();
    dv.noalias() = P.transpose() * dout;
    RMat<S> dP = dout * v.transpose();
    RMat<S> dS(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const S dot = dP.row(i).dot(P.row(i));
        dS.row(i) = P.row(i).cwiseProduct((dP.row(i).array() - dot).matrix());
    }
    const RMat<S> cosm = qhat * khat.transpose();
    const S dtau = dS.cwiseProduct(cosm).sum();
    RMat<S> dqh = tau * (dS * khat);
    RMat<S> dkh = tau * (dS.transpose() * qhat);
    dq.resize(n, qhat.cols());
    dk.resize(n, khat.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
        if (qn[i] > S(kNormalizeEps))
            dq.row(i) = (dqh.row(i) - qhat.row(i) * qhat.row(i).dot(dqh.row(i))) / qn[i];
        else
            dq.row(i) = dqh.row(i) / qn[i];
        if (kn[i] > S(kNormalizeEps))
            dk.row(i) = (dkh.row(i) - khat.row(i) * khat.row(i).dot(dkh.row(i))) / kn[i];
        else
            dk.row(i) = dkh.row(i) / kn[i];
    }
    return dtau;
}

/// tau = exp(min(theta, ln 100)).
template <class S>
S logit_scale(S theta) {
    return std::exp(std::min(theta, S(kMaxLogitScale)));
}

// ---------------------------------------------------------------------------
// Forecaster

struct ForwardOptions {
    bool training = false;       // enables stochastic depth
    std::uint64_t rng_seed = 0;  // stream for drop-path draws
};

/// Non-hierarchical shifted-window transformer mapping [B, C_in, H, W] to
/// [B, C_out, H, W]. Even blocks use no shift, odd blocks shift by half a
/// window; shifted windows are masked only across the north/south seam.
template <class S>
class SwinForecaster {
public:
    struct BlockCache {
        RMat<S> x_in, qkv, qhat, khat, attn, a, xhat1, x1, u, h, m, xhat2;
        std::vector<S> qn, kn, rstd1, rstd2;
        std::vector<RMat<S>> probs; // per (sample, window, head)
        std::vector<S> keep1, keep2;
    };

    struct Cache {
        int batch = 0;
        RMat<S> patches, xhat0, z_out;
        std::vector<S> rstd0;
        std::vector<BlockCache> blocks;
        std::vector<int> shapes; // token-grid rows at each block boundary (non-hierarchy check)
    };

    SwinForecaster(ModelConfig cfg, const GridSpec &grid) : cfg_(std::move(cfg)), n_lat_(grid.n_lat), n_lon_(grid.n_lon) {
        cfg_.validate();
        cfg_.check_grid(grid);
        th_ = n_lat_ / cfg_.patch_size;
        tw_ = n_lon_ / cfg_.patch_size;
        for (int s = 0; s < 2; ++s) {
            const int sh = s ? cfg_.shift_h() : 0, sw = s ? cfg_.shift_w() : 0;
            index_[s] = window_token_index(th_, tw_, cfg_.window_h, cfg_.window_w, sh, sw);
            mask_[s] = meridional_mask(th_, tw_, cfg_.window_h, cfg_.window_w, sh);
            masked_[s] = sh != 0;
        }
        layout_ = parameter_layout(cfg_, grid);
    }

    const ModelConfig &config() const { return cfg_; }
    int tokens_h() const { return th_; }
    int tokens_w() const { return tw_; }
    int tokens() const { return th_ * tw_; }
    std::size_t in_size() const { return static_cast<std::size_t>(cfg_.in_channels) * n_lat_ * n_lon_; }
    std::size_t out_size() const { return static_cast<std::size_t>(cfg_.out_channels) * n_lat_ * n_lon_; }
    const std::vector<TensorInfo> &layout() const { return layout_; }

    /// x: [batch x C_in x H x W]; out: [batch x C_out x H x W]. With a cache,
    /// stores everything backward() needs.
    void forward(const ParameterSet<S> &ps, std::span<const S> x, int batch, std::span<S> out, Cache *cache = nullptr,
                 const ForwardOptions &opt = {}) const {
        check_params(ps);
        if (x.size() != in_size() * batch || out.size() != out_size() * batch)
            throw InvalidArgument("forward: input/output size does not match [batch x C x H x W]");
        Cache local;
        Cache &c = cache ? *cache : local;
        c.batch = batch;
        c.blocks.resize(cfg_.depth);
        c.shapes.clear();
        RMat<S> z = embed(ps, x, batch, c);
        for (int b = 0; b < cfg_.depth; ++b) {
            c.shapes.push_back(static_cast<int>(z.rows()));
            z = block_forward(ps, b, std::move(z), batch, c.blocks[b], opt);
            if (!detail::finite(z)) throw NumericFailure("non-finite activations after block " + std::to_string(b), b);
        }
        c.shapes.push_back(static_cast<int>(z.rows()));
        head_forward(ps, z, batch, out);
        c.z_out = std::move(z);
        if (!cache) c = Cache{};
    }

    /// Accumulates parameter gradients into `grads`. When dx is non-empty it
    /// receives d(loss)/d(input) ([batch x C_in x H x W], overwritten).
    void backward(const ParameterSet<S> &ps, const Cache &c, std::span<const S> dout, ParameterSet<S> &grads,
                  std::span<S> dx = {}) const {
        const int batch = c.batch;
        if (dout.size() != out_size() * batch) throw InvalidArgument("backward: gradient size mismatch");
        RMat<S> dz = head_backward(ps, c, dout, grads);
        for (int b = cfg_.depth - 1; b >= 0; --b) dz = block_backward(ps, b, c.blocks[b], dz, batch, grads);
        embed_backward(ps, c, dz, grads, dx);
    }

private:
    // -- parameter access --------------------------------------------------
    void check_params(const ParameterSet<S> &ps) const {
        if (ps.data.size() != layout_.back().offset + layout_.back().size)
            throw InvalidArgument("parameter set does not match model layout");
    }
    const S *param(const ParameterSet<S> &ps, const std::string &name) const { return ps.tensor(name).data(); }
    S *grad(ParameterSet<S> &g, const std::string &name) const { return g.tensor(name).data(); }
    CMapM<S> pmat(const ParameterSet<S> &ps, const std::string &name) const {
        const auto &t = ps.info(name);
        return {ps.data.data() + t.offset, t.shape[0], t.shape[1]};
    }
    MapM<S> gmat(ParameterSet<S> &g, const std::string &name) const {
        const auto &t = g.info(name);
        return {g.data.data() + t.offset, t.shape[0], t.shape[1]};
    }
    CMapV<S> pvec(const ParameterSet<S> &ps, const std::string &name) const {
        const auto &t = ps.info(name);
        return {ps.data.data() + t.offset, static_cast<Eigen::Index>(t.size)};
    }
    MapV<S> gvec(ParameterSet<S> &g, const std::string &name) const {
        const auto &t = g.info(name);
        return {g.data.data() + t.offset, static_cast<Eigen::Index>(t.size)};
    }
    static std::string bname(int b, const char *suffix) { return "blocks." + std::to_string(b) + "." + suffix; }

    // -- patch embedding ----------------------------------------------------
    // Patch vector layout: channel-major, then row, then column within the patch.
    RMat<S> embed(const ParameterSet<S> &ps, std::span<const S> x, int batch, Cache &c) const {
        const int p = cfg_.patch_size, C = cfg_.in_channels, T = tokens();
        const int P = p * p * C;
        c.patches.resize(static_cast<Eigen::Index>(batch) * T, P);
        const std::size_t plane = static_cast<std::size_t>(n_lat_) * n_lon_;
        for (int bi = 0; bi < batch; ++bi)
            for (int ti = 0; ti < th_; ++ti)
                for (int tj = 0; tj < tw_; ++tj) {
                    S *row = c.patches.row(static_cast<Eigen::Index>(bi) * T + ti * tw_ + tj).data();
                    for (int ch = 0; ch < C; ++ch)
                        for (int py = 0; py < p; ++py) {
                            const S *src = x.data() + (static_cast<std::size_t>(bi) * C + ch) * plane +
                                           static_cast<std::size_t>(ti * p + py) * n_lon_ + tj * p;
                            std::copy_n(src, p, row + (ch * p + py) * p);
                        }
                }
        RMat<S> e;
        e.noalias() = c.patches * pmat(ps, "patch_embed.proj.weight");
        e.rowwise() += pvec(ps, "patch_embed.proj.bias");
        RMat<S> z;
        detail::layer_norm_forward<S>(e, pvec(ps, "patch_embed.norm.weight"), pvec(ps, "patch_embed.norm.bias"),
                                      c.xhat0, c.rstd0, z);
        const CMapM<S> pos = pmat(ps, "pos_embed");
        for (int bi = 0; bi < batch; ++bi) z.middleRows(static_cast<Eigen::Index>(bi) * T, T) += pos;
        return z;
    }

    void embed_backward(const ParameterSet<S> &ps, const Cache &c, const RMat<S> &dz, ParameterSet<S> &g,
                        std::span<S> dx) const {
        const int T = tokens(), batch = c.batch;
        MapM<S> dpos = gmat(g, "pos_embed");
        for (int bi = 0; bi < batch; ++bi) dpos += dz.middleRows(static_cast<Eigen::Index>(bi) * T, T);
        RMat<S> de;
        detail::layer_norm_backward<S>(dz, c.xhat0, c.rstd0, pvec(ps, "patch_embed.norm.weight"),
                                       gvec(g, "patch_embed.norm.weight"), gvec(g, "patch_embed.norm.bias"), de);
        gmat(g, "patch_embed.proj.weight").noalias() += c.patches.transpose() * de;
        gvec(g, "patch_embed.proj.bias") += de.colwise().sum();
        if (dx.empty()) return;
        const RMat<S> dp = de * pmat(ps, "patch_embed.proj.weight").transpose();
        const int p = cfg_.patch_size, C = cfg_.in_channels;
        const std::size_t plane = static_cast<std::size_t>(n_lat_) * n_lon_;
        for (int bi = 0; bi < batch; ++bi)
            for (int ti = 0; ti < th_; ++ti)
                for (int tj = 0; tj < tw_; ++tj) {
                    const S *row = dp.row(static_cast<Eigen::Index>(bi) * T + ti * tw_ + tj).data();
                    for (int ch = 0; ch < C; ++ch)
                        for (int py = 0; py < p; ++py) {
                            S *dst = dx.data() + (static_cast<std::size_t>(bi) * C + ch) * plane +
                                     static_cast<std::size_t>(ti * p + py) * n_lon_ + tj * p;
                            std::copy_n(row + (ch * p + py) * p, p, dst);
                        }
                }
    }

    // -- head ---------------------------------------------------------------
    void head_forward(const ParameterSet<S> &ps, const RMat<S> &z, int batch, std::span<S> out) const {
        RMat<S> y;
        y.noalias() = z * pmat(ps, "head.weight");
        y.rowwise() += pvec(ps, "head.bias");
        const int p = cfg_.patch_size, C = cfg_.out_channels, T = tokens();
        const std::size_t plane = static_cast<std::size_t>(n_lat_) * n_lon_;
        for (int bi = 0; bi < batch; ++bi)
            for (int ti = 0; ti < th_; ++ti)
                for (int tj = 0; tj < tw_; ++tj) {
                    const S *row = y.row(static_cast<Eigen::Index>(bi) * T + ti * tw_ + tj).data();
                    for (int ch = 0; ch < C; ++ch)
                        for (int py = 0; py < p; ++py)
                            std::copy_n(row + (ch * p + py) * p, p,
                                        out.data() + (static_cast<std::size_t>(bi) * C + ch) * plane +
                                            static_cast<std::size_t>(ti * p + py) * n_lon_ + tj * p);
                }
    }

    RMat<S> head_backward(const ParameterSet<S> &ps, const Cache &c, std::span<const S> dout,
                          ParameterSet<S> &g) const {
        const int p = cfg_.patch_size, C = cfg_.out_channels, T = tokens(), batch = c.batch;
        const std::size_t plane = static_cast<std::size_t>(n_lat_) * n_lon_;
        RMat<S> dy(static_cast<Eigen::Index>(batch) * T, p * p * C);
        for (int bi = 0; bi < batch; ++bi)
            for (int ti = 0; ti < th_; ++ti)
                for (int tj = 0; tj < tw_; ++tj) {
                    S *row = dy.row(static_cast<Eigen::Index>(bi) * T + ti * tw_ + tj).data();
                    for (int ch = 0; ch < C; ++ch)
                        for (int py = 0; py < p; ++py)
                            std::copy_n(dout.data() + (static_cast<std::size_t>(bi) * C + ch) * plane +
                                            static_cast<std::size_t>(ti * p + py) * n_lon_ + tj * p,
                                        p, row + (ch * p + py) * p);
                }
        gmat(g, "head.weight").noalias() += c.z_out.transpose() * dy;
        gvec(g, "head.bias") += dy.colwise().sum();
        return dy * pmat(ps, "head.weight").transpose();
    }

    // -- transformer block ----------------------------------------------------
    double drop_prob(int b) const {
        return cfg_.depth > 1 ? cfg_.drop_path_rate * b / (cfg_.depth - 1) : cfg_.drop_path_rate;
    }

    void draw_keep(int b, int branch, int batch, const ForwardOptions &opt, std::vector<S> &keep) const {
        keep.assign(static_cast<std::size_t>(batch), S(1));
        const double pdrop = drop_prob(b);
        if (!opt.training || pdrop <= 0.0) return;
        Rng rng(derive_seed(opt.rng_seed, static_cast<std::uint64_t>(b), static_cast<std::uint64_t>(branch)));
        for (auto &k : keep) k = rng.uniform() < pdrop ? S(0) : S(1.0 / (1.0 - pdrop));
    }

    RMat<S> block_forward(const ParameterSet<S> &ps, int b, RMat<S> x, int batch, BlockCache &bc,
                          const ForwardOptions &opt) const {
        const int D = cfg_.embed_dim, H = cfg_.n_heads, hd = cfg_.head_dim(), T = tokens();
        const int shifted = b % 2;
        const auto &idx = index_[shifted];
        const auto &mask = mask_[shifted];
        const int wt = cfg_.window_h * cfg_.window_w;
        const int nw = T / wt;
        const Eigen::Index N = x.rows();

        bc.x_in = std::move(x);
        bc.qkv.noalias() = bc.x_in * pmat(ps, bname(b, "attn.qkv.weight"));
        bc.qkv.rowwise() += pvec(ps, bname(b, "attn.qkv.bias"));
        bc.qhat.resize(N, D);
        bc.khat.resize(N, D);
        bc.attn.resize(N, D);
        bc.qn.resize(static_cast<std::size_t>(N) * H);
        bc.kn.resize(static_cast<std::size_t>(N) * H);
        bc.probs.resize(static_cast<std::size_t>(batch) * nw * H);
        const S *theta = param(ps, bname(b, "attn.logit_scale"));

        RMat<S> Q(wt, D), K(wt, D), V(wt, D), O(wt, hd), qh, kh;
        std::vector<S> qn(wt), kn(wt);
        for (int bi = 0; bi < batch; ++bi)
            for (int w = 0; w < nw; ++w) {
                const int *src = idx.data() + static_cast<std::size_t>(w) * wt;
                const Eigen::Index base = static_cast<Eigen::Index>(bi) * T;
                for (int s = 0; s < wt; ++s) {
                    const auto r = bc.qkv.row(base + src[s]);
                    Q.row(s) = r.segment(0, D);
                    K.row(s) = r.segment(D, D);
                    V.row(s) = r.segment(2 * D, D);
                }
                const float *m = masked_[shifted] ? mask.data() + static_cast<std::size_t>(w) * wt * wt : nullptr;
                for (int h = 0; h < H; ++h) {
                    auto &P = bc.probs[(static_cast<std::size_t>(bi) * nw + w) * H + h];
                    cosine_attention_forward<S>(Q.middleCols(h * hd, hd), K.middleCols(h * hd, hd),
                                                V.middleCols(h * hd, hd), logit_scale(theta[h]), m, qh, kh,
                                                qn.data(), kn.data(), P, O);
                    for (int s = 0; s < wt; ++s) {
                        const Eigen::Index row = base + src[s];
                        bc.qhat.row(row).segment(h * hd, hd) = qh.row(s);
                        bc.khat.row(row).segment(h * hd, hd) = kh.row(s);
                        bc.attn.row(row).segment(h * hd, hd) = O.row(s);
                        bc.qn[row * H + h] = qn[s];
                        bc.kn[row * H + h] = kn[s];
                    }
                }
            }
        bc.a.noalias() = bc.attn * pmat(ps, bname(b, "attn.proj.weight"));
        bc.a.rowwise() += pvec(ps, bname(b, "attn.proj.bias"));
        RMat<S> y;
        detail::layer_norm_forward<S>(bc.a, pvec(ps, bname(b, "norm1.weight")), pvec(ps, bname(b, "norm1.bias")),
                                      bc.xhat1, bc.rstd1, y);
        draw_keep(b, 0, batch, opt, bc.keep1);
        bc.x1 = bc.x_in;
        for (int bi = 0; bi < batch; ++bi)
            if (bc.keep1[bi] != S(0)) bc.x1.middleRows(static_cast<Eigen::Index>(bi) * T, T) += bc.keep1[bi] * y.middleRows(static_cast<Eigen::Index>(bi) * T, T);

        bc.u.noalias() = bc.x1 * pmat(ps, bname(b, "mlp.fc1.weight"));
        bc.u.rowwise() += pvec(ps, bname(b, "mlp.fc1.bias"));
        detail::gelu_forward(bc.u, bc.h);
        bc.m.noalias() = bc.h * pmat(ps, bname(b, "mlp.fc2.weight"));
        bc.m.rowwise() += pvec(ps, bname(b, "mlp.fc2.bias"));
        detail::layer_norm_forward<S>(bc.m, pvec(ps, bname(b, "norm2.weight")), pvec(ps, bname(b, "norm2.bias")),
                                      bc.xhat2, bc.rstd2, y);
        draw_keep(b, 1, batch, opt, bc.keep2);
        RMat<S> x2 = bc.x1;
        for (int bi = 0; bi < batch; ++bi)
            if (bc.keep2[bi] != S(0)) x2.middleRows(static_cast<Eigen::Index>(bi) * T, T) += bc.keep2[bi] * y.middleRows(static_cast<Eigen::Index>(bi) * T, T);
        return x2;
    }

    RMat<S> block_backward(const ParameterSet<S> &ps, int b, const BlockCache &bc, const RMat<S> &dx2, int batch,
                           ParameterSet<S> &g) const {
        const int D = cfg_.embed_dim, H = cfg_.n_heads, hd = cfg_.head_dim(), T = tokens();
        const int shifted = b % 2;
        const auto &idx = index_[shifted];
        const int wt = cfg_.window_h * cfg_.window_w;
        const int nw = T / wt;
        const Eigen::Index N = dx2.rows();

        // MLP branch
        RMat<S> dy = dx2;
        for (int bi = 0; bi < batch; ++bi) dy.middleRows(static_cast<Eigen::Index>(bi) * T, T) *= bc.keep2[bi];
        RMat<S> dm;
        detail::layer_norm_backward<S>(dy, bc.xhat2, bc.rstd2, pvec(ps, bname(b, "norm2.weight")),
                                       gvec(g, bname(b, "norm2.weight")), gvec(g, bname(b, "norm2.bias")), dm);
        gmat(g, bname(b, "mlp.fc2.weight")).noalias() += bc.h.transpose() * dm;
        gvec(g, bname(b, "mlp.fc2.bias")) += dm.colwise().sum();
        RMat<S> du = dm * pmat(ps, bname(b, "mlp.fc2.weight")).transpose();
        detail::gelu_backward(bc.u, du);
        gmat(g, bname(b, "mlp.fc1.weight")).noalias() += bc.x1.transpose() * du;
        gvec(g, bname(b, "mlp.fc1.bias")) += du.colwise().sum();
        RMat<S> dx1 = dx2;
        dx1.noalias() += du * pmat(ps, bname(b, "mlp.fc1.weight")).transpose();

        // attention branch
        dy = dx1;
        for (int bi = 0; bi < batch; ++bi) dy.middleRows(static_cast<Eigen::Index>(bi) * T, T) *= bc.keep1[bi];
        RMat<S> da;
        detail::layer_norm_backward<S>(dy, bc.xhat1, bc.rstd1, pvec(ps, bname(b, "norm1.weight")),
                                       gvec(g, bname(b, "norm1.weight")), gvec(g, bname(b, "norm1.bias")), da);
        gmat(g, bname(b, "attn.proj.weight")).noalias() += bc.attn.transpose() * da;
        gvec(g, bname(b, "attn.proj.bias")) += da.colwise().sum();
        const RMat<S> dattn = da * pmat(ps, bname(b, "attn.proj.weight")).transpose();

        RMat<S> dqkv(N, 3 * D);
        const S *theta = param(ps, bname(b, "attn.logit_scale"));
        S *dtheta = grad(g, bname(b, "attn.logit_scale"));
        RMat<S> qh(wt, hd), kh(wt, hd), V(wt, hd), dO(wt, hd), dq, dk, dv;
        std::vector<S> qn(wt), kn(wt);
        for (int bi = 0; bi < batch; ++bi)
            for (int w = 0; w < nw; ++w) {
                const int *src = idx.data() + static_cast<std::size_t>(w) * wt;
                const Eigen::Index base = static_cast<Eigen::Index>(bi) * T;
                for (int h = 0; h < H; ++h) {
                    for (int s = 0; s < wt; ++s) {
                        const Eigen::Index row = base + src[s];
                        qh.row(s) = bc.qhat.row(row).segment(h * hd, hd);
                        kh.row(s) = bc.khat.row(row).segment(h * hd, hd);
                        V.row(s) = bc.qkv.row(row).segment(2 * D + h * hd, hd);
                        dO.row(s) = dattn.row(row).segment(h * hd, hd);
                        qn[s] = bc.qn[row * H + h];
                        kn[s] = bc.kn[row * H + h];
                    }
                    const auto &P = bc.probs[(static_cast<std::size_t>(bi) * nw + w) * H + h];
                    const S tau = logit_scale(theta[h]);
                    const S dtau = cosine_attention_backward<S>(qh, kh, qn.data(), kn.data(), P, V, dO, tau, dq, dk, dv);
                    if (theta[h] < S(kMaxLogitScale)) dtheta[h] += dtau * tau;
                    for (int s = 0; s < wt; ++s) {
                        const Eigen::Index row = base + src[s];
                        dqkv.row(row).segment(h * hd, hd) = dq.row(s);
                        dqkv.row(row).segment(D + h * hd, hd) = dk.row(s);
                        dqkv.row(row).segment(2 * D + h * hd, hd) = dv.row(s);
                    }
                }
            }
        gmat(g, bname(b, "attn.qkv.weight")).noalias() += bc.x_in.transpose() * dqkv;
        gvec(g, bname(b, "attn.qkv.bias")) += dqkv.colwise().sum();
        RMat<S> dx = dx1;
        dx.noalias() += dqkv * pmat(ps, bname(b, "attn.qkv.weight")).transpose();
        return dx;
    }

    ModelConfig cfg_;
    int n_lat_, n_lon_, th_ = 0, tw_ = 0;
    std::vector<int> index_[2];
    std::vector<float> mask_[2];
    bool masked_[2] = {false, false};
    std::vector<TensorInfo> layout_;
};

} // namespace aeriscast
