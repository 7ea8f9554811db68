// Copyright 2026 The aeriscast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <complex>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <vector>

#include <fftw3.h>

namespace aeriscast::fft {

using cplx = std::complex<double>;

namespace detail {

struct PlanPair {
    fftw_plan forward = nullptr;
    fftw_plan backward = nullptr;
    ~PlanPair() {
        if (forward) fftw_destroy_plan(forward);
        if (backward) fftw_destroy_plan(backward);
    }
};

// FFTW planning is not thread-safe; execution with new-array calls is.
inline std::mutex &planner_mutex() {
    static std::mutex m;
    return m;
}

inline const PlanPair &plans_for(int n) {
    static std::map<int, std::unique_ptr<PlanPair>> cache;
    std::lock_guard lock(planner_mutex());
    auto &slot = cache[n];
    if (!slot) {
        slot = std::make_unique<PlanPair>();
        std::vector<double> real(static_cast<std::size_t>(n));
        std::vector<cplx> spec(static_cast<std::size_t>(n / 2 + 1));
        auto *c = reinterpret_cast<fftw_complex *>(spec.data());
        // ESTIMATE keeps the chosen algorithm (and so the rounding) fixed run to run.
        const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
        slot->forward = fftw_plan_dft_r2c_1d(n, real.data(), c, flags);
        slot->backward = fftw_plan_dft_c2r_1d(n, c, real.data(), flags);
    }
    return *slot;
}

} // namespace detail

/// One-sided DFT X_k = sum_j x_j exp(-2 pi i j k / n), k = 0..n/2.
inline void rfft(std::span<const double> x, std::span<cplx> out) {
    const int n = static_cast<int>(x.size());
    const auto &p = detail::plans_for(n);
    std::vector<double> in(x.begin(), x.end());
    fftw_execute_dft_r2c(p.forward, in.data(), reinterpret_cast<fftw_complex *>(out.data()));
}

inline std::vector<cplx> rfft(std::span<const double> x) {
    std::vector<cplx> out(x.size() / 2 + 1);
    rfft(x, out);
    return out;
}

/// Inverse of rfft, including the 1/n normalization.
inline void irfft(std::span<const cplx> spec, std::span<double> out) {
    const int n = static_cast<int>(out.size());
    const auto &p = detail::plans_for(n);
    std::vector<cplx> in(spec.begin(), spec.end());
    fftw_execute_dft_c2r(p.backward, reinterpret_cast<fftw_complex *>(in.data()), out.data());
    const double inv = 1.0 / n;
    for (double &v : out) v *= inv;
}

inline std::vector<double> irfft(std::span<const cplx> spec, int n) {
    std::vector<double> out(static_cast<std::size_t>(n));
    irfft(spec, out);
    return out;
}

} // namespace aeriscast::fft
