// Copyright 2026 The aeriscast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace aeriscast {

// ---------------------------------------------------------------------------
// Errors

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

class BoundsError : public Error {
public:
    using Error::Error;
};

class AlignmentError : public Error {
public:
    using Error::Error;
};

/// Raised when a channel has zero variance (or zero temporal-difference variance).
class DegenerateChannelError : public Error {
public:
    DegenerateChannelError(std::string channel, const std::string &what)
        : Error("degenerate channel '" + channel + "': " + what), channel_(std::move(channel)) {}
    const std::string &channel() const { return channel_; }

private:
    std::string channel_;
};

/// Non-finite values in activations, gradients or states. `index` carries the
/// block / step / tensor position that failed, or -1 when not applicable.
class NumericFailure : public Error {
public:
    NumericFailure(const std::string &what, long index = -1) : Error(what), index_(index) {}
    long index() const { return index_; }

private:
    long index_;
};

class PersistenceError : public Error {
public:
    PersistenceError(const std::string &what, std::filesystem::path path)
        : Error(what + ": " + path.string()), path_(std::move(path)) {}
    const std::filesystem::path &path() const { return path_; }

private:
    std::filesystem::path path_;
};

class NotFoundError : public PersistenceError {
public:
    explicit NotFoundError(std::filesystem::path p) : PersistenceError("not found", std::move(p)) {}
};

class VersionMismatchError : public PersistenceError {
public:
    VersionMismatchError(const std::string &what, std::filesystem::path p)
        : PersistenceError("version mismatch (" + what + ")", std::move(p)) {}
};

class TruncatedError : public PersistenceError {
public:
    explicit TruncatedError(std::filesystem::path p) : PersistenceError("truncated file", std::move(p)) {}
};

class ChecksumError : public PersistenceError {
public:
    explicit ChecksumError(std::filesystem::path p) : PersistenceError("checksum mismatch", std::move(p)) {}
};

class ConfigError : public Error {
public:
    ConfigError(std::string field, std::string constraint)
        : Error("config field '" + field + "': " + constraint), field_(std::move(field)),
          constraint_(std::move(constraint)) {}
    const std::string &field() const { return field_; }
    const std::string &constraint() const { return constraint_; }

private:
    std::string field_;
    std::string constraint_;
};

// ---------------------------------------------------------------------------
// Time

/// UTC instant with one-second resolution.
struct Timestamp {
    std::int64_t seconds = 0;

    friend auto operator<=>(const Timestamp &, const Timestamp &) = default;
    Timestamp operator+(std::int64_t s) const { return {seconds + s}; }
    Timestamp operator-(std::int64_t s) const { return {seconds - s}; }
};

inline constexpr std::int64_t kSecondsPerHour = 3600;

inline Timestamp from_civil(int year, unsigned month, unsigned day, int hour = 0, int minute = 0) {
    using namespace std::chrono;
    const sys_days d{std::chrono::year{year} / std::chrono::month{month} / std::chrono::day{day}};
    return {d.time_since_epoch().count() * 86400LL + hour * 3600LL + minute * 60LL};
}

/// Fractional days elapsed since 1 January 00:00 UTC of the timestamp's year.
inline double day_of_year(Timestamp t) {
    using namespace std::chrono;
    const sys_seconds s{std::chrono::seconds{t.seconds}};
    const auto d = floor<days>(s);
    const year_month_day ymd{d};
    const sys_days jan1{ymd.year() / January / 1};
    return static_cast<double>((s - sys_seconds{jan1}).count()) / 86400.0;
}

/// Hours since 00:00 UTC of the same day, in [0, 24).
inline double utc_hours(Timestamp t) {
    std::int64_t r = t.seconds % 86400;
    if (r < 0) r += 86400;
    return static_cast<double>(r) / 3600.0;
}

inline std::string iso8601(Timestamp t) {
    using namespace std::chrono;
    const sys_seconds s{std::chrono::seconds{t.seconds}};
    const auto d = floor<days>(s);
    const year_month_day ymd{d};
    const hh_mm_ss hms{s - d};
    char buf[96];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02ld:%02ld:%02ldZ", int(ymd.year()), unsigned(ymd.month()),
                  unsigned(ymd.day()), static_cast<long>(hms.hours().count()),
                  static_cast<long>(hms.minutes().count()), static_cast<long>(hms.seconds().count()));
    return buf;
}

// ---------------------------------------------------------------------------
// Checksums and little-endian I/O

/// 64-bit FNV-1a.
class Fnv1a64 {
public:
    void update(std::span<const std::byte> bytes) {
        for (std::byte b : bytes) {
            h_ ^= static_cast<std::uint64_t>(b);
            h_ *= 0x100000001b3ULL;
        }
    }
    void update(std::string_view s) { update(std::as_bytes(std::span(s.data(), s.size()))); }
    std::uint64_t digest() const { return h_; }

private:
    std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t fnv1a64(std::span<const std::byte> bytes) {
    Fnv1a64 h;
    h.update(bytes);
    return h.digest();
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

static_assert(std::endian::native == std::endian::little, "on-disk formats assume a little-endian host");

/// Writes `payload` followed by its 8-byte little-endian FNV-1a checksum.
inline void write_checksummed(const std::filesystem::path &path, std::span<const std::byte> payload) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw PersistenceError("cannot open for writing", path);
    out.write(reinterpret_cast<const char *>(payload.data()), static_cast<std::streamsize>(payload.size()));
    const std::uint64_t sum = fnv1a64(payload);
    out.write(reinterpret_cast<const char *>(&sum), sizeof sum);
    if (!out) throw PersistenceError("write failed", path);
}

/// Reads a file written by write_checksummed and verifies the checksum.
/// A nonzero `expected_payload` also checks the payload length.
inline std::vector<std::byte> read_checksummed(const std::filesystem::path &path, std::size_t expected_payload = 0) {
    if (!std::filesystem::exists(path)) throw NotFoundError(path);
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PersistenceError("cannot open for reading", path);
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    if (size < sizeof(std::uint64_t)) throw TruncatedError(path);
    const std::size_t payload_size = size - sizeof(std::uint64_t);
    if (expected_payload != 0 && payload_size != expected_payload) {
        if (payload_size < expected_payload) throw TruncatedError(path);
        throw ChecksumError(path);
    }
    std::vector<std::byte> buf(payload_size);
    in.read(reinterpret_cast<char *>(buf.data()), static_cast<std::streamsize>(payload_size));
    std::uint64_t sum = 0;
    in.read(reinterpret_cast<char *>(&sum), sizeof sum);
    if (!in) throw TruncatedError(path);
    if (sum != fnv1a64(buf)) throw ChecksumError(path);
    return buf;
}

inline std::string read_text(const std::filesystem::path &path) {
    if (!std::filesystem::exists(path)) throw NotFoundError(path);
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PersistenceError("cannot open for reading", path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_text(const std::filesystem::path &path, std::string_view text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw PersistenceError("cannot open for writing", path);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw PersistenceError("write failed", path);
}

// ---------------------------------------------------------------------------
// Random streams

/// SplitMix64 mixing, used to derive independent stream seeds from counters.
inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
    return splitmix64(splitmix64(splitmix64(splitmix64(seed) ^ a) ^ b) ^ c);
}

/// xoshiro256** generator with platform-independent uniform and normal draws.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) {
        std::uint64_t x = seed;
        for (auto &s : s_) {
            x = splitmix64(x);
            s = x;
        }
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    /// Normal(0, std) truncated to [-2 std, 2 std] by rejection.
    double truncated_normal(double std) {
        for (;;) {
            const double z = normal();
            if (std::abs(z) <= 2.0) return z * std;
        }
    }

    template <class T>
    void shuffle(std::vector<T> &v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
    }

private:
    static constexpr std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    std::uint64_t s_[4]{};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// ---------------------------------------------------------------------------
// Threads

/// Worker cap from AERISCAST_THREADS (default: hardware concurrency, min 1).
inline unsigned worker_count() {
    if (const char *env = std::getenv("AERISCAST_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v >= 1) return static_cast<unsigned>(v);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(i) for i in [0, n) over at most worker_count() threads. Callers
/// write to disjoint outputs, so results do not depend on the worker count.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)> &fn) {
    const std::size_t workers = std::min<std::size_t>(worker_count(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += workers) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto &t : pool) t.join();
    for (auto &e : errors)
        if (e) std::rethrow_exception(e);
}

inline bool all_finite(std::span<const float> v) {
    return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
}

} // namespace aeriscast
