#pragma once

// Seeded random streams with platform-independent distributions.
//
// std::mt19937_64 is fully specified by the standard, but the std::*_distribution
// adaptors are not: libstdc++, libc++ and MSVC produce different sequences for
// the same engine state. Everything the simulator draws goes through the
// hand-rolled transforms below so a (config, seed) pair replays bit-for-bit on
// any conforming toolchain.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string_view>
#include <vector>

namespace fedswitch {

using Seed = std::uint64_t;

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ULL;
    }
    return h;
}

}  // namespace detail

/// Derives an independent seed from a base seed, a purpose tag and any number
/// of integer coordinates (trial, round, client id, ...).
template <typename... Ints>
constexpr Seed derive_seed(Seed base, std::string_view purpose, Ints... coords) {
    std::uint64_t h = detail::splitmix64(base ^ detail::fnv1a(purpose));
    ((h = detail::splitmix64(h ^ static_cast<std::uint64_t>(coords))), ...);
    return h;
}

class Rng {
public:
    explicit Rng(Seed seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). n must be positive.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x = engine_();
        while (x >= limit) x = engine_();
        return x % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Standard normal via the Marsaglia polar method.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u = 0.0, v = 0.0, s = 0.0;
        do {
            u = uniform(-1.0, 1.0);
            v = uniform(-1.0, 1.0);
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double scale = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * scale;
        has_spare_ = true;
        return u * scale;
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// log of a Gamma(shape, 1) draw (Marsaglia-Tsang). Working in log space
    /// keeps tiny shapes (Dirichlet alpha around 0.01) from underflowing to 0.
    double log_gamma_draw(double shape) {
        if (shape < 1.0) {
            // Gamma(a) = Gamma(a + 1) * U^(1/a)
            double u = uniform();
            while (u == 0.0) u = uniform();
            return log_gamma_draw(shape + 1.0) + std::log(u) / shape;
        }
        const double d = shape - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x = normal();
            double v = 1.0 + c * x;
            if (v <= 0.0) continue;
            v = v * v * v;
            const double u = uniform();
            if (u < 1.0 - 0.0331 * x * x * x * x) return std::log(d * v);
            if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return std::log(d * v);
        }
    }

    /// Symmetric Dirichlet(alpha * 1_k) draw.
    std::vector<double> dirichlet(std::size_t k, double alpha) {
        std::vector<double> logs(k);
        double hi = -std::numeric_limits<double>::infinity();
        for (auto& l : logs) {
            l = log_gamma_draw(alpha);
            hi = std::max(hi, l);
        }
        double total = 0.0;
        for (auto& l : logs) {
            l = std::exp(l - hi);
            total += l;
        }
        for (auto& l : logs) l /= total;
        return logs;
    }

    /// Index drawn proportionally to non-negative weights; returns weights.size()
    /// when every weight is zero.
    std::size_t categorical(const std::vector<double>& weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        if (!(total > 0.0)) return weights.size();
        const double target = uniform() * total;
        double acc = 0.0;
        std::size_t last_positive = weights.size();
        for (std::size_t i = 0; i < weights.size(); ++i) {
            if (weights[i] <= 0.0) continue;
            acc += weights[i];
            last_positive = i;
            if (target < acc) return i;
        }
        return last_positive;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = below(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace fedswitch
