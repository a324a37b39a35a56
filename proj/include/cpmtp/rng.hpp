// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cpmtp/log_space.hpp>

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

namespace cpmtp {

/**
 * Counter-based generator: draw k of stream `key` is
 * splitmix64_mix(key + (k + 1) * 0x9E3779B97F4A7C15).
 *
 * The full state is (key, counter), so any draw can be reproduced from
 * those two numbers in any language. Derived streams come from fork().
 */
class CounterRng {
public:
    using result_type = std::uint64_t;

    explicit CounterRng(std::uint64_t key = 0, std::uint64_t counter = 0) : key_(key), counter_(counter) {}

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

    static constexpr std::uint64_t mix(std::uint64_t z)
    {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    result_type operator()() { return next_u64(); }

    std::uint64_t next_u64()
    {
        ++counter_;
        return mix(key_ + counter_ * 0x9E3779B97F4A7C15ULL);
    }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n), by rejection (no modulo bias).
    std::uint64_t uniform_index(std::uint64_t n)
    {
        const std::uint64_t limit = max() - max() % n;
        std::uint64_t x = next_u64();
        while (x >= limit) {
            x = next_u64();
        }
        return x % n;
    }

    double normal()
    {
        double u1 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    /// Independent stream derived from this generator's key.
    CounterRng fork(std::uint64_t stream) const { return CounterRng(mix(key_ ^ mix(stream + 0x632BE59BD9B4E019ULL))); }

    std::uint64_t key() const { return key_; }
    std::uint64_t counter() const { return counter_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_;
};

/// Inverse-CDF draw from a log-probability vector (one uniform per call).
template <typename Derived>
Eigen::Index sample_categorical(const Eigen::MatrixBase<Derived>& log_probs, CounterRng& rng)
{
    const double u = rng.uniform();
    double acc = 0.0;
    Eigen::Index last_positive = 0;
    for (Eigen::Index i = 0; i < log_probs.size(); ++i) {
        const double p = std::exp(static_cast<double>(log_probs(i)));
        if (p > 0.0) {
            last_positive = i;
        }
        acc += p;
        if (u < acc) {
            return i;
        }
    }
    return last_positive;
}

/// Fisher-Yates shuffle driven by CounterRng (platform independent order).
template <typename T>
void shuffle(std::span<T> items, CounterRng& rng)
{
    for (std::size_t i = items.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.uniform_index(i));
        std::swap(items[i - 1], items[j]);
    }
}

template <typename Scalar>
Matrix<Scalar> uniform_matrix(Eigen::Index rows, Eigen::Index cols, double bound, CounterRng& rng)
{
    Matrix<Scalar> m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j) {
        for (Eigen::Index i = 0; i < rows; ++i) {
            m(i, j) = static_cast<Scalar>(rng.uniform(-bound, bound));
        }
    }
    return m;
}

} // namespace cpmtp
