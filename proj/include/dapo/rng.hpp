#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string_view>

namespace dapo::rng {

/// SplitMix64 finalizer. Bijective on 64-bit words.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/**
 * Counter-based generator: the i-th draw under a key is a pure function of
 * (key, i). Two rounds of SplitMix64 decorrelate neighbouring keys and
 * counters, so sequential and parallel consumers see identical streams.
 */
constexpr std::uint64_t counter_hash(std::uint64_t key, std::uint64_t counter) noexcept {
    return splitmix64(splitmix64(key) ^ (counter * 0xd1b54a32d192ed03ULL + 0x8bb84b93962eacc9ULL));
}

/// Uniform double in [0, 1) with 53 random bits.
constexpr double counter_uniform(std::uint64_t key, std::uint64_t counter) noexcept {
    return static_cast<double>(counter_hash(key, counter) >> 11) * 0x1.0p-53;
}

/// Child seed for the index-th sub-task of a seeded job.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) noexcept {
    return counter_hash(seed ^ 0x5851f42d4c957f2dULL, index);
}

/// FNV-1a over the bytes of a name.
constexpr std::uint64_t fnv1a(std::string_view text) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : text) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Seed for a named pipeline stage: counter_hash(master, fnv1a(name)).
constexpr std::uint64_t stage_seed(std::uint64_t master_seed, std::string_view stage) noexcept {
    return counter_hash(master_seed, fnv1a(stage));
}

/// Index drawn from a probability vector by inverse CDF in list order.
/// Falls back to the last index when round-off leaves u above the total.
inline std::size_t sample_index(std::span<const double> probs, double u) noexcept {
    double cumulative = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        cumulative += probs[i];
        if (u < cumulative) return i;
    }
    return probs.empty() ? 0 : probs.size() - 1;
}

/// Sequential view over a counter-based stream.
class CounterRng {
public:
    explicit CounterRng(std::uint64_t key, std::uint64_t start = 0) noexcept : key_(key), counter_(start) {}

    std::uint64_t next_u64() noexcept { return counter_hash(key_, counter_++); }
    double uniform() noexcept { return counter_uniform(key_, counter_++); }
    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [lo, hi] (inclusive).
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) noexcept {
        const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<std::int64_t>(static_cast<std::uint64_t>(uniform() * static_cast<double>(span)) % span);
    }

    bool bernoulli(double p) noexcept { return uniform() < p; }

    /// Standard normal via Box-Muller (one of the pair is discarded).
    double normal(double mean = 0.0, double stddev = 1.0) noexcept {
        double u1 = uniform();
        const double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    std::uint64_t key() const noexcept { return key_; }
    std::uint64_t counter() const noexcept { return counter_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_;
};

}  // namespace dapo::rng
