#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace aoar {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Independent stream seed for (master, k0, k1, ...). Used for per-sample and
// per-(position, step) streams so results do not depend on evaluation order.
inline std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> keys) {
    std::uint64_t h = splitmix64(master);
    for (std::uint64_t k : keys) {
        h = splitmix64(h ^ splitmix64(k + 0x632be59bd9b4e019ULL));
    }
    return h;
}

// Uniform on [0, 1) drawn directly from the keyed hash; for one-off draws in
// hot loops where constructing an Rng would dominate.
inline double keyed_uniform(std::uint64_t master, std::initializer_list<std::uint64_t> keys) {
    return static_cast<double>(derive_seed(master, keys) >> 11) * 0x1.0p-53;
}

class Rng {
public:
    using result_type = std::uint64_t;

    explicit Rng(std::uint64_t seed = 0) : engine_(splitmix64(seed)) {}

    static constexpr result_type min() { return std::mt19937_64::min(); }
    static constexpr result_type max() { return std::mt19937_64::max(); }
    result_type operator()() { return engine_(); }

    // Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // Uniform integer on [0, n).
    int below(int n) { return std::uniform_int_distribution<int>(0, n - 1)(engine_); }

    bool bernoulli(double p) { return uniform() < p; }

    double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }

private:
    std::mt19937_64 engine_;
};

}  // namespace aoar
