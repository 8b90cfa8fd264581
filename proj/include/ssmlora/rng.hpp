#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace ssmlora {

// Small deterministic RNG (splitmix64 core, Box-Muller normals).
// Self-contained so that streams are bit-identical across platforms and
// standard-library versions; every seed in this project flows through it.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform01() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double normal(double mu = 0.0, double sigma = 1.0) {
        if (has_spare_) {
            has_spare_ = false;
            return mu + spare_ * sigma;
        }
        // Box-Muller; 1-u keeps the log argument strictly positive.
        const double u = 1.0 - uniform01();
        const double v = uniform01();
        const double radius = std::sqrt(-2.0 * std::log(u));
        const double angle = 6.283185307179586 * v;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return mu + radius * std::cos(angle) * sigma;
    }

    // Unbiased integer in [0, n) via rejection.
    std::uint64_t below(std::uint64_t n) {
        if (n <= 1) return 0;
        const std::uint64_t limit = ~0ULL - (~0ULL % n);
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Independent child stream; used to derive per-module seeds.
    std::uint64_t fork_seed() { return next_u64(); }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace ssmlora
