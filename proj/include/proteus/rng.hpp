#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "proteus/common.hpp"

namespace proteus {

namespace detail {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : s) {
        h ^= static_cast<uint8_t>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace detail

// Seeded generator with hand-rolled distributions so streams are bit-exact
// regardless of the standard library. Derive independent sub-streams with
// child() instead of sharing one stream across unrelated consumers.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed), eng_(detail::splitmix64(seed)) {}

    uint64_t seed() const { return seed_; }

    uint64_t next_u64() { return eng_(); }

    // uniform in [0, 1) with 53 random bits
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // standard normal, Box-Muller with cached spare
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform01(), u2 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // N(0, std_dev) truncated to [-limit, limit] by rejection
    double trunc_normal(double std_dev, double limit) {
        for (;;) {
            double v = normal() * std_dev;
            if (v >= -limit && v <= limit) return v;
        }
    }

    // uniform integer in [0, n)
    int64_t below(int64_t n) {
        if (n <= 0) throw Error("Rng::below: n must be positive");
        uint64_t un = static_cast<uint64_t>(n);
        uint64_t bound = UINT64_MAX - UINT64_MAX % un;
        for (;;) {
            uint64_t v = next_u64();
            if (v < bound) return static_cast<int64_t>(v % un);
        }
    }

    template <typename It>
    void shuffle(It first, It last) {
        int64_t n = static_cast<int64_t>(last - first);
        for (int64_t i = n - 1; i > 0; --i) {
            int64_t j = below(i + 1);
            std::swap(first[i], first[j]);
        }
    }

    std::vector<int64_t> permutation(int64_t n) {
        std::vector<int64_t> p(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
        shuffle(p.begin(), p.end());
        return p;
    }

    // independent stream derived from the original seed and a tag
    Rng child(std::string_view tag) const {
        return Rng(detail::splitmix64(seed_ ^ detail::fnv1a(tag)));
    }
    Rng child(std::string_view tag, uint64_t index) const {
        return Rng(detail::splitmix64(seed_ ^ detail::fnv1a(tag) ^ detail::splitmix64(index)));
    }

private:
    uint64_t seed_;
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace proteus
