#pragma once

#include <cstdint>
#include <cmath>
#include <random>
#include <vector>

namespace flexssm {

// 64-bit mixer (splitmix64 finalizer). Used to derive independent sub-stream
// seeds from (seed, tag...) tuples so every consumer owns a named stream.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
    return mix64(a ^ (mix64(b) + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2)));
}

template <typename... Rest>
std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b, Rest... rest) {
    return hash_combine(hash_combine(a, b), static_cast<std::uint64_t>(rest)...);
}

// mt19937_64 with hand-rolled draw helpers. std::uniform_real_distribution and
// friends are not bit-stable across standard libraries, so all conversions from
// raw bits to doubles live here.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(mix64(seed)) {}

    std::uint64_t bits() { return engine_(); }

    // uniform in [0, 1)
    double uniform01() { return double(bits() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // uniform integer in [0, n)
    std::uint64_t below(std::uint64_t n) {
        // rejection sampling; unbiased
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v = bits();
        while (v >= limit) v = bits();
        return v % n;
    }

    template <typename T>
    const T& choice(const std::vector<T>& items) {
        return items[below(items.size())];
    }

    // standard normal, Box-Muller
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    // normal truncated to +-2 sigma, rejection sampled
    double trunc_normal(double sigma) {
        double z = normal();
        while (std::fabs(z) > 2.0) z = normal();
        return sigma * z;
    }

    // Fisher-Yates, deterministic given the stream
    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::swap(items[i - 1], items[below(i)]);
        }
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace flexssm
