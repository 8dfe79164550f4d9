#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace tame {

namespace detail {
// splitmix64 finalizer, used to derive child stream seeds.
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}
}  // namespace detail

// Deterministic RNG. std::mt19937_64 output is pinned by the standard; the
// distributions are hand-rolled here because the std ones are not.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed), gen_(detail::mix64(seed)) {}

    uint64_t raw() { return gen_(); }

    // Uniform in [0, 1) with 53-bit resolution.
    double u01() { return static_cast<double>(raw() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * u01(); }

    // Uniform integer in [0, n).
    int64_t below(int64_t n) { return static_cast<int64_t>(raw() % static_cast<uint64_t>(n)); }

    int64_t range(int64_t lo, int64_t hi) { return lo + below(hi - lo + 1); }  // inclusive

    // Box-Muller; one draw per call keeps the stream stateless across forks.
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = 1.0 - u01();  // (0, 1]
        double u2 = u01();
        double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
        return mean + stddev * z;
    }

    template <class Vec>
    void shuffle(Vec& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(static_cast<int64_t>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Independent child stream keyed by tag.
    Rng fork(uint64_t tag) const { return Rng(detail::mix64(seed_ ^ detail::mix64(tag))); }

    uint64_t seed() const { return seed_; }

private:
    uint64_t seed_;
    std::mt19937_64 gen_;
};

}  // namespace tame
