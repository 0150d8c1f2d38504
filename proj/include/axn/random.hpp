#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

namespace axn {

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Derives an independent child seed from a parent seed and a stream tag.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept {
    return splitmix64(splitmix64(seed) ^ splitmix64(stream + 0x632BE59BD9B4E019ull));
}

/// Standard normal draw that is a pure function of (seed, a, b): counter-based,
/// so noise for any coordinate is reproducible without materializing a matrix.
inline double keyed_normal(std::uint64_t seed, std::uint64_t a, std::uint64_t b) noexcept {
    const std::uint64_t h1 = splitmix64(derive_seed(seed, a) ^ splitmix64(b));
    const std::uint64_t h2 = splitmix64(h1 ^ 0xD1B54A32D192ED03ull);
    // 53-bit uniforms in (0, 1].
    const double u1 = (static_cast<double>(h1 >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = static_cast<double>(h2 >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

using Rng = std::mt19937_64;

/// Box-Muller normal from an Rng; std::normal_distribution is not portable
/// across standard libraries, this is.
inline double normal_draw(Rng& rng) {
    const double u1 = (static_cast<double>(rng() >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

inline double uniform_draw(Rng& rng, double lo, double hi) {
    return lo + (hi - lo) * static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Uniform index in [0, n) without modulo bias.
inline std::uint64_t index_draw(Rng& rng, std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do x = rng();
    while (x >= limit);
    return x % n;
}

/// k distinct values from [0, n) in draw order (partial Fisher-Yates).
inline std::vector<std::uint64_t> sample_without_replacement(Rng& rng, std::uint64_t n, std::uint64_t k) {
    std::vector<std::uint64_t> pool(n);
    for (std::uint64_t j = 0; j < n; ++j) pool[j] = j;
    if (k > n) k = n;
    for (std::uint64_t j = 0; j < k; ++j) std::swap(pool[j], pool[j + index_draw(rng, n - j)]);
    pool.resize(k);
    return pool;
}

}  // namespace axn
