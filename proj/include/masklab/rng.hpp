#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace masklab {

/// 64-bit FNV-1a over a byte range.
std::uint64_t fnv1a64(const void* data, std::size_t n,
                      std::uint64_t basis = 0xcbf29ce484222325ull);
std::uint64_t fnv1a64(std::string_view s, std::uint64_t basis = 0xcbf29ce484222325ull);

/// Seeded random source. All float draws are built from raw mt19937_64 output,
/// so identical seeds give bit-identical streams on every platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();

    /// Uniform in [0, 1) with 53 bits of precision.
    double uniform();

    /// Uniform clamped into (eps, 1 - eps); keeps log(u) and log(1-u) finite.
    double uniform_open(double eps = 1e-12);

    /// Standard normal via Box-Muller (one spare cached).
    double gaussian();
    double gaussian(double mean, double stddev);

    /// Unbiased integer in [0, n); n must be > 0.
    std::size_t below(std::size_t n);

    /// In-place Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = below(i);
            std::swap(v[i - 1], v[j]);
        }
    }

    /// Independent generator for a named sub-stream of this seed.
    Rng stream(std::string_view name) const;

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Seed for a named sub-stream of a master seed (the scheme Rng::stream uses).
std::uint64_t derive_seed(std::uint64_t master, std::string_view stream_name);

}  // namespace masklab
