#include "masklab/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace masklab {

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t basis) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = basis;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

std::uint64_t fnv1a64(std::string_view s, std::uint64_t basis) {
    return fnv1a64(s.data(), s.size(), basis);
}

std::uint64_t derive_seed(std::uint64_t master, std::string_view stream_name) {
    std::uint64_t h = fnv1a64(stream_name, master ^ 0x9e3779b97f4a7c15ull);
    // One xorshift-multiply round so nearby masters diverge on every stream.
    h ^= h >> 33;
    h *= 0xff51afd7ed558ccdull;
    h ^= h >> 33;
    return h;
}

Rng::Rng(std::uint64_t seed) : seed_(seed), gen_(seed) {}

std::uint64_t Rng::next_u64() { return gen_(); }

double Rng::uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
}

double Rng::uniform_open(double eps) {
    double u = uniform();
    if (u < eps) return eps;
    if (u > 1.0 - eps) return 1.0 - eps;
    return u;
}

double Rng::gaussian() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // Box-Muller; u1 kept away from 0 so the log is finite.
    double u1 = uniform_open(1e-300);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.141592653589793238462643383279502884 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

double Rng::gaussian(double mean, double stddev) {
    return mean + stddev * gaussian();
}

std::size_t Rng::below(std::size_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: n must be > 0");
    // Rejection sampling over the top bits to avoid modulo bias.
    std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
        x = gen_();
    } while (x >= limit);
    return static_cast<std::size_t>(x % n);
}

Rng Rng::stream(std::string_view name) const {
    return Rng(derive_seed(seed_, name));
}

}  // namespace masklab
