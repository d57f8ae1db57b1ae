#include "mfi/rng.hpp"

#include <cmath>
#include <numbers>

namespace mfi {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

std::uint64_t SeededRng::below(std::uint64_t n) {
    if (n <= 1) return 0;
    // Rejection sampling keeps the result unbiased.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return x % n;
}

double SeededRng::normal(double mean, double stddev) {
    if (has_spare_) {
        has_spare_ = false;
        return mean + stddev * spare_;
    }
    double u1;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return mean + stddev * r * std::cos(theta);
}

SeededRng SeededRng::fork(std::uint64_t stream) const { return SeededRng(mix_seed(seed_, stream)); }

Tensor SeededRng::normal_tensor(Shape shape, float mean, float stddev) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<float>(normal(mean, stddev));
    return t;
}

Tensor SeededRng::uniform_tensor(Shape shape, float lo, float hi) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<float>(uniform(lo, hi));
    return t;
}

}  // namespace mfi
