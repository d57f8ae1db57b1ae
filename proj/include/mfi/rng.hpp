#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "mfi/tensor.hpp"

namespace mfi {

/// Seeded pseudo-random stream (mt19937_64). Distributions are computed here
/// rather than through <random> adaptors so a seed yields the same sequence
/// regardless of the standard library.
class SeededRng {
  public:
    static constexpr std::string_view kAlgorithm = "mt19937_64";

    explicit SeededRng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t position() const { return position_; }

    std::uint64_t next_u64() {
        ++position_;
        return engine_();
    }
    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);
    bool bernoulli(double p) { return uniform() < p; }
    /// Box-Muller normal variate.
    double normal(double mean = 0.0, double stddev = 1.0);

    /// Independent stream derived from this stream's seed and a label.
    SeededRng fork(std::uint64_t stream) const;

    Tensor normal_tensor(Shape shape, float mean, float stddev);
    Tensor uniform_tensor(Shape shape, float lo, float hi);

  private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    std::uint64_t position_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// SplitMix64 finalizer, used to derive seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace mfi
