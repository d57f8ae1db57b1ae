#pragma once

#include <cstdint>

#include "mfi/meanflow.hpp"

namespace mfi::oracle {

/// Relative error of a random velocity net's JVP (random width, random
/// tangents in z, r and t) against double-precision central differences.
double velocity_jvp_error(std::uint64_t seed);

/// Largest deviation of target_velocity from the closed form for the linear
/// field u = A z + b r + c t + d, including collapsed (r = t) rows.
double linear_field_error(meanflow::JvpMode mode, std::uint64_t seed);

}  // namespace mfi::oracle
