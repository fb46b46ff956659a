#pragma once

// The finite-difference suite behind `moex gradcheck`: every differentiable
// primitive plus one full moex-hooked network forward/backward.

#include "moex/gradcheck.hpp"

#include <cstdint>
#include <vector>

namespace moex {

inline constexpr double kGradCheckTolerance = 1e-4;

/// One result per primitive case (schemes and conv geometries expand to
/// several cases), each drawn from its own stream seeded by `seed`.
std::vector<GradCheckResult> gradcheck_primitives(std::uint64_t seed);

/// Central differences over every parameter of a depth-8 network with MoEx
/// applied at the stem (batch 4, 8 channels, 8×8 features, PONO, p = 1).
GradCheckResult gradcheck_network(std::uint64_t seed, double step = 1e-5);

}  // namespace moex
