#pragma once

// Finite-difference self-check over every differentiable op and composite
// model. Used by the `gradcheck` command and the test suites.

#include <cstdint>
#include <string>
#include <vector>

#include "mamt4/tensor.hpp"

namespace mamt4 {

inline constexpr double kSmoothTolerance = 1e-6;
inline constexpr double kCompositeTolerance = 1e-4;

struct GradCheckCase {
  std::string name;  // "<op>/<wrt>"
  double tolerance = 0.0;
  std::size_t elements = 0;  // size of the perturbed tensor
  GradCheckResult result;
  bool passed() const { return result.max_relative_error < tolerance; }
};

std::vector<GradCheckCase> run_gradcheck_suite(std::uint64_t seed = 7);

}  // namespace mamt4
