#pragma once

// Central finite-difference sweep over every differentiable primitive and
// every composite loss, at three shapes per case.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace cdkd {

struct GradCheckResult {
  std::string op;      // primitive or loss
  std::string wrt;     // which input was perturbed
  std::string shape;   // shape variant label
  std::uint64_t seed = 0;
  double error = 0.0;  // max relative error
};

inline constexpr std::uint64_t kDefaultGradSeeds[] = {0, 1, 2};

std::vector<GradCheckResult> run_grad_suite(std::span<const std::uint64_t> seeds =
                                                kDefaultGradSeeds,
                                            double h = 1e-5);

}  // namespace cdkd
