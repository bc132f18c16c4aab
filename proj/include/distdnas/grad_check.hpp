#pragma once

// Finite-difference gradient verification for primitives and interaction ops.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "distdnas/tensor.hpp"

namespace distdnas {

struct GradCheckDims {
  Index batch = 2;
  Index slots = 3;  // sparse slot count (rank-3 inputs)
  Index width = 4;  // feature width
  Index out = 3;    // output width or output slot count
  Index heads = 2;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  Index checked = 0;  // number of scalar partials compared
};

// Kinds accepted by grad_check: every primitive listed by
// grad_check_primitives() plus the ten interaction op names and "merge".
std::vector<std::string> grad_check_primitives();
std::vector<std::string> grad_check_interaction_ops();

// Compares the tape gradient of L = sum(R * op(inputs)) (R a fixed random
// tensor) with central differences, step 1e-5, over every differentiable
// input and parameter. The error of a partial is
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-3).
GradCheckResult grad_check(std::string_view kind, const GradCheckDims& dims, std::uint64_t seed);

// Random small dims (each <= 8) valid for `kind`.
GradCheckDims random_grad_check_dims(std::string_view kind, std::uint64_t seed);

}  // namespace distdnas
