#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace amalgam {

struct GradCheckCase {
    std::string op;
    std::uint64_t seed = 0;
    double relative_error = 0.0;
};

// Analytic vs central-difference gradients for every differentiable op,
// `seeds` random inputs each.
std::vector<GradCheckCase> gradient_suite(std::size_t seeds, double eps = 1e-5);

}  // namespace amalgam
