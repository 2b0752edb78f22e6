#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "relulab/tensor.hpp"

namespace relulab {

struct GradCheckCase {
    std::string name;
    GradCheckResult result;
};

/// Finite-difference checks of every differentiable op, the attention and
/// memory blocks, the regularizer, and a micro encoder-decoder model.
/// With `micro_only`, only the full micro model cases run.
std::vector<GradCheckCase> gradient_suite(std::uint64_t seed = 0, bool micro_only = false,
                                          const GradCheckOptions& options = {});

}  // namespace relulab
