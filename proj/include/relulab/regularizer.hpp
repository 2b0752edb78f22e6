#pragma once

#include <cstddef>

#include "relulab/attention.hpp"
#include "relulab/tensor.hpp"

namespace relulab {

struct RegConfig {
    double cap_coefficient = 0.7;
    double loss_weight = 1.0;  // lambda
    bool enabled = true;
};

void validate(const RegConfig& cfg);

/// Floor applied to a row sum before taking its log.
inline constexpr double kRowSumFloor = 1e-9;

/// Per-row entropy -sum s ln s, shape [heads x n_q]. With `normalize`, rows
/// are first divided by their sum (an all-zero row has entropy 0).
/// Throws ContractViolation on negative weights.
Tensor entropy(const ScoreDistribution& s, bool normalize);

/// cap_coefficient * ln(n).
double entropy_cap(std::size_t n, const RegConfig& cfg);

/// lambda * mean over heads and rows of
///   |ln max(sum_j s_j, 1e-9)| + max(H(s_row) - entropy_cap(n_i), 0)
/// with H on the raw (unnormalized) weights. Differentiable.
Tensor reg_loss(const ScoreDistribution& s, const RegConfig& cfg);

}  // namespace relulab
