#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "relulab/tensor.hpp"

namespace relulab {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-9;
};

/// First and second moments, one buffer per parameter in parameter order.
struct AdamState {
    std::uint64_t step = 0;
    std::vector<std::vector<double>> first_moment;
    std::vector<std::vector<double>> second_moment;
};

AdamState make_adam_state(std::span<const Tensor> params);

/// One bias-corrected Adam update of every parameter from its accumulated
/// gradient (a missing gradient counts as zero).
void adam_step(std::span<Tensor> params, AdamState& state, double lr, const AdamConfig& cfg = {});

/// Inverse-square-root schedule with linear warmup:
/// lr(t) = base * min(t / warmup, sqrt(warmup / t)), t >= 1.
struct LrSchedule {
    double base_lr = 5e-4;
    std::size_t warmup = 400;

    double at(std::uint64_t step) const;
};

}  // namespace relulab
