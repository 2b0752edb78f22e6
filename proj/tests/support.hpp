#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "relulab/analysis.hpp"
#include "relulab/optim.hpp"
#include "relulab/regularizer.hpp"

namespace relulab::testing {

struct RegDescent {
    int steps = 0;
    double worst_log_sum = 0.0;      // max over rows of |ln sum s|
    double worst_entropy_excess = 0.0;  // max over rows of H(s) - cap
    double final_loss = 0.0;
};

/// Minimizes reg_loss alone over s = ReLU(z) on an n x n score block, with z
/// a leaf initialized uniform in [0, 2]. Adam, step size decaying linearly to
/// zero; stops early once every row sum is within `target` in log space.
inline RegDescent minimize_reg(std::size_t n, bool causal, std::uint64_t seed, int max_steps = 2000,
                               double lr = 0.02, double target = 1e-3) {
    Rng rng(seed);
    Tensor z = Tensor::uniform({1, n, n}, rng, 0.0, 2.0, true);
    const auto lens = effective_lengths(n, causal);
    const Tensor mask = causal ? reshape(causal_mask(n), {1, n, n}) : Tensor::full({1, n, n}, 1.0);
    const RegConfig cfg;
    std::vector<Tensor> params{z};
    AdamState state = make_adam_state(params);

    RegDescent out;
    for (int step = 1; step <= max_steps; ++step) {
        z.zero_grad();
        Tensor s = mul(relu(z), mask);
        Tensor loss = reg_loss(ScoreDistribution{s, lens, Activation::ReluScaled}, cfg);
        out.steps = step;
        out.final_loss = loss.item();
        out.worst_log_sum = 0.0;
        out.worst_entropy_excess = -1e300;
        const auto v = s.values();
        for (std::size_t i = 0; i < n; ++i) {
            double total = 0.0, h = 0.0;
            for (std::size_t j = 0; j < lens[i]; ++j) {
                const double w = v[i * n + j];
                total += w;
                if (w > 0) h -= w * std::log(w);
            }
            out.worst_log_sum = std::max(out.worst_log_sum, std::abs(std::log(std::max(total, kRowSumFloor))));
            out.worst_entropy_excess = std::max(out.worst_entropy_excess, h - entropy_cap(lens[i], cfg));
        }
        if (out.worst_log_sum < target) break;
        loss.backward();
        adam_step(params, state, lr * (1.0 - static_cast<double>(step - 1) / max_steps));
    }
    return out;
}

struct Centralization {
    double softmax_mass = 0.0;
    double relu_mass = 0.0;
};

/// Top-p mass of softmax vs normalized ReLU applied to the same Gaussian
/// logits, `rows` rows of length n.
inline Centralization centralization(std::size_t n, std::size_t rows, double stddev, double p, std::uint64_t seed) {
    Rng rng(seed);
    Tensor logits = Tensor::randn({1, rows, n}, rng, stddev);
    const std::vector<std::size_t> lens(rows, n);
    const std::vector<double> grid{p};
    Centralization c;
    c.softmax_mass = top_p_mass({softmax_rows(logits), lens, Activation::Softmax}, grid).mass[0];
    c.relu_mass = top_p_mass({relu(logits), lens, Activation::ReluScaled}, grid).mass[0];
    return c;
}

}  // namespace relulab::testing
