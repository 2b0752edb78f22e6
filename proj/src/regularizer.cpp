#include "relulab/regularizer.hpp"

#include <cmath>

namespace relulab {

void validate(const RegConfig& cfg) {
    if (!(cfg.cap_coefficient > 0.0)) throw ContractViolation("regularizer: cap coefficient must be positive");
    if (!(cfg.loss_weight >= 0.0)) throw ContractViolation("regularizer: loss weight must be nonnegative");
}

namespace {

void check_nonnegative(const ScoreDistribution& s) {
    for (double w : s.weights.values()) {
        if (w < 0.0) throw ContractViolation("entropy: negative attention weight " + std::to_string(w));
    }
}

}  // namespace

Tensor entropy(const ScoreDistribution& s, bool normalize) {
    check_nonnegative(s);
    Tensor w = s.weights;
    if (normalize) {
        const Shape& sh = w.shape();
        Tensor totals = reshape(sum(w, {w.rank() - 1}), {sh[0], sh[1], 1});
        // An all-zero row stays all-zero: 0 / floor.
        w = div(w, max_const(totals, 1e-300));
    }
    return scale(sum(x_log_x(w), {w.rank() - 1}), -1.0);
}

double entropy_cap(std::size_t n, const RegConfig& cfg) {
    if (n < 1) throw ContractViolation("entropy_cap: n must be >= 1");
    return cfg.cap_coefficient * std::log(static_cast<double>(n));
}

Tensor reg_loss(const ScoreDistribution& s, const RegConfig& cfg) {
    validate(cfg);
    check_nonnegative(s);
    const std::size_t rows = s.query_count();
    if (s.effective_lengths.size() != rows) throw DimensionError("reg_loss: effective lengths do not match rows");

    const Tensor& w = s.weights;
    Tensor norm_term = abs(log(max_const(sum(w, {w.rank() - 1}), kRowSumFloor)));

    std::vector<double> caps(rows);
    for (std::size_t i = 0; i < rows; ++i) caps[i] = entropy_cap(s.effective_lengths[i], cfg);
    Tensor raw_entropy = scale(sum(x_log_x(w), {w.rank() - 1}), -1.0);
    Tensor margin_term = max_const(sub(raw_entropy, Tensor::from({rows}, std::move(caps))), 0.0);

    return scale(mean_all(add(norm_term, margin_term)), cfg.loss_weight);
}

}  // namespace relulab
