#include "relulab/optim.hpp"

#include <algorithm>
#include <cmath>

namespace relulab {

AdamState make_adam_state(std::span<const Tensor> params) {
    AdamState state;
    for (const auto& p : params) {
        state.first_moment.emplace_back(p.numel(), 0.0);
        state.second_moment.emplace_back(p.numel(), 0.0);
    }
    return state;
}

void adam_step(std::span<Tensor> params, AdamState& state, double lr, const AdamConfig& cfg) {
    if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()) {
        throw DimensionError("adam: state holds " + std::to_string(state.first_moment.size()) + " buffers for " +
                             std::to_string(params.size()) + " parameters");
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double correct1 = 1.0 - std::pow(cfg.beta1, t);
    const double correct2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        auto& m = state.first_moment[i];
        auto& v = state.second_moment[i];
        if (m.size() != p.numel() || v.size() != p.numel()) {
            throw DimensionError("adam: moment buffer size differs from parameter " + std::to_string(i));
        }
        if (!p.has_grad()) continue;
        const auto g = p.grad();
        auto w = p.mutable_values();
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            const double m_hat = m[j] / correct1;
            const double v_hat = v[j] / correct2;
            w[j] -= lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
        }
    }
}

double LrSchedule::at(std::uint64_t step) const {
    const double t = static_cast<double>(std::max<std::uint64_t>(step, 1));
    if (warmup == 0) return base_lr / std::sqrt(t);
    const double w = static_cast<double>(warmup);
    return base_lr * std::min(t / w, std::sqrt(w / t));
}

}  // namespace relulab
