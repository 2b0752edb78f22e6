#include "relulab/attention.hpp"

#include <cmath>

namespace relulab {

std::string to_string(Activation activation) {
    return activation == Activation::Softmax ? "softmax" : "relu-scaled";
}

Activation activation_from_string(const std::string& name) {
    if (name == "softmax") return Activation::Softmax;
    if (name == "relu-scaled" || name == "relu") return Activation::ReluScaled;
    throw ContractViolation("unknown attention activation '" + name + "'");
}

void validate(const AttentionConfig& cfg, std::size_t d) {
    if (cfg.heads == 0 || d % cfg.heads != 0) {
        throw ContractViolation("attention: " + std::to_string(cfg.heads) + " heads do not divide d=" + std::to_string(d));
    }
    if (!(cfg.gamma > 0.0)) throw ContractViolation("attention: gamma must be positive");
    if (!(cfg.temperature > 0.0)) throw ContractViolation("attention: temperature must be positive");
}

AttentionParams init_attention(std::size_t d, const AttentionConfig& cfg, Rng& rng) {
    validate(cfg, d);
    const double std = 1.0 / std::sqrt(static_cast<double>(d));
    AttentionParams p;
    p.w_q = Tensor::randn({d, d}, rng, std, true);
    p.w_k = Tensor::randn({d, d}, rng, std, true);
    p.w_v = Tensor::randn({d, d}, rng, std, true);
    p.w_o = Tensor::randn({d, d}, rng, std, true);
    if (cfg.output_layer_norm) {
        p.ln_gain = Tensor::full({d}, 1.0, true);
        p.ln_bias = Tensor::zeros({d}, true);
    }
    return p;
}

std::vector<std::size_t> effective_lengths(std::size_t n, bool causal) {
    return effective_lengths(n, n, causal);
}

std::vector<std::size_t> effective_lengths(std::size_t n_queries, std::size_t n_keys, bool causal) {
    if (n_queries < 1 || n_keys < 1) throw ContractViolation("effective_lengths: sequence length must be >= 1");
    std::vector<std::size_t> lengths(n_queries, n_keys);
    if (causal) {
        if (n_queries != n_keys) throw ContractViolation("effective_lengths: causal attention needs n_q == n_k");
        for (std::size_t i = 0; i < n_queries; ++i) lengths[i] = i + 1;
    }
    return lengths;
}

Tensor causal_mask(std::size_t n) {
    std::vector<double> m(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) m[i * n + j] = 1.0;
    return Tensor::from({n, n}, std::move(m));
}

Tensor attention_weights(const Tensor& logits, std::span<const std::size_t> lengths, const Tensor* mask,
                         const AttentionConfig& cfg) {
    if (logits.rank() != 3 || lengths.size() != logits.dim(1)) {
        throw DimensionError("attention_weights: logits must be [heads x n_q x n_k] with one length per query");
    }
    const std::size_t n_q = logits.dim(1);
    Tensor weights;
    if (cfg.activation == Activation::Softmax) {
        weights = softmax_rows(logits, mask, cfg.temperature);
    } else {
        weights = relu(logits);
        if (mask) weights = mul(weights, *mask);
        std::vector<double> inv(n_q);
        for (std::size_t i = 0; i < n_q; ++i) {
            const double len_term = cfg.scale_factor ? std::sqrt(static_cast<double>(lengths[i]) / 2.0) : 1.0;
            inv[i] = 1.0 / (cfg.gamma * len_term);
        }
        weights = mul(weights, Tensor::from({n_q, 1}, std::move(inv)));
    }
    return weights;
}

AttentionOutput attend(const Tensor& queries, const Tensor& keys_src, const AttentionParams& params,
                       const AttentionConfig& cfg) {
    if (queries.rank() != 2 || keys_src.rank() != 2 || queries.dim(1) != keys_src.dim(1)) {
        throw DimensionError("attend: queries " + shape_str(queries.shape()) + " and keys " +
                             shape_str(keys_src.shape()) + " must be [n x d] with equal d");
    }
    const std::size_t d = queries.dim(1);
    validate(cfg, d);
    for (const Tensor* w : {&params.w_q, &params.w_k, &params.w_v, &params.w_o}) {
        if (!w->defined() || w->shape() != Shape{d, d}) throw DimensionError("attend: projections must be [d x d]");
    }
    const std::size_t n_q = queries.dim(0);
    const std::size_t n_k = keys_src.dim(0);
    if (cfg.causal && n_q != n_k) throw DimensionError("attend: causal attention needs queries and keys of equal length");

    const std::size_t dh = d / cfg.heads;
    Tensor q = split_heads(matmul(queries, params.w_q), cfg.heads);
    Tensor k = split_heads(matmul(keys_src, params.w_k), cfg.heads);
    Tensor v = split_heads(matmul(keys_src, params.w_v), cfg.heads);
    Tensor logits = scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(dh)));

    auto lengths = effective_lengths(n_q, n_k, cfg.causal);
    Tensor mask;
    if (cfg.causal) mask = causal_mask(n_q);

    Tensor weights = attention_weights(logits, lengths, cfg.causal ? &mask : nullptr, cfg);

    Tensor context = merge_heads(matmul(weights, v));
    Tensor output = matmul(context, params.w_o);
    if (cfg.output_layer_norm) {
        if (!params.ln_gain.defined() || !params.ln_bias.defined()) {
            throw ContractViolation("attend: output_layer_norm set but no layer-norm parameters");
        }
        output = layer_norm(output, params.ln_gain, params.ln_bias);
    }
    return {output, context, ScoreDistribution{weights, std::move(lengths), cfg.activation}};
}

double san_output_variance_probe(std::size_t n, std::size_t trials, Rng& rng, double value_scale) {
    if (n < 1) throw ContractViolation("variance probe: n must be >= 1");
    if (trials < 1000) throw ContractViolation("variance probe: need at least 1000 trials");
    std::vector<double> ys(trials);
    double mean = 0.0;
    for (auto& y : ys) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double x = rng.normal();
            const double v = value_scale * rng.normal();
            if (x > 0.0) acc += x * v;
        }
        y = acc;
        mean += acc;
    }
    mean /= static_cast<double>(trials);
    double var = 0.0;
    for (double y : ys) var += (y - mean) * (y - mean);
    return var / static_cast<double>(trials);
}

}  // namespace relulab
