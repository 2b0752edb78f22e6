#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "relulab/rng.hpp"
#include "relulab/tensor.hpp"

namespace relulab {

enum class Activation {
    Softmax,     // softmax over visible keys
    ReluScaled,  // ReLU(logit) / (gamma * sqrt(n_i / 2)) over visible keys
};

std::string to_string(Activation activation);
Activation activation_from_string(const std::string& name);

struct AttentionConfig {
    Activation activation = Activation::Softmax;
    std::size_t heads = 1;
    double gamma = 1.0;
    bool causal = false;
    double temperature = 1.0;
    // ReluScaled: when false, rows are divided by gamma only (no length term).
    bool scale_factor = true;
    // Layer norm on the projected output (LN-after-attention ablation).
    bool output_layer_norm = false;
};

void validate(const AttentionConfig& cfg, std::size_t d);

struct AttentionParams {
    Tensor w_q, w_k, w_v, w_o;  // [d x d]
    Tensor ln_gain, ln_bias;    // [d], only with output_layer_norm
};

/// Projections ~ N(0, 1/d).
AttentionParams init_attention(std::size_t d, const AttentionConfig& cfg, Rng& rng);

/// Per-head attention weights over keys.
///
/// Row i sees keys [0, effective_lengths[i]); entries beyond it are exactly 0.
struct ScoreDistribution {
    Tensor weights;  // [heads x n_q x n_k]
    std::vector<std::size_t> effective_lengths;
    Activation kind = Activation::Softmax;

    std::size_t heads() const { return weights.dim(0); }
    std::size_t query_count() const { return weights.dim(1); }
    std::size_t key_count() const { return weights.dim(2); }
};

struct AttentionOutput {
    Tensor output;   // [n_q x d], after W_O (and layer norm if configured)
    Tensor context;  // [n_q x d], heads concatenated, before W_O
    ScoreDistribution scores;
};

/// Turns logits [heads x n_q x n_k] into weights under cfg's activation.
/// `mask` is [n_q x n_k] 0/1 or null.
Tensor attention_weights(const Tensor& logits, std::span<const std::size_t> lengths, const Tensor* mask,
                         const AttentionConfig& cfg);

/// Multi-head attention of `queries` [n_q x d] over `keys_src` [n_k x d].
/// Per head of width d/h the logits are Q K^T / sqrt(d/h).
AttentionOutput attend(const Tensor& queries, const Tensor& keys_src, const AttentionParams& params,
                       const AttentionConfig& cfg);

/// Visible key count per query: causal -> 1..n, otherwise n everywhere.
std::vector<std::size_t> effective_lengths(std::size_t n, bool causal);
/// Cross-attention form: every one of n_queries rows sees all n_keys keys
/// unless causal (which requires n_queries == n_keys).
std::vector<std::size_t> effective_lengths(std::size_t n_queries, std::size_t n_keys, bool causal);

/// [n x n] lower-triangular 0/1 mask (1 = visible).
Tensor causal_mask(std::size_t n);

/// Empirical variance of y = sum_i ReLU(x_i) v_i with x_i ~ N(0,1) and
/// v_i ~ N(0, value_scale^2), over `trials` independent draws.
double san_output_variance_probe(std::size_t n, std::size_t trials, Rng& rng, double value_scale = 1.0);

}  // namespace relulab
