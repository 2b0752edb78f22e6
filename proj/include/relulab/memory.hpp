#pragma once

#include <cstddef>
#include <string>

#include "relulab/rng.hpp"
#include "relulab/tensor.hpp"

namespace relulab {

/// Which block sits in the feed-forward slot of a layer.
enum class MemoryKind {
    ReluFfn,          // ReLU(x W1^T + b1) W2 + b2
    SoftmaxMemory,    // Softmax(x K^T / t) V
    SoftmaxMemoryLn,  // LN(Softmax(x K^T / t) V) with its own gain and bias
};

std::string to_string(MemoryKind kind);
MemoryKind memory_kind_from_string(const std::string& name);

struct MemoryConfig {
    MemoryKind kind = MemoryKind::ReluFfn;
    std::size_t d = 64;
    std::size_t d_h = 128;
    double temperature = 1.0;
};

/// Slot matrices are [d_h x d]: row i of `keys` is key i (W1 row for the
/// FFN), row i of `values` is value i (W2 row). Biases exist only for the
/// FFN; the layer-norm pair only for SoftmaxMemoryLn.
struct MemoryParams {
    Tensor keys;
    Tensor values;
    Tensor key_bias;    // [d_h], ReluFfn only
    Tensor value_bias;  // [d], ReluFfn only
    Tensor ln_gain;     // [d], SoftmaxMemoryLn only
    Tensor ln_bias;     // [d], SoftmaxMemoryLn only
};

void validate(const MemoryConfig& cfg);

/// Weights ~ N(0, 1/d), biases 0, LN gain 1 and bias 0.
MemoryParams init_memory(const MemoryConfig& cfg, Rng& rng);

/// ReLU(x W1^T + b1) W2 + b2 for x [n x d].
Tensor ffn_forward(const Tensor& x, const MemoryParams& p);

/// Dispatches on cfg.kind; the softmax kinds compute Softmax(x K^T / t) V,
/// followed by layer norm for SoftmaxMemoryLn.
Tensor memory_forward(const Tensor& x, const MemoryParams& p, const MemoryConfig& cfg);

/// Slot activation scores [n x d_h]: ReLU(x W1^T + b1) for the FFN, the
/// softmax distribution for the memory kinds.
Tensor memory_scores(const Tensor& x, const MemoryParams& p, const MemoryConfig& cfg);

/// Var(block_output) / Var(residual_input), each over all entries (1/N).
double output_variance_ratio(const Tensor& block_output, const Tensor& residual_input);

}  // namespace relulab
