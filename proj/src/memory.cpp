#include "relulab/memory.hpp"

#include <cmath>

namespace relulab {

std::string to_string(MemoryKind kind) {
    switch (kind) {
        case MemoryKind::ReluFfn: return "relu-ffn";
        case MemoryKind::SoftmaxMemory: return "softmax-memory";
        case MemoryKind::SoftmaxMemoryLn: return "softmax-memory-ln";
    }
    return "unknown";
}

MemoryKind memory_kind_from_string(const std::string& name) {
    if (name == "relu-ffn") return MemoryKind::ReluFfn;
    if (name == "softmax-memory") return MemoryKind::SoftmaxMemory;
    if (name == "softmax-memory-ln") return MemoryKind::SoftmaxMemoryLn;
    throw ContractViolation("unknown memory kind '" + name + "'");
}

void validate(const MemoryConfig& cfg) {
    if (cfg.d == 0 || cfg.d_h == 0) throw ContractViolation("memory: d and d_h must be positive");
    if (!(cfg.temperature > 0.0)) throw ContractViolation("memory: temperature must be positive");
}

MemoryParams init_memory(const MemoryConfig& cfg, Rng& rng) {
    validate(cfg);
    const double std = 1.0 / std::sqrt(static_cast<double>(cfg.d));
    MemoryParams p;
    p.keys = Tensor::randn({cfg.d_h, cfg.d}, rng, std, true);
    p.values = Tensor::randn({cfg.d_h, cfg.d}, rng, std, true);
    if (cfg.kind == MemoryKind::ReluFfn) {
        p.key_bias = Tensor::zeros({cfg.d_h}, true);
        p.value_bias = Tensor::zeros({cfg.d}, true);
    }
    if (cfg.kind == MemoryKind::SoftmaxMemoryLn) {
        p.ln_gain = Tensor::full({cfg.d}, 1.0, true);
        p.ln_bias = Tensor::zeros({cfg.d}, true);
    }
    return p;
}

namespace {

void check_slots(const Tensor& x, const MemoryParams& p) {
    if (!p.keys.defined() || !p.values.defined()) throw ContractViolation("memory: missing key/value slots");
    if (p.keys.rank() != 2 || p.values.rank() != 2 || p.keys.shape() != p.values.shape()) {
        throw DimensionError("memory: keys " + shape_str(p.keys.shape()) + " and values " +
                             shape_str(p.values.shape()) + " must both be [d_h x d]");
    }
    if (x.rank() != 2 || x.dim(1) != p.keys.dim(1)) {
        throw DimensionError("memory: input " + shape_str(x.shape()) + " does not match slot width " +
                             std::to_string(p.keys.dim(1)));
    }
}

}  // namespace

Tensor ffn_forward(const Tensor& x, const MemoryParams& p) {
    check_slots(x, p);
    if (!p.key_bias.defined() || !p.value_bias.defined()) throw ContractViolation("ffn: missing bias terms");
    Tensor hidden = relu(add(matmul_nt(x, p.keys), p.key_bias));
    return add(matmul(hidden, p.values), p.value_bias);
}

Tensor memory_scores(const Tensor& x, const MemoryParams& p, const MemoryConfig& cfg) {
    check_slots(x, p);
    if (cfg.kind == MemoryKind::ReluFfn) return relu(add(matmul_nt(x, p.keys), p.key_bias));
    return softmax_rows(matmul_nt(x, p.keys), nullptr, cfg.temperature);
}

Tensor memory_forward(const Tensor& x, const MemoryParams& p, const MemoryConfig& cfg) {
    if (cfg.kind == MemoryKind::ReluFfn) return ffn_forward(x, p);
    Tensor h = matmul(memory_scores(x, p, cfg), p.values);
    if (cfg.kind == MemoryKind::SoftmaxMemoryLn) {
        if (!p.ln_gain.defined() || !p.ln_bias.defined()) throw ContractViolation("memory: missing layer-norm parameters");
        h = layer_norm(h, p.ln_gain, p.ln_bias);
    }
    return h;
}

double output_variance_ratio(const Tensor& block_output, const Tensor& residual_input) {
    if (block_output.shape() != residual_input.shape()) {
        throw DimensionError("variance ratio: " + shape_str(block_output.shape()) + " vs " +
                             shape_str(residual_input.shape()));
    }
    const double denom = reduce_all(residual_input.detach(), ReduceKind::Variance).item();
    if (denom == 0.0) throw ContractViolation("variance ratio: residual has zero variance");
    return reduce_all(block_output.detach(), ReduceKind::Variance).item() / denom;
}

}  // namespace relulab
