#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "relulab/attention.hpp"
#include "relulab/memory.hpp"
#include "relulab/optim.hpp"
#include "relulab/regularizer.hpp"
#include "relulab/rng.hpp"
#include "relulab/tensor.hpp"

namespace relulab {

using Token = std::int64_t;

// Reserved vocabulary entries; task content starts at kFirstContentToken.
inline constexpr Token kPadToken = 0;
inline constexpr Token kBosToken = 1;
inline constexpr Token kSepToken = 2;
inline constexpr Token kFirstContentToken = 3;

struct ModelConfig {
    std::size_t d = 64;
    std::size_t d_h = 128;
    std::size_t heads = 2;
    std::size_t enc_layers = 2;
    std::size_t dec_layers = 2;
    std::size_t vocab = 32;
    std::size_t max_len = 256;
    AttentionConfig attention;  // heads follows `heads`; causal is set per site
    MemoryKind memory_kind = MemoryKind::ReluFfn;
    double memory_temperature = 1.0;
    RegConfig reg;
    bool pre_norm = true;
    double dropout = 0.0;
    std::uint64_t seed = 1;

    MemoryConfig memory_config() const { return {memory_kind, d, d_h, memory_temperature}; }
    bool operator==(const ModelConfig&) const;
};

void validate(const ModelConfig& cfg);

/// Softmax attention, no regularizer.
ModelConfig vanilla_variant(ModelConfig cfg);
/// ReLU attention with the length scale factor and the regularizer.
ModelConfig reluformer_variant(ModelConfig cfg);

struct LayerNormParams {
    Tensor gain;
    Tensor bias;
};

struct EncoderLayer {
    LayerNormParams attn_norm;
    AttentionParams self_attn;
    LayerNormParams ffn_norm;
    MemoryParams ffn;
};

struct DecoderLayer {
    LayerNormParams self_norm;
    AttentionParams self_attn;
    LayerNormParams cross_norm;
    AttentionParams cross_attn;
    LayerNormParams ffn_norm;
    MemoryParams ffn;
};

using NamedTensor = std::pair<std::string, Tensor>;

/// Encoder-decoder Transformer with a shared source/target embedding and
/// sinusoidal positions.
class Model {
public:
    explicit Model(ModelConfig cfg);

    const ModelConfig& config() const { return cfg_; }

    /// Every trainable tensor, in a fixed order with stable names.
    const std::vector<NamedTensor>& named_parameters() const { return params_; }
    std::vector<Tensor> parameters() const;
    std::size_t parameter_count() const;
    void zero_grad();

    /// Replaces parameter values by name; names and shapes must match exactly.
    void load_parameters(const std::vector<NamedTensor>& values);

    Tensor embedding;   // [vocab x d]
    Tensor positions;   // [max_len x d], constant
    std::vector<EncoderLayer> encoder;
    std::vector<DecoderLayer> decoder;
    LayerNormParams encoder_norm;
    LayerNormParams decoder_norm;
    Tensor out_weight;  // [d x vocab]
    Tensor out_bias;    // [vocab]

private:
    friend Model build(const ModelConfig& cfg, Rng& rng);
    void register_parameter(std::string name, Tensor t);

    ModelConfig cfg_;
    std::vector<NamedTensor> params_;
};

/// Deterministic initialization: matrices ~ N(0, 1/d), biases 0, LN gain 1.
Model build(const ModelConfig& cfg, Rng& rng);
/// Same, seeded from cfg.seed.
Model build(const ModelConfig& cfg);

/// Closed-form parameter count of build(cfg).
std::size_t expected_parameter_count(const ModelConfig& cfg);

/// Sinusoidal position table [n x d].
Tensor sinusoidal_positions(std::size_t n, std::size_t d);

struct SiteScores {
    std::string site;  // "enc0.self", "dec1.cross", ...
    ScoreDistribution scores;
};

/// Residual input and output of one feed-forward/memory block.
struct MemoryProbe {
    std::string site;  // "enc0.ffn", ...
    Tensor residual_input;  // [n x d], residual stream entering the block
    Tensor block_output;    // [n x d]
    Tensor slot_scores;     // [n x d_h]
};

struct ForwardOptions {
    Rng* dropout_rng = nullptr;  // required when cfg.dropout > 0 and training
    bool collect_memory = false;
};

struct ForwardResult {
    Tensor logits;  // [n_tgt x vocab]
    Tensor reg;     // scalar, unweighted sum of reg_loss over ReLU attention sites
    std::vector<SiteScores> diagnostics;
    std::vector<MemoryProbe> memory;
};

/// Teacher-forced pass: the decoder reads [BOS, tgt[0..n-2]] and row i of
/// the logits predicts tgt[i].
ForwardResult forward(const Model& model, std::span<const Token> src, std::span<const Token> tgt,
                      const ForwardOptions& options = {});

/// Mean token cross-entropy + lambda * reg.
Tensor loss(const Tensor& logits, std::span<const Token> gold, const Tensor& reg, double lambda);

/// Number of rows whose argmax equals the gold token.
std::size_t correct_tokens(const Tensor& logits, std::span<const Token> gold);

/// Greedy decoding of `length` tokens.
std::vector<Token> greedy_decode(const Model& model, std::span<const Token> src, std::size_t length);

// ---- Checkpoints ------------------------------------------------------------

struct Checkpoint {
    ModelConfig config;
    std::vector<NamedTensor> parameters;
    AdamState optimizer;
    std::uint64_t step = 0;
};

Checkpoint make_checkpoint(const Model& model, const AdamState& optimizer, std::uint64_t step);
Model restore_model(const Checkpoint& checkpoint);

/// JSON document; tensors are base64 of little-endian IEEE-754 float64.
std::string serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(const std::string& text);
void save_checkpoint(const Checkpoint& checkpoint, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace relulab
