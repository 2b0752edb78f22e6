#include "relulab/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <openssl/evp.h>

#include "relulab/json_io.hpp"

namespace relulab {

bool ModelConfig::operator==(const ModelConfig& o) const {
    Json a = *this;
    Json b = o;
    return a == b;
}

void validate(const ModelConfig& cfg) {
    if (cfg.d == 0 || cfg.d_h == 0 || cfg.heads == 0 || cfg.enc_layers == 0 || cfg.dec_layers == 0 ||
        cfg.vocab == 0 || cfg.max_len == 0) {
        throw ContractViolation("model config: all sizes must be positive");
    }
    if (cfg.d % cfg.heads != 0) {
        throw ContractViolation("model config: heads=" + std::to_string(cfg.heads) + " does not divide d=" +
                                std::to_string(cfg.d));
    }
    if (cfg.vocab <= static_cast<std::size_t>(kFirstContentToken)) {
        throw ContractViolation("model config: vocab must exceed the reserved tokens");
    }
    if (cfg.dropout < 0.0 || cfg.dropout >= 1.0) throw ContractViolation("model config: dropout must be in [0, 1)");
    AttentionConfig a = cfg.attention;
    a.heads = cfg.heads;
    validate(a, cfg.d);
    validate(cfg.memory_config());
    validate(cfg.reg);
}

ModelConfig vanilla_variant(ModelConfig cfg) {
    cfg.attention.activation = Activation::Softmax;
    cfg.reg.enabled = false;
    return cfg;
}

ModelConfig reluformer_variant(ModelConfig cfg) {
    cfg.attention.activation = Activation::ReluScaled;
    cfg.attention.scale_factor = true;
    cfg.reg.enabled = true;
    return cfg;
}

// ---- Model ----------------------------------------------------------------

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) { cfg_.attention.heads = cfg_.heads; }

void Model::register_parameter(std::string name, Tensor t) { params_.emplace_back(std::move(name), std::move(t)); }

std::vector<Tensor> Model::parameters() const {
    std::vector<Tensor> out;
    out.reserve(params_.size());
    for (const auto& [name, t] : params_) out.push_back(t);
    return out;
}

std::size_t Model::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.numel();
    return n;
}

void Model::zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
}

void Model::load_parameters(const std::vector<NamedTensor>& values) {
    if (values.size() != params_.size()) {
        throw ContractViolation("load_parameters: expected " + std::to_string(params_.size()) + " tensors, got " +
                                std::to_string(values.size()));
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& [name, dst] = params_[i];
        const auto& [src_name, src] = values[i];
        if (name != src_name) throw ContractViolation("load_parameters: expected '" + name + "', got '" + src_name + "'");
        if (dst.shape() != src.shape()) {
            throw DimensionError("load_parameters: '" + name + "' is " + shape_str(dst.shape()) + ", source is " +
                                 shape_str(src.shape()));
        }
        auto v = dst.mutable_values();
        std::copy(src.values().begin(), src.values().end(), v.begin());
    }
}

Tensor sinusoidal_positions(std::size_t n, std::size_t d) {
    std::vector<double> table(n * d);
    for (std::size_t pos = 0; pos < n; ++pos) {
        for (std::size_t i = 0; i < d; i += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
            table[pos * d + i] = std::sin(static_cast<double>(pos) * freq);
            if (i + 1 < d) table[pos * d + i + 1] = std::cos(static_cast<double>(pos) * freq);
        }
    }
    return Tensor::from({n, d}, std::move(table));
}

namespace {

LayerNormParams make_norm(std::size_t d) { return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true)}; }

}  // namespace

Model build(const ModelConfig& cfg, Rng& rng) {
    validate(cfg);
    Model model(cfg);
    const std::size_t d = cfg.d;
    const double std = 1.0 / std::sqrt(static_cast<double>(d));

    auto add_norm = [&](const std::string& name, const LayerNormParams& n) {
        model.register_parameter(name + ".gain", n.gain);
        model.register_parameter(name + ".bias", n.bias);
    };
    auto add_attention = [&](const std::string& name, const AttentionParams& a) {
        model.register_parameter(name + ".w_q", a.w_q);
        model.register_parameter(name + ".w_k", a.w_k);
        model.register_parameter(name + ".w_v", a.w_v);
        model.register_parameter(name + ".w_o", a.w_o);
        if (a.ln_gain.defined()) {
            model.register_parameter(name + ".ln.gain", a.ln_gain);
            model.register_parameter(name + ".ln.bias", a.ln_bias);
        }
    };
    auto add_memory = [&](const std::string& name, const MemoryParams& m) {
        model.register_parameter(name + ".keys", m.keys);
        model.register_parameter(name + ".values", m.values);
        if (m.key_bias.defined()) {
            model.register_parameter(name + ".key_bias", m.key_bias);
            model.register_parameter(name + ".value_bias", m.value_bias);
        }
        if (m.ln_gain.defined()) {
            model.register_parameter(name + ".ln.gain", m.ln_gain);
            model.register_parameter(name + ".ln.bias", m.ln_bias);
        }
    };

    AttentionConfig attn = cfg.attention;
    attn.heads = cfg.heads;
    const MemoryConfig mem = cfg.memory_config();

    model.embedding = Tensor::randn({cfg.vocab, d}, rng, std, true);
    model.register_parameter("embedding", model.embedding);
    model.positions = sinusoidal_positions(cfg.max_len, d);

    for (std::size_t l = 0; l < cfg.enc_layers; ++l) {
        const std::string p = "enc" + std::to_string(l);
        EncoderLayer layer;
        layer.attn_norm = make_norm(d);
        layer.self_attn = init_attention(d, attn, rng);
        layer.ffn_norm = make_norm(d);
        layer.ffn = init_memory(mem, rng);
        add_norm(p + ".attn_norm", layer.attn_norm);
        add_attention(p + ".self", layer.self_attn);
        add_norm(p + ".ffn_norm", layer.ffn_norm);
        add_memory(p + ".ffn", layer.ffn);
        model.encoder.push_back(std::move(layer));
    }
    for (std::size_t l = 0; l < cfg.dec_layers; ++l) {
        const std::string p = "dec" + std::to_string(l);
        DecoderLayer layer;
        layer.self_norm = make_norm(d);
        layer.self_attn = init_attention(d, attn, rng);
        layer.cross_norm = make_norm(d);
        layer.cross_attn = init_attention(d, attn, rng);
        layer.ffn_norm = make_norm(d);
        layer.ffn = init_memory(mem, rng);
        add_norm(p + ".self_norm", layer.self_norm);
        add_attention(p + ".self", layer.self_attn);
        add_norm(p + ".cross_norm", layer.cross_norm);
        add_attention(p + ".cross", layer.cross_attn);
        add_norm(p + ".ffn_norm", layer.ffn_norm);
        add_memory(p + ".ffn", layer.ffn);
        model.decoder.push_back(std::move(layer));
    }
    model.encoder_norm = make_norm(d);
    model.decoder_norm = make_norm(d);
    add_norm("enc.final_norm", model.encoder_norm);
    add_norm("dec.final_norm", model.decoder_norm);
    model.out_weight = Tensor::randn({d, cfg.vocab}, rng, std, true);
    model.out_bias = Tensor::zeros({cfg.vocab}, true);
    model.register_parameter("out.weight", model.out_weight);
    model.register_parameter("out.bias", model.out_bias);
    return model;
}

Model build(const ModelConfig& cfg) {
    Rng rng(cfg.seed);
    return build(cfg, rng);
}

std::size_t expected_parameter_count(const ModelConfig& cfg) {
    const std::size_t d = cfg.d, dh = cfg.d_h;
    const std::size_t norm = 2 * d;
    std::size_t attn = 4 * d * d;
    if (cfg.attention.output_layer_norm) attn += 2 * d;
    std::size_t ffn = 2 * dh * d;
    if (cfg.memory_kind == MemoryKind::ReluFfn) ffn += dh + d;
    if (cfg.memory_kind == MemoryKind::SoftmaxMemoryLn) ffn += 2 * d;
    const std::size_t enc_layer = norm + attn + norm + ffn;
    const std::size_t dec_layer = 3 * norm + 2 * attn + ffn;
    return cfg.vocab * d + cfg.enc_layers * enc_layer + cfg.dec_layers * dec_layer + 2 * norm + d * cfg.vocab +
           cfg.vocab;
}

// ---- forward --------------------------------------------------------------

namespace {

Tensor embed(const Model& model, std::span<const Token> ids) {
    const std::size_t n = ids.size();
    const std::size_t d = model.config().d;
    Tensor x = scale(gather_rows(model.embedding, ids), std::sqrt(static_cast<double>(d)));
    const auto table = model.positions.values();
    std::vector<double> pos(table.begin(), table.begin() + static_cast<std::ptrdiff_t>(n * d));
    return add(x, Tensor::from({n, d}, std::move(pos)));
}

Tensor norm(const Tensor& x, const LayerNormParams& p) { return layer_norm(x, p.gain, p.bias); }

struct Sublayer {
    const Model& model;
    const ForwardOptions& options;

    Tensor residual(const Tensor& x, const Tensor& branch) const {
        Tensor b = branch;
        const double p = model.config().dropout;
        if (p > 0.0 && options.dropout_rng) b = dropout(b, p, *options.dropout_rng);
        return add(x, b);
    }
};

}  // namespace

ForwardResult forward(const Model& model, std::span<const Token> src, std::span<const Token> tgt,
                      const ForwardOptions& options) {
    const ModelConfig& cfg = model.config();
    if (src.empty() || tgt.empty()) throw ContractViolation("forward: empty source or target");
    if (src.size() > cfg.max_len || tgt.size() > cfg.max_len) {
        throw ContractViolation("forward: sequence longer than max_len=" + std::to_string(cfg.max_len));
    }
    for (auto seq : {src, tgt}) {
        for (Token t : seq) {
            if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab) {
                throw ContractViolation("forward: token " + std::to_string(t) + " outside vocabulary of " +
                                        std::to_string(cfg.vocab));
            }
        }
    }

    ForwardResult result;
    Sublayer sub{model, options};
    AttentionConfig self_cfg = cfg.attention;
    self_cfg.heads = cfg.heads;
    self_cfg.causal = false;
    AttentionConfig causal_cfg = self_cfg;
    causal_cfg.causal = true;
    const MemoryConfig mem_cfg = cfg.memory_config();

    auto run_memory = [&](const std::string& site, const Tensor& h, const LayerNormParams& n, const MemoryParams& p) {
        Tensor out;
        if (cfg.pre_norm) {
            Tensor input = norm(h, n);
            Tensor block = memory_forward(input, p, mem_cfg);
            if (options.collect_memory) {
                result.memory.push_back({site, h, block, memory_scores(input, p, mem_cfg)});
            }
            out = sub.residual(h, block);
        } else {
            Tensor block = memory_forward(h, p, mem_cfg);
            if (options.collect_memory) result.memory.push_back({site, h, block, memory_scores(h, p, mem_cfg)});
            out = norm(sub.residual(h, block), n);
        }
        return out;
    };
    auto run_attention = [&](const std::string& site, const Tensor& h, const Tensor* memory, const LayerNormParams& n,
                             const AttentionParams& p, const AttentionConfig& acfg) {
        const Tensor q = cfg.pre_norm ? norm(h, n) : h;
        const Tensor& kv = memory ? *memory : q;
        AttentionOutput a = attend(q, kv, p, acfg);
        result.diagnostics.push_back({site, a.scores});
        Tensor out = sub.residual(h, a.output);
        return cfg.pre_norm ? out : norm(out, n);
    };

    Tensor h = embed(model, src);
    for (std::size_t l = 0; l < model.encoder.size(); ++l) {
        const auto& layer = model.encoder[l];
        const std::string p = "enc" + std::to_string(l);
        h = run_attention(p + ".self", h, nullptr, layer.attn_norm, layer.self_attn, self_cfg);
        h = run_memory(p + ".ffn", h, layer.ffn_norm, layer.ffn);
    }
    const Tensor encoded = norm(h, model.encoder_norm);

    std::vector<Token> dec_in(tgt.size());
    dec_in[0] = kBosToken;
    std::copy(tgt.begin(), tgt.end() - 1, dec_in.begin() + 1);
    Tensor y = embed(model, dec_in);
    for (std::size_t l = 0; l < model.decoder.size(); ++l) {
        const auto& layer = model.decoder[l];
        const std::string p = "dec" + std::to_string(l);
        y = run_attention(p + ".self", y, nullptr, layer.self_norm, layer.self_attn, causal_cfg);
        y = run_attention(p + ".cross", y, &encoded, layer.cross_norm, layer.cross_attn, self_cfg);
        y = run_memory(p + ".ffn", y, layer.ffn_norm, layer.ffn);
    }
    y = norm(y, model.decoder_norm);
    result.logits = add(matmul(y, model.out_weight), model.out_bias);

    Tensor reg = Tensor::scalar(0.0);
    if (cfg.reg.enabled && cfg.attention.activation == Activation::ReluScaled) {
        RegConfig unit = cfg.reg;
        unit.loss_weight = 1.0;
        for (const auto& site : result.diagnostics) reg = add(reg, reg_loss(site.scores, unit));
    }
    result.reg = reg;
    return result;
}

Tensor loss(const Tensor& logits, std::span<const Token> gold, const Tensor& reg, double lambda) {
    Tensor task = cross_entropy(logits, gold);
    if (lambda == 0.0) return task;
    return add(task, scale(reg, lambda));
}

std::size_t correct_tokens(const Tensor& logits, std::span<const Token> gold) {
    const std::size_t n = logits.dim(0), v = logits.dim(1);
    if (gold.size() != n) throw DimensionError("correct_tokens: gold length differs from logits rows");
    const auto vals = logits.values();
    std::size_t correct = 0;
    for (std::size_t r = 0; r < n; ++r) {
        const auto row = vals.subspan(r * v, v);
        const auto best = static_cast<Token>(std::max_element(row.begin(), row.end()) - row.begin());
        if (best == gold[r]) ++correct;
    }
    return correct;
}

std::vector<Token> greedy_decode(const Model& model, std::span<const Token> src, std::size_t length) {
    NoGradGuard guard;
    std::vector<Token> out;
    std::vector<Token> prefix{kBosToken};
    const std::size_t v = model.config().vocab;
    for (std::size_t step = 0; step < length; ++step) {
        // The last logits row depends only on [BOS, out...]; the placeholder is never read.
        std::vector<Token> tgt = out;
        tgt.push_back(kPadToken);
        ForwardResult r = forward(model, src, tgt);
        const auto row = r.logits.values().subspan(step * v, v);
        out.push_back(static_cast<Token>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
    return out;
}

// ---- checkpoints ----------------------------------------------------------

namespace {

constexpr int kCheckpointVersion = 1;

std::string encode_doubles(std::span<const double> values) {
    std::string raw(values.size() * sizeof(double), '\0');
    for (std::size_t i = 0; i < values.size(); ++i) {
        std::uint64_t bits;
        std::memcpy(&bits, &values[i], sizeof bits);
        for (int b = 0; b < 8; ++b) raw[i * 8 + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
    }
    std::string out(4 * ((raw.size() + 2) / 3) + 1, '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                  reinterpret_cast<const unsigned char*>(raw.data()), static_cast<int>(raw.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

std::vector<double> decode_doubles(const std::string& text, std::size_t count) {
    std::string raw(3 * (text.size() / 4) + 3, '\0');
    const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(raw.data()),
                                  reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
    if (n < 0) throw ContractViolation("checkpoint: malformed base64 payload");
    // EVP_DecodeBlock keeps the padding bytes; the expected count decides.
    if (static_cast<std::size_t>(n) < count * 8) throw ContractViolation("checkpoint: tensor payload too short");
    std::vector<double> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(raw[i * 8 + b])) << (8 * b);
        std::memcpy(&out[i], &bits, sizeof bits);
    }
    return out;
}

Json tensor_json(const std::string& name, const Tensor& t) {
    return Json{{"name", name}, {"shape", t.shape()}, {"data", encode_doubles(t.values())}};
}

Json moment_json(const std::vector<std::vector<double>>& buffers) {
    Json arr = Json::array();
    for (const auto& b : buffers) arr.push_back(encode_doubles(b));
    return arr;
}

std::vector<std::vector<double>> moments_from_json(const Json& arr, const std::vector<NamedTensor>& params) {
    if (!arr.is_array() || arr.size() != params.size()) throw ContractViolation("checkpoint: optimizer state size mismatch");
    std::vector<std::vector<double>> out;
    for (std::size_t i = 0; i < params.size(); ++i) {
        out.push_back(decode_doubles(arr[i].get<std::string>(), params[i].second.numel()));
    }
    return out;
}

}  // namespace

Checkpoint make_checkpoint(const Model& model, const AdamState& optimizer, std::uint64_t step) {
    Checkpoint c;
    c.config = model.config();
    for (const auto& [name, t] : model.named_parameters()) c.parameters.emplace_back(name, t.clone());
    c.optimizer = optimizer;
    c.step = step;
    return c;
}

Model restore_model(const Checkpoint& checkpoint) {
    Model model = build(checkpoint.config);
    model.load_parameters(checkpoint.parameters);
    return model;
}

std::string serialize_checkpoint(const Checkpoint& c) {
    Json params = Json::array();
    for (const auto& [name, t] : c.parameters) params.push_back(tensor_json(name, t));
    Json doc{{"format", "relulab-checkpoint"},
             {"version", kCheckpointVersion},
             {"config", c.config},
             {"step", c.step},
             {"parameters", params},
             {"optimizer",
              Json{{"step", c.optimizer.step},
                   {"first_moment", moment_json(c.optimizer.first_moment)},
                   {"second_moment", moment_json(c.optimizer.second_moment)}}}};
    return doc.dump(1);
}

Checkpoint deserialize_checkpoint(const std::string& text) {
    Json doc;
    try {
        doc = Json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ContractViolation(std::string("checkpoint: invalid JSON: ") + e.what());
    }
    if (doc.value("format", "") != "relulab-checkpoint") throw ContractViolation("checkpoint: not a relulab checkpoint");
    if (doc.value("version", 0) != kCheckpointVersion) {
        throw ContractViolation("checkpoint: unsupported version " + doc.value("version", Json()).dump());
    }
    Checkpoint c;
    c.config = doc.at("config").get<ModelConfig>();
    c.step = doc.at("step").get<std::uint64_t>();
    for (const auto& p : doc.at("parameters")) {
        Shape shape = p.at("shape").get<Shape>();
        auto values = decode_doubles(p.at("data").get<std::string>(), shape_numel(shape));
        c.parameters.emplace_back(p.at("name").get<std::string>(), Tensor::from(std::move(shape), std::move(values)));
    }
    const Json& opt = doc.at("optimizer");
    c.optimizer.step = opt.at("step").get<std::uint64_t>();
    if (!opt.at("first_moment").empty() || !opt.at("second_moment").empty()) {
        c.optimizer.first_moment = moments_from_json(opt.at("first_moment"), c.parameters);
        c.optimizer.second_moment = moments_from_json(opt.at("second_moment"), c.parameters);
    }
    return c;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint to " + path);
    out << serialize_checkpoint(checkpoint);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ContractViolation("cannot read checkpoint " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return deserialize_checkpoint(buf.str());
}

}  // namespace relulab
