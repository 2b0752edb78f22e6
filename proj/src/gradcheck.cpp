#include "relulab/gradcheck.hpp"

#include <functional>

#include "relulab/attention.hpp"
#include "relulab/memory.hpp"
#include "relulab/model.hpp"
#include "relulab/regularizer.hpp"

namespace relulab {

namespace {

class Suite {
public:
    Suite(std::uint64_t seed, const GradCheckOptions& options) : rng_(seed), options_(options) {}

    // Inputs uniform in [-2r, 2r].
    Tensor leaf(Shape shape, double r = 1.0) { return Tensor::uniform(std::move(shape), rng_, -2.0 * r, 2.0 * r, true); }
    Tensor positive(Shape shape) { return Tensor::uniform(std::move(shape), rng_, 0.5, 2.0, true); }
    Tensor constant(Shape shape) { return Tensor::randn(std::move(shape), rng_); }

    // Scalar loss with a dense, non-uniform upstream gradient.
    std::function<Tensor()> probe(std::function<Tensor()> f, const Shape& out_shape) {
        Tensor w = constant(out_shape);
        return [f = std::move(f), w] { return sum_all(mul(f(), w)); };
    }

    void check(const std::string& name, const std::function<Tensor()>& loss, const std::vector<Tensor>& params) {
        cases.push_back({name, check_gradients(loss, params, options_)});
    }

    void check_probe(const std::string& name, std::function<Tensor()> f, const std::vector<Tensor>& params) {
        const Shape shape = f().shape();
        check(name, probe(std::move(f), shape), params);
    }

    Rng& rng() { return rng_; }
    std::vector<GradCheckCase> cases;

private:
    Rng rng_;
    GradCheckOptions options_;
};

void op_cases(Suite& s) {
    Tensor a = s.leaf({3, 4}), b = s.leaf({4, 5});
    s.check_probe("matmul", [=] { return matmul(a, b); }, {a, b});
    Tensor ba = s.leaf({2, 3, 4}), bb = s.leaf({2, 4, 3});
    s.check_probe("matmul.batched", [=] { return matmul(ba, bb); }, {ba, bb});
    Tensor c = s.leaf({5, 4});
    s.check_probe("matmul_nt", [=] { return matmul_nt(a, c); }, {a, c});
    Tensor bc = s.leaf({2, 5, 4});
    s.check_probe("matmul_nt.batched", [=] { return matmul_nt(ba, bc); }, {ba, bc});

    Tensor x = s.leaf({2, 3, 4}), row = s.leaf({4}), col = s.leaf({3, 1});
    Tensor pos = s.positive({2, 3, 4}), prow = s.positive({4});
    s.check_probe("add.broadcast", [=] { return add(add(x, row), col); }, {x, row, col});
    s.check_probe("sub.broadcast", [=] { return sub(sub(x, row), col); }, {x, row, col});
    s.check_probe("mul.broadcast", [=] { return mul(mul(x, row), col); }, {x, row, col});
    s.check_probe("div.broadcast", [=] { return div(x, prow); }, {x, prow});
    s.check_probe("div.same", [=] { return div(row, pos); }, {row, pos});

    s.check_probe("relu", [=] { return relu(x); }, {x});
    s.check_probe("exp", [=] { return exp(x); }, {x});
    s.check_probe("log", [=] { return log(pos); }, {pos});
    s.check_probe("abs", [=] { return abs(x); }, {x});
    s.check_probe("scale", [=] { return scale(x, -1.7); }, {x});
    s.check_probe("add_scalar", [=] { return add_scalar(x, 0.3); }, {x});
    s.check_probe("max_const", [=] { return max_const(x, 0.25); }, {x});
    s.check_probe("x_log_x", [=] { return x_log_x(pos); }, {pos});

    s.check_probe("softmax_rows", [=] { return softmax_rows(x); }, {x});
    s.check_probe("softmax_rows.temperature", [=] { return softmax_rows(x, nullptr, 0.6); }, {x});
    Tensor sq = s.leaf({2, 4, 4});
    const Tensor cm = causal_mask(4);
    s.check_probe("softmax_rows.causal", [=] { return softmax_rows(sq, &cm); }, {sq});
    Tensor g = s.leaf({4}), bias = s.leaf({4});
    s.check_probe("layer_norm", [=] { return layer_norm(x, g, bias); }, {x, g, bias});

    for (auto kind : {ReduceKind::Sum, ReduceKind::Mean, ReduceKind::Variance}) {
        const std::string k = kind == ReduceKind::Sum ? "sum" : kind == ReduceKind::Mean ? "mean" : "variance";
        s.check_probe("reduce." + k + ".last", [=] { return reduce(x, {2}, kind); }, {x});
        s.check_probe("reduce." + k + ".first", [=] { return reduce(x, {0}, kind); }, {x});
        s.check_probe("reduce." + k + ".middle_last", [=] { return reduce(x, {1, 2}, kind); }, {x});
        s.check("reduce_all." + k, [=] { return reduce_all(mul(x, x), kind); }, {x});
    }

    s.check_probe("reshape", [=] { return reshape(x, {6, 4}); }, {x});
    Tensor m = s.leaf({5, 6});
    s.check_probe("split_heads", [=] { return split_heads(m, 3); }, {m});
    Tensor hm = s.leaf({3, 5, 2});
    s.check_probe("merge_heads", [=] { return merge_heads(hm); }, {hm});
    Tensor table = s.leaf({6, 3});
    const std::vector<std::int64_t> ids{4, 0, 4, 2};
    s.check_probe("gather_rows", [=] { return gather_rows(table, ids); }, {table});
    const std::uint64_t drop_seed = s.rng().next_u64();
    s.check_probe("dropout", [=] {
        Rng r(drop_seed);
        return dropout(x, 0.3, r);
    }, {x});
    Tensor logits = s.leaf({4, 6});
    const std::vector<std::int64_t> targets{1, 5, 0, 3};
    s.check("cross_entropy", [=] { return cross_entropy(logits, targets); }, {logits});
}

std::vector<Tensor> attention_tensors(const AttentionParams& p) {
    std::vector<Tensor> t{p.w_q, p.w_k, p.w_v, p.w_o};
    if (p.ln_gain.defined()) {
        t.push_back(p.ln_gain);
        t.push_back(p.ln_bias);
    }
    return t;
}

void block_cases(Suite& s) {
    const std::size_t d = 8, n = 6, m = 5;
    struct Variant {
        const char* name;
        Activation act;
        bool causal, scale_factor, ln;
    };
    const Variant variants[] = {
        {"softmax", Activation::Softmax, false, true, false},
        {"softmax.causal", Activation::Softmax, true, true, false},
        {"relu", Activation::ReluScaled, false, true, false},
        {"relu.causal", Activation::ReluScaled, true, true, false},
        {"relu.no_scale", Activation::ReluScaled, false, false, false},
        {"relu.output_ln", Activation::ReluScaled, false, true, true},
    };
    for (const auto& v : variants) {
        AttentionConfig cfg;
        cfg.activation = v.act;
        cfg.heads = 2;
        cfg.gamma = 1.3;
        cfg.causal = v.causal;
        cfg.scale_factor = v.scale_factor;
        cfg.output_layer_norm = v.ln;
        AttentionParams p = init_attention(d, cfg, s.rng());
        Tensor x = s.leaf({n, d});
        std::vector<Tensor> params = attention_tensors(p);
        params.push_back(x);
        s.check_probe("attention." + std::string(v.name), [=] { return attend(x, x, p, cfg).output; }, params);
        if (!v.causal) {
            Tensor enc = s.leaf({m, d});
            params.push_back(enc);
            s.check_probe("attention.cross." + std::string(v.name), [=] { return attend(x, enc, p, cfg).output; },
                          params);
        }
    }

    for (MemoryKind kind : {MemoryKind::ReluFfn, MemoryKind::SoftmaxMemory, MemoryKind::SoftmaxMemoryLn}) {
        const MemoryConfig cfg{kind, d, 12, 0.8};
        MemoryParams p = init_memory(cfg, s.rng());
        Tensor x = s.leaf({n, d});
        std::vector<Tensor> params{x, p.keys, p.values};
        for (const Tensor* t : {&p.key_bias, &p.value_bias, &p.ln_gain, &p.ln_bias}) {
            if (t->defined()) params.push_back(*t);
        }
        s.check_probe("memory." + to_string(kind), [=] { return memory_forward(x, p, cfg); }, params);
    }

    // Regularizer on ReLU attention scores, with row sums off 1 and entropy above the cap.
    for (bool causal : {false, true}) {
        AttentionConfig cfg;
        cfg.activation = Activation::ReluScaled;
        cfg.heads = 2;
        cfg.causal = causal;
        AttentionParams p = init_attention(d, cfg, s.rng());
        Tensor x = s.leaf({n, d}, 1.5);
        const RegConfig reg{0.3, 0.7, true};
        s.check(std::string("reg_loss") + (causal ? ".causal" : ""),
                [=] { return reg_loss(attend(x, x, p, cfg).scores, reg); }, {x, p.w_q, p.w_k});
        s.check(std::string("entropy.normalized") + (causal ? ".causal" : ""),
                [=] { return sum_all(entropy(attend(x, x, p, cfg).scores, true)); }, {x, p.w_q, p.w_k});
    }
}

void micro_model_cases(Suite& s) {
    const std::vector<Token> src{3, 5, 4, 7, 6}, tgt{6, 3, 5, 4};
    for (const char* variant : {"vanilla", "reluformer"}) {
        for (bool pre_norm : {true, false}) {
            ModelConfig cfg;
            cfg.d = 8;
            cfg.d_h = 12;
            cfg.heads = 2;
            cfg.enc_layers = 1;
            cfg.dec_layers = 1;
            cfg.vocab = 11;
            cfg.max_len = 8;
            cfg.pre_norm = pre_norm;
            cfg.seed = s.rng().next_u64();
            if (std::string(variant) == "vanilla") {
                cfg = vanilla_variant(cfg);
            } else {
                cfg = reluformer_variant(cfg);
                cfg.reg.loss_weight = 0.5;
            }
            auto model = std::make_shared<Model>(build(cfg));
            const double lambda = cfg.reg.loss_weight;
            auto loss_fn = [=] {
                ForwardResult r = forward(*model, src, tgt);
                return loss(r.logits, tgt, r.reg, cfg.reg.enabled ? lambda : 0.0);
            };
            s.check(std::string("model.") + variant + (pre_norm ? ".pre_norm" : ".post_norm"), loss_fn,
                    model->parameters());
        }
    }
}

}  // namespace

std::vector<GradCheckCase> gradient_suite(std::uint64_t seed, bool micro_only, const GradCheckOptions& options) {
    Suite s(seed, options);
    if (!micro_only) {
        op_cases(s);
        block_cases(s);
    }
    micro_model_cases(s);
    return std::move(s.cases);
}

}  // namespace relulab
