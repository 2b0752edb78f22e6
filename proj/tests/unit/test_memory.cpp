#include <cmath>
#include <vector>

#include "doctest.h"
#include "relulab/memory.hpp"

using namespace relulab;

namespace {

MemoryParams params_for(MemoryKind kind, std::size_t d, std::size_t dh, std::uint64_t seed) {
    Rng rng(seed);
    return init_memory({kind, d, dh, 1.0}, rng);
}

// out[i][c] = sum_s ReLU(sum_k x[i][k] W1[s][k] + b1[s]) W2[s][c] + b2[c]
std::vector<double> ffn_oracle(const Tensor& x, const MemoryParams& p) {
    const std::size_t n = x.dim(0), d = x.dim(1), dh = p.keys.dim(0);
    std::vector<double> out(n * d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t s = 0; s < dh; ++s) {
            double h = p.key_bias.values()[s];
            for (std::size_t k = 0; k < d; ++k) h += x.at({i, k}) * p.keys.at({s, k});
            if (h <= 0) continue;
            for (std::size_t c = 0; c < d; ++c) out[i * d + c] += h * p.values.at({s, c});
        }
        for (std::size_t c = 0; c < d; ++c) out[i * d + c] += p.value_bias.values()[c];
    }
    return out;
}

std::vector<double> softmax_memory_oracle(const Tensor& x, const MemoryParams& p, double t) {
    const std::size_t n = x.dim(0), d = x.dim(1), dh = p.keys.dim(0);
    std::vector<double> out(n * d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> logit(dh);
        double mx = -1e300;
        for (std::size_t s = 0; s < dh; ++s) {
            double v = 0;
            for (std::size_t k = 0; k < d; ++k) v += x.at({i, k}) * p.keys.at({s, k});
            logit[s] = v / t;
            mx = std::max(mx, logit[s]);
        }
        double z = 0;
        for (auto& l : logit) z += (l = std::exp(l - mx));
        for (std::size_t s = 0; s < dh; ++s)
            for (std::size_t c = 0; c < d; ++c) out[i * d + c] += logit[s] / z * p.values.at({s, c});
    }
    return out;
}

void check_close(std::span<const double> a, const std::vector<double>& b, double tol) {
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < b.size(); ++i) CHECK(std::abs(a[i] - b[i]) < tol);
}

}  // namespace

TEST_CASE("memory kind names round-trip") {
    for (auto k : {MemoryKind::ReluFfn, MemoryKind::SoftmaxMemory, MemoryKind::SoftmaxMemoryLn}) {
        CHECK(memory_kind_from_string(to_string(k)) == k);
    }
    CHECK_THROWS_AS(memory_kind_from_string("gelu"), ContractViolation);
    CHECK_THROWS_AS(validate(MemoryConfig{MemoryKind::ReluFfn, 8, 0, 1.0}), ContractViolation);
    CHECK_THROWS_AS(validate(MemoryConfig{MemoryKind::SoftmaxMemory, 8, 4, 0.0}), ContractViolation);
}

TEST_CASE("init shapes and which tensors exist per kind") {
    auto f = params_for(MemoryKind::ReluFfn, 8, 16, 1);
    CHECK(f.keys.shape() == Shape{16, 8});
    CHECK(f.values.shape() == Shape{16, 8});
    CHECK(f.key_bias.shape() == Shape{16});
    CHECK(f.value_bias.shape() == Shape{8});
    CHECK_FALSE(f.ln_gain.defined());
    auto m = params_for(MemoryKind::SoftmaxMemory, 8, 16, 1);
    CHECK_FALSE(m.key_bias.defined());
    CHECK_FALSE(m.ln_gain.defined());
    auto l = params_for(MemoryKind::SoftmaxMemoryLn, 8, 16, 1);
    CHECK(l.ln_gain.shape() == Shape{8});
    for (double g : l.ln_gain.values()) CHECK(g == 1.0);
}

TEST_CASE("ffn_forward") {
    Rng rng(3);
    SUBCASE("zero second layer gives zero output") {
        auto p = params_for(MemoryKind::ReluFfn, 6, 10, 2);
        std::fill(p.values.mutable_values().begin(), p.values.mutable_values().end(), 0.0);
        Tensor y = ffn_forward(Tensor::randn({4, 6}, rng), p);
        for (double v : y.values()) CHECK(v == 0.0);
    }
    SUBCASE("all-negative pre-activations give b2") {
        auto p = params_for(MemoryKind::ReluFfn, 6, 10, 2);
        for (auto& b : p.key_bias.mutable_values()) b = -1e3;
        for (std::size_t c = 0; c < 6; ++c) p.value_bias.mutable_values()[c] = 0.1 * static_cast<double>(c);
        Tensor y = ffn_forward(Tensor::randn({3, 6}, rng), p);
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t c = 0; c < 6; ++c) CHECK(y.at({i, c}) == 0.1 * static_cast<double>(c));
    }
    SUBCASE("matches the scalar oracle") {
        auto p = params_for(MemoryKind::ReluFfn, 8, 16, 4);
        for (auto& b : p.key_bias.mutable_values()) b = rng.normal(0, 0.3);
        for (auto& b : p.value_bias.mutable_values()) b = rng.normal(0, 0.3);
        Tensor x = Tensor::randn({3, 8}, rng);
        check_close(ffn_forward(x, p).values(), ffn_oracle(x, p), 1e-12);
        check_close(memory_forward(x, p, {MemoryKind::ReluFfn, 8, 16, 1.0}).values(), ffn_oracle(x, p), 1e-12);
    }
    CHECK_THROWS_AS(ffn_forward(Tensor::zeros({2, 5}), params_for(MemoryKind::ReluFfn, 6, 4, 1)), DimensionError);
}

TEST_CASE("softmax memory") {
    Rng rng(5);
    SUBCASE("single slot returns that slot") {
        const MemoryConfig cfg{MemoryKind::SoftmaxMemory, 4, 1, 1.0};
        auto p = init_memory(cfg, rng);
        Tensor y = memory_forward(Tensor::randn({3, 4}, rng), p, cfg);
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(y.at({i, c}) - p.values.at({0, c})) < 1e-15);

        const MemoryConfig ln_cfg{MemoryKind::SoftmaxMemoryLn, 4, 1, 1.0};
        auto pl = init_memory(ln_cfg, rng);
        Tensor yl = memory_forward(Tensor::randn({2, 4}, rng), pl, ln_cfg);
        Tensor expect = layer_norm(reshape(pl.values, {1, 4}), pl.ln_gain, pl.ln_bias);
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(yl.at({i, c}) - expect.at({0, c})) < 1e-12);
    }
    SUBCASE("identical value slots return the shared value") {
        const MemoryConfig cfg{MemoryKind::SoftmaxMemory, 4, 6, 1.0};
        auto p = init_memory(cfg, rng);
        auto v = p.values.mutable_values();
        for (std::size_t s = 0; s < 6; ++s)
            for (std::size_t c = 0; c < 4; ++c) v[s * 4 + c] = 0.5 + static_cast<double>(c);
        Tensor y = memory_forward(Tensor::randn({5, 4}, rng, 3.0), p, cfg);
        for (std::size_t i = 0; i < 5; ++i)
            for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(y.at({i, c}) - (0.5 + static_cast<double>(c))) < 1e-12);
    }
    SUBCASE("matches the scalar oracle, with temperature") {
        for (double t : {1.0, 0.5, 3.0}) {
            const MemoryConfig cfg{MemoryKind::SoftmaxMemory, 4, 8, t};
            auto p = init_memory(cfg, rng);
            Tensor x = Tensor::randn({2, 4}, rng);
            check_close(memory_forward(x, p, cfg).values(), softmax_memory_oracle(x, p, t), 1e-12);
        }
    }
    SUBCASE("slot scores are distributions") {
        const MemoryConfig cfg{MemoryKind::SoftmaxMemory, 4, 8, 1.0};
        auto p = init_memory(cfg, rng);
        Tensor s = memory_scores(Tensor::randn({3, 4}, rng), p, cfg);
        CHECK(s.shape() == Shape{3, 8});
        for (std::size_t i = 0; i < 3; ++i) {
            double sum = 0;
            for (std::size_t j = 0; j < 8; ++j) sum += s.at({i, j});
            CHECK(std::abs(sum - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("blocks are degree-1 homogeneous in the values") {
    Rng rng(6);
    Tensor x = Tensor::randn({4, 8}, rng);
    for (auto kind : {MemoryKind::ReluFfn, MemoryKind::SoftmaxMemory}) {
        const MemoryConfig cfg{kind, 8, 12, 1.0};
        auto p = init_memory(cfg, rng);
        Tensor y1 = memory_forward(x, p, cfg);
        for (auto& v : p.values.mutable_values()) v *= 2.5;
        Tensor y2 = memory_forward(x, p, cfg);
        for (std::size_t i = 0; i < y1.numel(); ++i) CHECK(std::abs(y2.values()[i] - 2.5 * y1.values()[i]) < 1e-12);
    }
}

TEST_CASE("output_variance_ratio") {
    Rng rng(7);
    Tensor r = Tensor::randn({5, 4}, rng);
    CHECK(output_variance_ratio(r, r) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(output_variance_ratio(scale(r, 2.0), r) == doctest::Approx(4.0).epsilon(1e-14));
    CHECK_THROWS_AS(output_variance_ratio(r, Tensor::full({5, 4}, 3.0)), ContractViolation);
    CHECK_THROWS_AS(output_variance_ratio(r, Tensor::zeros({4, 5})), DimensionError);
}

TEST_CASE("softmax memory shrinks the output and the LN variant restores it") {
    // Holds at any initialization with d_h >= 256 against unit-variance residuals.
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        for (std::size_t dh : {256, 1024}) {
            Rng rng(seed);
            const std::size_t d = 64, n = 64;
            Tensor x = Tensor::randn({n, d}, rng);
            const MemoryConfig plain{MemoryKind::SoftmaxMemory, d, dh, 1.0};
            const MemoryConfig ln{MemoryKind::SoftmaxMemoryLn, d, dh, 1.0};
            auto pp = init_memory(plain, rng);
            auto pl = init_memory(ln, rng);
            const double rp = output_variance_ratio(memory_forward(x, pp, plain), x);
            const double rl = output_variance_ratio(memory_forward(x, pl, ln), x);
            INFO("seed " << seed << " d_h " << dh << " plain " << rp << " ln " << rl);
            CHECK(rp < 0.05);
            CHECK(rl >= 10.0 * rp);
        }
    }
}
