#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "relulab/attention.hpp"
#include "relulab/gradcheck.hpp"
#include "relulab/tensor.hpp"

using namespace relulab;

namespace {

std::vector<double> vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

bool all_close(std::span<const double> a, std::span<const double> b, double tol) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (std::abs(a[i] - b[i]) > tol) return false;
    }
    return true;
}

GradCheckResult gradcheck(const std::function<Tensor()>& f, const std::vector<Tensor>& params) {
    return check_gradients(f, params);
}

}  // namespace

TEST_CASE("construction and shape invariants") {
    Tensor t = Tensor::zeros({2, 3});
    CHECK(t.numel() == 6);
    CHECK(t.rank() == 2);
    CHECK(t.dim(1) == 3);
    CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
    CHECK_THROWS_AS(Tensor::zeros({2, 0}), DimensionError);
    CHECK(Tensor::scalar(4.5).item() == 4.5);
    CHECK_THROWS(t.item());
    CHECK(Tensor::from({2, 2}, {1, 2, 3, 4}).at({1, 0}) == 3);
}

TEST_CASE("matmul hand examples") {
    Tensor id = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    CHECK(vec(matmul(id, a)) == vec(a));
    CHECK(vec(matmul(a, Tensor::from({2, 1}, {0, 1}))) == std::vector<double>{2, 4});
    CHECK_THROWS_AS(matmul(a, Tensor::zeros({3, 1})), DimensionError);
}

TEST_CASE("matmul and matmul_nt agree with scalar loops") {
    Rng rng(3);
    const std::size_t B = 2, m = 4, k = 5, p = 3;
    Tensor a = Tensor::randn({B, m, k}, rng), b = Tensor::randn({B, k, p}, rng), c = Tensor::randn({B, p, k}, rng);
    Tensor ab = matmul(a, b), act = matmul_nt(a, c);
    const auto av = a.values(), bv = b.values(), cv = c.values();
    for (std::size_t z = 0; z < B; ++z)
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < p; ++j) {
                double s1 = 0, s2 = 0;
                for (std::size_t t = 0; t < k; ++t) {
                    s1 += av[(z * m + i) * k + t] * bv[(z * k + t) * p + j];
                    s2 += av[(z * m + i) * k + t] * cv[(z * p + j) * k + t];
                }
                CHECK(std::abs(ab.at({z, i, j}) - s1) < 1e-12);
                CHECK(std::abs(act.at({z, i, j}) - s2) < 1e-12);
            }
}

TEST_CASE("matmul gradient matches finite differences") {
    Rng rng(11);
    Tensor a = Tensor::uniform({5, 7}, rng, -2, 2, true), b = Tensor::uniform({7, 3}, rng, -2, 2, true);
    Tensor w = Tensor::randn({5, 3}, rng);
    auto r = gradcheck([&] { return sum_all(mul(matmul(a, b), w)); }, {a, b});
    CHECK(r.passed);
    CHECK(r.checked == 35 + 21);
}

TEST_CASE("relu") {
    CHECK(vec(relu(Tensor::from({3}, {-1, 0, 2}))) == std::vector<double>{0, 0, 2});
    Tensor neg = Tensor::from({4}, {-1, -2, -0.5, -3}, true);
    Tensor y = relu(neg);
    CHECK(vec(y) == std::vector<double>(4, 0.0));
    sum_all(y).backward();
    CHECK(vec(Tensor::from({4}, {neg.grad().begin(), neg.grad().end()})) == std::vector<double>(4, 0.0));

    SUBCASE("gradient is the indicator of x > 0") {
        Tensor x = Tensor::from({4}, {-1.5, 0.0, 0.7, 2.0}, true);
        sum_all(relu(x)).backward();
        CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{0, 0, 1, 1});
    }
    SUBCASE("finite differences") {
        Rng rng(5);
        Tensor x = Tensor::uniform({6, 5}, rng, -2, 2, true);
        Tensor w = Tensor::randn({6, 5}, rng);
        CHECK(gradcheck([&] { return sum_all(mul(relu(x), w)); }, {x}).passed);
    }
}

TEST_CASE("softmax_rows values") {
    auto s = softmax_rows(Tensor::from({1, 3}, {0, 0, 0}));
    for (double v : s.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    auto t = softmax_rows(Tensor::from({1, 3}, {1, 2, 3}));
    CHECK(t.at({0, 0}) == doctest::Approx(0.09003).epsilon(1e-4));
    CHECK(t.at({0, 1}) == doctest::Approx(0.24473).epsilon(1e-4));
    CHECK(t.at({0, 2}) == doctest::Approx(0.66524).epsilon(1e-4));
    // Direct exponential oracle.
    const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    CHECK(std::abs(t.at({0, 2}) - std::exp(3.0) / z) < 1e-15);
    CHECK_THROWS_AS(softmax_rows(Tensor::zeros({1, 2}), nullptr, 0.0), ContractViolation);
}

TEST_CASE("softmax rows sum to one, ignore row shifts, and zero masked entries") {
    Rng rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 1 + rng.uniform_int(40);
        Tensor x = Tensor::randn({3, n, n}, rng, 5.0);
        Tensor mask = causal_mask(n);
        // Random extra masking that keeps the diagonal visible.
        auto mv = mask.mutable_values();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < i; ++j)
                if (rng.uniform() < 0.3) mv[i * n + j] = 0.0;
        const double tau = rng.uniform(0.2, 3.0);
        for (const Tensor* m : {static_cast<const Tensor*>(nullptr), static_cast<const Tensor*>(&mask)}) {
            Tensor s = softmax_rows(x, m, tau);
            const auto sv = s.values();
            for (std::size_t r = 0; r < 3 * n; ++r) {
                double sum = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    const double v = sv[r * n + j];
                    if (m && mv[(r % n) * n + j] == 0.0) CHECK(v == 0.0);
                    sum += v;
                }
                CHECK(std::abs(sum - 1.0) < 1e-12);
            }
            Tensor shifted = softmax_rows(add(x, Tensor::from({3, n, 1}, std::vector<double>(3 * n, 7.25))), m, tau);
            CHECK(all_close(shifted.values(), s.values(), 1e-12));
        }
    }
}

TEST_CASE("softmax fully masked row is a contract violation") {
    Tensor mask = Tensor::from({2, 2}, {1, 0, 0, 0});
    CHECK_THROWS_AS(softmax_rows(Tensor::zeros({2, 2}), &mask), ContractViolation);
    CHECK_THROWS_AS(softmax_rows(Tensor::zeros({2, 2}), &mask), std::logic_error);
    Tensor bad = Tensor::zeros({3, 3});
    CHECK_THROWS_AS(softmax_rows(Tensor::zeros({2, 2}), &bad), DimensionError);
}

TEST_CASE("layer_norm") {
    Tensor gain = Tensor::full({4}, 1.0), bias = Tensor::zeros({4});
    Tensor c = layer_norm(Tensor::full({2, 4}, 3.0), gain, bias);
    for (double v : c.values()) CHECK(v == 0.0);

    Rng rng(8);
    Tensor x = Tensor::uniform({6, 4}, rng, -2, 2);
    Tensor y = layer_norm(x, gain, bias);
    for (std::size_t r = 0; r < 6; ++r) {
        double m = 0, v = 0;
        for (std::size_t j = 0; j < 4; ++j) m += y.at({r, j}) / 4;
        for (std::size_t j = 0; j < 4; ++j) v += (y.at({r, j}) - m) * (y.at({r, j}) - m) / 4;
        // Scalar oracle.
        double mu = 0, var = 0;
        for (std::size_t j = 0; j < 4; ++j) mu += x.at({r, j}) / 4;
        for (std::size_t j = 0; j < 4; ++j) var += (x.at({r, j}) - mu) * (x.at({r, j}) - mu) / 4;
        CHECK(std::abs(m) < 1e-9);
        CHECK(std::abs(v - var / (var + 1e-5)) < 1e-12);
        for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(y.at({r, j}) - (x.at({r, j}) - mu) / std::sqrt(var + 1e-5)) < 1e-12);
    }
    CHECK_THROWS_AS(layer_norm(x, Tensor::full({3}, 1.0), Tensor::zeros({3})), DimensionError);

    Tensor g = Tensor::uniform({4}, rng, 0.5, 2, true), b = Tensor::uniform({4}, rng, -1, 1, true);
    Tensor xp = Tensor::uniform({3, 4}, rng, -2, 2, true);
    Tensor w = Tensor::randn({3, 4}, rng);
    CHECK(gradcheck([&] { return sum_all(mul(layer_norm(xp, g, b), w)); }, {xp, g, b}).passed);
}

TEST_CASE("layer_norm meets the unit-variance bound for wide rows") {
    Rng rng(9);
    const std::size_t d = 256;
    Tensor x = Tensor::randn({8, d}, rng, 5.0);
    Tensor y = layer_norm(x, Tensor::full({d}, 1.0), Tensor::zeros({d}));
    Tensor v = variance(y, {1}), m = mean(y, {1});
    for (std::size_t r = 0; r < 8; ++r) {
        CHECK(std::abs(m.values()[r]) < 1e-9);
        CHECK(std::abs(v.values()[r] - 1.0) < 1e-6);
    }
}

TEST_CASE("elementwise catalog") {
    CHECK(log(Tensor::scalar(1.0)).item() == 0.0);
    CHECK_THROWS_AS(log(Tensor::scalar(0.0)), ContractViolation);
    CHECK_THROWS_AS(log(Tensor::scalar(-1.0)), ContractViolation);
    CHECK_THROWS_AS(div(Tensor::scalar(1.0), Tensor::scalar(0.0)), ContractViolation);

    Tensor m = Tensor::scalar(-3.0, true);
    Tensor mc = max_const(m, 0.0);
    CHECK(mc.item() == 0.0);
    mc.backward();
    CHECK(m.grad()[0] == 0.0);

    Tensor a = Tensor::from({2}, {2.0, -2.0}, true);
    sum_all(abs(a)).backward();
    CHECK(a.grad()[0] == 1.0);
    CHECK(a.grad()[1] == -1.0);

    Tensor z = Tensor::from({3}, {0.0, 1.0, 0.5}, true);
    Tensor xl = x_log_x(z);
    CHECK(xl.values()[0] == 0.0);
    CHECK(xl.values()[1] == 0.0);
    CHECK(std::abs(xl.values()[2] - 0.5 * std::log(0.5)) < 1e-15);
    sum_all(xl).backward();
    CHECK(z.grad()[0] == 0.0);
    CHECK(z.grad()[1] == doctest::Approx(1.0));
    CHECK_THROWS_AS(x_log_x(Tensor::scalar(-0.1)), ContractViolation);

    CHECK(vec(add(Tensor::from({2, 2}, {1, 2, 3, 4}), Tensor::from({2}, {10, 20}))) ==
          std::vector<double>{11, 22, 13, 24});
    CHECK(vec(mul(Tensor::from({2, 1}, {2, 3}), Tensor::from({1, 2}, {1, 10}))) == std::vector<double>{2, 20, 3, 30});
    CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({2})), DimensionError);
}

TEST_CASE("reduce") {
    Tensor t = Tensor::from({3}, {1, 2, 3});
    CHECK(sum_all(t).item() == 6.0);
    CHECK(reduce_all(Tensor::full({5}, 2.5), ReduceKind::Variance).item() == 0.0);
    CHECK(reduce_all(Tensor::from({4}, {1, 2, 3, 4}), ReduceKind::Variance).item() == doctest::Approx(1.25));
    CHECK_THROWS(reduce(t, {}, ReduceKind::Sum));
    CHECK_THROWS(reduce(t, {1}, ReduceKind::Sum));

    // Against scalar loops over every axis subset of a 3-d tensor.
    Rng rng(4);
    Tensor x = Tensor::randn({2, 3, 4}, rng);
    const std::vector<std::vector<std::size_t>> subsets{{0}, {1}, {2}, {0, 1}, {0, 2}, {1, 2}, {0, 1, 2}};
    for (const auto& axes : subsets) {
        for (auto kind : {ReduceKind::Sum, ReduceKind::Mean, ReduceKind::Variance}) {
            Tensor r = reduce(x, axes, kind);
            std::vector<double> sums(r.numel(), 0.0), sq(r.numel(), 0.0);
            std::vector<double> count(r.numel(), 0.0);
            auto key = [&](std::size_t i, std::size_t j, std::size_t k) {
                std::size_t idx[3] = {i, j, k}, dims[3] = {2, 3, 4}, out = 0;
                for (std::size_t a = 0; a < 3; ++a) {
                    if (std::find(axes.begin(), axes.end(), a) == axes.end()) out = out * dims[a] + idx[a];
                }
                return out;
            };
            for (std::size_t i = 0; i < 2; ++i)
                for (std::size_t j = 0; j < 3; ++j)
                    for (std::size_t k = 0; k < 4; ++k) {
                        const double v = x.at({i, j, k});
                        sums[key(i, j, k)] += v;
                        sq[key(i, j, k)] += v * v;
                        count[key(i, j, k)] += 1;
                    }
            for (std::size_t o = 0; o < r.numel(); ++o) {
                const double mu = sums[o] / count[o];
                const double expect = kind == ReduceKind::Sum ? sums[o] : kind == ReduceKind::Mean ? mu : sq[o] / count[o] - mu * mu;
                CHECK(std::abs(r.values()[o] - expect) < 1e-12);
            }
        }
    }
}

TEST_CASE("backward accumulates and requires a scalar") {
    Tensor x = Tensor::from({3}, {1, -2, 3}, true);
    Tensor loss = sum_all(x);
    loss.backward();
    CHECK(vec(Tensor::from({3}, {x.grad().begin(), x.grad().end()})) == std::vector<double>{1, 1, 1});
    loss.backward();
    CHECK(x.grad()[0] == 2.0);
    x.zero_grad();
    CHECK(x.grad()[0] == 0.0);
    CHECK_THROWS(mul(x, x).backward());

    // Diamond-shaped graph: x feeds two branches.
    Tensor y = Tensor::from({2}, {2.0, 3.0}, true);
    Tensor z = add(mul(y, y), scale(y, 3.0));
    sum_all(z).backward();
    CHECK(y.grad()[0] == 7.0);
    CHECK(y.grad()[1] == 9.0);
}

TEST_CASE("every parameter reachable from the loss gets a gradient") {
    Rng rng(1);
    Tensor a = Tensor::randn({2, 2}, rng, 1.0, true), b = Tensor::randn({2, 2}, rng, 1.0, true);
    Tensor unused = Tensor::randn({2}, rng, 1.0, true);
    sum_all(relu(matmul(a, b))).backward();
    CHECK(a.has_grad());
    CHECK(b.has_grad());
    CHECK_FALSE(unused.has_grad());
}

TEST_CASE("no-grad guard records no graph") {
    Tensor x = Tensor::scalar(2.0, true);
    {
        NoGradGuard guard;
        CHECK_FALSE(grad_enabled());
        Tensor y = mul(x, x);
        CHECK_FALSE(y.requires_grad());
        CHECK(y.is_leaf());
    }
    CHECK(grad_enabled());
    CHECK(mul(x, x).requires_grad());
}

TEST_CASE("shape ops") {
    Rng rng(2);
    Tensor x = Tensor::randn({5, 6}, rng);
    Tensor h = split_heads(x, 3);
    CHECK(h.shape() == Shape{3, 5, 2});
    CHECK(h.at({1, 4, 0}) == x.at({4, 2}));
    CHECK(vec(merge_heads(h)) == vec(x));
    CHECK_THROWS_AS(split_heads(x, 4), DimensionError);
    CHECK_THROWS_AS(reshape(x, {7, 4}), DimensionError);

    const std::vector<std::int64_t> ids{2, 0, 2};
    Tensor table = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6}, true);
    Tensor g = gather_rows(table, ids);
    CHECK(vec(g) == std::vector<double>{5, 6, 1, 2, 5, 6});
    sum_all(g).backward();
    CHECK(std::vector<double>(table.grad().begin(), table.grad().end()) == std::vector<double>{1, 1, 0, 0, 2, 2});
    const std::vector<std::int64_t> bad{3};
    CHECK_THROWS(gather_rows(table, bad));
}

TEST_CASE("dropout") {
    Rng rng(6);
    Tensor x = Tensor::randn({100, 100}, rng);
    CHECK(dropout(x, 0.0, rng).same_node(x));
    Rng r1(7), r2(7);
    Tensor d1 = dropout(x, 0.25, r1), d2 = dropout(x, 0.25, r2);
    CHECK(vec(d1) == vec(d2));
    std::size_t zeros = 0;
    for (double v : d1.values()) zeros += v == 0.0;
    CHECK(static_cast<double>(zeros) / 1e4 == doctest::Approx(0.25).epsilon(0.1));
    CHECK_THROWS(dropout(x, 1.0, rng));
}

TEST_CASE("cross entropy") {
    const std::vector<std::int64_t> tgt{0, 3};
    CHECK(cross_entropy(Tensor::zeros({2, 5}), tgt).item() == doctest::Approx(std::log(5.0)));
    Rng rng(10);
    Tensor logits = Tensor::randn({2, 5}, rng);
    double expect = 0;
    for (std::size_t r = 0; r < 2; ++r) {
        double z = 0;
        for (std::size_t j = 0; j < 5; ++j) z += std::exp(logits.at({r, j}));
        expect += (std::log(z) - logits.at({r, static_cast<std::size_t>(tgt[r])})) / 2;
    }
    CHECK(std::abs(cross_entropy(logits, tgt).item() - expect) < 1e-12);
    const std::vector<std::int64_t> oob{0, 5};
    CHECK_THROWS_AS(cross_entropy(logits, oob), ContractViolation);
}

TEST_CASE("rng determinism and distribution sanity") {
    Rng a(42), b(42), c(43);
    std::vector<std::uint64_t> sa, sb, sc;
    for (int i = 0; i < 5; ++i) {
        sa.push_back(a.next_u64());
        sb.push_back(b.next_u64());
        sc.push_back(c.next_u64());
    }
    CHECK(sa == sb);
    CHECK(sa != sc);
    // First output of mt19937_64 for the default seed 5489 is a published constant.
    CHECK(Rng(5489).next_u64() == 14514284786278117030ULL);

    Rng r(1);
    double m = 0, v = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double z = r.normal();
        m += z;
        v += z * z;
    }
    m /= n;
    v = v / n - m * m;
    CHECK(std::abs(m) < 0.01);
    CHECK(std::abs(v - 1.0) < 0.01);
    for (int i = 0; i < 1000; ++i) CHECK(r.uniform_int(7) < 7);
    Rng f1 = Rng(3).fork(1), f2 = Rng(3).fork(1), f3 = Rng(3).fork(2);
    CHECK(f1.next_u64() == f2.next_u64());
    CHECK(Rng(3).fork(1).next_u64() != f3.next_u64());
}

TEST_CASE("same seed and op sequence give bit-identical values") {
    auto run = [] {
        Rng rng(99);
        Tensor a = Tensor::randn({8, 8}, rng), b = Tensor::randn({8, 8}, rng);
        return vec(layer_norm(softmax_rows(matmul(a, b)), Tensor::full({8}, 1.0), Tensor::zeros({8})));
    };
    CHECK(run() == run());
}

TEST_CASE("gradient suite covers every op and passes") {
    const auto cases = gradient_suite(17);
    CHECK(cases.size() > 40);
    for (const auto& c : cases) {
        INFO(c.name << " worst " << c.result.worst_abs_error << " at " << c.result.worst_location);
        CHECK(c.result.passed);
        CHECK(c.result.checked > 0);
    }
}

TEST_CASE("gradient checker detects a wrong gradient") {
    // exp(x) with its forward perturbed by a detached term: backward misses it.
    Tensor x = Tensor::from({2}, {0.3, -0.4}, true);
    auto f = [&] { return sum_all(add(exp(x), mul(x.detach(), x.detach()))); };
    CHECK_FALSE(check_gradients(f, {x}).passed);
}
