#include "relulab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <Eigen/Core>

#include <malloc.h>

namespace relulab {

namespace {

// Activations at n ~ 1000 are megabytes each and are freed and reallocated on
// every step; keep them on the heap instead of round-tripping through mmap.
const bool kHeapTuned = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
}();

}  // namespace

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
    out << ']';
    return out.str();
}

namespace {

thread_local bool g_grad_enabled = true;

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace {

NodePtr new_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
    for (auto d : shape) {
        if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("shape " + shape_str(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    node->requires_grad = requires_grad;
    return node;
}

// Builds an op result. Parents and the backward closure are kept only when
// some parent needs a gradient.
Tensor make_result(Shape shape, std::vector<double> values, std::vector<NodePtr> parents,
                   std::function<void(Node&)> backward) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    const bool needs = g_grad_enabled && std::any_of(parents.begin(), parents.end(),
                                   [](const NodePtr& p) { return p->requires_grad; });
    if (needs) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

const Node& node_of(const Tensor& t) {
    if (!t.defined()) throw ContractViolation("operation on an undefined tensor");
    return *t.node();
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// ---- broadcasting ----

struct Broadcast {
    Shape out;
    std::vector<std::size_t> a_strides;
    std::vector<std::size_t> b_strides;
    bool same = false;
};

std::vector<std::size_t> contiguous_strides(const Shape& shape) {
    std::vector<std::size_t> strides(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
    return strides;
}

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
    Broadcast plan;
    if (a == b) {
        plan.out = a;
        plan.same = true;
        return plan;
    }
    const std::size_t rank = std::max(a.size(), b.size());
    plan.out.assign(rank, 1);
    plan.a_strides.assign(rank, 0);
    plan.b_strides.assign(rank, 0);
    const auto as = contiguous_strides(a);
    const auto bs = contiguous_strides(b);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t ai = i + a.size() >= rank ? i + a.size() - rank : SIZE_MAX;
        const std::size_t bi = i + b.size() >= rank ? i + b.size() - rank : SIZE_MAX;
        const std::size_t da = ai == SIZE_MAX ? 1 : a[ai];
        const std::size_t db = bi == SIZE_MAX ? 1 : b[bi];
        if (da != db && da != 1 && db != 1) {
            throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                                 shape_str(b));
        }
        plan.out[i] = std::max(da, db);
        if (ai != SIZE_MAX && da != 1) plan.a_strides[i] = as[ai];
        if (bi != SIZE_MAX && db != 1) plan.b_strides[i] = bs[bi];
    }
    return plan;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <class F>
void for_each_broadcast(const Broadcast& plan, F&& f) {
    const std::size_t total = shape_numel(plan.out);
    if (plan.same) {
        for (std::size_t i = 0; i < total; ++i) f(i, i, i);
        return;
    }
    const std::size_t rank = plan.out.size();
    const std::size_t inner = plan.out[rank - 1];
    const std::size_t sa = plan.a_strides[rank - 1];
    const std::size_t sb = plan.b_strides[rank - 1];
    std::vector<std::size_t> counter(rank, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t base = 0; base < total; base += inner) {
        for (std::size_t j = 0; j < inner; ++j) f(base + j, ia + j * sa, ib + j * sb);
        for (std::size_t axis = rank - 1; axis-- > 0;) {
            ++counter[axis];
            ia += plan.a_strides[axis];
            ib += plan.b_strides[axis];
            if (counter[axis] < plan.out[axis]) break;
            ia -= counter[axis] * plan.a_strides[axis];
            ib -= counter[axis] * plan.b_strides[axis];
            counter[axis] = 0;
        }
    }
}

// da/db are the partial derivatives d(out)/da and d(out)/db at one element.
template <class Fwd, class Da, class Db>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Da da, Db db) {
    const Node& na = node_of(a);
    const Node& nb = node_of(b);
    auto plan = std::make_shared<Broadcast>(plan_broadcast(na.shape, nb.shape, name));
    std::vector<double> out(shape_numel(plan->out));
    for_each_broadcast(*plan, [&](std::size_t o, std::size_t i, std::size_t j) {
        out[o] = fwd(na.values[i], nb.values[j]);
    });
    return make_result(plan->out, std::move(out), {a.node(), b.node()},
                       [plan, da, db](Node& self) {
                           Node& pa = *self.parents[0];
                           Node& pb = *self.parents[1];
                           const auto& g = self.pending;
                           if (pa.requires_grad) {
                               auto& ga = pa.pending_buffer();
                               for_each_broadcast(*plan, [&](std::size_t o, std::size_t i, std::size_t j) {
                                   ga[i] += g[o] * da(pa.values[i], pb.values[j]);
                               });
                           }
                           if (pb.requires_grad) {
                               auto& gb = pb.pending_buffer();
                               for_each_broadcast(*plan, [&](std::size_t o, std::size_t i, std::size_t j) {
                                   gb[j] += g[o] * db(pa.values[i], pb.values[j]);
                               });
                           }
                       });
}

// dfdx(x, y) is the derivative at input x with output y.
template <class Fwd, class Deriv>
Tensor unary_op(const Tensor& x, Fwd fwd, Deriv deriv) {
    const Node& nx = node_of(x);
    std::vector<double> out(nx.values.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(nx.values[i]);
    return make_result(nx.shape, std::move(out), {x.node()}, [deriv](Node& self) {
        Node& p = *self.parents[0];
        auto& gp = p.pending_buffer();
        const auto& g = self.pending;
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (g[i] != 0.0) gp[i] += g[i] * deriv(p.values[i], self.values[i]);
        }
    });
}

}  // namespace

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    const auto n = shape_numel(shape);
    return Tensor(new_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const auto n = shape_numel(shape);
    return Tensor(new_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    return Tensor(new_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor(new_leaf({}, {value}, requires_grad));
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = stddev * rng.normal();
    return Tensor(new_leaf(std::move(shape), std::move(v), requires_grad));
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor(new_leaf(std::move(shape), std::move(v), requires_grad));
}

const Shape& Tensor::shape() const { return node_of(*this).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    return s[axis];
}

std::size_t Tensor::numel() const { return node_of(*this).values.size(); }

std::span<const double> Tensor::values() const { return node_of(*this).values; }

std::span<double> Tensor::mutable_values() {
    if (!is_leaf()) throw ContractViolation("mutable_values() on a non-leaf tensor");
    return node_->values;
}

double Tensor::item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->values[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
    const auto& s = shape();
    if (index.size() != s.size()) throw DimensionError("index rank mismatch for " + shape_str(s));
    std::size_t offset = 0;
    std::size_t axis = 0;
    for (auto i : index) {
        if (i >= s[axis]) throw DimensionError("index out of range for " + shape_str(s));
        offset = offset * s[axis] + i;
        ++axis;
    }
    return node_->values[offset];
}

bool Tensor::requires_grad() const { return node_of(*this).requires_grad; }

void Tensor::set_requires_grad(bool flag) {
    if (!is_leaf()) throw ContractViolation("set_requires_grad() on a non-leaf tensor");
    node_->requires_grad = flag;
}

bool Tensor::has_grad() const { return !node_of(*this).grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (!has_grad()) throw ContractViolation("tensor has no gradient");
    return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
    if (!has_grad()) node_->grad.assign(node_->values.size(), 0.0);
    return node_->grad;
}

void Tensor::zero_grad() {
    auto& g = node_->grad;
    std::fill(g.begin(), g.end(), 0.0);
}

bool Tensor::is_leaf() const { return !node_of(*this).backward; }

Tensor Tensor::detach() const {
    const Node& n = node_of(*this);
    return Tensor(new_leaf(n.shape, n.values, false));
}

Tensor Tensor::clone(bool requires_grad) const {
    const Node& n = node_of(*this);
    return Tensor(new_leaf(n.shape, n.values, requires_grad));
}

void Tensor::backward() const {
    const Node& root = node_of(*this);
    if (root.values.size() != 1) {
        throw DimensionError("backward() needs a scalar loss, got " + shape_str(root.shape));
    }
    if (!root.requires_grad) return;

    // Iterative post-order DFS over nodes that require a gradient.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node* p = n->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->pending.assign(1, 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->pending.empty()) n->backward(*n);
    }
    for (Node* n : order) {
        if (n->pending.empty()) continue;
        if (n->grad.empty()) {
            n->grad = std::move(n->pending);
        } else {
            for (std::size_t i = 0; i < n->grad.size(); ++i) n->grad[i] += n->pending[i];
        }
        n->pending.clear();
        n->pending.shrink_to_fit();
    }
}

// ---- matmul ---------------------------------------------------------------

namespace {

struct MatmulDims {
    std::size_t batch = 1;
    std::size_t m = 0, k = 0, p = 0;
    bool a_batched = false, b_batched = false;
};

// transpose_b: b is stored [.. x p x k] and used as b^T.
MatmulDims matmul_dims(const Shape& a, const Shape& b, bool transpose_b) {
    if (a.size() < 2 || a.size() > 3 || b.size() < 2 || b.size() > 3) {
        throw DimensionError("matmul expects rank-2 or rank-3 operands, got " + shape_str(a) + " and " + shape_str(b));
    }
    MatmulDims d;
    d.a_batched = a.size() == 3;
    d.b_batched = b.size() == 3;
    d.m = a[a.size() - 2];
    d.k = a[a.size() - 1];
    const std::size_t bk = transpose_b ? b[b.size() - 1] : b[b.size() - 2];
    d.p = transpose_b ? b[b.size() - 2] : b[b.size() - 1];
    if (bk != d.k) {
        throw DimensionError("matmul inner dimensions differ: " + shape_str(a) + " and " + shape_str(b) +
                             (transpose_b ? " (transposed)" : ""));
    }
    if (d.a_batched && d.b_batched && a[0] != b[0]) {
        throw DimensionError("matmul batch sizes differ: " + shape_str(a) + " and " + shape_str(b));
    }
    if (d.a_batched) d.batch = a[0];
    else if (d.b_batched) d.batch = b[0];
    return d;
}

Tensor matmul_impl(const Tensor& a, const Tensor& b, bool transpose_b) {
    const Node& na = node_of(a);
    const Node& nb = node_of(b);
    const MatmulDims d = matmul_dims(na.shape, nb.shape, transpose_b);
    Shape out_shape = (d.a_batched || d.b_batched) ? Shape{d.batch, d.m, d.p} : Shape{d.m, d.p};
    std::vector<double> out(d.batch * d.m * d.p, 0.0);

    const std::size_t a_step = d.a_batched ? d.m * d.k : 0;
    const std::size_t b_step = d.b_batched ? d.k * d.p : 0;
    const std::size_t b_rows = transpose_b ? d.p : d.k;
    const std::size_t b_cols = transpose_b ? d.k : d.p;

    if (d.a_batched && !d.b_batched) {
        // Shared right operand: one big GEMM over the stacked rows.
        ConstMap A(na.values.data(), d.batch * d.m, d.k);
        ConstMap B(nb.values.data(), b_rows, b_cols);
        MutMap C(out.data(), d.batch * d.m, d.p);
        if (transpose_b) C.noalias() = A * B.transpose();
        else C.noalias() = A * B;
    } else {
        for (std::size_t s = 0; s < d.batch; ++s) {
            ConstMap A(na.values.data() + s * a_step, d.m, d.k);
            ConstMap B(nb.values.data() + s * b_step, b_rows, b_cols);
            MutMap C(out.data() + s * d.m * d.p, d.m, d.p);
            if (transpose_b) C.noalias() = A * B.transpose();
            else C.noalias() = A * B;
        }
    }

    return make_result(std::move(out_shape), std::move(out), {a.node(), b.node()},
                       [d, transpose_b, a_step, b_step, b_rows, b_cols](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        const double* g = self.pending.data();
        if (pa.requires_grad) {
            auto& ga = pa.pending_buffer();
            if (d.a_batched && !d.b_batched) {
                ConstMap G(g, d.batch * d.m, d.p);
                ConstMap B(pb.values.data(), b_rows, b_cols);
                MutMap GA(ga.data(), d.batch * d.m, d.k);
                if (transpose_b) GA.noalias() += G * B;
                else GA.noalias() += G * B.transpose();
            } else {
                for (std::size_t s = 0; s < d.batch; ++s) {
                    ConstMap G(g + s * d.m * d.p, d.m, d.p);
                    ConstMap B(pb.values.data() + s * b_step, b_rows, b_cols);
                    MutMap GA(ga.data() + s * a_step, d.m, d.k);
                    if (transpose_b) GA.noalias() += G * B;
                    else GA.noalias() += G * B.transpose();
                }
            }
        }
        if (pb.requires_grad) {
            auto& gb = pb.pending_buffer();
            if (d.a_batched && !d.b_batched) {
                ConstMap G(g, d.batch * d.m, d.p);
                ConstMap A(pa.values.data(), d.batch * d.m, d.k);
                MutMap GB(gb.data(), b_rows, b_cols);
                if (transpose_b) GB.noalias() += G.transpose() * A;
                else GB.noalias() += A.transpose() * G;
            } else {
                for (std::size_t s = 0; s < d.batch; ++s) {
                    ConstMap G(g + s * d.m * d.p, d.m, d.p);
                    ConstMap A(pa.values.data() + s * a_step, d.m, d.k);
                    MutMap GB(gb.data() + s * b_step, b_rows, b_cols);
                    if (transpose_b) GB.noalias() += G.transpose() * A;
                    else GB.noalias() += A.transpose() * G;
                }
            }
        }
    });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) { return matmul_impl(a, b, false); }
Tensor matmul_nt(const Tensor& a, const Tensor& b) { return matmul_impl(a, b, true); }

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "add", [](double x, double y) { return x + y; },
                     [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "sub", [](double x, double y) { return x - y; },
                     [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "mul", [](double x, double y) { return x * y; },
                     [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    for (double v : b.values()) {
        if (v == 0.0) throw ContractViolation("div: division by zero");
    }
    return binary_op(a, b, "div", [](double x, double y) { return x / y; },
                     [](double, double y) { return 1.0 / y; },
                     [](double x, double y) { return -x / (y * y); });
}

Tensor relu(const Tensor& x) {
    return unary_op(x, [](double v) { return v > 0.0 ? v : 0.0; },
                    [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& x) {
    return unary_op(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
    for (double v : x.values()) {
        if (!(v > 0.0)) throw ContractViolation("log: non-positive input " + std::to_string(v));
    }
    return unary_op(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor abs(const Tensor& x) {
    return unary_op(x, [](double v) { return std::abs(v); },
                    [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor scale(const Tensor& x, double factor) {
    return unary_op(x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double offset) {
    return unary_op(x, [offset](double v) { return v + offset; }, [](double, double) { return 1.0; });
}

Tensor max_const(const Tensor& x, double c) {
    return unary_op(x, [c](double v) { return v > c ? v : c; },
                    [c](double v, double) { return v > c ? 1.0 : 0.0; });
}

Tensor x_log_x(const Tensor& x) {
    for (double v : x.values()) {
        if (v < 0.0) throw ContractViolation("x_log_x: negative input " + std::to_string(v));
    }
    return unary_op(x, [](double v) { return v > 0.0 ? v * std::log(v) : 0.0; },
                    [](double v, double) { return v > 0.0 ? std::log(v) + 1.0 : 0.0; });
}

// ---- softmax / layer norm -------------------------------------------------

Tensor softmax_rows(const Tensor& x, const Tensor* mask, double temperature) {
    const Node& nx = node_of(x);
    if (!(temperature > 0.0)) throw ContractViolation("softmax_rows: temperature must be positive");
    if (nx.shape.empty()) throw DimensionError("softmax_rows: needs at least one axis");
    const std::size_t cols = nx.shape.back();
    const std::size_t rows = nx.values.size() / cols;

    const double* mvals = nullptr;
    std::size_t mask_rows = 0;
    if (mask) {
        const Shape& ms = mask->shape();
        const bool full = ms == nx.shape;
        const bool trailing = nx.shape.size() >= 2 && ms.size() == 2 &&
                              ms[0] == nx.shape[nx.shape.size() - 2] && ms[1] == cols;
        if (!full && !trailing) {
            throw DimensionError("softmax_rows: mask " + shape_str(ms) + " does not fit " + shape_str(nx.shape));
        }
        mvals = mask->values().data();
        mask_rows = mask->numel() / cols;
    }

    std::vector<double> out(nx.values.size(), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = nx.values.data() + r * cols;
        const double* m = mvals ? mvals + (r % mask_rows) * cols : nullptr;
        double* y = out.data() + r * cols;
        double top = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < cols; ++c) {
            if (!m || m[c] != 0.0) top = std::max(top, in[c]);
        }
        if (top == -std::numeric_limits<double>::infinity()) {
            throw ContractViolation("softmax_rows: row " + std::to_string(r) + " is fully masked");
        }
        double total = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            if (!m || m[c] != 0.0) {
                y[c] = std::exp((in[c] - top) / temperature);
                total += y[c];
            }
        }
        for (std::size_t c = 0; c < cols; ++c) y[c] /= total;
    }

    return make_result(nx.shape, std::move(out), {x.node()}, [cols, rows, temperature](Node& self) {
        Node& p = *self.parents[0];
        auto& gp = p.pending_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = self.values.data() + r * cols;
            const double* g = self.pending.data() + r * cols;
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c) dot += g[c] * y[c];
            double* out = gp.data() + r * cols;
            for (std::size_t c = 0; c < cols; ++c) out[c] += y[c] * (g[c] - dot) / temperature;
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const Node& nx = node_of(x);
    if (nx.shape.empty()) throw DimensionError("layer_norm: needs at least one axis");
    const std::size_t d = nx.shape.back();
    if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
        throw DimensionError("layer_norm: gain/bias must be [" + std::to_string(d) + "], got " +
                             shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
    }
    const std::size_t rows = nx.values.size() / d;
    auto xhat = std::make_shared<std::vector<double>>(nx.values.size());
    auto rstd = std::make_shared<std::vector<double>>(rows);
    std::vector<double> out(nx.values.size());
    const auto g = gain.values();
    const auto b = bias.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = nx.values.data() + r * d;
        double mu = 0.0;
        for (std::size_t c = 0; c < d; ++c) mu += in[c];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t c = 0; c < d; ++c) var += (in[c] - mu) * (in[c] - mu);
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        (*rstd)[r] = inv;
        for (std::size_t c = 0; c < d; ++c) {
            const double h = (in[c] - mu) * inv;
            (*xhat)[r * d + c] = h;
            out[r * d + c] = h * g[c] + b[c];
        }
    }
    return make_result(nx.shape, std::move(out), {x.node(), gain.node(), bias.node()},
                       [d, rows, xhat, rstd](Node& self) {
        Node& px = *self.parents[0];
        Node& pg = *self.parents[1];
        Node& pb = *self.parents[2];
        const auto& gy = self.pending;
        if (pg.requires_grad) {
            auto& gg = pg.pending_buffer();
            for (std::size_t i = 0; i < gy.size(); ++i) gg[i % d] += gy[i] * (*xhat)[i];
        }
        if (pb.requires_grad) {
            auto& gb = pb.pending_buffer();
            for (std::size_t i = 0; i < gy.size(); ++i) gb[i % d] += gy[i];
        }
        if (px.requires_grad) {
            auto& gx = px.pending_buffer();
            std::vector<double> dh(d);
            for (std::size_t r = 0; r < rows; ++r) {
                double mean_dh = 0.0, mean_dh_h = 0.0;
                for (std::size_t c = 0; c < d; ++c) {
                    dh[c] = gy[r * d + c] * pg.values[c];
                    mean_dh += dh[c];
                    mean_dh_h += dh[c] * (*xhat)[r * d + c];
                }
                mean_dh /= static_cast<double>(d);
                mean_dh_h /= static_cast<double>(d);
                for (std::size_t c = 0; c < d; ++c) {
                    gx[r * d + c] += (*rstd)[r] * (dh[c] - mean_dh - (*xhat)[r * d + c] * mean_dh_h);
                }
            }
        }
    });
}

// ---- reductions -----------------------------------------------------------

Tensor reduce(const Tensor& x, const std::vector<std::size_t>& axes, ReduceKind kind) {
    const Node& nx = node_of(x);
    if (axes.empty()) throw DimensionError("reduce: empty axis list");
    std::vector<bool> reduced(nx.shape.size(), false);
    for (auto a : axes) {
        if (a >= nx.shape.size()) throw DimensionError("reduce: axis " + std::to_string(a) + " out of range for " + shape_str(nx.shape));
        if (reduced[a]) throw DimensionError("reduce: duplicate axis " + std::to_string(a));
        reduced[a] = true;
    }
    Shape out_shape;
    std::size_t count = 1;
    for (std::size_t i = 0; i < nx.shape.size(); ++i) {
        if (reduced[i]) count *= nx.shape[i];
        else out_shape.push_back(nx.shape[i]);
    }
    // Trailing-axis reductions map input i to output i / count; anything else
    // gets an explicit offset table.
    bool trailing = true;
    for (std::size_t i = 0; i < nx.shape.size(); ++i) {
        if (reduced[i] && i + axes.size() < nx.shape.size()) trailing = false;
    }
    std::shared_ptr<std::vector<std::size_t>> table;
    if (!trailing) {
        table = std::make_shared<std::vector<std::size_t>>(nx.values.size());
        const auto in_strides = contiguous_strides(nx.shape);
        std::vector<std::size_t> out_strides_full(nx.shape.size(), 0);
        std::size_t stride = 1;
        for (std::size_t i = nx.shape.size(); i-- > 0;) {
            if (!reduced[i]) {
                out_strides_full[i] = stride;
                stride *= nx.shape[i];
            }
        }
        for (std::size_t i = 0; i < nx.values.size(); ++i) {
            std::size_t rem = i, off = 0;
            for (std::size_t a = 0; a < nx.shape.size(); ++a) {
                off += (rem / in_strides[a]) * out_strides_full[a];
                rem %= in_strides[a];
            }
            (*table)[i] = off;
        }
    }
    auto map = [table, count](std::size_t i) { return table ? (*table)[i] : i / count; };

    const std::size_t out_n = shape_numel(out_shape);
    const double n = static_cast<double>(count);
    std::vector<double> sums(out_n, 0.0);
    if (trailing) {
        for (std::size_t o = 0; o < out_n; ++o) {
            const double* v = nx.values.data() + o * count;
            double acc = 0.0;
            for (std::size_t j = 0; j < count; ++j) acc += v[j];
            sums[o] = acc;
        }
    } else {
        for (std::size_t i = 0; i < nx.values.size(); ++i) sums[map(i)] += nx.values[i];
    }

    // Broadcasts pending[o] / divisor back over the reduced entries.
    auto spread = [map, trailing, count, out_n](Node& self, double divisor) {
        auto& gp = self.parents[0]->pending_buffer();
        if (trailing) {
            for (std::size_t o = 0; o < out_n; ++o) {
                const double g = self.pending[o] / divisor;
                double* dst = gp.data() + o * count;
                for (std::size_t j = 0; j < count; ++j) dst[j] += g;
            }
        } else {
            for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.pending[map(i)] / divisor;
        }
    };

    if (kind == ReduceKind::Sum) {
        return make_result(out_shape, std::move(sums), {x.node()}, [spread](Node& self) { spread(self, 1.0); });
    }
    auto means = std::make_shared<std::vector<double>>(sums);
    for (auto& m : *means) m /= n;
    if (kind == ReduceKind::Mean) {
        return make_result(out_shape, *means, {x.node()}, [spread, n](Node& self) { spread(self, n); });
    }
    std::vector<double> var(out_n, 0.0);
    for (std::size_t i = 0; i < nx.values.size(); ++i) {
        const double c = nx.values[i] - (*means)[map(i)];
        var[map(i)] += c * c;
    }
    for (auto& v : var) v /= n;
    return make_result(out_shape, std::move(var), {x.node()}, [map, means, n](Node& self) {
        Node& p = *self.parents[0];
        auto& gp = p.pending_buffer();
        for (std::size_t i = 0; i < gp.size(); ++i) {
            const std::size_t o = map(i);
            gp[i] += self.pending[o] * 2.0 * (p.values[i] - (*means)[o]) / n;
        }
    });
}

Tensor reduce_all(const Tensor& x, ReduceKind kind) {
    std::vector<std::size_t> axes(x.rank());
    std::iota(axes.begin(), axes.end(), 0);
    if (axes.empty()) return kind == ReduceKind::Variance ? scale(x, 0.0) : scale(x, 1.0);
    return reduce(x, axes, kind);
}

// ---- shape / indexing -----------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
    const Node& nx = node_of(x);
    if (shape_numel(shape) != nx.values.size()) {
        throw DimensionError("reshape: " + shape_str(nx.shape) + " -> " + shape_str(shape));
    }
    return make_result(std::move(shape), nx.values, {x.node()}, [](Node& self) {
        auto& gp = self.parents[0]->pending_buffer();
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.pending[i];
    });
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
    const Node& nx = node_of(x);
    if (nx.shape.size() != 2) throw DimensionError("split_heads: expects [n x d], got " + shape_str(nx.shape));
    const std::size_t n = nx.shape[0], d = nx.shape[1];
    if (heads == 0 || d % heads != 0) {
        throw DimensionError("split_heads: " + std::to_string(heads) + " heads do not divide d=" + std::to_string(d));
    }
    const std::size_t dh = d / heads;
    std::vector<double> out(nx.values.size());
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < dh; ++c) out[(h * n + i) * dh + c] = nx.values[i * d + h * dh + c];
    return make_result({heads, n, dh}, std::move(out), {x.node()}, [heads, n, d, dh](Node& self) {
        auto& gp = self.parents[0]->pending_buffer();
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t c = 0; c < dh; ++c) gp[i * d + h * dh + c] += self.pending[(h * n + i) * dh + c];
    });
}

Tensor merge_heads(const Tensor& x) {
    const Node& nx = node_of(x);
    if (nx.shape.size() != 3) throw DimensionError("merge_heads: expects [h x n x dh], got " + shape_str(nx.shape));
    const std::size_t heads = nx.shape[0], n = nx.shape[1], dh = nx.shape[2];
    const std::size_t d = heads * dh;
    std::vector<double> out(nx.values.size());
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < dh; ++c) out[i * d + h * dh + c] = nx.values[(h * n + i) * dh + c];
    return make_result({n, d}, std::move(out), {x.node()}, [heads, n, d, dh](Node& self) {
        auto& gp = self.parents[0]->pending_buffer();
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t c = 0; c < dh; ++c) gp[(h * n + i) * dh + c] += self.pending[i * d + h * dh + c];
    });
}

Tensor gather_rows(const Tensor& table, std::span<const std::int64_t> ids) {
    const Node& nt = node_of(table);
    if (nt.shape.size() != 2) throw DimensionError("gather_rows: table must be 2-D, got " + shape_str(nt.shape));
    if (ids.empty()) throw DimensionError("gather_rows: empty id list");
    const std::size_t rows = nt.shape[0], d = nt.shape[1];
    auto idx = std::make_shared<std::vector<std::size_t>>();
    idx->reserve(ids.size());
    for (auto id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= rows) {
            throw ContractViolation("gather_rows: id " + std::to_string(id) + " outside [0, " + std::to_string(rows) + ")");
        }
        idx->push_back(static_cast<std::size_t>(id));
    }
    std::vector<double> out(ids.size() * d);
    for (std::size_t i = 0; i < idx->size(); ++i)
        std::copy_n(nt.values.data() + (*idx)[i] * d, d, out.data() + i * d);
    return make_result({ids.size(), d}, std::move(out), {table.node()}, [idx, d](Node& self) {
        auto& gp = self.parents[0]->pending_buffer();
        for (std::size_t i = 0; i < idx->size(); ++i)
            for (std::size_t c = 0; c < d; ++c) gp[(*idx)[i] * d + c] += self.pending[i * d + c];
    });
}

Tensor dropout(const Tensor& x, double p, Rng& rng) {
    if (p < 0.0 || p >= 1.0) throw ContractViolation("dropout: p must be in [0, 1)");
    if (p == 0.0) return x;
    const double keep = 1.0 / (1.0 - p);
    std::vector<double> m(x.numel());
    for (auto& v : m) v = rng.uniform() < p ? 0.0 : keep;
    return mul(x, Tensor::from(x.shape(), std::move(m)));
}

// ---- losses ---------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets) {
    const Node& nl = node_of(logits);
    if (nl.shape.size() != 2) throw DimensionError("cross_entropy: logits must be [n x V], got " + shape_str(nl.shape));
    const std::size_t n = nl.shape[0], v = nl.shape[1];
    if (targets.size() != n) {
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(n) + " rows");
    }
    auto probs = std::make_shared<std::vector<double>>(nl.values.size());
    auto tgt = std::make_shared<std::vector<std::size_t>>(n);
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v) {
            throw ContractViolation("cross_entropy: target " + std::to_string(targets[r]) + " outside vocabulary");
        }
        (*tgt)[r] = static_cast<std::size_t>(targets[r]);
        const double* row = nl.values.data() + r * v;
        const double top = *std::max_element(row, row + v);
        double z = 0.0;
        for (std::size_t c = 0; c < v; ++c) z += std::exp(row[c] - top);
        const double lse = top + std::log(z);
        for (std::size_t c = 0; c < v; ++c) (*probs)[r * v + c] = std::exp(row[c] - lse);
        total += lse - row[(*tgt)[r]];
    }
    return make_result({}, {total / static_cast<double>(n)}, {logits.node()}, [probs, tgt, n, v](Node& self) {
        auto& gp = self.parents[0]->pending_buffer();
        const double g = self.pending[0] / static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < v; ++c) gp[r * v + c] += g * (*probs)[r * v + c];
            gp[r * v + (*tgt)[r]] -= g;
        }
    });
}

// ---- gradient check -------------------------------------------------------

GradCheckResult check_gradients(const std::function<Tensor()>& loss_fn, const std::vector<Tensor>& params,
                                const GradCheckOptions& options) {
    std::vector<Tensor> ps = params;
    for (auto& p : ps) {
        if (p.has_grad()) p.zero_grad();
    }
    loss_fn().backward();

    GradCheckResult result;
    Rng pick(options.seed);
    for (std::size_t pi = 0; pi < ps.size(); ++pi) {
        Tensor& p = ps[pi];
        const std::size_t n = p.numel();
        std::vector<std::size_t> entries(n);
        std::iota(entries.begin(), entries.end(), 0);
        if (options.max_entries_per_param && n > options.max_entries_per_param) {
            for (std::size_t i = 0; i < options.max_entries_per_param; ++i) {
                std::swap(entries[i], entries[i + pick.uniform_int(n - i)]);
            }
            entries.resize(options.max_entries_per_param);
        }
        auto vals = p.mutable_values();
        for (std::size_t e : entries) {
            const double analytic = p.has_grad() ? p.grad()[e] : 0.0;
            const double orig = vals[e];
            vals[e] = orig + options.step;
            const double up = loss_fn().item();
            vals[e] = orig - options.step;
            const double down = loss_fn().item();
            vals[e] = orig;
            const double numeric = (up - down) / (2.0 * options.step);
            const double err = std::abs(analytic - numeric);
            const double mag = std::max(std::abs(analytic), std::abs(numeric));
            const double rel = mag > 0.0 ? err / mag : 0.0;
            ++result.checked;
            if (err > std::max(options.atol, options.rtol * mag)) {
                ++result.failures;
                result.passed = false;
            }
            if (err > result.worst_abs_error) {
                result.worst_abs_error = err;
                result.worst_location = "param " + std::to_string(pi) + " entry " + std::to_string(e);
            }
            if (err > options.atol) result.worst_rel_error = std::max(result.worst_rel_error, rel);
        }
    }
    return result;
}

}  // namespace relulab
