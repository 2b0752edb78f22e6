#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "relulab/errors.hpp"
#include "relulab/rng.hpp"

namespace relulab {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;     // persistent, accumulated across backward() calls
    std::vector<double> pending;  // scratch for the backward pass in flight
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's `pending` and adds contributions into parents' `pending`.
    std::function<void(Node&)> backward;

    std::vector<double>& pending_buffer() {
        if (pending.empty()) pending.assign(values.size(), 0.0);
        return pending;
    }
};

}  // namespace detail

/// Dense row-major float64 tensor and node of a reverse-mode graph.
///
/// A Tensor is a cheap handle; copies share the underlying node. Operations
/// record their inputs only when at least one input requires a gradient, so
/// inference-only code builds no graph.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false);
    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const double> values() const;
    /// Mutable access for leaf tensors (parameters, inputs). Throws on graph nodes.
    std::span<double> mutable_values();
    double item() const;
    double at(std::initializer_list<std::size_t> index) const;

    bool requires_grad() const;
    void set_requires_grad(bool flag);
    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    /// Accumulates d(this)/d(t) into t.grad for every reachable t that requires
    /// a gradient. Requires a scalar (numel 1).
    void backward() const;

    /// Same values, no graph history.
    Tensor detach() const;
    /// Deep copy of the values into a fresh leaf.
    Tensor clone(bool requires_grad = false) const;

    bool is_leaf() const;
    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

/// Whether new operations record graph history (thread-local, default on).
bool grad_enabled();

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// ---- Linear algebra -------------------------------------------------------

/// a: [m x k] or [B x m x k]; b: [k x p] or [B x k x p].
Tensor matmul(const Tensor& a, const Tensor& b);
/// a * b^T. a: [m x k] or [B x m x k]; b: [p x k] or [B x p x k].
Tensor matmul_nt(const Tensor& a, const Tensor& b);

// ---- Elementwise ---------------------------------------------------------

/// Binary ops broadcast NumPy-style (right-aligned, size-1 or missing dims expand).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// Throws ContractViolation if any divisor entry is zero.
Tensor div(const Tensor& a, const Tensor& b);

Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
/// Throws ContractViolation on non-positive input.
Tensor log(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);
/// max(x, c) elementwise; gradient flows only where x > c.
Tensor max_const(const Tensor& x, double c);
/// x * ln(x) with 0 ln 0 := 0 and derivative 0 at x = 0. Throws on x < 0.
Tensor x_log_x(const Tensor& x);

// ---- Row operations -------------------------------------------------------

/// Softmax over the last axis. `mask` (optional, 1 = visible, 0 = masked) has
/// the shape of x or of its trailing two axes. Masked outputs are exactly 0.
Tensor softmax_rows(const Tensor& x, const Tensor* mask = nullptr, double temperature = 1.0);

/// Standardize over the last axis, then gain * xhat + bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// ---- Reductions -----------------------------------------------------------

enum class ReduceKind { Sum, Mean, Variance };

/// Reduces over `axes` (removed from the shape). Variance is the biased 1/N estimator.
Tensor reduce(const Tensor& x, const std::vector<std::size_t>& axes, ReduceKind kind);
/// Reduces over every axis to a scalar.
Tensor reduce_all(const Tensor& x, ReduceKind kind);

inline Tensor sum(const Tensor& x, const std::vector<std::size_t>& axes) { return reduce(x, axes, ReduceKind::Sum); }
inline Tensor mean(const Tensor& x, const std::vector<std::size_t>& axes) { return reduce(x, axes, ReduceKind::Mean); }
inline Tensor variance(const Tensor& x, const std::vector<std::size_t>& axes) { return reduce(x, axes, ReduceKind::Variance); }
inline Tensor sum_all(const Tensor& x) { return reduce_all(x, ReduceKind::Sum); }
inline Tensor mean_all(const Tensor& x) { return reduce_all(x, ReduceKind::Mean); }

// ---- Shape and indexing ---------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape);
/// [n x d] -> [heads x n x d/heads]
Tensor split_heads(const Tensor& x, std::size_t heads);
/// [heads x n x dh] -> [n x heads*dh]
Tensor merge_heads(const Tensor& x);
/// Rows of `table` ([V x d]) selected by `ids` -> [ids.size() x d].
Tensor gather_rows(const Tensor& table, std::span<const std::int64_t> ids);
/// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng);

// ---- Losses ---------------------------------------------------------------

/// Mean token cross-entropy of logits [n x V] against integer targets.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets);

// ---- Gradient checking ----------------------------------------------------

struct GradCheckOptions {
    double step = 1e-5;
    double rtol = 1e-4;
    double atol = 1e-6;
    // Entries checked per parameter; 0 checks every entry.
    std::size_t max_entries_per_param = 0;
    std::uint64_t seed = 0;
};

struct GradCheckResult {
    bool passed = true;
    std::size_t checked = 0;
    std::size_t failures = 0;
    double worst_abs_error = 0.0;
    double worst_rel_error = 0.0;
    std::string worst_location;
};

/// Compares backward() against central finite differences of `loss_fn`
/// for every entry of every tensor in `params`. An entry passes when
/// |analytic - numeric| <= max(atol, rtol * max(|analytic|, |numeric|)).
GradCheckResult check_gradients(const std::function<Tensor()>& loss_fn,
                                const std::vector<Tensor>& params,
                                const GradCheckOptions& options = {});

}  // namespace relulab
