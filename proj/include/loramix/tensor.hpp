#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace loramix {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape &shape);
std::string shape_to_string(const Shape &shape);

namespace detail {

/// One recorded value. Leaves (parameters, inputs) have no parents; results of
/// differentiable operations carry their parents and a backward closure that
/// reads `grad` and accumulates into the parents.
struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until something flows in
    bool requires_grad = false;
    std::uint64_t seq = 0;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node &)> backward;

    std::vector<double> &grad_buffer();
};

}  // namespace detail

/// Dense row-major array of doubles with an attached gradient slot.
///
/// A Tensor is a cheap handle; copies share storage. Values are treated as
/// immutable once an operation has consumed them. The exceptions are leaf
/// parameters, which the optimizer and loaders update through
/// mutable_values().
class Tensor {
   public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape &shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const double> values() const;
    std::span<double> mutable_values();
    double item() const;
    double operator[](std::size_t flat_index) const;
    double at(std::size_t row, std::size_t col) const;

    bool requires_grad() const;
    void set_requires_grad(bool flag);
    bool is_leaf() const;

    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    /// Drops the gradient slot entirely (an absent gradient is distinct from a
    /// zero one: the optimizer skips tensors that received nothing).
    void clear_grad();

    /// Deep copy of the values with no history; keeps requires_grad.
    Tensor clone() const;
    /// Deep copy of the values with no history and no gradient tracking.
    Tensor detach() const;

    const std::shared_ptr<detail::Node> &node() const { return node_; }
    static Tensor from_node(std::shared_ptr<detail::Node> node);

   private:
    std::shared_ptr<detail::Node> node_;
};

/// Disables recording on the current thread for its lifetime.
class NoGradGuard {
   public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard &) = delete;
    NoGradGuard &operator=(const NoGradGuard &) = delete;

   private:
    bool previous_;
};

bool grad_enabled();

/// The differentiation record reachable from a root, in execution order.
///
/// Built dynamically after a forward pass; backward() walks it exactly once in
/// reverse and then releases the saved closures and parent links.
class Graph {
   public:
    explicit Graph(const Tensor &root);

    std::size_t size() const { return order_.size(); }
    /// Sequence numbers of the recorded operations, ascending.
    std::vector<std::uint64_t> sequence() const;
    void backward();

   private:
    Tensor root_;
    std::vector<std::shared_ptr<detail::Node>> order_;
    bool consumed_ = false;
};

/// Convenience: Graph(loss).backward(). `loss` must hold a single value.
void backward(const Tensor &loss);

// ---------------------------------------------------------------------------
// Operations. Each records itself when any input requires a gradient and
// recording is enabled.

Tensor matmul(const Tensor &a, const Tensor &b);
/// x[n×k] · weightᵀ where weight is [m×k]; optional bias [m].
Tensor linear(const Tensor &x, const Tensor &weight);
Tensor linear(const Tensor &x, const Tensor &weight, const Tensor &bias);

Tensor add(const Tensor &a, const Tensor &b);
Tensor sub(const Tensor &a, const Tensor &b);
Tensor mul(const Tensor &a, const Tensor &b);
Tensor scale(const Tensor &a, double factor);
Tensor reshape(const Tensor &a, Shape shape);

Tensor sum(const Tensor &a);
Tensor mean(const Tensor &a);
Tensor dot(const Tensor &a, const Tensor &b);
/// Column means of a [n×d] matrix → [d].
Tensor mean_rows(const Tensor &x);

Tensor relu(const Tensor &x);
/// Softmax over the last axis, max-subtracted.
Tensor softmax(const Tensor &logits);
/// Layer normalization over the last axis, no affine parameters.
Tensor layer_norm(const Tensor &x, double eps = 1e-5);
/// Per-row Shannon entropy of a [n×K] probability matrix → [n], with 0·log 0 = 0.
Tensor row_entropy(const Tensor &probs);
/// Divides each row by its sum.
Tensor normalize_rows(const Tensor &x);

/// Mean cross-entropy of [n×C] logits against integer labels, log-sum-exp stabilized.
Tensor cross_entropy(const Tensor &logits, std::span<const int> labels);

Tensor gather_rows(const Tensor &x, std::span<const std::size_t> rows);
/// Places x's rows at `rows` of an otherwise zero [total_rows × d] matrix.
Tensor scatter_rows(const Tensor &x, std::span<const std::size_t> rows, std::size_t total_rows);
/// Column `col` of a [n×k] matrix → [n].
Tensor column(const Tensor &x, std::size_t col);
/// Multiplies row i of x[n×d] by weights[i].
Tensor scale_rows(const Tensor &x, const Tensor &weights);
/// Rows of `table` selected by ids → [ids.size() × d].
Tensor embedding(const Tensor &table, std::span<const int> ids);

/// Inverted dropout: zeroes each entry with probability p and scales the
/// survivors by 1/(1-p). p == 0 returns the input unchanged.
Tensor dropout(const Tensor &x, double p, std::mt19937_64 &rng);

/// Multi-head scaled dot-product attention without masking.
/// q, k, v are [batch·seq × d_model]; heads split d_model evenly.
Tensor multi_head_attention(const Tensor &q, const Tensor &k, const Tensor &v, std::size_t batch,
                            std::size_t seq, std::size_t heads);

}  // namespace loramix
