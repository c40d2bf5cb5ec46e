#include "loramix/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "loramix/errors.hpp"

namespace loramix {

std::size_t shape_numel(const Shape &shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape &shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i != 0) out << "x";
        out << shape[i];
    }
    out << ']';
    return out.str();
}

namespace detail {

std::vector<double> &Node::grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
}

}  // namespace detail

namespace {

std::atomic<std::uint64_t> g_next_seq{1};
thread_local bool g_grad_enabled = true;

using detail::Node;
using BackwardFn = std::function<void(Node &)>;

void require_finite(const std::vector<double> &data, const char *op) {
    for (double v : data) {
        if (!std::isfinite(v)) throw EvaluationError(std::string("non-finite value produced by ") + op);
    }
}

Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs, BackwardFn fn,
                   const char *op) {
    require_finite(data, op);
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
    if (g_grad_enabled) {
        bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor &t) { return t.defined() && t.requires_grad(); });
        if (any) {
            node->requires_grad = true;
            node->parents.reserve(inputs.size());
            for (auto &t : inputs) node->parents.push_back(t.node());
            node->backward = std::move(fn);
        }
    }
    return Tensor::from_node(std::move(node));
}

// Gradient buffer of parent i, or nullptr when it does not take one.
std::vector<double> *parent_grad(Node &self, std::size_t i) {
    auto &p = self.parents[i];
    if (!p || !p->requires_grad) return nullptr;
    return &p->grad_buffer();
}

void require_matrix(const Tensor &t, const char *op) {
    if (t.rank() != 2) {
        throw DimensionError(std::string(op) + ": expected a matrix, got shape " + shape_to_string(t.shape()));
    }
}

void require_same_shape(const Tensor &a, const Tensor &b, const char *op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                             shape_to_string(b.shape()));
    }
}

std::size_t last_dim(const Tensor &t, const char *op) {
    if (t.rank() == 0 || t.shape().back() == 0) {
        throw DimensionError(std::string(op) + ": empty last axis in shape " + shape_to_string(t.shape()));
    }
    return t.shape().back();
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("tensor shape " + shape_to_string(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
    }
    node_ = std::make_shared<Node>();
    node_->shape = std::move(shape);
    node_->data = std::move(values);
    node_->requires_grad = requires_grad;
    node_->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
}

const Shape &Tensor::shape() const {
    static const Shape empty;
    return node_ ? node_->shape : empty;
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= rank()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_to_string(shape()));
    return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

std::span<const double> Tensor::values() const {
    if (!node_) return {};
    return node_->data;
}

std::span<double> Tensor::mutable_values() {
    if (!node_) return {};
    return node_->data;
}

double Tensor::item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_to_string(shape()));
    return node_->data[0];
}

double Tensor::operator[](std::size_t flat_index) const { return node_->data.at(flat_index); }

double Tensor::at(std::size_t row, std::size_t col) const {
    if (rank() != 2) throw DimensionError("at(row, col) on tensor of shape " + shape_to_string(shape()));
    return node_->data.at(row * node_->shape[1] + col);
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
    if (!node_) return;
    if (!is_leaf()) throw ConfigError("requires_grad can only be changed on leaf tensors");
    node_->requires_grad = flag;
}

bool Tensor::is_leaf() const { return node_ && !node_->backward; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (!node_) return {};
    return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
    if (!node_) return {};
    return node_->grad_buffer();
}

void Tensor::clear_grad() {
    if (node_) {
        node_->grad.clear();
        node_->grad.shrink_to_fit();
    }
}

Tensor Tensor::clone() const {
    if (!node_) return {};
    return Tensor(node_->shape, node_->data, node_->requires_grad);
}

Tensor Tensor::detach() const {
    if (!node_) return {};
    return Tensor(node_->shape, node_->data, false);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

// ---------------------------------------------------------------------------
// Graph

Graph::Graph(const Tensor &root) : root_(root) {
    if (!root.defined()) throw EvaluationError("backward from an undefined tensor");
    if (!root.requires_grad()) return;
    std::unordered_set<Node *> seen;
    std::vector<Node *> stack{root.node().get()};
    std::vector<std::shared_ptr<Node>> found{root.node()};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        Node *n = stack.back();
        stack.pop_back();
        for (auto &p : n->parents) {
            if (!p || !p->requires_grad || seen.count(p.get())) continue;
            seen.insert(p.get());
            found.push_back(p);
            stack.push_back(p.get());
        }
    }
    std::sort(found.begin(), found.end(), [](const auto &a, const auto &b) { return a->seq < b->seq; });
    order_ = std::move(found);
}

std::vector<std::uint64_t> Graph::sequence() const {
    std::vector<std::uint64_t> out;
    out.reserve(order_.size());
    for (auto &n : order_) out.push_back(n->seq);
    return out;
}

void Graph::backward() {
    if (consumed_) throw EvaluationError("graph already consumed by a previous backward pass");
    consumed_ = true;
    if (!root_.requires_grad()) return;
    if (root_.numel() != 1) {
        throw DimensionError("backward requires a scalar root, got shape " + shape_to_string(root_.shape()));
    }
    auto &seed = root_.node()->grad_buffer();
    seed[0] += 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
        Node &n = **it;
        if (!n.backward) continue;
        n.grad_buffer();
        n.backward(n);
    }
    // The record is single-use: drop closures and links so saved activations go.
    for (auto &n : order_) {
        if (n->backward) {
            n->backward = nullptr;
            n->parents.clear();
        }
    }
    order_.clear();
}

void backward(const Tensor &loss) { Graph(loss).backward(); }

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor &a, const Tensor &b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul: inner dimensions differ, " + shape_to_string(a.shape()) + " x " +
                             shape_to_string(b.shape()));
    }
    std::vector<double> out(m * n, 0.0);
    auto A = a.values();
    auto B = b.values();
    for (std::size_t i = 0; i < m; ++i) {
        double *row = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double s = A[i * k + p];
            const double *brow = B.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += s * brow[j];
        }
    }
    return make_result(
        {m, n}, std::move(out), {a, b},
        [m, k, n](Node &self) {
            const auto &G = self.grad;
            const auto &A = self.parents[0]->data;
            const auto &B = self.parents[1]->data;
            if (auto *ga = parent_grad(self, 0)) {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[p * n + j];
                        (*ga)[i * k + p] += acc;
                    }
            }
            if (auto *gb = parent_grad(self, 1)) {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        const double s = A[i * k + p];
                        double *dst = gb->data() + p * n;
                        const double *g = G.data() + i * n;
                        for (std::size_t j = 0; j < n; ++j) dst[j] += s * g[j];
                    }
            }
        },
        "matmul");
}

namespace {

Tensor linear_impl(const Tensor &x, const Tensor &weight, const Tensor *bias) {
    require_matrix(x, "linear");
    require_matrix(weight, "linear");
    const std::size_t n = x.dim(0), k = x.dim(1), m = weight.dim(0);
    if (weight.dim(1) != k) {
        throw DimensionError("linear: input " + shape_to_string(x.shape()) + " incompatible with weight " +
                             shape_to_string(weight.shape()));
    }
    if (bias && (bias->rank() != 1 || bias->dim(0) != m)) {
        throw DimensionError("linear: bias " + shape_to_string(bias->shape()) + " incompatible with weight " +
                             shape_to_string(weight.shape()));
    }
    auto X = x.values();
    auto W = weight.values();
    // Transposed weight so the inner loop runs over contiguous outputs.
    std::vector<double> wt(k * m);
    for (std::size_t o = 0; o < m; ++o)
        for (std::size_t p = 0; p < k; ++p) wt[p * m + o] = W[o * k + p];
    std::vector<double> out(n * m, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double *row = out.data() + i * m;
        if (bias) std::copy(bias->values().begin(), bias->values().end(), row);
        for (std::size_t p = 0; p < k; ++p) {
            const double s = X[i * k + p];
            if (s == 0.0) continue;
            const double *w = wt.data() + p * m;
            for (std::size_t o = 0; o < m; ++o) row[o] += s * w[o];
        }
    }
    std::vector<Tensor> inputs{x, weight};
    if (bias) inputs.push_back(*bias);
    return make_result(
        {n, m}, std::move(out), std::move(inputs),
        [n, k, m](Node &self) {
            const auto &G = self.grad;
            const auto &X = self.parents[0]->data;
            const auto &W = self.parents[1]->data;
            if (auto *gx = parent_grad(self, 0)) {
                for (std::size_t i = 0; i < n; ++i) {
                    double *dst = gx->data() + i * k;
                    for (std::size_t o = 0; o < m; ++o) {
                        const double g = G[i * m + o];
                        if (g == 0.0) continue;
                        const double *w = W.data() + o * k;
                        for (std::size_t p = 0; p < k; ++p) dst[p] += g * w[p];
                    }
                }
            }
            if (auto *gw = parent_grad(self, 1)) {
                for (std::size_t i = 0; i < n; ++i) {
                    const double *xrow = X.data() + i * k;
                    for (std::size_t o = 0; o < m; ++o) {
                        const double g = G[i * m + o];
                        if (g == 0.0) continue;
                        double *dst = gw->data() + o * k;
                        for (std::size_t p = 0; p < k; ++p) dst[p] += g * xrow[p];
                    }
                }
            }
            if (self.parents.size() > 2) {
                if (auto *gb = parent_grad(self, 2)) {
                    for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t o = 0; o < m; ++o) (*gb)[o] += G[i * m + o];
                }
            }
        },
        "linear");
}

}  // namespace

Tensor linear(const Tensor &x, const Tensor &weight) { return linear_impl(x, weight, nullptr); }
Tensor linear(const Tensor &x, const Tensor &weight, const Tensor &bias) {
    return linear_impl(x, weight, bias.defined() ? &bias : nullptr);
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor &a, const Tensor &b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.values().begin(), a.values().end());
    auto B = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
    return make_result(a.shape(), std::move(out), {a, b},
                       [](Node &self) {
                           for (std::size_t i = 0; i < 2; ++i)
                               if (auto *g = parent_grad(self, i))
                                   for (std::size_t j = 0; j < g->size(); ++j) (*g)[j] += self.grad[j];
                       },
                       "add");
}

Tensor sub(const Tensor &a, const Tensor &b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.values().begin(), a.values().end());
    auto B = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= B[i];
    return make_result(a.shape(), std::move(out), {a, b},
                       [](Node &self) {
                           if (auto *g = parent_grad(self, 0))
                               for (std::size_t j = 0; j < g->size(); ++j) (*g)[j] += self.grad[j];
                           if (auto *g = parent_grad(self, 1))
                               for (std::size_t j = 0; j < g->size(); ++j) (*g)[j] -= self.grad[j];
                       },
                       "sub");
}

Tensor mul(const Tensor &a, const Tensor &b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.values().begin(), a.values().end());
    auto B = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
    return make_result(a.shape(), std::move(out), {a, b},
                       [](Node &self) {
                           const auto &A = self.parents[0]->data;
                           const auto &B = self.parents[1]->data;
                           if (auto *g = parent_grad(self, 0))
                               for (std::size_t j = 0; j < g->size(); ++j) (*g)[j] += self.grad[j] * B[j];
                           if (auto *g = parent_grad(self, 1))
                               for (std::size_t j = 0; j < g->size(); ++j) (*g)[j] += self.grad[j] * A[j];
                       },
                       "mul");
}

Tensor scale(const Tensor &a, double factor) {
    std::vector<double> out(a.values().begin(), a.values().end());
    for (double &v : out) v *= factor;
    return make_result(a.shape(), std::move(out), {a},
                       [factor](Node &self) {
                           if (auto *g = parent_grad(self, 0))
                               for (std::size_t j = 0; j < g->size(); ++j) (*g)[j] += self.grad[j] * factor;
                       },
                       "scale");
}

Tensor reshape(const Tensor &a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw DimensionError("reshape: cannot view " + shape_to_string(a.shape()) + " as " + shape_to_string(shape));
    }
    std::vector<double> out(a.values().begin(), a.values().end());
    return make_result(std::move(shape), std::move(out), {a},
                       [](Node &self) {
                           if (auto *g = parent_grad(self, 0))
                               for (std::size_t j = 0; j < g->size(); ++j) (*g)[j] += self.grad[j];
                       },
                       "reshape");
}

Tensor relu(const Tensor &x) {
    std::vector<double> out(x.values().begin(), x.values().end());
    for (double &v : out) v = v > 0.0 ? v : 0.0;
    return make_result(x.shape(), std::move(out), {x},
                       [](Node &self) {
                           const auto &X = self.parents[0]->data;
                           if (auto *g = parent_grad(self, 0))
                               for (std::size_t j = 0; j < g->size(); ++j)
                                   if (X[j] > 0.0) (*g)[j] += self.grad[j];
                       },
                       "relu");
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor &a) {
    double total = 0.0;
    for (double v : a.values()) total += v;
    return make_result({1}, {total}, {a},
                       [](Node &self) {
                           if (auto *g = parent_grad(self, 0))
                               for (double &v : *g) v += self.grad[0];
                       },
                       "sum");
}

Tensor mean(const Tensor &a) {
    if (a.numel() == 0) throw DimensionError("mean of an empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor dot(const Tensor &a, const Tensor &b) {
    require_same_shape(a, b, "dot");
    double total = 0.0;
    auto A = a.values();
    auto B = b.values();
    for (std::size_t i = 0; i < A.size(); ++i) total += A[i] * B[i];
    return make_result({1}, {total}, {a, b},
                       [](Node &self) {
                           const auto &A = self.parents[0]->data;
                           const auto &B = self.parents[1]->data;
                           const double g0 = self.grad[0];
                           if (auto *g = parent_grad(self, 0))
                               for (std::size_t j = 0; j < g->size(); ++j) (*g)[j] += g0 * B[j];
                           if (auto *g = parent_grad(self, 1))
                               for (std::size_t j = 0; j < g->size(); ++j) (*g)[j] += g0 * A[j];
                       },
                       "dot");
}

Tensor mean_rows(const Tensor &x) {
    require_matrix(x, "mean_rows");
    const std::size_t n = x.dim(0), d = x.dim(1);
    if (n == 0) throw DimensionError("mean_rows: no rows");
    std::vector<double> out(d, 0.0);
    auto X = x.values();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out[j] += X[i * d + j];
    const double inv = 1.0 / static_cast<double>(n);
    for (double &v : out) v *= inv;
    return make_result({d}, std::move(out), {x},
                       [n, d, inv](Node &self) {
                           if (auto *g = parent_grad(self, 0))
                               for (std::size_t i = 0; i < n; ++i)
                                   for (std::size_t j = 0; j < d; ++j) (*g)[i * d + j] += self.grad[j] * inv;
                       },
                       "mean_rows");
}

// ---------------------------------------------------------------------------
// Normalizations

Tensor softmax(const Tensor &logits) {
    const std::size_t k = last_dim(logits, "softmax");
    const std::size_t rows = logits.numel() / k;
    auto Z = logits.values();
    std::vector<double> out(logits.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double *z = Z.data() + r * k;
        double *p = out.data() + r * k;
        const double mx = *std::max_element(z, z + k);
        double total = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            p[j] = std::exp(z[j] - mx);
            total += p[j];
        }
        const double inv = 1.0 / total;
        for (std::size_t j = 0; j < k; ++j) p[j] *= inv;
    }
    return make_result(logits.shape(), std::move(out), {logits},
                       [rows, k](Node &self) {
                           auto *g = parent_grad(self, 0);
                           if (!g) return;
                           const auto &P = self.data;
                           const auto &G = self.grad;
                           for (std::size_t r = 0; r < rows; ++r) {
                               double inner = 0.0;
                               for (std::size_t j = 0; j < k; ++j) inner += G[r * k + j] * P[r * k + j];
                               for (std::size_t j = 0; j < k; ++j)
                                   (*g)[r * k + j] += P[r * k + j] * (G[r * k + j] - inner);
                           }
                       },
                       "softmax");
}

Tensor layer_norm(const Tensor &x, double eps) {
    const std::size_t d = last_dim(x, "layer_norm");
    const std::size_t rows = x.numel() / d;
    auto X = x.values();
    std::vector<double> out(x.numel());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double *xr = X.data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[r] = inv;
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = (xr[j] - mu) * inv;
    }
    return make_result(x.shape(), std::move(out), {x},
                       [rows, d, inv_std = std::move(inv_std)](Node &self) {
                           auto *g = parent_grad(self, 0);
                           if (!g) return;
                           const auto &Y = self.data;
                           const auto &G = self.grad;
                           for (std::size_t r = 0; r < rows; ++r) {
                               double mg = 0.0, mgy = 0.0;
                               for (std::size_t j = 0; j < d; ++j) {
                                   mg += G[r * d + j];
                                   mgy += G[r * d + j] * Y[r * d + j];
                               }
                               mg /= static_cast<double>(d);
                               mgy /= static_cast<double>(d);
                               for (std::size_t j = 0; j < d; ++j)
                                   (*g)[r * d + j] += inv_std[r] * (G[r * d + j] - mg - Y[r * d + j] * mgy);
                           }
                       },
                       "layer_norm");
}

Tensor row_entropy(const Tensor &probs) {
    const std::size_t k = last_dim(probs, "row_entropy");
    const std::size_t rows = probs.numel() / k;
    auto P = probs.values();
    std::vector<double> out(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        double h = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            const double p = P[r * k + j];
            if (p > 0.0) h -= p * std::log(p);
        }
        out[r] = h;
    }
    return make_result({rows}, std::move(out), {probs},
                       [rows, k](Node &self) {
                           auto *g = parent_grad(self, 0);
                           if (!g) return;
                           const auto &P = self.parents[0]->data;
                           for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t j = 0; j < k; ++j) {
                                   const double p = P[r * k + j];
                                   if (p > 0.0) (*g)[r * k + j] += self.grad[r] * (-std::log(p) - 1.0);
                               }
                       },
                       "row_entropy");
}

Tensor normalize_rows(const Tensor &x) {
    const std::size_t k = last_dim(x, "normalize_rows");
    const std::size_t rows = x.numel() / k;
    auto X = x.values();
    std::vector<double> out(x.numel());
    std::vector<double> sums(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += X[r * k + j];
        if (s == 0.0) throw EvaluationError("normalize_rows: row " + std::to_string(r) + " sums to zero");
        sums[r] = s;
        for (std::size_t j = 0; j < k; ++j) out[r * k + j] = X[r * k + j] / s;
    }
    return make_result(x.shape(), std::move(out), {x},
                       [rows, k, sums = std::move(sums)](Node &self) {
                           auto *g = parent_grad(self, 0);
                           if (!g) return;
                           const auto &Y = self.data;
                           const auto &G = self.grad;
                           for (std::size_t r = 0; r < rows; ++r) {
                               double inner = 0.0;
                               for (std::size_t j = 0; j < k; ++j) inner += G[r * k + j] * Y[r * k + j];
                               for (std::size_t j = 0; j < k; ++j)
                                   (*g)[r * k + j] += (G[r * k + j] - inner) / sums[r];
                           }
                       },
                       "normalize_rows");
}

Tensor cross_entropy(const Tensor &logits, std::span<const int> labels) {
    require_matrix(logits, "cross_entropy");
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    if (labels.size() != n) {
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                             shape_to_string(logits.shape()) + " logits");
    }
    if (n == 0) throw DimensionError("cross_entropy: empty batch");
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
            throw LabelError("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                             " outside [0, " + std::to_string(c) + ")");
        }
    }
    auto Z = logits.values();
    std::vector<double> probs(n * c);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double *z = Z.data() + i * c;
        const double mx = *std::max_element(z, z + c);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            probs[i * c + j] = std::exp(z[j] - mx);
            s += probs[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= s;
        total += (mx + std::log(s)) - z[labels[i]];
    }
    std::vector<int> saved(labels.begin(), labels.end());
    return make_result({1}, {total / static_cast<double>(n)}, {logits},
                       [n, c, probs = std::move(probs), saved = std::move(saved)](Node &self) {
                           auto *g = parent_grad(self, 0);
                           if (!g) return;
                           const double scale_factor = self.grad[0] / static_cast<double>(n);
                           for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t j = 0; j < c; ++j) {
                                   double d = probs[i * c + j] - (static_cast<int>(j) == saved[i] ? 1.0 : 0.0);
                                   (*g)[i * c + j] += scale_factor * d;
                               }
                       },
                       "cross_entropy");
}

// ---------------------------------------------------------------------------
// Indexing

Tensor gather_rows(const Tensor &x, std::span<const std::size_t> rows) {
    require_matrix(x, "gather_rows");
    const std::size_t n = x.dim(0), d = x.dim(1);
    std::vector<double> out(rows.size() * d);
    auto X = x.values();
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= n) throw IndexError("gather_rows: row " + std::to_string(rows[r]) + " of " + std::to_string(n));
        std::copy_n(X.data() + rows[r] * d, d, out.data() + r * d);
    }
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    return make_result({rows.size(), d}, std::move(out), {x},
                       [d, idx = std::move(idx)](Node &self) {
                           auto *g = parent_grad(self, 0);
                           if (!g) return;
                           for (std::size_t r = 0; r < idx.size(); ++r)
                               for (std::size_t j = 0; j < d; ++j) (*g)[idx[r] * d + j] += self.grad[r * d + j];
                       },
                       "gather_rows");
}

Tensor scatter_rows(const Tensor &x, std::span<const std::size_t> rows, std::size_t total_rows) {
    require_matrix(x, "scatter_rows");
    const std::size_t d = x.dim(1);
    if (rows.size() != x.dim(0)) {
        throw DimensionError("scatter_rows: " + std::to_string(rows.size()) + " targets for " + shape_to_string(x.shape()));
    }
    std::vector<double> out(total_rows * d, 0.0);
    auto X = x.values();
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= total_rows) {
            throw IndexError("scatter_rows: row " + std::to_string(rows[r]) + " of " + std::to_string(total_rows));
        }
        for (std::size_t j = 0; j < d; ++j) out[rows[r] * d + j] += X[r * d + j];
    }
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    return make_result({total_rows, d}, std::move(out), {x},
                       [d, idx = std::move(idx)](Node &self) {
                           auto *g = parent_grad(self, 0);
                           if (!g) return;
                           for (std::size_t r = 0; r < idx.size(); ++r)
                               for (std::size_t j = 0; j < d; ++j) (*g)[r * d + j] += self.grad[idx[r] * d + j];
                       },
                       "scatter_rows");
}

Tensor column(const Tensor &x, std::size_t col) {
    require_matrix(x, "column");
    const std::size_t n = x.dim(0), k = x.dim(1);
    if (col >= k) throw IndexError("column " + std::to_string(col) + " of " + shape_to_string(x.shape()));
    std::vector<double> out(n);
    auto X = x.values();
    for (std::size_t i = 0; i < n; ++i) out[i] = X[i * k + col];
    return make_result({n}, std::move(out), {x},
                       [n, k, col](Node &self) {
                           if (auto *g = parent_grad(self, 0))
                               for (std::size_t i = 0; i < n; ++i) (*g)[i * k + col] += self.grad[i];
                       },
                       "column");
}

Tensor scale_rows(const Tensor &x, const Tensor &weights) {
    require_matrix(x, "scale_rows");
    const std::size_t n = x.dim(0), d = x.dim(1);
    if (weights.numel() != n) {
        throw DimensionError("scale_rows: weights " + shape_to_string(weights.shape()) + " for rows of " +
                             shape_to_string(x.shape()));
    }
    std::vector<double> out(x.values().begin(), x.values().end());
    auto W = weights.values();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] *= W[i];
    return make_result(x.shape(), std::move(out), {x, weights},
                       [n, d](Node &self) {
                           const auto &X = self.parents[0]->data;
                           const auto &W = self.parents[1]->data;
                           const auto &G = self.grad;
                           if (auto *g = parent_grad(self, 0))
                               for (std::size_t i = 0; i < n; ++i)
                                   for (std::size_t j = 0; j < d; ++j) (*g)[i * d + j] += G[i * d + j] * W[i];
                           if (auto *g = parent_grad(self, 1))
                               for (std::size_t i = 0; i < n; ++i) {
                                   double acc = 0.0;
                                   for (std::size_t j = 0; j < d; ++j) acc += G[i * d + j] * X[i * d + j];
                                   (*g)[i] += acc;
                               }
                       },
                       "scale_rows");
}

Tensor embedding(const Tensor &table, std::span<const int> ids) {
    require_matrix(table, "embedding");
    const std::size_t v = table.dim(0), d = table.dim(1);
    std::vector<std::size_t> rows(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
            throw IndexError("embedding id " + std::to_string(ids[i]) + " outside [0, " + std::to_string(v) + ")");
        }
        rows[i] = static_cast<std::size_t>(ids[i]);
    }
    (void)d;
    return gather_rows(table, rows);
}

Tensor dropout(const Tensor &x, double p, std::mt19937_64 &rng) {
    if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must lie in [0, 1), got " + std::to_string(p));
    if (p == 0.0) return x;
    std::bernoulli_distribution keep(1.0 - p);
    const double inv = 1.0 / (1.0 - p);
    std::vector<double> mask(x.numel());
    for (double &m : mask) m = keep(rng) ? inv : 0.0;
    std::vector<double> out(x.values().begin(), x.values().end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
    return make_result(x.shape(), std::move(out), {x},
                       [mask = std::move(mask)](Node &self) {
                           if (auto *g = parent_grad(self, 0))
                               for (std::size_t j = 0; j < g->size(); ++j) (*g)[j] += self.grad[j] * mask[j];
                       },
                       "dropout");
}

// ---------------------------------------------------------------------------
// Attention

Tensor multi_head_attention(const Tensor &q, const Tensor &k, const Tensor &v, std::size_t batch, std::size_t seq,
                            std::size_t heads) {
    require_matrix(q, "multi_head_attention");
    require_same_shape(q, k, "multi_head_attention");
    require_same_shape(q, v, "multi_head_attention");
    const std::size_t d = q.dim(1);
    if (q.dim(0) != batch * seq) {
        throw DimensionError("multi_head_attention: " + shape_to_string(q.shape()) + " is not batch " +
                             std::to_string(batch) + " x seq " + std::to_string(seq));
    }
    if (heads == 0 || d % heads != 0) {
        throw DimensionError("multi_head_attention: d_model " + std::to_string(d) + " not divisible into " +
                             std::to_string(heads) + " heads");
    }
    const std::size_t dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    auto Q = q.values();
    auto K = k.values();
    auto V = v.values();
    std::vector<double> probs(batch * heads * seq * seq);
    std::vector<double> out(batch * seq * d, 0.0);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h) {
            double *P = probs.data() + (b * heads + h) * seq * seq;
            for (std::size_t i = 0; i < seq; ++i) {
                const double *qi = Q.data() + (b * seq + i) * d + h * dh;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < seq; ++j) {
                    const double *kj = K.data() + (b * seq + j) * d + h * dh;
                    double s = 0.0;
                    for (std::size_t t = 0; t < dh; ++t) s += qi[t] * kj[t];
                    s *= inv_sqrt;
                    P[i * seq + j] = s;
                    mx = std::max(mx, s);
                }
                double total = 0.0;
                for (std::size_t j = 0; j < seq; ++j) {
                    P[i * seq + j] = std::exp(P[i * seq + j] - mx);
                    total += P[i * seq + j];
                }
                double *oi = out.data() + (b * seq + i) * d + h * dh;
                for (std::size_t j = 0; j < seq; ++j) {
                    P[i * seq + j] /= total;
                    const double w = P[i * seq + j];
                    const double *vj = V.data() + (b * seq + j) * d + h * dh;
                    for (std::size_t t = 0; t < dh; ++t) oi[t] += w * vj[t];
                }
            }
        }
    return make_result(
        q.shape(), std::move(out), {q, k, v},
        [batch, seq, heads, d, dh, inv_sqrt, probs = std::move(probs)](Node &self) {
            const auto &Q = self.parents[0]->data;
            const auto &K = self.parents[1]->data;
            const auto &V = self.parents[2]->data;
            const auto &G = self.grad;
            auto *gq = parent_grad(self, 0);
            auto *gk = parent_grad(self, 1);
            auto *gv = parent_grad(self, 2);
            std::vector<double> dP(seq * seq), dS(seq * seq);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t h = 0; h < heads; ++h) {
                    const double *P = probs.data() + (b * heads + h) * seq * seq;
                    for (std::size_t i = 0; i < seq; ++i) {
                        const double *gi = G.data() + (b * seq + i) * d + h * dh;
                        for (std::size_t j = 0; j < seq; ++j) {
                            const double *vj = V.data() + (b * seq + j) * d + h * dh;
                            double s = 0.0;
                            for (std::size_t t = 0; t < dh; ++t) s += gi[t] * vj[t];
                            dP[i * seq + j] = s;
                            if (gv) {
                                double *dvj = gv->data() + (b * seq + j) * d + h * dh;
                                const double w = P[i * seq + j];
                                for (std::size_t t = 0; t < dh; ++t) dvj[t] += w * gi[t];
                            }
                        }
                        double inner = 0.0;
                        for (std::size_t j = 0; j < seq; ++j) inner += dP[i * seq + j] * P[i * seq + j];
                        for (std::size_t j = 0; j < seq; ++j)
                            dS[i * seq + j] = P[i * seq + j] * (dP[i * seq + j] - inner) * inv_sqrt;
                    }
                    for (std::size_t i = 0; i < seq; ++i)
                        for (std::size_t j = 0; j < seq; ++j) {
                            const double s = dS[i * seq + j];
                            if (s == 0.0) continue;
                            if (gq) {
                                double *dqi = gq->data() + (b * seq + i) * d + h * dh;
                                const double *kj = K.data() + (b * seq + j) * d + h * dh;
                                for (std::size_t t = 0; t < dh; ++t) dqi[t] += s * kj[t];
                            }
                            if (gk) {
                                double *dkj = gk->data() + (b * seq + j) * d + h * dh;
                                const double *qi = Q.data() + (b * seq + i) * d + h * dh;
                                for (std::size_t t = 0; t < dh; ++t) dkj[t] += s * qi[t];
                            }
                        }
                }
        },
        "multi_head_attention");
}

}  // namespace loramix
