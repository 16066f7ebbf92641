#pragma once

// Dense f64 tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a shared handle to a node holding its value and, when it
// requires a gradient, the operation that produced it plus handles to its
// inputs. Calling backward() on a scalar walks that graph once in reverse
// topological order. Graphs are rebuilt on every forward pass; parameters are
// long-lived leaves whose gradients accumulate until zero_grad().

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "deepedm/rng.hpp"

namespace deepedm {

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::size_t numel(const Shape& shape) noexcept {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    [[nodiscard]] bool is_leaf() const noexcept { return parents.empty(); }

    std::vector<double>& ensure_grad() {
        if (grad.size() != value.size()) {
            grad.assign(value.size(), 0.0);
        }
        return grad;
    }
};

}  // namespace detail

class Tensor {
public:
    Tensor() : node_(std::make_shared<detail::Node>()) { node_->value.assign(1, 0.0); }

    static Tensor from(Shape shape, std::vector<double> values) {
        if (numel(shape) != values.size()) {
            throw DimensionError("tensor: shape " + to_string(shape) + " holds " + std::to_string(numel(shape)) +
                                 " values, got " + std::to_string(values.size()));
        }
        Tensor t(std::make_shared<detail::Node>());
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(values);
        return t;
    }

    static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }

    static Tensor full(Shape shape, double value) {
        const std::size_t n = numel(shape);
        return from(std::move(shape), std::vector<double>(n, value));
    }

    static Tensor scalar(double value) { return from({}, {value}); }

    /// A trainable leaf: requires_grad with a zeroed gradient buffer.
    static Tensor parameter(Shape shape, std::vector<double> values) {
        Tensor t = from(std::move(shape), std::move(values));
        t.node_->requires_grad = true;
        t.node_->ensure_grad();
        return t;
    }

    [[nodiscard]] const Shape& shape() const noexcept { return node_->shape; }
    [[nodiscard]] std::size_t rank() const noexcept { return node_->shape.size(); }
    [[nodiscard]] std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    [[nodiscard]] std::size_t size() const noexcept { return node_->value.size(); }

    [[nodiscard]] std::span<const double> data() const noexcept { return node_->value; }

    /// Writable storage; only leaves may be mutated (optimizer updates, finite differences).
    [[nodiscard]] std::span<double> mutable_data() const {
        if (!node_->is_leaf()) {
            throw std::logic_error("tensor: cannot mutate the output of a recorded operation");
        }
        return node_->value;
    }

    /// Accumulated gradient; empty when no gradient has been produced.
    [[nodiscard]] std::span<const double> grad() const noexcept { return node_->grad; }
    [[nodiscard]] std::span<double> mutable_grad() const { return node_->ensure_grad(); }

    void zero_grad() const {
        if (node_->requires_grad) {
            std::fill(node_->ensure_grad().begin(), node_->grad.end(), 0.0);
        } else {
            node_->grad.clear();
        }
    }

    [[nodiscard]] bool requires_grad() const noexcept { return node_->requires_grad; }

    /// True when this tensor was produced by a recorded operation.
    [[nodiscard]] bool on_tape() const noexcept { return !node_->parents.empty(); }

    [[nodiscard]] const char* op_name() const noexcept { return node_->op; }

    /// Copy of the value cut from the graph.
    [[nodiscard]] Tensor detach() const { return from(node_->shape, node_->value); }

    [[nodiscard]] double item() const {
        if (size() != 1) {
            throw DimensionError("tensor: item() on tensor of shape " + to_string(shape()));
        }
        return node_->value[0];
    }

    [[nodiscard]] double operator[](std::size_t flat) const { return node_->value.at(flat); }

    [[nodiscard]] double at(std::size_t i, std::size_t j) const {
        return node_->value.at(i * node_->shape.at(1) + j);
    }

    [[nodiscard]] double at(std::size_t i, std::size_t j, std::size_t k) const {
        return node_->value.at((i * node_->shape.at(1) + j) * node_->shape.at(2) + k);
    }

    [[nodiscard]] std::vector<double> to_vector() const { return node_->value; }

    [[nodiscard]] detail::Node* node() const noexcept { return node_.get(); }
    [[nodiscard]] const std::shared_ptr<detail::Node>& handle() const noexcept { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

    friend Tensor make_op_result(Shape, std::vector<double>, const char*, std::initializer_list<const Tensor*>,
                                 std::function<void(detail::Node&)>);

    std::shared_ptr<detail::Node> node_;
};

/// Record the output of an operation. The backward closure receives the
/// output node (gradient filled) and must accumulate into parents that
/// require a gradient. When no input requires a gradient the result is a
/// detached constant and the closure is dropped.
inline Tensor make_op_result(Shape shape, std::vector<double> value, const char* op,
                             std::initializer_list<const Tensor*> inputs, std::function<void(detail::Node&)> backward) {
    Tensor out(std::make_shared<detail::Node>());
    out.node_->shape = std::move(shape);
    out.node_->value = std::move(value);
    out.node_->op = op;
#ifndef NDEBUG
    for (double v : out.node_->value) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string("tensor: non-finite value produced by ") + op);
        }
    }
#endif
    bool needs_grad = false;
    for (const Tensor* in : inputs) {
        needs_grad = needs_grad || in->requires_grad();
    }
    if (needs_grad) {
        out.node_->requires_grad = true;
        for (const Tensor* in : inputs) {
            out.node_->parents.push_back(in->handle());
        }
        out.node_->backward = std::move(backward);
    }
    return out;
}

/// Nodes reachable from a root, parents before children.
class Tape {
public:
    static Tape record(const Tensor& root) {
        Tape tape;
        std::unordered_set<const detail::Node*> seen;
        // Iterative post-order DFS keeps deep graphs off the call stack.
        std::vector<std::pair<detail::Node*, std::size_t>> stack;
        if (root.requires_grad()) {
            stack.emplace_back(root.node(), 0);
            seen.insert(root.node());
        }
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                detail::Node* parent = node->parents[next++].get();
                if (parent->requires_grad && seen.insert(parent).second) {
                    stack.emplace_back(parent, 0);
                }
            } else {
                tape.nodes_.push_back(node);
                stack.pop_back();
            }
        }
        return tape;
    }

    [[nodiscard]] std::span<detail::Node* const> nodes() const noexcept { return nodes_; }
    [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

    /// Seed d(root)/d(root) = 1 and sweep in reverse. Interior gradients are
    /// released as soon as they have been propagated.
    void backward() const {
        if (nodes_.empty()) {
            return;
        }
        detail::Node* root = nodes_.back();
        for (double& g : root->ensure_grad()) {
            g = root->is_leaf() ? g + 1.0 : 1.0;
        }
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            detail::Node* node = *it;
            if (node->is_leaf()) {
                continue;
            }
            node->ensure_grad();
            if (node->backward) {
                node->backward(*node);
            }
            node->grad.clear();
            node->grad.shrink_to_fit();
        }
    }

private:
    std::vector<detail::Node*> nodes_;
};

/// Accumulate d(loss)/d(leaf) into every reachable leaf that requires a gradient.
inline void backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw DimensionError("backward: loss must be a scalar, got shape " + to_string(loss.shape()));
    }
    if (!loss.requires_grad()) {
        throw std::logic_error("backward: loss is not connected to any tensor that requires a gradient");
    }
    Tape::record(loss).backward();
}

namespace detail {

inline std::vector<double>* grad_of(const std::shared_ptr<Node>& n) {
    return n->requires_grad ? &n->ensure_grad() : nullptr;
}

// C[MxN] += A[MxK] * B[KxN]. Four output rows share each pass over a row of B.
inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* __restrict a, const double* __restrict b,
                    double* __restrict c) {
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        double* c0 = c + i * n;
        double* c1 = c0 + n;
        double* c2 = c1 + n;
        double* c3 = c2 + n;
        const double* a0 = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double v0 = a0[p];
            const double v1 = a0[k + p];
            const double v2 = a0[2 * k + p];
            const double v3 = a0[3 * k + p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                const double bv = brow[j];
                c0[j] += v0 * bv;
                c1[j] += v1 * bv;
                c2[j] += v2 * bv;
                c3[j] += v3 * bv;
            }
        }
    }
    for (; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[MxN] += A[MxK] * B[NxK]^T. B is transposed into scratch so the inner loop
// runs over contiguous output columns, as in gemm_nn.
inline void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
    thread_local std::vector<double> bt;
    bt.resize(k * n);
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
    }
    gemm_nn(m, k, n, a, bt.data(), c);
}

// C[MxN] += A[KxM]^T * B[KxN]
inline void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = a + p * m;
        const double* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = arow[i];
            if (av == 0.0) {
                continue;
            }
            double* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

// Shape left after dropping leading singleton dimensions.
inline Shape squeeze_leading(const Shape& s) {
    std::size_t first = 0;
    while (first + 1 < s.size() && s[first] == 1) {
        ++first;
    }
    if (s.size() == 1 && s[0] == 1) {
        return {};
    }
    return Shape(s.begin() + static_cast<std::ptrdiff_t>(first), s.end());
}

inline bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) {
        return false;
    }
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

enum class BinaryKind { add, sub, mul };

inline Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* name) {
    // Broadcasting: the smaller operand, with leading singleton dims removed,
    // must equal a trailing block of the larger one; it is tiled over the
    // leading dims.
    const bool a_big = a.size() >= b.size();
    const Tensor& big = a_big ? a : b;
    const Tensor& small = a_big ? b : a;
    if (a.shape() != b.shape() && !is_suffix(squeeze_leading(small.shape()), big.shape())) {
        throw DimensionError(std::string(name) + ": cannot broadcast shapes " + to_string(a.shape()) + " and " +
                             to_string(b.shape()));
    }
    const std::size_t n = big.size();
    const auto av = a.data();
    const auto bv = b.data();
    const std::size_t na = a.size();
    const std::size_t nb = b.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = av[i % na];
        const double y = bv[i % nb];
        switch (kind) {
            case BinaryKind::add: out[i] = x + y; break;
            case BinaryKind::sub: out[i] = x - y; break;
            case BinaryKind::mul: out[i] = x * y; break;
        }
    }
    return make_op_result(big.shape(), std::move(out), name, {&a, &b}, [kind, na, nb, n](Node& self) {
        const auto& pa = self.parents[0];
        const auto& pb = self.parents[1];
        std::vector<double>* ga = grad_of(pa);
        std::vector<double>* gb = grad_of(pb);
        const auto& g = self.grad;
        for (std::size_t i = 0; i < n; ++i) {
            switch (kind) {
                case BinaryKind::add:
                    if (ga) (*ga)[i % na] += g[i];
                    if (gb) (*gb)[i % nb] += g[i];
                    break;
                case BinaryKind::sub:
                    if (ga) (*ga)[i % na] += g[i];
                    if (gb) (*gb)[i % nb] -= g[i];
                    break;
                case BinaryKind::mul:
                    if (ga) (*ga)[i % na] += g[i] * pb->value[i % nb];
                    if (gb) (*gb)[i % nb] += g[i] * pa->value[i % na];
                    break;
            }
        }
    });
}

template <typename F, typename DF>
Tensor unary(const Tensor& x, const char* name, F f, DF df) {
    const auto xv = x.data();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        out[i] = f(xv[i]);
    }
    return make_op_result(x.shape(), std::move(out), name, {&x}, [df](Node& self) {
        const auto& px = self.parents[0];
        auto& gx = px->ensure_grad();
        for (std::size_t i = 0; i < gx.size(); ++i) {
            gx[i] += self.grad[i] * df(px->value[i], self.value[i]);
        }
    });
}

// Split a shape around `axis` into (outer, length, inner) extents.
inline void axis_extents(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& len, std::size_t& inner) {
    outer = 1;
    inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    len = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryKind::add, "add"); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryKind::sub, "sub"); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryKind::mul, "mul"); }

inline Tensor scale(const Tensor& x, double s) {
    return detail::unary(
        x, "scale", [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& x, double c) {
    return detail::unary(
        x, "add_scalar", [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Tensor relu(const Tensor& x) {
    return detail::unary(
        x, "relu", [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& x) {
    return detail::unary(
        x, "sigmoid",
        [](double v) {
            if (v >= 0.0) {
                return 1.0 / (1.0 + std::exp(-v));
            }
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

/// tanh approximation of GELU.
inline double gelu_value(double v) noexcept {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    return 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v)));
}

inline double gelu_derivative(double v) noexcept {
    constexpr double c = 0.7978845608028654;
    const double t = std::tanh(c * (v + 0.044715 * v * v * v));
    return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * v * v);
}

inline Tensor gelu(const Tensor& x) {
    return detail::unary(
        x, "gelu", [](double v) { return gelu_value(v); }, [](double v, double) { return gelu_derivative(v); });
}

inline double sgn(double v) noexcept { return (v > 0.0) - (v < 0.0); }

inline Tensor abs(const Tensor& x) {
    return detail::unary(
        x, "abs", [](double v) { return std::fabs(v); }, [](double v, double) { return sgn(v); });
}

/// sgn with sgn(0) = 0; piecewise constant, so its gradient is zero.
inline Tensor sign(const Tensor& x) {
    return detail::unary(
        x, "sign", [](double v) { return sgn(v); }, [](double, double) { return 0.0; });
}

inline Tensor square(const Tensor& x) {
    return detail::unary(
        x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
    const auto xv = x.data();
    const double total = std::accumulate(xv.begin(), xv.end(), 0.0);
    return make_op_result({}, {total}, "sum", {&x}, [](detail::Node& self) {
        auto& gx = self.parents[0]->ensure_grad();
        for (double& g : gx) g += self.grad[0];
    });
}

inline Tensor mean(const Tensor& x) {
    const auto xv = x.data();
    const double n = static_cast<double>(xv.size());
    const double total = std::accumulate(xv.begin(), xv.end(), 0.0);
    return make_op_result({}, {total / n}, "mean", {&x}, [n](detail::Node& self) {
        auto& gx = self.parents[0]->ensure_grad();
        const double g = self.grad[0] / n;
        for (double& v : gx) v += g;
    });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Matrix product. `a` is [m x k] or a batch [B x m x k]; `b` is a shared
/// [k x n] matrix or a batch [B x k x n]. With transpose_b the trailing two
/// dims of `b` are read as [n x k].
inline Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false) {
    const auto fail = [&] {
        throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                             (transpose_b ? " (b transposed)" : ""));
    };
    if (a.rank() < 2 || a.rank() > 3 || b.rank() < 2 || b.rank() > 3 || (a.rank() == 2 && b.rank() == 3)) {
        fail();
    }
    const bool batched_b = b.rank() == 3;
    const std::size_t batch = a.rank() == 3 ? a.dim(0) : 1;
    if (batched_b && b.dim(0) != batch) {
        fail();
    }
    const std::size_t m = a.dim(a.rank() - 2);
    const std::size_t k = a.dim(a.rank() - 1);
    const std::size_t bk = transpose_b ? b.dim(b.rank() - 1) : b.dim(b.rank() - 2);
    const std::size_t n = transpose_b ? b.dim(b.rank() - 2) : b.dim(b.rank() - 1);
    if (bk != k) {
        fail();
    }
    // A shared right operand is one big product over the flattened batch.
    const std::size_t groups = batched_b ? batch : 1;
    const std::size_t rows = batched_b ? m : batch * m;

    std::vector<double> out(batch * m * n, 0.0);
    const double* av = a.data().data();
    const double* bv = b.data().data();
    for (std::size_t g = 0; g < groups; ++g) {
        const double* ag = av + g * rows * k;
        const double* bg = bv + g * k * n;
        double* cg = out.data() + g * rows * n;
        if (transpose_b) {
            detail::gemm_nt(rows, k, n, ag, bg, cg);
        } else {
            detail::gemm_nn(rows, k, n, ag, bg, cg);
        }
    }
    Shape shape = a.rank() == 3 ? Shape{batch, m, n} : Shape{m, n};
    return make_op_result(std::move(shape), std::move(out), "matmul", {&a, &b},
                          [groups, rows, k, n, transpose_b](detail::Node& self) {
                              const auto& pa = self.parents[0];
                              const auto& pb = self.parents[1];
                              std::vector<double>* ga = detail::grad_of(pa);
                              std::vector<double>* gb = detail::grad_of(pb);
                              for (std::size_t g = 0; g < groups; ++g) {
                                  const double* dc = self.grad.data() + g * rows * n;
                                  const double* ag = pa->value.data() + g * rows * k;
                                  const double* bg = pb->value.data() + g * k * n;
                                  if (transpose_b) {
                                      if (ga) detail::gemm_nn(rows, n, k, dc, bg, ga->data() + g * rows * k);
                                      if (gb) detail::gemm_tn(n, rows, k, dc, ag, gb->data() + g * k * n);
                                  } else {
                                      if (ga) detail::gemm_nt(rows, n, k, dc, bg, ga->data() + g * rows * k);
                                      if (gb) detail::gemm_tn(k, rows, n, ag, dc, gb->data() + g * k * n);
                                  }
                              }
                          });
}

/// Numerically stable softmax along `axis` (max subtracted before exp).
inline Tensor softmax(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) {
        throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for shape " +
                             to_string(x.shape()));
    }
    std::size_t outer = 0, len = 0, inner = 0;
    detail::axis_extents(x.shape(), axis, outer, len, inner);
    const auto xv = x.data();
    std::vector<double> out(xv.size());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double hi = -INFINITY;
            for (std::size_t i = 0; i < len; ++i) hi = std::max(hi, xv[base + i * inner]);
            double total = 0.0;
            for (std::size_t i = 0; i < len; ++i) {
                const double e = std::exp(xv[base + i * inner] - hi);
                out[base + i * inner] = e;
                total += e;
            }
            for (std::size_t i = 0; i < len; ++i) out[base + i * inner] /= total;
        }
    }
    return make_op_result(x.shape(), std::move(out), "softmax", {&x}, [outer, len, inner](detail::Node& self) {
        auto& gx = self.parents[0]->ensure_grad();
        const auto& y = self.value;
        const auto& gy = self.grad;
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * len * inner + in;
                double dot = 0.0;
                for (std::size_t i = 0; i < len; ++i) dot += gy[base + i * inner] * y[base + i * inner];
                for (std::size_t i = 0; i < len; ++i) {
                    const std::size_t idx = base + i * inner;
                    gx[idx] += y[idx] * (gy[idx] - dot);
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.size()) {
        throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
    }
    std::vector<double> out(x.data().begin(), x.data().end());
    return make_op_result(std::move(shape), std::move(out), "reshape", {&x}, [](detail::Node& self) {
        auto& gx = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
    });
}

/// Swap the last two dimensions of a rank-2 or rank-3 tensor.
inline Tensor transpose(const Tensor& x) {
    if (x.rank() != 2 && x.rank() != 3) {
        throw DimensionError("transpose: expected rank 2 or 3, got " + to_string(x.shape()));
    }
    const std::size_t batch = x.rank() == 3 ? x.dim(0) : 1;
    const std::size_t r = x.dim(x.rank() - 2);
    const std::size_t c = x.dim(x.rank() - 1);
    const auto xv = x.data();
    std::vector<double> out(xv.size());
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
                out[b * r * c + j * r + i] = xv[b * r * c + i * c + j];
            }
        }
    }
    Shape shape = x.shape();
    std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
    return make_op_result(std::move(shape), std::move(out), "transpose", {&x}, [batch, r, c](detail::Node& self) {
        auto& gx = self.parents[0]->ensure_grad();
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t i = 0; i < r; ++i) {
                for (std::size_t j = 0; j < c; ++j) {
                    gx[b * r * c + i * c + j] += self.grad[b * r * c + j * r + i];
                }
            }
        }
    });
}

/// Contiguous range [start, start + length) along `axis`.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
    if (axis >= x.rank() || start + length > x.dim(axis)) {
        throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                             ") on axis " + std::to_string(axis) + " out of bounds for " + to_string(x.shape()));
    }
    std::size_t outer = 0, len = 0, inner = 0;
    detail::axis_extents(x.shape(), axis, outer, len, inner);
    const auto xv = x.data();
    std::vector<double> out(outer * length * inner);
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * len + start) * inner), length * inner,
                    out.begin() + static_cast<std::ptrdiff_t>(o * length * inner));
    }
    Shape shape = x.shape();
    shape[axis] = length;
    return make_op_result(std::move(shape), std::move(out), "slice", {&x},
                          [outer, len, inner, start, length](detail::Node& self) {
                              auto& gx = self.parents[0]->ensure_grad();
                              for (std::size_t o = 0; o < outer; ++o) {
                                  for (std::size_t i = 0; i < length * inner; ++i) {
                                      gx[(o * len + start) * inner + i] += self.grad[o * length * inner + i];
                                  }
                              }
                          });
}

/// Join two tensors along `axis`; all other dimensions must agree.
inline Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis) {
    bool ok = a.rank() == b.rank() && axis < a.rank();
    for (std::size_t i = 0; ok && i < a.rank(); ++i) {
        ok = i == axis || a.dim(i) == b.dim(i);
    }
    if (!ok) {
        throw DimensionError("concat: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                             " do not align on axis " + std::to_string(axis));
    }
    std::size_t outer = 0, la = 0, inner = 0, lb = 0, tmp = 0;
    detail::axis_extents(a.shape(), axis, outer, la, inner);
    detail::axis_extents(b.shape(), axis, tmp, lb, tmp);
    const std::size_t lo = la + lb;
    std::vector<double> out(outer * lo * inner);
    const auto av = a.data();
    const auto bv = b.data();
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(o * la * inner), la * inner,
                    out.begin() + static_cast<std::ptrdiff_t>(o * lo * inner));
        std::copy_n(bv.begin() + static_cast<std::ptrdiff_t>(o * lb * inner), lb * inner,
                    out.begin() + static_cast<std::ptrdiff_t>((o * lo + la) * inner));
    }
    Shape shape = a.shape();
    shape[axis] = lo;
    return make_op_result(std::move(shape), std::move(out), "concat", {&a, &b},
                          [outer, la, lb, lo, inner](detail::Node& self) {
                              std::vector<double>* ga = detail::grad_of(self.parents[0]);
                              std::vector<double>* gb = detail::grad_of(self.parents[1]);
                              for (std::size_t o = 0; o < outer; ++o) {
                                  if (ga) {
                                      for (std::size_t i = 0; i < la * inner; ++i)
                                          (*ga)[o * la * inner + i] += self.grad[o * lo * inner + i];
                                  }
                                  if (gb) {
                                      for (std::size_t i = 0; i < lb * inner; ++i)
                                          (*gb)[o * lb * inner + i] += self.grad[(o * lo + la) * inner + i];
                                  }
                              }
                          });
}

/// Lagged copies of each row: out[n, j, t] = x[n, t - j*tau], zero where t - j*tau < 0.
/// x is [N x L]; the result is [N x lags x L], most recent lag first.
inline Tensor delay_embed(const Tensor& x, std::size_t lags, std::size_t tau) {
    if (lags < 1 || tau < 1) {
        throw std::invalid_argument("delay_embed: delta_t and tau must be >= 1 (got delta_t=" +
                                    std::to_string(lags) + ", tau=" + std::to_string(tau) + ")");
    }
    if (x.rank() != 2) {
        throw DimensionError("delay_embed: expected [channels x length], got " + to_string(x.shape()));
    }
    const std::size_t rows = x.dim(0);
    const std::size_t len = x.dim(1);
    const auto xv = x.data();
    std::vector<double> out(rows * lags * len, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < lags; ++j) {
            const std::size_t shift = j * tau;
            double* dst = out.data() + (r * lags + j) * len;
            for (std::size_t t = shift; t < len; ++t) {
                dst[t] = xv[r * len + t - shift];
            }
        }
    }
    return make_op_result({rows, lags, len}, std::move(out), "delay_embed", {&x},
                          [rows, lags, len, tau](detail::Node& self) {
                              auto& gx = self.parents[0]->ensure_grad();
                              for (std::size_t r = 0; r < rows; ++r) {
                                  for (std::size_t j = 0; j < lags; ++j) {
                                      const std::size_t shift = j * tau;
                                      const double* src = self.grad.data() + (r * lags + j) * len;
                                      for (std::size_t t = shift; t < len; ++t) {
                                          gx[r * len + t - shift] += src[t];
                                      }
                                  }
                              }
                          });
}

/// Row-wise affine map with constant coefficients: out[r, :] = x[r, :] * scale[r] + shift[r].
inline Tensor affine_rows(const Tensor& x, std::span<const double> row_scale, std::span<const double> row_shift) {
    if (x.rank() != 2 || row_scale.size() != x.dim(0) || row_shift.size() != x.dim(0)) {
        throw DimensionError("affine_rows: coefficient count does not match rows of " + to_string(x.shape()));
    }
    const std::size_t rows = x.dim(0);
    const std::size_t cols = x.dim(1);
    const auto xv = x.data();
    std::vector<double> out(xv.size());
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out[r * cols + c] = xv[r * cols + c] * row_scale[r] + row_shift[r];
        }
    }
    std::vector<double> coeff(row_scale.begin(), row_scale.end());
    return make_op_result(x.shape(), std::move(out), "affine_rows", {&x},
                          [coeff = std::move(coeff), cols](detail::Node& self) {
                              auto& gx = self.parents[0]->ensure_grad();
                              for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * coeff[i / cols];
                          });
}

/// Inverted dropout: zero with probability p, scale survivors by 1/(1-p).
inline Tensor dropout(const Tensor& x, double p, Rng& rng) {
    if (p < 0.0 || p >= 1.0) {
        throw std::invalid_argument("dropout: probability must lie in [0, 1)");
    }
    if (p == 0.0) {
        return x;
    }
    const double keep = 1.0 / (1.0 - p);
    std::vector<double> mask(x.size());
    for (double& m : mask) m = rng.uniform() < p ? 0.0 : keep;
    const auto xv = x.data();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
    return make_op_result(x.shape(), std::move(out), "dropout", {&x}, [mask = std::move(mask)](detail::Node& self) {
        auto& gx = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * mask[i];
    });
}

}  // namespace deepedm
