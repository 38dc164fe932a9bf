#pragma once

// Dense row-major tensor with reverse-mode automatic differentiation.
//
// Every op that consumes a tensor with requires_grad() records its inputs and
// a backward closure on the output node. backward() replays the recorded
// graph in reverse topological order, accumulating into parent gradients.
// Leaves accumulate across backward() calls until zero_grad().

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <memory>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "simcrop/error.hpp"

namespace simcrop {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

[[noreturn]] inline void shape_fail(const char* op, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

namespace detail {

template <class T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    bool is_leaf() const { return !backward; }

    std::vector<T>& grad_buf() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
        return grad;
    }
};

} // namespace detail

template <std::floating_point T>
class Tensor {
public:
    using value_type = T;
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    Tensor() : Tensor(Shape{1}, std::vector<T>{T(0)}) {}

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : node_(std::make_shared<detail::Node<T>>()) {
        for (auto e : shape)
            if (e == 0) throw ShapeError("tensor: zero extent in shape " + shape_str(shape));
        if (shape.empty()) throw ShapeError("tensor: empty shape");
        if (numel(shape) != data.size())
            throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                             std::to_string(data.size()) + " values");
        node_->shape = std::move(shape);
        node_->value = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::size_t n = numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }
    static Tensor full(Shape shape, T v, bool requires_grad = false) {
        std::size_t n = numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, v), requires_grad);
    }
    static Tensor scalar(T v, bool requires_grad = false) {
        return Tensor(Shape{1}, std::vector<T>{v}, requires_grad);
    }
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> data,
                         bool requires_grad = false) {
        return Tensor(Shape{rows, cols}, std::move(data), requires_grad);
    }

    const Shape& shape() const { return node_->shape; }
    std::size_t dim() const { return node_->shape.size(); }
    std::size_t size() const { return node_->value.size(); }
    std::size_t rows() const { return node_->shape.size() == 2 ? node_->shape[0] : 1; }
    std::size_t cols() const { return node_->shape.back(); }

    std::span<const T> data() const { return node_->value; }
    /// Direct write access; only meaningful on leaves (parameters, inputs).
    std::span<T> mutable_data() { return node_->value; }

    T item() const {
        if (size() != 1) throw ShapeError("item: tensor is not a scalar " + shape_str(shape()));
        return node_->value[0];
    }
    T at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    bool has_grad() const { return node_->grad.size() == node_->value.size(); }
    /// Gradient buffer; zeros if nothing has been accumulated yet.
    std::span<const T> grad() const { return node_->grad_buf(); }
    std::span<T> mutable_grad() { return node_->grad_buf(); }
    void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

    /// Same values, new leaf without history.
    Tensor detach() const { return Tensor(shape(), node_->value, false); }

    bool same_object(const Tensor& o) const { return node_ == o.node_; }
    const NodePtr& node() const { return node_; }

    static Tensor from_node(NodePtr n) {
        Tensor t(Shape{1}, std::vector<T>{T(0)});
        t.node_ = std::move(n);
        return t;
    }

private:
    NodePtr node_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

namespace detail {

template <class T>
void check_finite(const char* op, std::span<const T> v) {
    for (std::size_t i = 0; i < v.size(); ++i)
        if (!std::isfinite(v[i]))
            throw NumericError(std::string(op) + ": non-finite value at flat index " +
                               std::to_string(i));
}

/// Build the output node. Backward is attached only when some input tracks gradients.
template <class T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(Node<T>&)> backward) {
    check_finite<T>(op, value);
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = op;
    bool track = false;
    for (auto* in : inputs) track = track || in->requires_grad();
    if (track) {
        n->requires_grad = true;
        for (auto* in : inputs) n->parents.push_back(in->node());
        n->backward = std::move(backward);
    }
    return Tensor<T>::from_node(std::move(n));
}

template <class T>
Tensor<T> make_result_vec(const char* op, Shape shape, std::vector<T> value,
                          const std::vector<Tensor<T>>& inputs,
                          std::function<void(Node<T>&)> backward) {
    check_finite<T>(op, value);
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = op;
    bool track = false;
    for (auto& in : inputs) track = track || in.requires_grad();
    if (track) {
        n->requires_grad = true;
        for (auto& in : inputs) n->parents.push_back(in.node());
        n->backward = std::move(backward);
    }
    return Tensor<T>::from_node(std::move(n));
}

template <class T>
void require_2d(const char* op, const Tensor<T>& a) {
    if (a.dim() != 2)
        throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) shape_fail("add", a.shape(), b.shape());
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return detail::make_result<T>("add", a.shape(), std::move(out), {&a, &b},
                                  [](detail::Node<T>& self) {
        for (auto& p : self.parents) {
            if (!p->requires_grad) continue;
            auto& g = p->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) shape_fail("sub", a.shape(), b.shape());
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return detail::make_result<T>("sub", a.shape(), std::move(out), {&a, &b},
                                  [](detail::Node<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) {
            auto& g = pa->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            auto& g = pb->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) shape_fail("mul", a.shape(), b.shape());
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return detail::make_result<T>("mul", a.shape(), std::move(out), {&a, &b},
                                  [](detail::Node<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) {
            auto& g = pa->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
        }
        if (pb->requires_grad) {
            auto& g = pb->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
        }
    });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
    return detail::make_result<T>("scale", a.shape(), std::move(out), {&a},
                                  [s](detail::Node<T>& self) {
        auto& g = self.parents[0]->grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
    });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + s;
    return detail::make_result<T>("add_scalar", a.shape(), std::move(out), {&a},
                                  [](detail::Node<T>& self) {
        auto& g = self.parents[0]->grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
    return detail::make_result<T>("exp", a.shape(), std::move(out), {&a},
                                  [](detail::Node<T>& self) {
        auto& g = self.parents[0]->grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
    });
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.data()[i]);
    return detail::make_result<T>("log", a.shape(), std::move(out), {&a},
                                  [](detail::Node<T>& self) {
        auto& p = self.parents[0];
        auto& g = p->grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / p->value[i];
    });
}

template <class T>
Tensor<T> square(const Tensor<T>& a) {
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * a.data()[i];
    return detail::make_result<T>("square", a.shape(), std::move(out), {&a},
                                  [](detail::Node<T>& self) {
        auto& p = self.parents[0];
        auto& g = p->grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += T(2) * self.grad[i] * p->value[i];
    });
}

/// Exact (erf) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
    constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        T x = a.data()[i];
        out[i] = T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
    }
    return detail::make_result<T>("gelu", a.shape(), std::move(out), {&a},
                                  [](detail::Node<T>& self) {
        constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
        constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
        auto& p = self.parents[0];
        auto& g = p->grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) {
            T x = p->value[i];
            T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
            T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
            g[i] += self.grad[i] * (cdf + x * pdf);
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
    T s = 0;
    for (T v : a.data()) s += v;
    return detail::make_result<T>("sum", Shape{1}, std::vector<T>{s}, {&a},
                                  [](detail::Node<T>& self) {
        auto& g = self.parents[0]->grad_buf();
        for (auto& v : g) v += self.grad[0];
    });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
    T s = 0;
    for (T v : a.data()) s += v;
    const T n = static_cast<T>(a.size());
    return detail::make_result<T>("mean", Shape{1}, std::vector<T>{s / n}, {&a},
                                  [n](detail::Node<T>& self) {
        auto& g = self.parents[0]->grad_buf();
        for (auto& v : g) v += self.grad[0] / n;
    });
}

/// Column means of an M×N matrix → 1×N.
template <class T>
Tensor<T> mean_rows(const Tensor<T>& a) {
    detail::require_2d("mean_rows", a);
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<T> out(n, T(0));
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) out[c] += a.data()[r * n + c];
    for (auto& v : out) v /= static_cast<T>(m);
    return detail::make_result<T>("mean_rows", Shape{1, n}, std::move(out), {&a},
                                  [m, n](detail::Node<T>& self) {
        auto& g = self.parents[0]->grad_buf();
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) g[r * n + c] += self.grad[c] / static_cast<T>(m);
    });
}

// ---------------------------------------------------------------------------
// Linear algebra and layout
// ---------------------------------------------------------------------------

namespace detail {

// C[m×n] += A[m×k] · B[k×n]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = a[i * k + p];
            const T* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m×k] += G[m×n] · B[k×n]ᵀ
template <class T>
void gemm_nt(const T* g, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* grow = g + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T* brow = b + p * n;
            T s = 0;
            for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
            c[i * k + p] += s;
        }
    }
}

// C[k×n] += A[m×k]ᵀ · G[m×n]
template <class T>
void gemm_tn(const T* a, const T* g, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* grow = g + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = a[i * k + p];
            T* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
        }
    }
}

} // namespace detail

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_2d("matmul", a);
    detail::require_2d("matmul", b);
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) shape_fail("matmul", a.shape(), b.shape());
    std::vector<T> out(m * n, T(0));
    detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
    return detail::make_result<T>("matmul", Shape{m, n}, std::move(out), {&a, &b},
                                  [m, k, n](detail::Node<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad)
            detail::gemm_nt(self.grad.data(), pb->value.data(), pa->grad_buf().data(), m, n, k);
        if (pb->requires_grad)
            detail::gemm_tn(pa->value.data(), self.grad.data(), pb->grad_buf().data(), m, k, n);
    });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
    detail::require_2d("transpose", a);
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<T> out(m * n);
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) out[c * m + r] = a.data()[r * n + c];
    return detail::make_result<T>("transpose", Shape{n, m}, std::move(out), {&a},
                                  [m, n](detail::Node<T>& self) {
        auto& g = self.parents[0]->grad_buf();
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) g[r * n + c] += self.grad[c * m + r];
    });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (numel(shape) != a.size()) shape_fail("reshape", a.shape(), shape);
    std::vector<T> out(a.data().begin(), a.data().end());
    return detail::make_result<T>("reshape", std::move(shape), std::move(out), {&a},
                                  [](detail::Node<T>& self) {
        auto& g = self.parents[0]->grad_buf();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

/// a[M×N] + row[1×N] broadcast over rows.
template <class T>
Tensor<T> add_rowwise(const Tensor<T>& a, const Tensor<T>& row) {
    detail::require_2d("add_rowwise", a);
    const std::size_t m = a.rows(), n = a.cols();
    if (row.size() != n) shape_fail("add_rowwise", a.shape(), row.shape());
    std::vector<T> out(a.size());
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) out[r * n + c] = a.data()[r * n + c] + row.data()[c];
    return detail::make_result<T>("add_rowwise", a.shape(), std::move(out), {&a, &row},
                                  [m, n](detail::Node<T>& self) {
        auto& pa = self.parents[0];
        auto& pr = self.parents[1];
        if (pa->requires_grad) {
            auto& g = pa->grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pr->requires_grad) {
            auto& g = pr->grad_buf();
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t c = 0; c < n; ++c) g[c] += self.grad[r * n + c];
        }
    });
}

/// Rows of a selected by index (duplicates allowed).
template <class T>
Tensor<T> gather_rows(const Tensor<T>& a, std::vector<std::size_t> idx) {
    detail::require_2d("gather_rows", a);
    const std::size_t m = a.rows(), n = a.cols();
    if (idx.empty()) throw ShapeError("gather_rows: empty index list");
    std::vector<T> out(idx.size() * n);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= m)
            throw ShapeError("gather_rows: index " + std::to_string(idx[i]) + " out of range for " +
                             shape_str(a.shape()));
        std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(idx[i] * n), n,
                    out.begin() + static_cast<std::ptrdiff_t>(i * n));
    }
    const std::size_t k = idx.size();
    return detail::make_result<T>("gather_rows", Shape{k, n}, std::move(out), {&a},
                                  [idx = std::move(idx), n](detail::Node<T>& self) {
        auto& g = self.parents[0]->grad_buf();
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t c = 0; c < n; ++c) g[idx[i] * n + c] += self.grad[i * n + c];
    });
}

/// Flat-index gather into a 1-D tensor.
template <class T>
Tensor<T> take(const Tensor<T>& a, std::vector<std::size_t> flat_idx) {
    if (flat_idx.empty()) throw ShapeError("take: empty index list");
    std::vector<T> out(flat_idx.size());
    for (std::size_t i = 0; i < flat_idx.size(); ++i) {
        if (flat_idx[i] >= a.size())
            throw ShapeError("take: index " + std::to_string(flat_idx[i]) + " out of range for " +
                             shape_str(a.shape()));
        out[i] = a.data()[flat_idx[i]];
    }
    const std::size_t k = flat_idx.size();
    return detail::make_result<T>("take", Shape{k}, std::move(out), {&a},
                                  [idx = std::move(flat_idx)](detail::Node<T>& self) {
        auto& g = self.parents[0]->grad_buf();
        for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += self.grad[i];
    });
}

/// Build an n_total×N matrix whose row placed[j] is rows[j]; every other row is `fill` (1×N).
template <class T>
Tensor<T> scatter_rows_with_fill(const Tensor<T>& rows, const Tensor<T>& fill,
                                 std::vector<std::size_t> placed, std::size_t n_total) {
    detail::require_2d("scatter_rows_with_fill", rows);
    const std::size_t n = rows.cols();
    if (fill.size() != n) shape_fail("scatter_rows_with_fill", rows.shape(), fill.shape());
    if (placed.size() != rows.rows())
        throw ShapeError("scatter_rows_with_fill: " + std::to_string(placed.size()) +
                         " positions for " + std::to_string(rows.rows()) + " rows");
    std::vector<std::ptrdiff_t> source(n_total, -1);
    for (std::size_t j = 0; j < placed.size(); ++j) {
        if (placed[j] >= n_total || source[placed[j]] != -1)
            throw ShapeError("scatter_rows_with_fill: invalid or repeated position " +
                             std::to_string(placed[j]));
        source[placed[j]] = static_cast<std::ptrdiff_t>(j);
    }
    std::vector<T> out(n_total * n);
    for (std::size_t p = 0; p < n_total; ++p) {
        const T* src = source[p] < 0 ? fill.data().data()
                                     : rows.data().data() + static_cast<std::size_t>(source[p]) * n;
        std::copy_n(src, n, out.begin() + static_cast<std::ptrdiff_t>(p * n));
    }
    return detail::make_result<T>("scatter_rows_with_fill", Shape{n_total, n}, std::move(out),
                                  {&rows, &fill},
                                  [source = std::move(source), n](detail::Node<T>& self) {
        auto& pr = self.parents[0];
        auto& pf = self.parents[1];
        for (std::size_t p = 0; p < source.size(); ++p) {
            if (source[p] < 0) {
                if (!pf->requires_grad) continue;
                auto& g = pf->grad_buf();
                for (std::size_t c = 0; c < n; ++c) g[c] += self.grad[p * n + c];
            } else {
                if (!pr->requires_grad) continue;
                auto& g = pr->grad_buf();
                const auto r = static_cast<std::size_t>(source[p]);
                for (std::size_t c = 0; c < n; ++c) g[r * n + c] += self.grad[p * n + c];
            }
        }
    });
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t start, std::size_t len) {
    detail::require_2d("slice_cols", a);
    const std::size_t m = a.rows(), n = a.cols();
    if (len == 0 || start + len > n)
        throw ShapeError("slice_cols: columns [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") out of range for " + shape_str(a.shape()));
    std::vector<T> out(m * len);
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < len; ++c) out[r * len + c] = a.data()[r * n + start + c];
    return detail::make_result<T>("slice_cols", Shape{m, len}, std::move(out), {&a},
                                  [m, n, start, len](detail::Node<T>& self) {
        auto& g = self.parents[0]->grad_buf();
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < len; ++c) g[r * n + start + c] += self.grad[r * len + c];
    });
}

template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t m = parts[0].rows();
    std::size_t total = 0;
    for (auto& p : parts) {
        detail::require_2d("concat_cols", p);
        if (p.rows() != m) shape_fail("concat_cols", parts[0].shape(), p.shape());
        total += p.cols();
    }
    std::vector<T> out(m * total);
    std::vector<std::size_t> widths;
    std::size_t off = 0;
    for (auto& p : parts) {
        const std::size_t w = p.cols();
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < w; ++c) out[r * total + off + c] = p.data()[r * w + c];
        off += w;
        widths.push_back(w);
    }
    return detail::make_result_vec<T>("concat_cols", Shape{m, total}, std::move(out), parts,
                                      [m, total, widths](detail::Node<T>& self) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < self.parents.size(); ++i) {
            auto& p = self.parents[i];
            const std::size_t w = widths[i];
            if (p->requires_grad) {
                auto& g = p->grad_buf();
                for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t c = 0; c < w; ++c) g[r * w + c] += self.grad[r * total + off + c];
            }
            off += w;
        }
    });
}

/// Stack matrices with equal column counts vertically.
template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::size_t n = parts[0].cols();
    std::size_t total = 0;
    std::vector<T> out;
    std::vector<std::size_t> sizes;
    for (auto& p : parts) {
        detail::require_2d("concat_rows", p);
        if (p.cols() != n) shape_fail("concat_rows", parts[0].shape(), p.shape());
        total += p.rows();
        out.insert(out.end(), p.data().begin(), p.data().end());
        sizes.push_back(p.size());
    }
    return detail::make_result_vec<T>("concat_rows", Shape{total, n}, std::move(out), parts,
                                      [sizes](detail::Node<T>& self) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < self.parents.size(); ++i) {
            auto& p = self.parents[i];
            if (p->requires_grad) {
                auto& g = p->grad_buf();
                for (std::size_t j = 0; j < sizes[i]; ++j) g[j] += self.grad[off + j];
            }
            off += sizes[i];
        }
    });
}

// ---------------------------------------------------------------------------
// Normalizations
// ---------------------------------------------------------------------------

/// Softmax over the last axis with max subtraction.
template <class T>
Tensor<T> softmax(const Tensor<T>& a) {
    const std::size_t n = a.cols(), m = a.size() / n;
    detail::check_finite<T>("softmax", a.data());
    std::vector<T> out(a.size());
    for (std::size_t r = 0; r < m; ++r) {
        const T* x = a.data().data() + r * n;
        T* y = out.data() + r * n;
        T mx = *std::max_element(x, x + n);
        T s = 0;
        for (std::size_t c = 0; c < n; ++c) s += (y[c] = std::exp(x[c] - mx));
        for (std::size_t c = 0; c < n; ++c) y[c] /= s;
    }
    return detail::make_result<T>("softmax", a.shape(), std::move(out), {&a},
                                  [m, n](detail::Node<T>& self) {
        auto& g = self.parents[0]->grad_buf();
        for (std::size_t r = 0; r < m; ++r) {
            const T* y = self.value.data() + r * n;
            const T* gy = self.grad.data() + r * n;
            T dot = 0;
            for (std::size_t c = 0; c < n; ++c) dot += gy[c] * y[c];
            for (std::size_t c = 0; c < n; ++c) g[r * n + c] += y[c] * (gy[c] - dot);
        }
    });
}

/// log(softmax(a)) over the last axis, computed as x - max - log Σ exp(x - max).
template <class T>
Tensor<T> log_softmax(const Tensor<T>& a) {
    const std::size_t n = a.cols(), m = a.size() / n;
    detail::check_finite<T>("log_softmax", a.data());
    std::vector<T> out(a.size());
    for (std::size_t r = 0; r < m; ++r) {
        const T* x = a.data().data() + r * n;
        T* y = out.data() + r * n;
        T mx = *std::max_element(x, x + n);
        T s = 0;
        for (std::size_t c = 0; c < n; ++c) s += std::exp(x[c] - mx);
        const T lse = mx + std::log(s);
        for (std::size_t c = 0; c < n; ++c) y[c] = x[c] - lse;
    }
    return detail::make_result<T>("log_softmax", a.shape(), std::move(out), {&a},
                                  [m, n](detail::Node<T>& self) {
        auto& g = self.parents[0]->grad_buf();
        for (std::size_t r = 0; r < m; ++r) {
            const T* y = self.value.data() + r * n;
            const T* gy = self.grad.data() + r * n;
            T gs = 0;
            for (std::size_t c = 0; c < n; ++c) gs += gy[c];
            for (std::size_t c = 0; c < n; ++c) g[r * n + c] += gy[c] - std::exp(y[c]) * gs;
        }
    });
}

/// Row-wise layer normalization with affine gamma/beta (each 1×N).
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
    detail::require_2d("layer_norm", x);
    const std::size_t m = x.rows(), n = x.cols();
    if (gamma.size() != n) shape_fail("layer_norm", x.shape(), gamma.shape());
    if (beta.size() != n) shape_fail("layer_norm", x.shape(), beta.shape());
    std::vector<T> out(x.size());
    std::vector<T> xhat(x.size());
    std::vector<T> inv_std(m);
    for (std::size_t r = 0; r < m; ++r) {
        const T* xr = x.data().data() + r * n;
        T mu = 0;
        for (std::size_t c = 0; c < n; ++c) mu += xr[c];
        mu /= static_cast<T>(n);
        T var = 0;
        for (std::size_t c = 0; c < n; ++c) var += (xr[c] - mu) * (xr[c] - mu);
        var /= static_cast<T>(n);
        inv_std[r] = T(1) / std::sqrt(var + eps);
        for (std::size_t c = 0; c < n; ++c) {
            xhat[r * n + c] = (xr[c] - mu) * inv_std[r];
            out[r * n + c] = xhat[r * n + c] * gamma.data()[c] + beta.data()[c];
        }
    }
    return detail::make_result<T>(
        "layer_norm", x.shape(), std::move(out), {&x, &gamma, &beta},
        [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node<T>& self) {
            auto& px = self.parents[0];
            auto& pg = self.parents[1];
            auto& pb = self.parents[2];
            if (pg->requires_grad) {
                auto& g = pg->grad_buf();
                for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t c = 0; c < n; ++c) g[c] += self.grad[r * n + c] * xhat[r * n + c];
            }
            if (pb->requires_grad) {
                auto& g = pb->grad_buf();
                for (std::size_t r = 0; r < m; ++r)
                    for (std::size_t c = 0; c < n; ++c) g[c] += self.grad[r * n + c];
            }
            if (px->requires_grad) {
                auto& g = px->grad_buf();
                const T inv_n = T(1) / static_cast<T>(n);
                for (std::size_t r = 0; r < m; ++r) {
                    T s1 = 0, s2 = 0;
                    for (std::size_t c = 0; c < n; ++c) {
                        T dxh = self.grad[r * n + c] * pg->value[c];
                        s1 += dxh;
                        s2 += dxh * xhat[r * n + c];
                    }
                    for (std::size_t c = 0; c < n; ++c) {
                        T dxh = self.grad[r * n + c] * pg->value[c];
                        g[r * n + c] += inv_std[r] * (dxh - inv_n * s1 - xhat[r * n + c] * inv_n * s2);
                    }
                }
            }
        });
}

/// Scale each row to unit L2 norm. A zero row is a NumericError.
template <class T>
Tensor<T> l2_normalize_rows(const Tensor<T>& a) {
    detail::require_2d("l2_normalize_rows", a);
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<T> out(a.size());
    std::vector<T> norms(m);
    for (std::size_t r = 0; r < m; ++r) {
        T s = 0;
        for (std::size_t c = 0; c < n; ++c) s += a.data()[r * n + c] * a.data()[r * n + c];
        norms[r] = std::sqrt(s);
        if (!(norms[r] > T(0)))
            throw NumericError("l2_normalize_rows: zero-norm row " + std::to_string(r));
        for (std::size_t c = 0; c < n; ++c) out[r * n + c] = a.data()[r * n + c] / norms[r];
    }
    return detail::make_result<T>("l2_normalize_rows", a.shape(), std::move(out), {&a},
                                  [m, n, norms = std::move(norms)](detail::Node<T>& self) {
        auto& g = self.parents[0]->grad_buf();
        for (std::size_t r = 0; r < m; ++r) {
            const T* y = self.value.data() + r * n;
            const T* gy = self.grad.data() + r * n;
            T dot = 0;
            for (std::size_t c = 0; c < n; ++c) dot += gy[c] * y[c];
            for (std::size_t c = 0; c < n; ++c) g[r * n + c] += (gy[c] - y[c] * dot) / norms[r];
        }
    });
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Reverse-mode sweep from a scalar loss.
template <class T>
void backward(const Tensor<T>& loss) {
    if (loss.size() != 1)
        throw ShapeError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;

    using NodeT = detail::Node<T>;
    std::vector<NodeT*> order;
    std::unordered_set<NodeT*> seen;
    // iterative post-order DFS
    std::vector<std::pair<NodeT*, std::size_t>> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            NodeT* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (NodeT* n : order)
        if (!n->is_leaf()) n->grad.assign(n->value.size(), T(0));
    loss.node()->grad_buf()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NodeT* n = *it;
        if (!n->is_leaf()) {
            n->backward(*n);
            n->grad.clear();
            n->grad.shrink_to_fit();
        }
    }
}

} // namespace simcrop
