#pragma once

// Dense tensors with reverse-mode differentiation. Graphs are built eagerly;
// backward() walks the tape in reverse topological order. Tensors are
// immutable after construction except for parameter value updates between
// graph builds (optimizer / EMA).

#include <algorithm>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <unordered_map>
#include <unordered_set>

#include "mtvl/common.hpp"

namespace mtvl {

template <typename T>
class Tensor {
  public:
    struct Node {
        Shape shape;
        std::vector<T> val;
        std::vector<T> grad;  // sized lazily during backward
        bool requires_grad = false;
        bool is_param = false;
        std::string name;  // nonempty only for parameters
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backprop;

        int64_t size() const { return static_cast<int64_t>(val.size()); }
        void ensure_grad() {
            if (grad.size() != val.size()) grad.assign(val.size(), T(0));
        }
    };

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false) {
        require(numel(shape) == static_cast<int64_t>(values.size()),
                "Tensor: shape " + shape_str(shape) + " does not match value count " +
                    std::to_string(values.size()));
        n_ = std::make_shared<Node>();
        n_->shape = std::move(shape);
        n_->val = std::move(values);
        n_->requires_grad = requires_grad;
    }

    static Tensor scalar(T v) { return Tensor({1}, {v}); }
    static Tensor zeros(Shape shape) {
        std::vector<T> v(static_cast<size_t>(numel(shape)), T(0));
        return Tensor(std::move(shape), std::move(v));
    }
    static Tensor full(Shape shape, T x) {
        std::vector<T> v(static_cast<size_t>(numel(shape)), x);
        return Tensor(std::move(shape), std::move(v));
    }

    static Tensor param(std::string name, Shape shape, std::vector<T> values) {
        Tensor t(std::move(shape), std::move(values), true);
        t.n_->is_param = true;
        t.n_->name = std::move(name);
        return t;
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    int64_t size() const { return n_->size(); }
    int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(n_->shape.size()); }
    bool requires_grad() const { return n_->requires_grad; }
    bool is_param() const { return n_->is_param; }
    const std::string& name() const { return n_->name; }

    std::span<const T> value() const { return {n_->val.data(), n_->val.size()}; }
    // Parameter updates only; never call on a node inside a live graph.
    std::span<T> mutable_value() { return {n_->val.data(), n_->val.size()}; }

    T item() const {
        require(size() == 1, "item: tensor is not scalar, shape " + shape_str(shape()));
        return n_->val[0];
    }
    T at(int64_t i) const { return n_->val[static_cast<size_t>(i)]; }

    std::span<const T> grad() const { return {n_->grad.data(), n_->grad.size()}; }

    Node* node() const { return n_.get(); }
    const std::shared_ptr<Node>& node_ptr() const { return n_; }

    // Value copy disconnected from the graph; gradients never flow through.
    Tensor detach() const {
        Tensor t(n_->shape, n_->val, false);
        return t;
    }

    bool all_finite() const {
        for (T x : n_->val)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

  private:
    std::shared_ptr<Node> n_;
};

// Gradients keyed by parameter name (parameter names are unique per model).
template <typename T>
struct GradientMap {
    std::unordered_map<std::string, Tensor<T>> grads;

    bool contains(const std::string& name) const { return grads.count(name) > 0; }
    const Tensor<T>& at(const std::string& name) const { return grads.at(name); }
};

namespace detail {

template <typename T>
using NodeP = std::shared_ptr<typename Tensor<T>::Node>;

template <typename T>
NodeP<T> make_node(Shape shape, std::vector<T> val, std::vector<NodeP<T>> parents,
                   std::function<void(typename Tensor<T>::Node&)> backprop) {
    auto n = std::make_shared<typename Tensor<T>::Node>();
    n->shape = std::move(shape);
    n->val = std::move(val);
    for (auto& p : parents)
        if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) {
        n->parents = std::move(parents);
        n->backprop = std::move(backprop);
    }
    return n;
}

template <typename T>
void check_finite_inputs(const Tensor<T>& x, const char* op) {
    if (checked_mode() && !x.all_finite()) fail(std::string(op) + ": non-finite input rejected");
}

// Rows/cols view: collapse all leading dims, keep the last as the row width.
inline int64_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }
inline int64_t rows_of(const Shape& s) {
    return s.empty() ? 1 : numel(s) / last_dim(s);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <typename T>
GradientMap<T> backward(const Tensor<T>& loss) {
    require(loss.size() == 1, "backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    using Node = typename Tensor<T>::Node;

    // Iterative topological order over the reachable grad-requiring subgraph.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    if (loss.node()->requires_grad) stack.push_back({loss.node(), 0});
    visited.insert(loss.node());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node* p = n->parents[i++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    for (Node* n : order) {
        n->grad.assign(n->val.size(), T(0));
    }
    if (!order.empty()) order.back()->grad[0] = T(1);

    GradientMap<T> gm;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop) n->backprop(*n);
        if (n->is_param) {
            gm.grads.emplace(n->name, Tensor<T>(n->shape, n->grad, false));
        }
    }
    return gm;
}

// ---------------------------------------------------------------------------
// elementwise binary ops with limited broadcasting
// ---------------------------------------------------------------------------

namespace detail {

enum class Bcast { Same, ScalarRight, ScalarLeft, RowRight, ColRight };

template <typename T>
Bcast classify_bcast(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() == b.shape()) return Bcast::Same;
    if (b.size() == 1) return Bcast::ScalarRight;
    if (a.size() == 1) return Bcast::ScalarLeft;
    // [.., C] op [C]
    if (b.ndim() == 1 && last_dim(a.shape()) == b.dim(0)) return Bcast::RowRight;
    // [R, C] op [R, 1]
    if (a.ndim() == 2 && b.ndim() == 2 && b.dim(1) == 1 && a.dim(0) == b.dim(0))
        return Bcast::ColRight;
    fail(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
         shape_str(b.shape()));
}

// fwd(a,b) -> y ; dfa(a,b,y) and dfb(a,b,y) give local partials.
template <typename T, typename F, typename Da, typename Db>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* op, F fwd, Da dfa, Db dfb) {
    check_finite_inputs(a, op);
    check_finite_inputs(b, op);
    Bcast bc = classify_bcast(a, b, op);
    const auto& out_shape = (bc == Bcast::ScalarLeft) ? b.shape() : a.shape();
    const int64_t n = numel(out_shape);
    const int64_t C = last_dim(a.shape());
    std::vector<T> y(static_cast<size_t>(n));
    auto av = a.value();
    auto bv = b.value();
    auto bidx = [&](int64_t i) -> int64_t {
        switch (bc) {
            case Bcast::Same: return i;
            case Bcast::ScalarRight: return 0;
            case Bcast::ScalarLeft: return i;  // handled below (a is scalar)
            case Bcast::RowRight: return i % C;
            case Bcast::ColRight: return i / a.dim(1);
        }
        return 0;
    };
    for (int64_t i = 0; i < n; ++i) {
        T xa = (bc == Bcast::ScalarLeft) ? av[0] : av[static_cast<size_t>(i)];
        T xb = (bc == Bcast::ScalarLeft) ? bv[static_cast<size_t>(i)] : bv[static_cast<size_t>(bidx(i))];
        y[static_cast<size_t>(i)] = fwd(xa, xb);
    }
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    auto node = make_node<T>(
        out_shape, std::move(y), {an, bn},
        [an, bn, bc, C, dfa, dfb, fwd](typename Tensor<T>::Node& self) {
            const int64_t n = self.size();
            auto get = [&](int64_t i, T& xa, T& xb) {
                if (bc == Bcast::ScalarLeft) {
                    xa = an->val[0];
                    xb = bn->val[static_cast<size_t>(i)];
                } else {
                    xa = an->val[static_cast<size_t>(i)];
                    switch (bc) {
                        case Bcast::ScalarRight: xb = bn->val[0]; break;
                        case Bcast::RowRight: xb = bn->val[static_cast<size_t>(i % C)]; break;
                        case Bcast::ColRight:
                            xb = bn->val[static_cast<size_t>(i / an->shape[1])];
                            break;
                        default: xb = bn->val[static_cast<size_t>(i)];
                    }
                }
            };
            if (an->requires_grad) {
                an->ensure_grad();
                for (int64_t i = 0; i < n; ++i) {
                    T xa, xb;
                    get(i, xa, xb);
                    T g = self.grad[static_cast<size_t>(i)] * dfa(xa, xb, self.val[static_cast<size_t>(i)]);
                    size_t ai = (bc == Bcast::ScalarLeft) ? 0 : static_cast<size_t>(i);
                    an->grad[ai] += g;
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int64_t i = 0; i < n; ++i) {
                    T xa, xb;
                    get(i, xa, xb);
                    T g = self.grad[static_cast<size_t>(i)] * dfb(xa, xb, self.val[static_cast<size_t>(i)]);
                    size_t bi;
                    switch (bc) {
                        case Bcast::Same: bi = static_cast<size_t>(i); break;
                        case Bcast::ScalarRight: bi = 0; break;
                        case Bcast::ScalarLeft: bi = static_cast<size_t>(i); break;
                        case Bcast::RowRight: bi = static_cast<size_t>(i % C); break;
                        case Bcast::ColRight: bi = static_cast<size_t>(i / an->shape[1]); break;
                        default: bi = 0;
                    }
                    bn->grad[bi] += g;
                }
            }
        });
    return Tensor<T>(node);
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, "add", [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
        [](T, T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, "sub", [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
        [](T, T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
        [](T x, T, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, "div", [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
        [](T x, T y, T) { return -x / (y * y); });
}

template <typename T> Tensor<T> add(const Tensor<T>& a, T s) { return add(a, Tensor<T>::scalar(s)); }
template <typename T> Tensor<T> sub(const Tensor<T>& a, T s) { return sub(a, Tensor<T>::scalar(s)); }
template <typename T> Tensor<T> mul(const Tensor<T>& a, T s) { return mul(a, Tensor<T>::scalar(s)); }
template <typename T> Tensor<T> div(const Tensor<T>& a, T s) { return div(a, Tensor<T>::scalar(s)); }

// ---------------------------------------------------------------------------
// elementwise unary ops
// ---------------------------------------------------------------------------

namespace detail {

template <typename T, typename F, typename D>
Tensor<T> unary_op(const Tensor<T>& x, const char* op, F fwd, D dfx) {
    check_finite_inputs(x, op);
    const int64_t n = x.size();
    std::vector<T> y(static_cast<size_t>(n));
    auto xv = x.value();
    for (int64_t i = 0; i < n; ++i) y[static_cast<size_t>(i)] = fwd(xv[static_cast<size_t>(i)]);
    auto xn = x.node_ptr();
    auto node = make_node<T>(x.shape(), std::move(y), {xn},
                             [xn, dfx](typename Tensor<T>::Node& self) {
                                 if (!xn->requires_grad) return;
                                 xn->ensure_grad();
                                 for (size_t i = 0; i < self.val.size(); ++i)
                                     xn->grad[i] += self.grad[i] * dfx(xn->val[i], self.val[i]);
                             });
    return Tensor<T>(node);
}

}  // namespace detail

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
    return detail::unary_op(x, "neg", [](T v) { return -v; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
    return detail::unary_op(x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
    return detail::unary_op(x, "log", [](T v) { return std::log(v); },
                            [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
    return detail::unary_op(x, "sqrt", [](T v) { return std::sqrt(v); },
                            [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
    return detail::unary_op(x, "abs", [](T v) { return std::abs(v); },
                            [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
    return detail::unary_op(x, "square", [](T v) { return v * v; },
                            [](T v, T) { return T(2) * v; });
}

// GELU with the exact erf form.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    return detail::unary_op(
        x, "gelu",
        [](T v) { return T(0.5) * v * (T(1) + T(std::erf(static_cast<double>(v) * inv_sqrt2))); },
        [](T v, T) {
            double vd = static_cast<double>(v);
            double cdf = 0.5 * (1.0 + std::erf(vd * inv_sqrt2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * vd * vd);
            return T(cdf + vd * pdf);
        });
}

// Overflow-safe log(1 + exp(x)).
template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
    return detail::unary_op(
        x, "softplus",
        [](T v) { return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v))); },
        [](T v, T) { return T(1) / (T(1) + std::exp(-v)); });
}

// Subgradient zero below the floor; used for distance floors.
template <typename T>
Tensor<T> clamp_min(const Tensor<T>& x, T lo) {
    return detail::unary_op(
        x, "clamp_min", [lo](T v) { return std::max(v, lo); },
        [lo](T v, T) { return v > lo ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace detail {

// C[M x N] += A[M x K] * B[K x N]
template <typename T>
void gemm_acc(const T* A, const T* B, T* C, int64_t M, int64_t K, int64_t N) {
    for (int64_t i = 0; i < M; ++i) {
        const T* a = A + i * K;
        T* c = C + i * N;
        for (int64_t k = 0; k < K; ++k) {
            const T aik = a[k];
            if (aik == T(0)) continue;
            const T* b = B + k * N;
            for (int64_t j = 0; j < N; ++j) c[j] += aik * b[j];
        }
    }
}

// C[M x N] += A[M x K] * B^T, B is [N x K]
template <typename T>
void gemm_bt_acc(const T* A, const T* B, T* C, int64_t M, int64_t K, int64_t N) {
    for (int64_t i = 0; i < M; ++i) {
        const T* a = A + i * K;
        T* c = C + i * N;
        for (int64_t j = 0; j < N; ++j) {
            const T* b = B + j * K;
            T s = T(0);
            for (int64_t k = 0; k < K; ++k) s += a[k] * b[k];
            c[j] += s;
        }
    }
}

// C[K x N] += A^T * B, A is [M x K], B is [M x N]
template <typename T>
void gemm_at_acc(const T* A, const T* B, T* C, int64_t M, int64_t K, int64_t N) {
    for (int64_t i = 0; i < M; ++i) {
        const T* a = A + i * K;
        const T* b = B + i * N;
        for (int64_t k = 0; k < K; ++k) {
            const T aik = a[k];
            if (aik == T(0)) continue;
            T* c = C + k * N;
            for (int64_t j = 0; j < N; ++j) c[j] += aik * b[j];
        }
    }
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_finite_inputs(a, "matmul");
    detail::check_finite_inputs(b, "matmul");
    require(a.ndim() == 2 && b.ndim() == 2,
            "matmul: expects 2-d operands, got " + shape_str(a.shape()) + " and " +
                shape_str(b.shape()));
    if (a.dim(1) != b.dim(0))
        fail("matmul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    std::vector<T> y(static_cast<size_t>(M * N), T(0));
    detail::gemm_acc(a.value().data(), b.value().data(), y.data(), M, K, N);
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    auto node = detail::make_node<T>(
        {static_cast<int>(M), static_cast<int>(N)}, std::move(y), {an, bn},
        [an, bn, M, K, N](typename Tensor<T>::Node& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                detail::gemm_bt_acc(self.grad.data(), bn->val.data(), an->grad.data(), M, N, K);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                detail::gemm_at_acc(an->val.data(), self.grad.data(), bn->grad.data(), M, K, N);
            }
        });
    return Tensor<T>(node);
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    require(numel(shape) == x.size(),
            "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
    auto xn = x.node_ptr();
    auto node = detail::make_node<T>(std::move(shape), std::vector<T>(x.value().begin(), x.value().end()),
                                     {xn}, [xn](typename Tensor<T>::Node& self) {
                                         if (!xn->requires_grad) return;
                                         xn->ensure_grad();
                                         for (size_t i = 0; i < self.grad.size(); ++i)
                                             xn->grad[i] += self.grad[i];
                                     });
    return Tensor<T>(node);
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& x) {
    require(x.ndim() == 2, "transpose2d: expects 2-d tensor, got " + shape_str(x.shape()));
    const int64_t R = x.dim(0), C = x.dim(1);
    std::vector<T> y(static_cast<size_t>(R * C));
    auto xv = x.value();
    for (int64_t i = 0; i < R; ++i)
        for (int64_t j = 0; j < C; ++j)
            y[static_cast<size_t>(j * R + i)] = xv[static_cast<size_t>(i * C + j)];
    auto xn = x.node_ptr();
    auto node = detail::make_node<T>({static_cast<int>(C), static_cast<int>(R)}, std::move(y), {xn},
                                     [xn, R, C](typename Tensor<T>::Node& self) {
                                         if (!xn->requires_grad) return;
                                         xn->ensure_grad();
                                         for (int64_t i = 0; i < R; ++i)
                                             for (int64_t j = 0; j < C; ++j)
                                                 xn->grad[static_cast<size_t>(i * C + j)] +=
                                                     self.grad[static_cast<size_t>(j * R + i)];
                                     });
    return Tensor<T>(node);
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, int64_t r0, int64_t r1) {
    require(x.ndim() == 2, "slice_rows: expects 2-d tensor");
    require(0 <= r0 && r0 < r1 && r1 <= x.dim(0), "slice_rows: bad range");
    const int64_t C = x.dim(1);
    auto xv = x.value();
    std::vector<T> y(xv.begin() + r0 * C, xv.begin() + r1 * C);
    auto xn = x.node_ptr();
    auto node = detail::make_node<T>({static_cast<int>(r1 - r0), static_cast<int>(C)}, std::move(y),
                                     {xn}, [xn, r0, C](typename Tensor<T>::Node& self) {
                                         if (!xn->requires_grad) return;
                                         xn->ensure_grad();
                                         for (size_t i = 0; i < self.grad.size(); ++i)
                                             xn->grad[static_cast<size_t>(r0 * C) + i] += self.grad[i];
                                     });
    return Tensor<T>(node);
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, int64_t c0, int64_t c1) {
    require(x.ndim() == 2, "slice_cols: expects 2-d tensor");
    require(0 <= c0 && c0 < c1 && c1 <= x.dim(1), "slice_cols: bad range");
    const int64_t R = x.dim(0), C = x.dim(1), W = c1 - c0;
    std::vector<T> y(static_cast<size_t>(R * W));
    auto xv = x.value();
    for (int64_t i = 0; i < R; ++i)
        for (int64_t j = 0; j < W; ++j)
            y[static_cast<size_t>(i * W + j)] = xv[static_cast<size_t>(i * C + c0 + j)];
    auto xn = x.node_ptr();
    auto node = detail::make_node<T>({static_cast<int>(R), static_cast<int>(W)}, std::move(y), {xn},
                                     [xn, c0, C, W, R](typename Tensor<T>::Node& self) {
                                         if (!xn->requires_grad) return;
                                         xn->ensure_grad();
                                         for (int64_t i = 0; i < R; ++i)
                                             for (int64_t j = 0; j < W; ++j)
                                                 xn->grad[static_cast<size_t>(i * C + c0 + j)] +=
                                                     self.grad[static_cast<size_t>(i * W + j)];
                                     });
    return Tensor<T>(node);
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& xs) {
    require(!xs.empty(), "concat_rows: empty input list");
    int64_t C = detail::last_dim(xs[0].shape());
    int64_t R = 0;
    std::vector<detail::NodeP<T>> parents;
    std::vector<T> y;
    for (const auto& x : xs) {
        require(x.ndim() <= 2, "concat_rows: expects 1-d or 2-d tensors");
        int64_t c = detail::last_dim(x.shape());
        if (c != C)
            fail("concat_rows: ragged width " + shape_str(xs[0].shape()) + " vs " +
                 shape_str(x.shape()));
        R += detail::rows_of(x.shape());
        y.insert(y.end(), x.value().begin(), x.value().end());
        parents.push_back(x.node_ptr());
    }
    auto ps = parents;
    auto node = detail::make_node<T>(
        {static_cast<int>(R), static_cast<int>(C)}, std::move(y), std::move(parents),
        [ps](typename Tensor<T>::Node& self) {
            size_t off = 0;
            for (auto& p : ps) {
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (size_t i = 0; i < p->val.size(); ++i) p->grad[i] += self.grad[off + i];
                }
                off += p->val.size();
            }
        });
    return Tensor<T>(node);
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& xs) {
    require(!xs.empty(), "concat_cols: empty input list");
    const int64_t R = xs[0].dim(0);
    int64_t C = 0;
    for (const auto& x : xs) {
        require(x.ndim() == 2 && x.dim(0) == R, "concat_cols: row mismatch");
        C += x.dim(1);
    }
    std::vector<T> y(static_cast<size_t>(R * C));
    std::vector<detail::NodeP<T>> parents;
    int64_t coff = 0;
    for (const auto& x : xs) {
        const int64_t W = x.dim(1);
        auto xv = x.value();
        for (int64_t i = 0; i < R; ++i)
            for (int64_t j = 0; j < W; ++j)
                y[static_cast<size_t>(i * C + coff + j)] = xv[static_cast<size_t>(i * W + j)];
        parents.push_back(x.node_ptr());
        coff += W;
    }
    auto ps = parents;
    auto node = detail::make_node<T>(
        {static_cast<int>(R), static_cast<int>(C)}, std::move(y), std::move(parents),
        [ps, R, C](typename Tensor<T>::Node& self) {
            int64_t coff = 0;
            for (auto& p : ps) {
                const int64_t W = p->shape[1];
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (int64_t i = 0; i < R; ++i)
                        for (int64_t j = 0; j < W; ++j)
                            p->grad[static_cast<size_t>(i * W + j)] +=
                                self.grad[static_cast<size_t>(i * C + coff + j)];
                }
                coff += W;
            }
        });
    return Tensor<T>(node);
}

template <typename T>
std::vector<Tensor<T>> split_rows(const Tensor<T>& x, int64_t parts) {
    require(x.ndim() == 2 && x.dim(0) % parts == 0, "split_rows: rows not divisible");
    const int64_t step = x.dim(0) / parts;
    std::vector<Tensor<T>> out;
    for (int64_t p = 0; p < parts; ++p) out.push_back(slice_rows(x, p * step, (p + 1) * step));
    return out;
}

// Differentiable row gather; backward scatter-adds into the source.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<int>& idx) {
    require(x.ndim() == 2, "gather_rows: expects 2-d tensor");
    const int64_t R = x.dim(0), C = x.dim(1);
    for (int i : idx) require(0 <= i && i < R, "gather_rows: index out of range");
    std::vector<T> y(idx.size() * static_cast<size_t>(C));
    auto xv = x.value();
    for (size_t r = 0; r < idx.size(); ++r)
        std::copy_n(xv.data() + static_cast<int64_t>(idx[r]) * C, C, y.data() + r * static_cast<size_t>(C));
    auto xn = x.node_ptr();
    auto node = detail::make_node<T>({static_cast<int>(idx.size()), static_cast<int>(C)}, std::move(y),
                                     {xn}, [xn, idx, C](typename Tensor<T>::Node& self) {
                                         if (!xn->requires_grad) return;
                                         xn->ensure_grad();
                                         for (size_t r = 0; r < idx.size(); ++r)
                                             for (int64_t j = 0; j < C; ++j)
                                                 xn->grad[static_cast<size_t>(idx[r] * C + j)] +=
                                                     self.grad[r * static_cast<size_t>(C) + static_cast<size_t>(j)];
                                     });
    return Tensor<T>(node);
}

// Scatter-add rows of x into an n_rows-tall output; backward is a gather.
template <typename T>
Tensor<T> scatter_add_rows(const Tensor<T>& x, const std::vector<int>& idx, int64_t n_rows) {
    require(x.ndim() == 2, "scatter_add_rows: expects 2-d tensor");
    require(static_cast<int64_t>(idx.size()) == x.dim(0), "scatter_add_rows: index count mismatch");
    const int64_t C = x.dim(1);
    for (int i : idx) require(0 <= i && i < n_rows, "scatter_add_rows: index out of range");
    std::vector<T> y(static_cast<size_t>(n_rows * C), T(0));
    auto xv = x.value();
    for (size_t r = 0; r < idx.size(); ++r)
        for (int64_t j = 0; j < C; ++j)
            y[static_cast<size_t>(idx[r] * C + j)] += xv[r * static_cast<size_t>(C) + static_cast<size_t>(j)];
    auto xn = x.node_ptr();
    auto node = detail::make_node<T>({static_cast<int>(n_rows), static_cast<int>(C)}, std::move(y),
                                     {xn}, [xn, idx, C](typename Tensor<T>::Node& self) {
                                         if (!xn->requires_grad) return;
                                         xn->ensure_grad();
                                         for (size_t r = 0; r < idx.size(); ++r)
                                             for (int64_t j = 0; j < C; ++j)
                                                 xn->grad[r * static_cast<size_t>(C) + static_cast<size_t>(j)] +=
                                                     self.grad[static_cast<size_t>(idx[r] * C + j)];
                                     });
    return Tensor<T>(node);
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    detail::check_finite_inputs(x, "sum");
    T s = std::accumulate(x.value().begin(), x.value().end(), T(0));
    auto xn = x.node_ptr();
    auto node = detail::make_node<T>({1}, {s}, {xn}, [xn](typename Tensor<T>::Node& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (auto& g : xn->grad) g += self.grad[0];
    });
    return Tensor<T>(node);
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    return div(sum(x), static_cast<T>(x.size()));
}

// Row-wise sum over the last axis (leading dims collapsed).
template <typename T>
Tensor<T> sum_rows(const Tensor<T>& x) {
    const int64_t C = detail::last_dim(x.shape());
    const int64_t R = detail::rows_of(x.shape());
    std::vector<T> y(static_cast<size_t>(R), T(0));
    auto xv = x.value();
    for (int64_t i = 0; i < R; ++i)
        for (int64_t j = 0; j < C; ++j) y[static_cast<size_t>(i)] += xv[static_cast<size_t>(i * C + j)];
    auto xn = x.node_ptr();
    auto node = detail::make_node<T>({static_cast<int>(R)}, std::move(y), {xn},
                                     [xn, R, C](typename Tensor<T>::Node& self) {
                                         if (!xn->requires_grad) return;
                                         xn->ensure_grad();
                                         for (int64_t i = 0; i < R; ++i)
                                             for (int64_t j = 0; j < C; ++j)
                                                 xn->grad[static_cast<size_t>(i * C + j)] +=
                                                     self.grad[static_cast<size_t>(i)];
                                     });
    return Tensor<T>(node);
}

// Column-wise mean: [R, C] -> [C].
template <typename T>
Tensor<T> mean_cols(const Tensor<T>& x) {
    require(x.ndim() == 2, "mean_cols: expects 2-d tensor");
    const int64_t R = x.dim(0), C = x.dim(1);
    std::vector<T> y(static_cast<size_t>(C), T(0));
    auto xv = x.value();
    for (int64_t i = 0; i < R; ++i)
        for (int64_t j = 0; j < C; ++j) y[static_cast<size_t>(j)] += xv[static_cast<size_t>(i * C + j)];
    for (auto& v : y) v /= static_cast<T>(R);
    auto xn = x.node_ptr();
    auto node = detail::make_node<T>({static_cast<int>(C)}, std::move(y), {xn},
                                     [xn, R, C](typename Tensor<T>::Node& self) {
                                         if (!xn->requires_grad) return;
                                         xn->ensure_grad();
                                         for (int64_t i = 0; i < R; ++i)
                                             for (int64_t j = 0; j < C; ++j)
                                                 xn->grad[static_cast<size_t>(i * C + j)] +=
                                                     self.grad[static_cast<size_t>(j)] / static_cast<T>(R);
                                     });
    return Tensor<T>(node);
}

// ---------------------------------------------------------------------------
// row-wise softmax family (overflow-safe)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
    detail::check_finite_inputs(x, "softmax");
    const int64_t C = detail::last_dim(x.shape());
    const int64_t R = detail::rows_of(x.shape());
    std::vector<T> y(static_cast<size_t>(R * C));
    auto xv = x.value();
    for (int64_t i = 0; i < R; ++i) {
        T m = xv[static_cast<size_t>(i * C)];
        for (int64_t j = 1; j < C; ++j) m = std::max(m, xv[static_cast<size_t>(i * C + j)]);
        T z = T(0);
        for (int64_t j = 0; j < C; ++j) {
            T e = std::exp(xv[static_cast<size_t>(i * C + j)] - m);
            y[static_cast<size_t>(i * C + j)] = e;
            z += e;
        }
        for (int64_t j = 0; j < C; ++j) y[static_cast<size_t>(i * C + j)] /= z;
    }
    auto xn = x.node_ptr();
    auto node = detail::make_node<T>(x.shape(), std::move(y), {xn},
                                     [xn, R, C](typename Tensor<T>::Node& self) {
                                         if (!xn->requires_grad) return;
                                         xn->ensure_grad();
                                         for (int64_t i = 0; i < R; ++i) {
                                             T dot = T(0);
                                             for (int64_t j = 0; j < C; ++j) {
                                                 size_t k = static_cast<size_t>(i * C + j);
                                                 dot += self.grad[k] * self.val[k];
                                             }
                                             for (int64_t j = 0; j < C; ++j) {
                                                 size_t k = static_cast<size_t>(i * C + j);
                                                 xn->grad[k] += self.val[k] * (self.grad[k] - dot);
                                             }
                                         }
                                     });
    return Tensor<T>(node);
}

template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& x) {
    detail::check_finite_inputs(x, "log_softmax");
    const int64_t C = detail::last_dim(x.shape());
    const int64_t R = detail::rows_of(x.shape());
    std::vector<T> y(static_cast<size_t>(R * C));
    auto xv = x.value();
    for (int64_t i = 0; i < R; ++i) {
        T m = xv[static_cast<size_t>(i * C)];
        for (int64_t j = 1; j < C; ++j) m = std::max(m, xv[static_cast<size_t>(i * C + j)]);
        T z = T(0);
        for (int64_t j = 0; j < C; ++j) z += std::exp(xv[static_cast<size_t>(i * C + j)] - m);
        T lse = m + std::log(z);
        for (int64_t j = 0; j < C; ++j)
            y[static_cast<size_t>(i * C + j)] = xv[static_cast<size_t>(i * C + j)] - lse;
    }
    auto xn = x.node_ptr();
    auto node = detail::make_node<T>(x.shape(), std::move(y), {xn},
                                     [xn, R, C](typename Tensor<T>::Node& self) {
                                         if (!xn->requires_grad) return;
                                         xn->ensure_grad();
                                         for (int64_t i = 0; i < R; ++i) {
                                             T gsum = T(0);
                                             for (int64_t j = 0; j < C; ++j)
                                                 gsum += self.grad[static_cast<size_t>(i * C + j)];
                                             for (int64_t j = 0; j < C; ++j) {
                                                 size_t k = static_cast<size_t>(i * C + j);
                                                 xn->grad[k] += self.grad[k] - std::exp(self.val[k]) * gsum;
                                             }
                                         }
                                     });
    return Tensor<T>(node);
}

// [R, C] -> [R]; overflow-safe.
template <typename T>
Tensor<T> logsumexp_rows(const Tensor<T>& x) {
    detail::check_finite_inputs(x, "logsumexp");
    const int64_t C = detail::last_dim(x.shape());
    const int64_t R = detail::rows_of(x.shape());
    std::vector<T> y(static_cast<size_t>(R));
    auto xv = x.value();
    for (int64_t i = 0; i < R; ++i) {
        T m = xv[static_cast<size_t>(i * C)];
        for (int64_t j = 1; j < C; ++j) m = std::max(m, xv[static_cast<size_t>(i * C + j)]);
        T z = T(0);
        for (int64_t j = 0; j < C; ++j) z += std::exp(xv[static_cast<size_t>(i * C + j)] - m);
        y[static_cast<size_t>(i)] = m + std::log(z);
    }
    auto xn = x.node_ptr();
    auto node = detail::make_node<T>({static_cast<int>(R)}, std::move(y), {xn},
                                     [xn, R, C](typename Tensor<T>::Node& self) {
                                         if (!xn->requires_grad) return;
                                         xn->ensure_grad();
                                         for (int64_t i = 0; i < R; ++i)
                                             for (int64_t j = 0; j < C; ++j) {
                                                 size_t k = static_cast<size_t>(i * C + j);
                                                 xn->grad[k] += self.grad[static_cast<size_t>(i)] *
                                                                std::exp(xn->val[k] - self.val[static_cast<size_t>(i)]);
                                             }
                                     });
    return Tensor<T>(node);
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

// Row-wise layer normalization (no affine; compose gain/bias with mul/add).
template <typename T>
Tensor<T> layernorm_rows(const Tensor<T>& x, T eps = T(1e-5)) {
    detail::check_finite_inputs(x, "layernorm");
    const int64_t C = detail::last_dim(x.shape());
    const int64_t R = detail::rows_of(x.shape());
    std::vector<T> y(static_cast<size_t>(R * C));
    std::vector<T> inv_std(static_cast<size_t>(R));
    auto xv = x.value();
    for (int64_t i = 0; i < R; ++i) {
        T mu = T(0);
        for (int64_t j = 0; j < C; ++j) mu += xv[static_cast<size_t>(i * C + j)];
        mu /= static_cast<T>(C);
        T var = T(0);
        for (int64_t j = 0; j < C; ++j) {
            T d = xv[static_cast<size_t>(i * C + j)] - mu;
            var += d * d;
        }
        var /= static_cast<T>(C);
        T is = T(1) / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(i)] = is;
        for (int64_t j = 0; j < C; ++j)
            y[static_cast<size_t>(i * C + j)] = (xv[static_cast<size_t>(i * C + j)] - mu) * is;
    }
    auto xn = x.node_ptr();
    auto node = detail::make_node<T>(
        x.shape(), std::move(y), {xn},
        [xn, R, C, inv_std](typename Tensor<T>::Node& self) {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (int64_t i = 0; i < R; ++i) {
                T gsum = T(0), gysum = T(0);
                for (int64_t j = 0; j < C; ++j) {
                    size_t k = static_cast<size_t>(i * C + j);
                    gsum += self.grad[k];
                    gysum += self.grad[k] * self.val[k];
                }
                const T is = inv_std[static_cast<size_t>(i)];
                for (int64_t j = 0; j < C; ++j) {
                    size_t k = static_cast<size_t>(i * C + j);
                    xn->grad[k] += is * (self.grad[k] - gsum / static_cast<T>(C) -
                                         self.val[k] * gysum / static_cast<T>(C));
                }
            }
        });
    return Tensor<T>(node);
}

// Row-wise L2 normalization with a norm floor.
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, T eps = T(1e-12)) {
    detail::check_finite_inputs(x, "l2_normalize");
    const int64_t C = detail::last_dim(x.shape());
    const int64_t R = detail::rows_of(x.shape());
    std::vector<T> y(static_cast<size_t>(R * C));
    std::vector<T> norms(static_cast<size_t>(R));
    auto xv = x.value();
    for (int64_t i = 0; i < R; ++i) {
        T s = T(0);
        for (int64_t j = 0; j < C; ++j) {
            T v = xv[static_cast<size_t>(i * C + j)];
            s += v * v;
        }
        T n = std::max(std::sqrt(s), eps);
        norms[static_cast<size_t>(i)] = n;
        for (int64_t j = 0; j < C; ++j) y[static_cast<size_t>(i * C + j)] = xv[static_cast<size_t>(i * C + j)] / n;
    }
    auto xn = x.node_ptr();
    auto node = detail::make_node<T>(
        x.shape(), std::move(y), {xn},
        [xn, R, C, norms](typename Tensor<T>::Node& self) {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (int64_t i = 0; i < R; ++i) {
                T dot = T(0);
                for (int64_t j = 0; j < C; ++j) {
                    size_t k = static_cast<size_t>(i * C + j);
                    dot += self.grad[k] * self.val[k];
                }
                const T n = norms[static_cast<size_t>(i)];
                for (int64_t j = 0; j < C; ++j) {
                    size_t k = static_cast<size_t>(i * C + j);
                    xn->grad[k] += (self.grad[k] - self.val[k] * dot) / n;
                }
            }
        });
    return Tensor<T>(node);
}

// ---------------------------------------------------------------------------
// 2-d spatial ops; layout is [C, H, W] (or [H, W] treated as one channel)
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void spatial_dims(const Tensor<T>& x, int64_t& C, int64_t& H, int64_t& W, const char* op) {
    if (x.ndim() == 2) {
        C = 1;
        H = x.dim(0);
        W = x.dim(1);
    } else if (x.ndim() == 3) {
        C = x.dim(0);
        H = x.dim(1);
        W = x.dim(2);
    } else {
        fail(std::string(op) + ": expects 2-d or 3-d tensor, got " + shape_str(x.shape()));
    }
}

}  // namespace detail

// Non-overlapping k x k average pooling.
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, int k) {
    int64_t C, H, W;
    detail::spatial_dims(x, C, H, W, "avg_pool2d");
    require(k > 0 && H % k == 0 && W % k == 0, "avg_pool2d: dims not divisible by kernel");
    const int64_t Ho = H / k, Wo = W / k;
    std::vector<T> y(static_cast<size_t>(C * Ho * Wo), T(0));
    auto xv = x.value();
    for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < H; ++i)
            for (int64_t j = 0; j < W; ++j)
                y[static_cast<size_t>((c * Ho + i / k) * Wo + j / k)] +=
                    xv[static_cast<size_t>((c * H + i) * W + j)] / static_cast<T>(k * k);
    Shape os = (x.ndim() == 2) ? Shape{static_cast<int>(Ho), static_cast<int>(Wo)}
                               : Shape{static_cast<int>(C), static_cast<int>(Ho), static_cast<int>(Wo)};
    auto xn = x.node_ptr();
    auto node = detail::make_node<T>(std::move(os), std::move(y), {xn},
                                     [xn, C, H, W, k, Ho, Wo](typename Tensor<T>::Node& self) {
                                         if (!xn->requires_grad) return;
                                         xn->ensure_grad();
                                         for (int64_t c = 0; c < C; ++c)
                                             for (int64_t i = 0; i < H; ++i)
                                                 for (int64_t j = 0; j < W; ++j)
                                                     xn->grad[static_cast<size_t>((c * H + i) * W + j)] +=
                                                         self.grad[static_cast<size_t>((c * Ho + i / k) * Wo + j / k)] /
                                                         static_cast<T>(k * k);
                                     });
    return Tensor<T>(node);
}

// Nearest-neighbor upsampling by an integer factor.
template <typename T>
Tensor<T> upsample_nearest2d(const Tensor<T>& x, int factor) {
    int64_t C, H, W;
    detail::spatial_dims(x, C, H, W, "upsample_nearest2d");
    require(factor >= 1, "upsample_nearest2d: factor must be >= 1");
    const int64_t Ho = H * factor, Wo = W * factor;
    std::vector<T> y(static_cast<size_t>(C * Ho * Wo));
    auto xv = x.value();
    for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < Ho; ++i)
            for (int64_t j = 0; j < Wo; ++j)
                y[static_cast<size_t>((c * Ho + i) * Wo + j)] =
                    xv[static_cast<size_t>((c * H + i / factor) * W + j / factor)];
    Shape os = (x.ndim() == 2) ? Shape{static_cast<int>(Ho), static_cast<int>(Wo)}
                               : Shape{static_cast<int>(C), static_cast<int>(Ho), static_cast<int>(Wo)};
    auto xn = x.node_ptr();
    auto node = detail::make_node<T>(std::move(os), std::move(y), {xn},
                                     [xn, C, H, W, factor, Ho, Wo](typename Tensor<T>::Node& self) {
                                         if (!xn->requires_grad) return;
                                         xn->ensure_grad();
                                         for (int64_t c = 0; c < C; ++c)
                                             for (int64_t i = 0; i < Ho; ++i)
                                                 for (int64_t j = 0; j < Wo; ++j)
                                                     xn->grad[static_cast<size_t>((c * H + i / factor) * W + j / factor)] +=
                                                         self.grad[static_cast<size_t>((c * Ho + i) * Wo + j)];
                                     });
    return Tensor<T>(node);
}

// Strided spatial subsampling: y[i,j] = x[i*s, j*s].
template <typename T>
Tensor<T> subsample2d(const Tensor<T>& x, int stride) {
    int64_t C, H, W;
    detail::spatial_dims(x, C, H, W, "subsample2d");
    require(stride >= 1, "subsample2d: stride must be >= 1");
    const int64_t Ho = (H + stride - 1) / stride, Wo = (W + stride - 1) / stride;
    std::vector<T> y(static_cast<size_t>(C * Ho * Wo));
    auto xv = x.value();
    for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < Ho; ++i)
            for (int64_t j = 0; j < Wo; ++j)
                y[static_cast<size_t>((c * Ho + i) * Wo + j)] =
                    xv[static_cast<size_t>((c * H + i * stride) * W + j * stride)];
    Shape os = (x.ndim() == 2) ? Shape{static_cast<int>(Ho), static_cast<int>(Wo)}
                               : Shape{static_cast<int>(C), static_cast<int>(Ho), static_cast<int>(Wo)};
    auto xn = x.node_ptr();
    auto node = detail::make_node<T>(std::move(os), std::move(y), {xn},
                                     [xn, C, H, W, stride, Ho, Wo](typename Tensor<T>::Node& self) {
                                         if (!xn->requires_grad) return;
                                         xn->ensure_grad();
                                         for (int64_t c = 0; c < C; ++c)
                                             for (int64_t i = 0; i < Ho; ++i)
                                                 for (int64_t j = 0; j < Wo; ++j)
                                                     xn->grad[static_cast<size_t>((c * H + i * stride) * W + j * stride)] +=
                                                         self.grad[static_cast<size_t>((c * Ho + i) * Wo + j)];
                                     });
    return Tensor<T>(node);
}

// 3x3 same-padding convolution. x: [Cin, H, W], w: [Cout, Cin, 3, 3], b: [Cout].
template <typename T>
Tensor<T> conv2d_3x3(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    detail::check_finite_inputs(x, "conv2d");
    require(x.ndim() == 3, "conv2d: input must be [C,H,W]");
    require(w.ndim() == 4 && w.dim(2) == 3 && w.dim(3) == 3, "conv2d: weight must be [Cout,Cin,3,3]");
    const int64_t Cin = x.dim(0), H = x.dim(1), W = x.dim(2), Cout = w.dim(0);
    if (w.dim(1) != Cin)
        fail("conv2d: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
    require(b.ndim() == 1 && b.dim(0) == Cout, "conv2d: bias must be [Cout]");
    std::vector<T> y(static_cast<size_t>(Cout * H * W));
    auto xv = x.value();
    auto wv = w.value();
    auto bv = b.value();
    for (int64_t co = 0; co < Cout; ++co) {
        for (int64_t i = 0; i < H; ++i)
            for (int64_t j = 0; j < W; ++j) {
                T s = bv[static_cast<size_t>(co)];
                for (int64_t ci = 0; ci < Cin; ++ci)
                    for (int64_t di = -1; di <= 1; ++di) {
                        int64_t ii = i + di;
                        if (ii < 0 || ii >= H) continue;
                        for (int64_t dj = -1; dj <= 1; ++dj) {
                            int64_t jj = j + dj;
                            if (jj < 0 || jj >= W) continue;
                            s += xv[static_cast<size_t>((ci * H + ii) * W + jj)] *
                                 wv[static_cast<size_t>(((co * Cin + ci) * 3 + di + 1) * 3 + dj + 1)];
                        }
                    }
                y[static_cast<size_t>((co * H + i) * W + j)] = s;
            }
    }
    auto xn = x.node_ptr();
    auto wn = w.node_ptr();
    auto bn = b.node_ptr();
    auto node = detail::make_node<T>(
        {static_cast<int>(Cout), static_cast<int>(H), static_cast<int>(W)}, std::move(y),
        {xn, wn, bn}, [xn, wn, bn, Cin, Cout, H, W](typename Tensor<T>::Node& self) {
            if (xn->requires_grad) xn->ensure_grad();
            if (wn->requires_grad) wn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (int64_t co = 0; co < Cout; ++co)
                for (int64_t i = 0; i < H; ++i)
                    for (int64_t j = 0; j < W; ++j) {
                        const T g = self.grad[static_cast<size_t>((co * H + i) * W + j)];
                        if (g == T(0)) continue;
                        if (bn->requires_grad) bn->grad[static_cast<size_t>(co)] += g;
                        for (int64_t ci = 0; ci < Cin; ++ci)
                            for (int64_t di = -1; di <= 1; ++di) {
                                int64_t ii = i + di;
                                if (ii < 0 || ii >= H) continue;
                                for (int64_t dj = -1; dj <= 1; ++dj) {
                                    int64_t jj = j + dj;
                                    if (jj < 0 || jj >= W) continue;
                                    size_t xi = static_cast<size_t>((ci * H + ii) * W + jj);
                                    size_t wi = static_cast<size_t>(((co * Cin + ci) * 3 + di + 1) * 3 + dj + 1);
                                    if (xn->requires_grad) xn->grad[xi] += g * wn->val[wi];
                                    if (wn->requires_grad) wn->grad[wi] += g * xn->val[xi];
                                }
                            }
                    }
        });
    return Tensor<T>(node);
}

// ---------------------------------------------------------------------------
// gradient-stopped statistics and selection masks
// ---------------------------------------------------------------------------

template <typename T>
T median_value(const Tensor<T>& x) {
    std::vector<T> v(x.value().begin(), x.value().end());
    require(!v.empty(), "median: empty tensor");
    std::sort(v.begin(), v.end());
    size_t n = v.size();
    if (n % 2 == 1) return v[n / 2];
    return (v[n / 2 - 1] + v[n / 2]) / T(2);
}

// Mean absolute deviation around the median.
template <typename T>
T mad_value(const Tensor<T>& x) {
    T med = median_value(x);
    T s = T(0);
    for (T v : x.value()) s += std::abs(v - med);
    return s / static_cast<T>(x.size());
}

// Mask selecting the k largest (or smallest) values; never differentiable.
// Ties broken by lower flat index.
template <typename T>
Tensor<T> topk_mask(const Tensor<T>& x, int64_t k, bool largest = true) {
    require(k >= 0 && k <= x.size(), "topk_mask: k out of range");
    std::vector<int64_t> idx(static_cast<size_t>(x.size()));
    std::iota(idx.begin(), idx.end(), 0);
    auto xv = x.value();
    std::stable_sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
        return largest ? xv[static_cast<size_t>(a)] > xv[static_cast<size_t>(b)]
                       : xv[static_cast<size_t>(a)] < xv[static_cast<size_t>(b)];
    });
    std::vector<T> m(static_cast<size_t>(x.size()), T(0));
    for (int64_t i = 0; i < k; ++i) m[static_cast<size_t>(idx[static_cast<size_t>(i)])] = T(1);
    return Tensor<T>(x.shape(), std::move(m), false);
}

// ---------------------------------------------------------------------------
// finite-difference verification
// ---------------------------------------------------------------------------

struct FdOptions {
    int max_coords_per_param = 16;  // -1 checks every coordinate
    uint64_t seed = 0;
    // Optional coordinate filter: (param index, flat coordinate) -> check it?
    std::function<bool(size_t, int64_t)> coord_filter;
};

// Max relative error between analytic gradients and central differences.
// f must be deterministic; it is re-evaluated at the base point to verify.
template <typename T>
T finite_difference_check(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>>& params,
                          T eps, const FdOptions& opts = {}) {
    require(eps > T(0), "finite_difference_check: eps must be positive");
    Tensor<T> loss = f();
    Tensor<T> loss2 = f();
    require(loss.size() == 1, "finite_difference_check: f must return a scalar");
    if (loss.item() != loss2.item())
        throw std::runtime_error("finite_difference_check: f is not deterministic");
    GradientMap<T> gm = backward(loss);

    std::mt19937_64 rng(opts.seed);
    T max_err = T(0);
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        std::vector<int64_t> coords;
        for (int64_t c = 0; c < p.size(); ++c) {
            if (opts.coord_filter && !opts.coord_filter(pi, c)) continue;
            coords.push_back(c);
        }
        if (opts.max_coords_per_param >= 0 &&
            static_cast<int64_t>(coords.size()) > opts.max_coords_per_param) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(static_cast<size_t>(opts.max_coords_per_param));
        }
        const Tensor<T>* g = gm.contains(p.name()) ? &gm.at(p.name()) : nullptr;
        auto vals = p.mutable_value();
        for (int64_t c : coords) {
            const T orig = vals[static_cast<size_t>(c)];
            vals[static_cast<size_t>(c)] = orig + eps;
            T fp = f().item();
            vals[static_cast<size_t>(c)] = orig - eps;
            T fm = f().item();
            vals[static_cast<size_t>(c)] = orig;
            T numeric = (fp - fm) / (T(2) * eps);
            T analytic = g ? g->at(c) : T(0);
            T denom = std::max({std::abs(analytic), std::abs(numeric), T(1e-8)});
            max_err = std::max(max_err, std::abs(analytic - numeric) / denom);
        }
    }
    return max_err;
}

}  // namespace mtvl
