#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mimg/tensor.hpp"

namespace mimg {

// Reverse-mode automatic differentiation on a dynamically built tape.
// Each op records its parents and a closure that maps the output gradient
// to parent gradient contributions. backward() walks the graph once in
// reverse topological order, so shared subexpressions accumulate correctly.

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
inline bool grad_enabled() { return grad_mode_flag(); }

// RAII guard that disables gradient tracking (inference paths).
struct NoGrad {
    bool prev;
    NoGrad() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGrad() { grad_mode_flag() = prev; }
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;
};

template <class T>
struct NodeT {
    TensorT<T> value;
    TensorT<T> grad; // allocated lazily during backward
    bool requires_grad = false;
    std::vector<std::shared_ptr<NodeT<T>>> parents;
    std::function<void(NodeT<T>&)> backward_fn;

    void ensure_grad() {
        if (grad.shape != value.shape) {
            grad = TensorT<T>::zeros(value.shape);
        }
    }
};

template <class T>
class VarT {
public:
    VarT() = default;
    explicit VarT(std::shared_ptr<NodeT<T>> n) : node_(std::move(n)) {}

    static VarT leaf(TensorT<T> v, bool requires_grad = false) {
        auto n = std::make_shared<NodeT<T>>();
        n->value = std::move(v);
        n->requires_grad = requires_grad && grad_enabled();
        return VarT(std::move(n));
    }

    bool defined() const { return node_ != nullptr; }
    const TensorT<T>& value() const { return node_->value; }
    TensorT<T>& value() { return node_->value; } // leaf mutation (optimizer)
    const TensorT<T>& grad() const { return node_->grad; }
    bool requires_grad() const { return node_->requires_grad; }

    void zero_grad() {
        node_->ensure_grad();
        std::fill(node_->grad.data.begin(), node_->grad.data.end(), T(0));
    }

    // Backpropagate from a scalar. Gradients accumulate into leaves until
    // cleared, which is what gradient accumulation over micro-batches uses.
    void backward() const {
        if (node_->value.numel() != 1)
            throw ShapeError("backward() requires a scalar output, got " +
                             node_->value.shape_str());
        std::vector<NodeT<T>*> order;
        std::unordered_set<NodeT<T>*> seen;
        topo(node_.get(), seen, order);
        node_->ensure_grad();
        node_->grad.data[0] = T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            NodeT<T>* n = *it;
            if (!n->backward_fn) continue;
            for (auto& p : n->parents)
                if (p->requires_grad) p->ensure_grad();
            n->backward_fn(*n);
        }
    }

    std::shared_ptr<NodeT<T>>& node() { return node_; }
    const std::shared_ptr<NodeT<T>>& node() const { return node_; }

private:
    static void topo(NodeT<T>* root, std::unordered_set<NodeT<T>*>& seen,
                     std::vector<NodeT<T>*>& order) {
        // Iterative DFS; the graph can be deeper than the stack allows.
        std::vector<std::pair<NodeT<T>*, size_t>> stack{{root, 0}};
        seen.insert(root);
        while (!stack.empty()) {
            auto& [n, i] = stack.back();
            if (i < n->parents.size()) {
                NodeT<T>* p = n->parents[i++].get();
                if (p->requires_grad && !seen.count(p)) {
                    seen.insert(p);
                    stack.push_back({p, 0});
                }
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
    }

    std::shared_ptr<NodeT<T>> node_;
};

using Var = VarT<float>;

namespace detail {

template <class T>
std::shared_ptr<NodeT<T>> make_node(TensorT<T> value,
                                    std::vector<std::shared_ptr<NodeT<T>>> parents,
                                    std::function<void(NodeT<T>&)> fn) {
    auto n = std::make_shared<NodeT<T>>();
    n->value = std::move(value);
    bool any = false;
    if (grad_enabled())
        for (auto& p : parents)
            if (p->requires_grad) { any = true; break; }
    if (any) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward_fn = std::move(fn);
    }
    return n;
}

template <class T>
void check_same_shape(const VarT<T>& a, const VarT<T>& b, const char* op) {
    if (!a.value().same_shape(b.value()))
        throw ShapeError(std::string(op) + ": shape mismatch " + a.value().shape_str() +
                         " vs " + b.value().shape_str());
}

} // namespace detail

template <class T>
VarT<T> add(const VarT<T>& a, const VarT<T>& b) {
    detail::check_same_shape(a, b, "add");
    TensorT<T> out = a.value();
    const auto& bv = b.value().data;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv[i];
    auto an = a.node(), bn = b.node();
    return VarT<T>(detail::make_node<T>(std::move(out), {an, bn}, [an, bn](NodeT<T>& self) {
        const auto& g = self.grad.data;
        if (an->requires_grad)
            for (size_t i = 0; i < g.size(); ++i) an->grad.data[i] += g[i];
        if (bn->requires_grad)
            for (size_t i = 0; i < g.size(); ++i) bn->grad.data[i] += g[i];
    }));
}

template <class T>
VarT<T> sub(const VarT<T>& a, const VarT<T>& b) {
    detail::check_same_shape(a, b, "sub");
    TensorT<T> out = a.value();
    const auto& bv = b.value().data;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv[i];
    auto an = a.node(), bn = b.node();
    return VarT<T>(detail::make_node<T>(std::move(out), {an, bn}, [an, bn](NodeT<T>& self) {
        const auto& g = self.grad.data;
        if (an->requires_grad)
            for (size_t i = 0; i < g.size(); ++i) an->grad.data[i] += g[i];
        if (bn->requires_grad)
            for (size_t i = 0; i < g.size(); ++i) bn->grad.data[i] -= g[i];
    }));
}

template <class T>
VarT<T> mul(const VarT<T>& a, const VarT<T>& b) {
    detail::check_same_shape(a, b, "mul");
    TensorT<T> out = a.value();
    const auto& bv = b.value().data;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv[i];
    auto an = a.node(), bn = b.node();
    return VarT<T>(detail::make_node<T>(std::move(out), {an, bn}, [an, bn](NodeT<T>& self) {
        const auto& g = self.grad.data;
        if (an->requires_grad) {
            const auto& bv2 = bn->value.data;
            for (size_t i = 0; i < g.size(); ++i) an->grad.data[i] += g[i] * bv2[i];
        }
        if (bn->requires_grad) {
            const auto& av2 = an->value.data;
            for (size_t i = 0; i < g.size(); ++i) bn->grad.data[i] += g[i] * av2[i];
        }
    }));
}

template <class T>
VarT<T> scale(const VarT<T>& a, T c) {
    TensorT<T> out = a.value();
    for (auto& v : out.data) v *= c;
    auto an = a.node();
    return VarT<T>(detail::make_node<T>(std::move(out), {an}, [an, c](NodeT<T>& self) {
        const auto& g = self.grad.data;
        for (size_t i = 0; i < g.size(); ++i) an->grad.data[i] += g[i] * c;
    }));
}

template <class T>
VarT<T> add_scalar(const VarT<T>& a, T c) {
    TensorT<T> out = a.value();
    for (auto& v : out.data) v += c;
    auto an = a.node();
    return VarT<T>(detail::make_node<T>(std::move(out), {an}, [an](NodeT<T>& self) {
        const auto& g = self.grad.data;
        for (size_t i = 0; i < g.size(); ++i) an->grad.data[i] += g[i];
    }));
}

// Rectified linear unit; the subgradient at zero is fixed to zero.
template <class T>
VarT<T> relu(const VarT<T>& a) {
    TensorT<T> out = a.value();
    for (auto& v : out.data) v = v > T(0) ? v : T(0);
    auto an = a.node();
    return VarT<T>(detail::make_node<T>(std::move(out), {an}, [an](NodeT<T>& self) {
        const auto& g = self.grad.data;
        const auto& x = an->value.data;
        for (size_t i = 0; i < g.size(); ++i)
            if (x[i] > T(0)) an->grad.data[i] += g[i];
    }));
}

// Gaussian error linear unit, exact erf form.
template <class T>
VarT<T> gelu(const VarT<T>& a) {
    TensorT<T> out = a.value();
    for (auto& v : out.data) {
        double x = static_cast<double>(v);
        v = static_cast<T>(0.5 * x * (1.0 + std::erf(x * 0.7071067811865475)));
    }
    auto an = a.node();
    return VarT<T>(detail::make_node<T>(std::move(out), {an}, [an](NodeT<T>& self) {
        const auto& g = self.grad.data;
        const auto& x = an->value.data;
        for (size_t i = 0; i < g.size(); ++i) {
            double xi = static_cast<double>(x[i]);
            double cdf = 0.5 * (1.0 + std::erf(xi * 0.7071067811865475));
            double pdf = std::exp(-0.5 * xi * xi) * 0.3989422804014327;
            an->grad.data[i] += g[i] * static_cast<T>(cdf + xi * pdf);
        }
    }));
}

// Cuts the tape: value flows forward, no gradient flows back.
template <class T>
VarT<T> detach(const VarT<T>& a) {
    return VarT<T>::leaf(a.value(), false);
}

template <class T>
double pairwise_sum(const T* p, size_t n) {
    if (n <= 8) {
        double s = 0;
        for (size_t i = 0; i < n; ++i) s += static_cast<double>(p[i]);
        return s;
    }
    size_t h = n / 2;
    return pairwise_sum(p, h) + pairwise_sum(p + h, n - h);
}

template <class T>
VarT<T> sum_all(const VarT<T>& a) {
    // Pairwise accumulation in double keeps the forward value well
    // conditioned; the backward is an exact broadcast either way.
    TensorT<T> out({1});
    out.data[0] = static_cast<T>(pairwise_sum(a.value().data.data(), a.value().data.size()));
    auto an = a.node();
    return VarT<T>(detail::make_node<T>(std::move(out), {an}, [an](NodeT<T>& self) {
        const T g = self.grad.data[0];
        for (auto& v : an->grad.data) v += g;
    }));
}

template <class T>
VarT<T> mean_all(const VarT<T>& a) {
    int64_t n = a.value().numel();
    if (n == 0) throw ShapeError("mean of empty tensor");
    return scale(sum_all(a), T(1) / static_cast<T>(n));
}

template <class T>
VarT<T> reshape(const VarT<T>& a, std::vector<int> new_shape) {
    if (TensorT<T>::numel_of(new_shape) != a.value().numel())
        throw ShapeError("reshape: element count mismatch");
    TensorT<T> out(std::move(new_shape), a.value().data);
    auto an = a.node();
    return VarT<T>(detail::make_node<T>(std::move(out), {an}, [an](NodeT<T>& self) {
        const auto& g = self.grad.data;
        for (size_t i = 0; i < g.size(); ++i) an->grad.data[i] += g[i];
    }));
}

template <class T>
VarT<T> transpose2d(const VarT<T>& a) {
    if (a.value().ndim() != 2) throw ShapeError("transpose2d: expected 2D tensor");
    int m = a.value().rows(), n = a.value().cols();
    TensorT<T> out({n, m});
    transpose_into(out.ptr(), a.value().ptr(), m, n);
    auto an = a.node();
    return VarT<T>(detail::make_node<T>(std::move(out), {an}, [an, m, n](NodeT<T>& self) {
        // d(in) += transpose(d(out))
        const T* g = self.grad.ptr();
        T* d = an->grad.ptr();
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < m; ++i)
                d[static_cast<size_t>(i) * n + j] += g[static_cast<size_t>(j) * m + i];
    }));
}

// Concatenate along columns: [m,p] ++ [m,q] -> [m,p+q].
template <class T>
VarT<T> concat_cols(const VarT<T>& a, const VarT<T>& b) {
    if (a.value().ndim() != 2 || b.value().ndim() != 2)
        throw ShapeError("concat_cols: expected 2D tensors");
    if (a.value().rows() != b.value().rows())
        throw ShapeError("concat_cols: row count mismatch");
    int m = a.value().rows(), p = a.value().cols(), q = b.value().cols();
    TensorT<T> out({m, p + q});
    for (int i = 0; i < m; ++i) {
        const T* ar = a.value().ptr() + static_cast<size_t>(i) * p;
        const T* br = b.value().ptr() + static_cast<size_t>(i) * q;
        T* orow = out.ptr() + static_cast<size_t>(i) * (p + q);
        for (int j = 0; j < p; ++j) orow[j] = ar[j];
        for (int j = 0; j < q; ++j) orow[p + j] = br[j];
    }
    auto an = a.node(), bn = b.node();
    return VarT<T>(detail::make_node<T>(std::move(out), {an, bn},
                                        [an, bn, m, p, q](NodeT<T>& self) {
        const T* g = self.grad.ptr();
        for (int i = 0; i < m; ++i) {
            const T* grow = g + static_cast<size_t>(i) * (p + q);
            if (an->requires_grad) {
                T* ar = an->grad.ptr() + static_cast<size_t>(i) * p;
                for (int j = 0; j < p; ++j) ar[j] += grow[j];
            }
            if (bn->requires_grad) {
                T* br = bn->grad.ptr() + static_cast<size_t>(i) * q;
                for (int j = 0; j < q; ++j) br[j] += grow[p + j];
            }
        }
    }));
}

// Repeat a [n,d] matrix `reps` times along rows -> [reps*n, d].
// Backward sums the gradient over the repeats.
template <class T>
VarT<T> tile_rows(const VarT<T>& a, int reps) {
    if (a.value().ndim() != 2) throw ShapeError("tile_rows: expected 2D tensor");
    if (reps < 1) throw ShapeError("tile_rows: reps must be positive");
    int n = a.value().rows(), d = a.value().cols();
    TensorT<T> out({reps * n, d});
    for (int r = 0; r < reps; ++r)
        std::copy(a.value().data.begin(), a.value().data.end(),
                  out.data.begin() + static_cast<size_t>(r) * n * d);
    auto an = a.node();
    return VarT<T>(detail::make_node<T>(std::move(out), {an}, [an, reps, n, d](NodeT<T>& self) {
        const T* g = self.grad.ptr();
        T* dst = an->grad.ptr();
        for (int r = 0; r < reps; ++r) {
            const T* block = g + static_cast<size_t>(r) * n * d;
            for (size_t i = 0; i < static_cast<size_t>(n) * d; ++i) dst[i] += block[i];
        }
    }));
}

} // namespace mimg
