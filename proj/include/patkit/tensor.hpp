#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "patkit/common.hpp"
#include "patkit/rng.hpp"

namespace patkit {

template <typename T>
class Tape;

// Dense row-major tensor. Immutable after creation; copies share the data
// buffer. A tensor is either a free constant (tape() == nullptr) or bound to
// the tape node that produced it.
template <typename T>
class Tensor {
public:
    Tensor() : shape_{}, data_(std::make_shared<std::vector<T>>(1, T(0))) {}

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)) {
        if (shape_numel(shape_) != data.size())
            throw ShapeError("tensor data size " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape_));
        data_ = std::make_shared<std::vector<T>>(std::move(data));
    }

    static Tensor zeros(Shape shape) {
        size_t n = shape_numel(shape);
        return raw(std::move(shape), std::vector<T>(n, T(0)));
    }

    static Tensor full(Shape shape, T v) {
        size_t n = shape_numel(shape);
        return raw(std::move(shape), std::vector<T>(n, v));
    }

    static Tensor scalar(T v) { return Tensor({}, {v}); }

    static Tensor uniform(Shape shape, T lo, T hi, Rng& rng) {
        size_t n = shape_numel(shape);
        std::vector<T> d(n);
        for (auto& x : d) x = static_cast<T>(rng.uniform(lo, hi));
        return raw(std::move(shape), std::move(d));
    }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    size_t numel() const { return data_->size(); }
    const std::vector<T>& data() const { return *data_; }
    std::shared_ptr<const std::vector<T>> data_ptr() const { return data_; }

    T item() const {
        if (numel() != 1) throw ContractError("item(): tensor " + shape_str(shape_) + " is not scalar");
        return (*data_)[0];
    }
    T at(int i) const { return (*data_)[static_cast<size_t>(i)]; }
    T at(int i, int j) const { return (*data_)[static_cast<size_t>(i) * dim(1) + j]; }
    T at(int i, int j, int k) const {
        return (*data_)[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
    }

    Tape<T>* tape() const { return tape_; }
    int node() const { return node_; }
    bool on_tape() const { return tape_ != nullptr; }
    bool requires_grad() const { return on_tape(); }

    // Same values, no tape binding. Shares the buffer.
    Tensor detached() const {
        Tensor t = *this;
        t.tape_ = nullptr;
        t.node_ = -1;
        return t;
    }

    // Internal: adopt a freshly computed buffer without re-validating it.
    static Tensor raw(Shape shape, std::vector<T>&& data) {
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::make_shared<std::vector<T>>(std::move(data));
#ifndef NDEBUG
        if (!all_finite(*t.data_))
            throw DomainError("non-finite value produced in tensor " + shape_str(t.shape_));
#endif
        return t;
    }

    void attach(Tape<T>* tape, int node) {
        tape_ = tape;
        node_ = node;
    }

private:
    Shape shape_;
    std::shared_ptr<std::vector<T>> data_;
    Tape<T>* tape_ = nullptr;
    int node_ = -1;
};

// Append-only record of one forward pass. Nodes are topologically ordered by
// construction; backward walks them once in reverse. Single-owner: one
// forward/backward in flight per tape.
template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const std::vector<T>&)>;

    Tensor<T> leaf(Shape shape, std::vector<T> data) {
        Tensor<T> t(std::move(shape), std::move(data));
        t.attach(this, add_node(t.numel(), nullptr));
        return t;
    }

    Tensor<T> leaf(const Tensor<T>& value) {
        Tensor<T> t = value.detached();
        t.attach(this, add_node(t.numel(), nullptr));
        return t;
    }

    int add_node(size_t size, BackwardFn fn) {
        nodes_.push_back(Node{size, {}, std::move(fn)});
        return static_cast<int>(nodes_.size()) - 1;
    }

    // Reverse-mode sweep from a scalar loss. Grads are reset first, so
    // replaying backward on the same tape reproduces identical gradients.
    void backward(const Tensor<T>& loss) {
        if (loss.tape() != this) throw ContractError("backward: loss tensor is not on this tape");
        if (loss.numel() != 1)
            throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
        for (auto& n : nodes_) n.grad.clear();
        nodes_[static_cast<size_t>(loss.node())].grad.assign(1, T(1));
        for (int k = loss.node(); k >= 0; --k) {
            Node& n = nodes_[static_cast<size_t>(k)];
            if (n.grad.empty() || !n.fn) continue;
            n.fn(*this, n.grad);
        }
    }

    // Gradient of a node; zeros if backward never touched it.
    std::vector<T> grad(int node) const {
        const Node& n = nodes_.at(static_cast<size_t>(node));
        if (n.grad.empty()) return std::vector<T>(n.size, T(0));
        return n.grad;
    }

    std::vector<T>& grad_accum(int node, size_t size) {
        Node& n = nodes_.at(static_cast<size_t>(node));
        if (n.grad.empty()) n.grad.assign(size, T(0));
        return n.grad;
    }

    size_t size() const { return nodes_.size(); }

    // Leaf placements keyed by parameter identity; lets gradient extraction
    // work per tape when batches fan out across tapes.
    void record_param(const void* key, int node) { param_nodes_[key] = node; }
    int param_node(const void* key) const {
        auto it = param_nodes_.find(key);
        return it == param_nodes_.end() ? -1 : it->second;
    }

private:
    struct Node {
        size_t size;
        std::vector<T> grad;
        BackwardFn fn;
    };
    std::vector<Node> nodes_;
    std::map<const void*, int> param_nodes_;
};

namespace detail {

template <typename T>
inline Tape<T>* result_tape(const Tensor<T>& a) {
    return a.tape();
}

template <typename T>
inline Tape<T>* result_tape(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.tape() && b.tape() && a.tape() != b.tape())
        throw ContractError("operands live on different tapes");
    return a.tape() ? a.tape() : b.tape();
}

// out[d] = max(a[d], b[d]) with size-1 stretching, aligned at the trailing dim.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
    int r = std::max(ra, rb);
    Shape out(static_cast<size_t>(r));
    for (int d = 0; d < r; ++d) {
        int da = d < r - ra ? 1 : a[static_cast<size_t>(d - (r - ra))];
        int db = d < r - rb ? 1 : b[static_cast<size_t>(d - (r - rb))];
        if (da != db && da != 1 && db != 1)
            throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) +
                             " are not broadcast-compatible");
        out[static_cast<size_t>(d)] = std::max(da, db);
    }
    return out;
}

// Element strides of `in` when indexed by `out` coordinates; 0 marks a
// broadcast dimension.
inline std::vector<size_t> bcast_strides(const Shape& in, const Shape& out) {
    int r = static_cast<int>(out.size());
    int ri = static_cast<int>(in.size());
    std::vector<size_t> st(static_cast<size_t>(r), 0);
    size_t acc = 1;
    for (int d = ri - 1; d >= 0; --d) {
        int od = d + (r - ri);
        st[static_cast<size_t>(od)] = (in[static_cast<size_t>(d)] == 1) ? 0 : acc;
        acc *= static_cast<size_t>(in[static_cast<size_t>(d)]);
    }
    for (int d = 0; d < r - ri; ++d) st[static_cast<size_t>(d)] = 0;
    return st;
}

// Odometer walk over `shape`, calling f(flat_out, off_a, off_b).
template <typename F>
inline void for_each_bcast(const Shape& shape, const std::vector<size_t>& sa,
                           const std::vector<size_t>& sb, F&& f) {
    size_t n = shape_numel(shape);
    int r = static_cast<int>(shape.size());
    std::vector<int> idx(static_cast<size_t>(r), 0);
    size_t oa = 0, ob = 0;
    for (size_t i = 0; i < n; ++i) {
        f(i, oa, ob);
        for (int d = r - 1; d >= 0; --d) {
            auto du = static_cast<size_t>(d);
            ++idx[du];
            oa += sa[du];
            ob += sb[du];
            if (idx[du] < shape[du]) break;
            oa -= sa[du] * static_cast<size_t>(shape[du]);
            ob -= sb[du] * static_cast<size_t>(shape[du]);
            idx[du] = 0;
        }
    }
}

// Split a shape around `axis` into (outer, n, inner) extents.
inline void axis_split(const Shape& s, int axis, size_t& outer, size_t& n, size_t& inner) {
    if (axis < 0 || axis >= static_cast<int>(s.size()))
        throw ContractError("axis " + std::to_string(axis) + " invalid for shape " + shape_str(s));
    outer = 1;
    inner = 1;
    for (int d = 0; d < axis; ++d) outer *= static_cast<size_t>(s[static_cast<size_t>(d)]);
    n = static_cast<size_t>(s[static_cast<size_t>(axis)]);
    for (size_t d = static_cast<size_t>(axis) + 1; d < s.size(); ++d) inner *= static_cast<size_t>(s[d]);
}

// Raw matmul kernels; out is accumulated into, callers zero it first.
template <typename T>
inline void mm_nn(size_t M, size_t K, size_t P, const T* a, const T* b, T* out) {
    for (size_t m = 0; m < M; ++m) {
        const T* arow = a + m * K;
        T* orow = out + m * P;
        for (size_t k = 0; k < K; ++k) {
            const T av = arow[k];
            const T* brow = b + k * P;
            for (size_t p = 0; p < P; ++p) orow[p] += av * brow[p];
        }
    }
}

// out[M,K] += g[M,P] * b[K,P]^T
template <typename T>
inline void mm_nt(size_t M, size_t P, size_t K, const T* g, const T* b, T* out) {
    for (size_t m = 0; m < M; ++m) {
        const T* grow = g + m * P;
        T* orow = out + m * K;
        for (size_t k = 0; k < K; ++k) {
            const T* brow = b + k * P;
            T acc = 0;
            for (size_t p = 0; p < P; ++p) acc += grow[p] * brow[p];
            orow[k] += acc;
        }
    }
}

// out[K,P] += a[M,K]^T * g[M,P]
template <typename T>
inline void mm_tn(size_t M, size_t K, size_t P, const T* a, const T* g, T* out) {
    for (size_t m = 0; m < M; ++m) {
        const T* arow = a + m * K;
        const T* grow = g + m * P;
        for (size_t k = 0; k < K; ++k) {
            const T av = arow[k];
            T* orow = out + k * P;
            for (size_t p = 0; p < P; ++p) orow[p] += av * grow[p];
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Core operations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const size_t M = static_cast<size_t>(a.dim(0));
    const size_t K = static_cast<size_t>(a.dim(1));
    const size_t P = static_cast<size_t>(b.dim(1));
    std::vector<T> out(M * P, T(0));
    detail::mm_nn(M, K, P, a.data().data(), b.data().data(), out.data());
    Tensor<T> y = Tensor<T>::raw({static_cast<int>(M), static_cast<int>(P)}, std::move(out));
    if (Tape<T>* tape = detail::result_tape(a, b)) {
        auto ad = a.data_ptr();
        auto bd = b.data_ptr();
        int an = a.node(), bn = b.node();
        y.attach(tape, tape->add_node(M * P, [=](Tape<T>& tp, const std::vector<T>& g) {
            if (an >= 0) {
                auto& ga = tp.grad_accum(an, M * K);
                detail::mm_nt(M, P, K, g.data(), bd->data(), ga.data());
            }
            if (bn >= 0) {
                auto& gb = tp.grad_accum(bn, K * P);
                detail::mm_tn(M, K, P, ad->data(), g.data(), gb.data());
            }
        }));
    }
    return y;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
    size_t outer, n, inner;
    detail::axis_split(x.shape(), axis, outer, n, inner);
    const auto& xv = x.data();
    std::vector<T> out(xv.size());
    for (size_t o = 0; o < outer; ++o)
        for (size_t i = 0; i < inner; ++i) {
            const size_t base = o * n * inner + i;
            T mx = xv[base];
            for (size_t k = 1; k < n; ++k) mx = std::max(mx, xv[base + k * inner]);
            T sum = 0;
            for (size_t k = 0; k < n; ++k) {
                T e = std::exp(xv[base + k * inner] - mx);
                out[base + k * inner] = e;
                sum += e;
            }
            for (size_t k = 0; k < n; ++k) out[base + k * inner] /= sum;
        }
    Tensor<T> y = Tensor<T>::raw(x.shape(), std::move(out));
    if (Tape<T>* tape = detail::result_tape(x)) {
        auto yd = y.data_ptr();
        int xn = x.node();
        y.attach(tape, tape->add_node(y.numel(), [=](Tape<T>& tp, const std::vector<T>& g) {
            if (xn < 0) return;
            auto& gx = tp.grad_accum(xn, yd->size());
            const auto& yv = *yd;
            for (size_t o = 0; o < outer; ++o)
                for (size_t i = 0; i < inner; ++i) {
                    const size_t base = o * n * inner + i;
                    T dot = 0;
                    for (size_t k = 0; k < n; ++k) dot += g[base + k * inner] * yv[base + k * inner];
                    for (size_t k = 0; k < n; ++k) {
                        const size_t p = base + k * inner;
                        gx[p] += yv[p] * (g[p] - dot);
                    }
                }
        }));
    }
    return y;
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, int axis) {
    size_t outer, n, inner;
    detail::axis_split(x.shape(), axis, outer, n, inner);
    const auto& xv = x.data();
    std::vector<T> out(xv.size());
    for (size_t o = 0; o < outer; ++o)
        for (size_t i = 0; i < inner; ++i) {
            const size_t base = o * n * inner + i;
            T mx = xv[base];
            for (size_t k = 1; k < n; ++k) mx = std::max(mx, xv[base + k * inner]);
            T sum = 0;
            for (size_t k = 0; k < n; ++k) sum += std::exp(xv[base + k * inner] - mx);
            const T lse = mx + std::log(sum);
            for (size_t k = 0; k < n; ++k) out[base + k * inner] = xv[base + k * inner] - lse;
        }
    Tensor<T> y = Tensor<T>::raw(x.shape(), std::move(out));
    if (Tape<T>* tape = detail::result_tape(x)) {
        auto yd = y.data_ptr();
        int xn = x.node();
        y.attach(tape, tape->add_node(y.numel(), [=](Tape<T>& tp, const std::vector<T>& g) {
            if (xn < 0) return;
            auto& gx = tp.grad_accum(xn, yd->size());
            const auto& yv = *yd;
            for (size_t o = 0; o < outer; ++o)
                for (size_t i = 0; i < inner; ++i) {
                    const size_t base = o * n * inner + i;
                    T gsum = 0;
                    for (size_t k = 0; k < n; ++k) gsum += g[base + k * inner];
                    for (size_t k = 0; k < n; ++k) {
                        const size_t p = base + k * inner;
                        gx[p] += g[p] - std::exp(yv[p]) * gsum;
                    }
                }
        }));
    }
    return y;
}

// ELU with alpha = 1.
template <typename T>
Tensor<T> elu(const Tensor<T>& x) {
    const auto& xv = x.data();
    std::vector<T> out(xv.size());
    for (size_t i = 0; i < xv.size(); ++i)
        out[i] = xv[i] > 0 ? xv[i] : static_cast<T>(std::expm1(static_cast<double>(xv[i])));
    Tensor<T> y = Tensor<T>::raw(x.shape(), std::move(out));
    if (Tape<T>* tape = detail::result_tape(x)) {
        auto xd = x.data_ptr();
        auto yd = y.data_ptr();
        int xn = x.node();
        y.attach(tape, tape->add_node(y.numel(), [=](Tape<T>& tp, const std::vector<T>& g) {
            if (xn < 0) return;
            auto& gx = tp.grad_accum(xn, xd->size());
            for (size_t i = 0; i < g.size(); ++i)
                gx[i] += (*xd)[i] > 0 ? g[i] : g[i] * ((*yd)[i] + T(1));
        }));
    }
    return y;
}

enum class Reduce { max, mean, sum };

template <typename T>
Tensor<T> reduce(const Tensor<T>& x, Reduce kind, int axis, bool keep_dim = false) {
    size_t outer, n, inner;
    detail::axis_split(x.shape(), axis, outer, n, inner);
    std::vector<T> out(outer * inner, T(0));
    std::shared_ptr<std::vector<size_t>> argmax;
    const auto& xv = x.data();
    if (kind == Reduce::max) {
        argmax = std::make_shared<std::vector<size_t>>(outer * inner, 0);
        for (size_t o = 0; o < outer; ++o)
            for (size_t i = 0; i < inner; ++i) {
                const size_t base = o * n * inner + i;
                T best = xv[base];
                size_t bestk = 0;
                for (size_t k = 1; k < n; ++k)
                    if (xv[base + k * inner] > best) {
                        best = xv[base + k * inner];
                        bestk = k;
                    }
                out[o * inner + i] = best;
                (*argmax)[o * inner + i] = bestk;
            }
    } else {
        for (size_t o = 0; o < outer; ++o)
            for (size_t i = 0; i < inner; ++i) {
                const size_t base = o * n * inner + i;
                T acc = 0;
                for (size_t k = 0; k < n; ++k) acc += xv[base + k * inner];
                out[o * inner + i] = kind == Reduce::mean ? acc / static_cast<T>(n) : acc;
            }
    }
    Shape oshape;
    for (int d = 0; d < x.rank(); ++d) {
        if (d == axis) {
            if (keep_dim) oshape.push_back(1);
        } else {
            oshape.push_back(x.dim(d));
        }
    }
    Tensor<T> y = Tensor<T>::raw(std::move(oshape), std::move(out));
    if (Tape<T>* tape = detail::result_tape(x)) {
        int xn = x.node();
        size_t xsize = x.numel();
        y.attach(tape, tape->add_node(y.numel(), [=](Tape<T>& tp, const std::vector<T>& g) {
            if (xn < 0) return;
            auto& gx = tp.grad_accum(xn, xsize);
            if (kind == Reduce::max) {
                for (size_t o = 0; o < outer; ++o)
                    for (size_t i = 0; i < inner; ++i)
                        gx[o * n * inner + (*argmax)[o * inner + i] * inner + i] += g[o * inner + i];
            } else {
                const T w = kind == Reduce::mean ? T(1) / static_cast<T>(n) : T(1);
                for (size_t o = 0; o < outer; ++o)
                    for (size_t i = 0; i < inner; ++i) {
                        const T gv = g[o * inner + i] * w;
                        const size_t base = o * n * inner + i;
                        for (size_t k = 0; k < n; ++k) gx[base + k * inner] += gv;
                    }
            }
        }));
    }
    return y;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape);

template <typename T>
Tensor<T> reduce_all(const Tensor<T>& x, Reduce kind) {
    return reduce(reshape(x, {static_cast<int>(x.numel())}), kind, 0);
}

namespace detail {

template <typename T, typename Fwd, typename Bwd>
Tensor<T> unary_pointwise(const Tensor<T>& x, Fwd fwd, Bwd bwd) {
    const auto& xv = x.data();
    std::vector<T> out(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
    Tensor<T> y = Tensor<T>::raw(x.shape(), std::move(out));
    if (Tape<T>* tape = result_tape(x)) {
        auto xd = x.data_ptr();
        auto yd = y.data_ptr();
        int xn = x.node();
        y.attach(tape, tape->add_node(y.numel(), [=](Tape<T>& tp, const std::vector<T>& g) {
            if (xn < 0) return;
            auto& gx = tp.grad_accum(xn, xd->size());
            for (size_t i = 0; i < g.size(); ++i) gx[i] += bwd(g[i], (*xd)[i], (*yd)[i]);
        }));
    }
    return y;
}

}  // namespace detail

template <typename T>
Tensor<T> exp_op(const Tensor<T>& x) {
    return detail::unary_pointwise(
        x, [](T v) { return std::exp(v); }, [](T g, T, T y) { return g * y; });
}

template <typename T>
Tensor<T> log_op(const Tensor<T>& x) {
    for (T v : x.data())
        if (!(v > 0)) throw DomainError("log of non-positive value " + std::to_string(v));
    return detail::unary_pointwise(
        x, [](T v) { return std::log(v); }, [](T g, T xv, T) { return g / xv; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
    return detail::unary_pointwise(
        x, [](T v) { return -v; }, [](T g, T, T) { return -g; });
}

template <typename T>
Tensor<T> sqrt_op(const Tensor<T>& x) {
    for (T v : x.data())
        if (v < 0) throw DomainError("sqrt of negative value " + std::to_string(v));
    return detail::unary_pointwise(
        x, [](T v) { return std::sqrt(v); }, [](T g, T, T y) { return g / (2 * y); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    return detail::unary_pointwise(
        x, [c](T v) { return v * c; }, [c](T g, T, T) { return g * c; });
}

template <typename T>
Tensor<T> add_const(const Tensor<T>& x, T c) {
    return detail::unary_pointwise(
        x, [c](T v) { return v + c; }, [](T g, T, T) { return g; });
}

enum class Binary { add, sub, mul, div };

template <typename T>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, Binary kind) {
    using namespace detail;
    Shape oshape = broadcast_shape(a.shape(), b.shape());
    auto sa = bcast_strides(a.shape(), oshape);
    auto sb = bcast_strides(b.shape(), oshape);
    const auto& av = a.data();
    const auto& bv = b.data();
    if (kind == Binary::div)
        for (T v : bv)
            if (v == T(0)) throw DomainError("division by zero");
    std::vector<T> out(shape_numel(oshape));
    for_each_bcast(oshape, sa, sb, [&](size_t i, size_t oa, size_t ob) {
        switch (kind) {
            case Binary::add: out[i] = av[oa] + bv[ob]; break;
            case Binary::sub: out[i] = av[oa] - bv[ob]; break;
            case Binary::mul: out[i] = av[oa] * bv[ob]; break;
            case Binary::div: out[i] = av[oa] / bv[ob]; break;
        }
    });
    Tensor<T> y = Tensor<T>::raw(oshape, std::move(out));
    if (Tape<T>* tape = result_tape(a, b)) {
        auto ad = a.data_ptr();
        auto bd = b.data_ptr();
        int an = a.node(), bn = b.node();
        size_t asize = a.numel(), bsize = b.numel();
        y.attach(tape, tape->add_node(y.numel(), [=](Tape<T>& tp, const std::vector<T>& g) {
            std::vector<T>* ga = an >= 0 ? &tp.grad_accum(an, asize) : nullptr;
            std::vector<T>* gb = bn >= 0 ? &tp.grad_accum(bn, bsize) : nullptr;
            for_each_bcast(oshape, sa, sb, [&](size_t i, size_t oa, size_t ob) {
                switch (kind) {
                    case Binary::add:
                        if (ga) (*ga)[oa] += g[i];
                        if (gb) (*gb)[ob] += g[i];
                        break;
                    case Binary::sub:
                        if (ga) (*ga)[oa] += g[i];
                        if (gb) (*gb)[ob] -= g[i];
                        break;
                    case Binary::mul:
                        if (ga) (*ga)[oa] += g[i] * (*bd)[ob];
                        if (gb) (*gb)[ob] += g[i] * (*ad)[oa];
                        break;
                    case Binary::div:
                        if (ga) (*ga)[oa] += g[i] / (*bd)[ob];
                        if (gb) (*gb)[ob] -= g[i] * (*ad)[oa] / ((*bd)[ob] * (*bd)[ob]);
                        break;
                }
            });
        }));
    }
    return y;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return binary_op(a, b, Binary::add); }
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return binary_op(a, b, Binary::sub); }
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return binary_op(a, b, Binary::mul); }
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) { return binary_op(a, b, Binary::div); }

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

// Reshape shares the underlying buffer; gradients pass through unchanged.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(new_shape) +
                         " changes element count");
    std::vector<T> copy = x.data();
    Tensor<T> y = Tensor<T>::raw(std::move(new_shape), std::move(copy));
    if (Tape<T>* tape = detail::result_tape(x)) {
        int xn = x.node();
        size_t xsize = x.numel();
        y.attach(tape, tape->add_node(x.numel(), [=](Tape<T>& tp, const std::vector<T>& g) {
            if (xn < 0) return;
            auto& gx = tp.grad_accum(xn, xsize);
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }));
    }
    return y;
}

namespace detail {

template <typename T>
void permute_raw(const Shape& in_shape, const std::vector<int>& axes, const std::vector<T>& in,
                 std::vector<T>& out, Shape& out_shape) {
    int r = static_cast<int>(in_shape.size());
    out_shape.resize(static_cast<size_t>(r));
    for (int d = 0; d < r; ++d) out_shape[static_cast<size_t>(d)] = in_shape[static_cast<size_t>(axes[static_cast<size_t>(d)])];
    std::vector<size_t> in_strides(static_cast<size_t>(r), 1);
    for (int d = r - 2; d >= 0; --d)
        in_strides[static_cast<size_t>(d)] =
            in_strides[static_cast<size_t>(d + 1)] * static_cast<size_t>(in_shape[static_cast<size_t>(d + 1)]);
    std::vector<size_t> step(static_cast<size_t>(r));
    for (int d = 0; d < r; ++d) step[static_cast<size_t>(d)] = in_strides[static_cast<size_t>(axes[static_cast<size_t>(d)])];
    out.resize(in.size());
    std::vector<int> idx(static_cast<size_t>(r), 0);
    size_t src = 0;
    for (size_t i = 0; i < in.size(); ++i) {
        out[i] = in[src];
        for (int d = r - 1; d >= 0; --d) {
            auto du = static_cast<size_t>(d);
            ++idx[du];
            src += step[du];
            if (idx[du] < out_shape[du]) break;
            src -= step[du] * static_cast<size_t>(out_shape[du]);
            idx[du] = 0;
        }
    }
}

}  // namespace detail

// Materialized axis permutation (no aliasing views).
template <typename T>
Tensor<T> permute(const Tensor<T>& x, std::vector<int> axes) {
    if (static_cast<int>(axes.size()) != x.rank())
        throw ShapeError("permute: axes count " + std::to_string(axes.size()) +
                         " does not match rank of " + shape_str(x.shape()));
    std::vector<char> seen(axes.size(), 0);
    for (int a : axes) {
        if (a < 0 || a >= x.rank() || seen[static_cast<size_t>(a)])
            throw ShapeError("permute: invalid axes permutation");
        seen[static_cast<size_t>(a)] = 1;
    }
    std::vector<T> out;
    Shape oshape;
    detail::permute_raw(x.shape(), axes, x.data(), out, oshape);
    Tensor<T> y = Tensor<T>::raw(std::move(oshape), std::move(out));
    if (Tape<T>* tape = detail::result_tape(x)) {
        int xn = x.node();
        Shape yshape = y.shape();
        std::vector<int> inv(axes.size());
        for (size_t d = 0; d < axes.size(); ++d) inv[static_cast<size_t>(axes[d])] = static_cast<int>(d);
        y.attach(tape, tape->add_node(y.numel(), [=](Tape<T>& tp, const std::vector<T>& g) {
            if (xn < 0) return;
            std::vector<T> gsrc;
            Shape tmp;
            detail::permute_raw(yshape, inv, g, gsrc, tmp);
            auto& gx = tp.grad_accum(xn, gsrc.size());
            for (size_t i = 0; i < gsrc.size(); ++i) gx[i] += gsrc[i];
        }));
    }
    return y;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
    if (x.rank() != 2) throw ShapeError("transpose: expected rank-2, got " + shape_str(x.shape()));
    return permute(x, {1, 0});
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    int r = parts[0].rank();
    if (axis < 0 || axis >= r) throw ContractError("concat: axis invalid");
    int total = 0;
    for (const auto& p : parts) {
        if (p.rank() != r) throw ShapeError("concat: rank mismatch");
        for (int d = 0; d < r; ++d)
            if (d != axis && p.dim(d) != s0[static_cast<size_t>(d)])
                throw ShapeError("concat: off-axis dims disagree: " + shape_str(s0) + " vs " +
                                 shape_str(p.shape()));
        total += p.dim(axis);
    }
    Shape oshape = s0;
    oshape[static_cast<size_t>(axis)] = total;
    size_t outer, ntot, inner;
    detail::axis_split(oshape, axis, outer, ntot, inner);
    std::vector<T> out(shape_numel(oshape));
    size_t off = 0;
    for (const auto& p : parts) {
        const size_t pn = static_cast<size_t>(p.dim(axis));
        const auto& pv = p.data();
        for (size_t o = 0; o < outer; ++o)
            std::memcpy(out.data() + (o * ntot + off) * inner, pv.data() + o * pn * inner,
                        pn * inner * sizeof(T));
        off += pn;
    }
    Tensor<T> y = Tensor<T>::raw(std::move(oshape), std::move(out));
    Tape<T>* tape = nullptr;
    for (const auto& p : parts) {
        if (!p.tape()) continue;
        if (tape && tape != p.tape()) throw ContractError("concat: operands live on different tapes");
        tape = p.tape();
    }
    if (tape) {
        struct Src { int node; size_t n; size_t off; };
        auto srcs = std::make_shared<std::vector<Src>>();
        size_t o2 = 0;
        for (const auto& p : parts) {
            srcs->push_back({p.node(), static_cast<size_t>(p.dim(axis)), o2});
            o2 += static_cast<size_t>(p.dim(axis));
        }
        y.attach(tape, tape->add_node(y.numel(), [=](Tape<T>& tp, const std::vector<T>& g) {
            for (const auto& src : *srcs) {
                if (src.node < 0) continue;
                auto& gp = tp.grad_accum(src.node, outer * src.n * inner);
                for (size_t o = 0; o < outer; ++o)
                    for (size_t k = 0; k < src.n * inner; ++k)
                        gp[o * src.n * inner + k] += g[(o * ntot + src.off) * inner + k];
            }
        }));
    }
    return y;
}

template <typename T>
Tensor<T> slice_axis(const Tensor<T>& x, int axis, int start, int len) {
    size_t outer, n, inner;
    detail::axis_split(x.shape(), axis, outer, n, inner);
    if (start < 0 || len <= 0 || static_cast<size_t>(start + len) > n)
        throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                         ") out of bounds for axis size " + std::to_string(n));
    Shape oshape = x.shape();
    oshape[static_cast<size_t>(axis)] = len;
    std::vector<T> out(outer * static_cast<size_t>(len) * inner);
    const auto& xv = x.data();
    for (size_t o = 0; o < outer; ++o)
        std::memcpy(out.data() + o * len * inner,
                    xv.data() + (o * n + static_cast<size_t>(start)) * inner,
                    static_cast<size_t>(len) * inner * sizeof(T));
    Tensor<T> y = Tensor<T>::raw(std::move(oshape), std::move(out));
    if (Tape<T>* tape = detail::result_tape(x)) {
        int xn = x.node();
        size_t xsize = x.numel();
        y.attach(tape, tape->add_node(y.numel(), [=](Tape<T>& tp, const std::vector<T>& g) {
            if (xn < 0) return;
            auto& gx = tp.grad_accum(xn, xsize);
            for (size_t o = 0; o < outer; ++o)
                for (size_t k = 0; k < static_cast<size_t>(len) * inner; ++k)
                    gx[(o * n + static_cast<size_t>(start)) * inner + k] += g[o * len * inner + k];
        }));
    }
    return y;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, int c0, int c1) {
    return slice_axis(x, 1, c0, c1 - c0);
}

// Row gather; duplicate indices accumulate gradient.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<int>& idx) {
    if (x.rank() != 2) throw ShapeError("gather_rows: expected rank-2, got " + shape_str(x.shape()));
    const size_t C = static_cast<size_t>(x.dim(1));
    for (int i : idx)
        if (i < 0 || i >= x.dim(0))
            throw ContractError("gather_rows: index " + std::to_string(i) + " out of [0, " +
                                std::to_string(x.dim(0)) + ")");
    std::vector<T> out(idx.size() * C);
    const auto& xv = x.data();
    for (size_t r = 0; r < idx.size(); ++r)
        std::memcpy(out.data() + r * C, xv.data() + static_cast<size_t>(idx[r]) * C, C * sizeof(T));
    Tensor<T> y = Tensor<T>::raw({static_cast<int>(idx.size()), static_cast<int>(C)}, std::move(out));
    if (Tape<T>* tape = detail::result_tape(x)) {
        int xn = x.node();
        size_t xsize = x.numel();
        auto idx_copy = std::make_shared<std::vector<int>>(idx);
        y.attach(tape, tape->add_node(y.numel(), [=](Tape<T>& tp, const std::vector<T>& g) {
            if (xn < 0) return;
            auto& gx = tp.grad_accum(xn, xsize);
            for (size_t r = 0; r < idx_copy->size(); ++r)
                for (size_t c = 0; c < C; ++c)
                    gx[static_cast<size_t>((*idx_copy)[r]) * C + c] += g[r * C + c];
        }));
    }
    return y;
}

// Column permutation: out[:, j] = x[:, src[j]]. Gradient applies the inverse.
template <typename T>
Tensor<T> permute_cols(const Tensor<T>& x, const std::vector<int>& src) {
    if (x.rank() != 2 || static_cast<int>(src.size()) != x.dim(1))
        throw ShapeError("permute_cols: permutation size does not match " + shape_str(x.shape()));
    const size_t N = static_cast<size_t>(x.dim(0));
    const size_t C = static_cast<size_t>(x.dim(1));
    std::vector<T> out(N * C);
    const auto& xv = x.data();
    for (size_t r = 0; r < N; ++r)
        for (size_t j = 0; j < C; ++j) out[r * C + j] = xv[r * C + static_cast<size_t>(src[j])];
    Tensor<T> y = Tensor<T>::raw(x.shape(), std::move(out));
    if (Tape<T>* tape = detail::result_tape(x)) {
        int xn = x.node();
        auto srcp = std::make_shared<std::vector<int>>(src);
        y.attach(tape, tape->add_node(y.numel(), [=](Tape<T>& tp, const std::vector<T>& g) {
            if (xn < 0) return;
            auto& gx = tp.grad_accum(xn, N * C);
            for (size_t r = 0; r < N; ++r)
                for (size_t j = 0; j < C; ++j) gx[r * C + static_cast<size_t>((*srcp)[j])] += g[r * C + j];
        }));
    }
    return y;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <typename T>
struct Parameter {
    std::string name;
    Shape shape;
    std::vector<T> value;
    std::vector<T> m1, m2;  // Adam moments

    Parameter() = default;
    Parameter(std::string n, Shape s) : name(std::move(n)), shape(std::move(s)) {
        value.assign(shape_numel(shape), T(0));
    }

    size_t numel() const { return value.size(); }

    // Place this parameter on the tape as a leaf (or as a constant when no
    // tape is active, e.g. inference).
    Tensor<T> use(Tape<T>* tape) {
        if (!tape) {
            std::vector<T> copy = value;
            return Tensor<T>::raw(Shape(shape), std::move(copy));
        }
        std::vector<T> copy = value;
        Tensor<T> t = tape->leaf(Shape(shape), std::move(copy));
        tape->record_param(this, t.node());
        return t;
    }

    void fill(T v) { std::fill(value.begin(), value.end(), v); }

    void init_uniform_fan(int fan_in, int fan_out, Rng& rng) {
        const double bound = std::sqrt(6.0 / (fan_in + fan_out));
        for (auto& v : value) v = static_cast<T>(rng.uniform(-bound, bound));
    }
};

template <typename T>
class ParamRegistry {
public:
    void add(Parameter<T>* p) {
        if (names_.count(p->name))
            throw ConfigError("duplicate parameter name: " + p->name);
        names_.insert(p->name);
        params_.push_back(p);
    }

    const std::vector<Parameter<T>*>& params() const { return params_; }

    size_t total_count() const {
        size_t n = 0;
        for (auto* p : params_) n += p->numel();
        return n;
    }

    // Trainable-scalar counts grouped by the leading name component.
    std::vector<std::pair<std::string, size_t>> count_by_module() const {
        std::vector<std::pair<std::string, size_t>> out;
        std::map<std::string, size_t> agg;
        for (auto* p : params_) {
            auto dot = p->name.find('.');
            agg[p->name.substr(0, dot)] += p->numel();
        }
        out.assign(agg.begin(), agg.end());
        return out;
    }

    // Post-backward gradients by name; zeros for parameters the loss never
    // reached (or that were never placed on this tape).
    std::vector<std::pair<std::string, Tensor<T>>> gradients(const Tape<T>& tape) const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        for (auto* p : params_) {
            const int node = tape.param_node(p);
            std::vector<T> g = node >= 0 ? tape.grad(node) : std::vector<T>(p->numel(), T(0));
            out.emplace_back(p->name, Tensor<T>::raw(Shape(p->shape), std::move(g)));
        }
        return out;
    }

private:
    std::vector<Parameter<T>*> params_;
    std::set<std::string> names_;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient checking (run in 64-bit)
// ---------------------------------------------------------------------------

struct GradCheckRow {
    int input;
    size_t coord;
    double analytic;
    double numeric;
    double rel_err;
};

struct GradCheckReport {
    bool pass = true;
    double max_rel_err = 0.0;
    double tolerance = 0.0;
    std::vector<GradCheckRow> failures;

    std::string summary() const {
        std::ostringstream os;
        os << (pass ? "PASS" : "FAIL") << " max_rel_err=" << max_rel_err << " tol=" << tolerance;
        for (size_t i = 0; i < failures.size() && i < 8; ++i) {
            const auto& f = failures[i];
            os << "\n  input " << f.input << " coord " << f.coord << ": analytic=" << f.analytic
               << " numeric=" << f.numeric << " rel=" << f.rel_err;
        }
        return os.str();
    }
};

// Central differences against reverse-mode gradients for a scalar-valued pure
// function fn(tape, inputs). Inputs are placed as leaves on every evaluation.
template <typename Fn>
GradCheckReport grad_check(Fn&& fn, const std::vector<Tensor<double>>& inputs, double step = 1e-5,
                           double tolerance = 1e-4) {
    GradCheckReport report;
    report.tolerance = tolerance;

    Tape<double> tape;
    std::vector<Tensor<double>> placed;
    placed.reserve(inputs.size());
    for (const auto& in : inputs) placed.push_back(tape.leaf(in));
    Tensor<double> loss = fn(tape, placed);
    if (loss.numel() != 1) throw ContractError("grad_check: fn must return a scalar");
    tape.backward(loss);
    std::vector<std::vector<double>> analytic;
    for (const auto& p : placed) analytic.push_back(tape.grad(p.node()));

    auto eval = [&](const std::vector<Tensor<double>>& xs) {
        Tape<double> t;
        std::vector<Tensor<double>> ps;
        ps.reserve(xs.size());
        for (const auto& x : xs) ps.push_back(t.leaf(x));
        return fn(t, ps).item();
    };

    std::vector<Tensor<double>> work = inputs;
    for (size_t i = 0; i < inputs.size(); ++i) {
        std::vector<double> base = inputs[i].data();
        for (size_t c = 0; c < base.size(); ++c) {
            std::vector<double> plus = base, minus = base;
            plus[c] += step;
            minus[c] -= step;
            work[i] = Tensor<double>::raw(Shape(inputs[i].shape()), std::move(plus));
            double fp = eval(work);
            work[i] = Tensor<double>::raw(Shape(inputs[i].shape()), std::move(minus));
            double fm = eval(work);
            work[i] = inputs[i];
            const double numeric = (fp - fm) / (2.0 * step);
            const double a = analytic[i][c];
            // mixed error: relative for O(1) gradients, absolute below 1
            const double rel = std::fabs(a - numeric) /
                               std::max({std::fabs(a), std::fabs(numeric), 1.0});
            report.max_rel_err = std::max(report.max_rel_err, rel);
            if (rel >= tolerance) {
                report.pass = false;
                report.failures.push_back({static_cast<int>(i), c, a, numeric, rel});
            }
        }
    }
    return report;
}

template <typename T>
std::string to_string(const Tensor<T>& t, int max_elems = 64) {
    std::ostringstream os;
    os << shape_str(t.shape()) << " {";
    int n = static_cast<int>(std::min<size_t>(t.numel(), static_cast<size_t>(max_elems)));
    for (int i = 0; i < n; ++i) {
        if (i) os << ", ";
        os << t.data()[static_cast<size_t>(i)];
    }
    if (t.numel() > static_cast<size_t>(max_elems)) os << ", ...";
    os << "}";
    return os.str();
}

}  // namespace patkit
