#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "tgfuse/errors.hpp"
#include "tgfuse/tensor.hpp"

// Reverse-mode autodiff over TensorT<T>. A Tape owns a topologically ordered
// node list; ops append nodes with backward closures. Vars are cheap handles.
// A Var without a tape is "eager": ops on eager inputs compute immediately and
// record nothing, which keeps inference memory at the live-temporary level.

namespace tgfuse {

template <typename T>
class Tape;

template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    int id = -1;
    std::shared_ptr<TensorT<T>> eager;

    Var() = default;
    Var(Tape<T>* t, int i) : tape(t), id(i) {}
    explicit Var(TensorT<T> v) : eager(std::make_shared<TensorT<T>>(std::move(v))) {}

    bool taped() const { return tape != nullptr; }
    const TensorT<T>& val() const;
    const std::vector<int64_t>& shape() const { return val().shape; }
    int64_t numel() const { return val().numel(); }
};

template <typename T>
class Tape {
public:
    struct Node {
        TensorT<T> val;
        TensorT<T> grad;  // empty until reached during backward
        std::function<void(Tape&, int)> bw;
        bool needs = false;
    };

    std::vector<Node> nodes;

    Var<T> leaf(TensorT<T> v, bool needs_grad) {
        nodes.push_back(Node{std::move(v), {}, nullptr, needs_grad});
        return Var<T>(this, static_cast<int>(nodes.size()) - 1);
    }
    Var<T> constant(TensorT<T> v) { return leaf(std::move(v), false); }

    int add_node(TensorT<T> val, bool needs, std::function<void(Tape&, int)> bw) {
        nodes.push_back(Node{std::move(val), {}, needs ? std::move(bw) : nullptr, needs});
        return static_cast<int>(nodes.size()) - 1;
    }

    const TensorT<T>& val(int id) const { return nodes[static_cast<size_t>(id)].val; }

    // Lazily allocates a zero gradient buffer.
    TensorT<T>& grad(int id) {
        Node& n = nodes[static_cast<size_t>(id)];
        if (n.grad.data.empty() && n.val.numel() > 0) n.grad = TensorT<T>::zeros(n.val.shape);
        return n.grad;
    }
    bool grad_reached(int id) const { return !nodes[static_cast<size_t>(id)].grad.data.empty(); }

    const TensorT<T>& grad_of(const Var<T>& v) const {
        require(v.tape == this && v.id >= 0, "grad_of: var not on this tape");
        return nodes[static_cast<size_t>(v.id)].grad;
    }

    void backward(const Var<T>& root) {
        require(root.tape == this, "backward: root not on this tape");
        require(val(root.id).numel() == 1, "backward: root must be scalar");
        grad(root.id).data[0] = T(1);
        for (int i = root.id; i >= 0; --i) {
            Node& n = nodes[static_cast<size_t>(i)];
            if (n.needs && n.bw && !n.grad.data.empty()) n.bw(*this, i);
        }
    }

    void clear() { nodes.clear(); }
};

template <typename T>
inline const TensorT<T>& Var<T>::val() const {
    if (tape) return tape->nodes[static_cast<size_t>(id)].val;
    return *eager;
}

namespace detail {

// Finds the tape shared by the inputs (nullptr when all eager) and lifts any
// eager input onto it as a constant.
template <typename T>
Tape<T>* resolve_tape(std::vector<Var<T>*> inputs) {
    Tape<T>* tape = nullptr;
    for (auto* v : inputs)
        if (v->taped()) {
            require(!tape || tape == v->tape, "ops across distinct tapes");
            tape = v->tape;
        }
    if (tape)
        for (auto* v : inputs)
            if (!v->taped()) *v = tape->constant(*v->eager);
    return tape;
}

template <typename T>
bool any_needs(Tape<T>* tape, std::initializer_list<const Var<T>*> inputs) {
    if (!tape) return false;
    for (auto* v : inputs)
        if (tape->nodes[static_cast<size_t>(v->id)].needs) return true;
    return false;
}

template <typename T>
Var<T> finish(Tape<T>* tape, TensorT<T> out, bool needs, std::function<void(Tape<T>&, int)> bw) {
    if (!tape) return Var<T>(std::move(out));
    return Var<T>(tape, tape->add_node(std::move(out), needs, std::move(bw)));
}

inline std::vector<int64_t> broadcast_shape(const std::vector<int64_t>& a,
                                            const std::vector<int64_t>& b) {
    size_t r = std::max(a.size(), b.size());
    std::vector<int64_t> out(r);
    for (size_t i = 0; i < r; ++i) {
        int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        require(da == db || da == 1 || db == 1, "incompatible broadcast shapes");
        out[i] = std::max(da, db);
    }
    return out;
}

// Strides of `shape` aligned to a broadcast result of rank `out_rank`,
// with zero stride on broadcast dimensions.
inline std::vector<int64_t> aligned_strides(const std::vector<int64_t>& shape, size_t out_rank) {
    std::vector<int64_t> st(out_rank, 0);
    int64_t acc = 1;
    for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
        size_t o = out_rank - shape.size() + static_cast<size_t>(i);
        st[o] = (shape[static_cast<size_t>(i)] == 1) ? 0 : acc;
        acc *= shape[static_cast<size_t>(i)];
    }
    return st;
}

// Reduce `g` (shaped like the broadcast output) back onto `target` shape.
template <typename T>
TensorT<T> reduce_to_shape(const TensorT<T>& g, const std::vector<int64_t>& target) {
    if (g.shape == target) return g;
    TensorT<T> out(target);
    size_t r = g.shape.size();
    auto tst = aligned_strides(target, r);
    std::vector<int64_t> idx(r, 0);
    const int64_t n = g.numel();
    for (int64_t lin = 0; lin < n; ++lin) {
        int64_t off = 0;
        for (size_t d = 0; d < r; ++d) off += idx[d] * tst[d];
        out.data[static_cast<size_t>(off)] += g.data[static_cast<size_t>(lin)];
        for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
            if (++idx[static_cast<size_t>(d)] < g.shape[static_cast<size_t>(d)]) break;
            idx[static_cast<size_t>(d)] = 0;
        }
    }
    return out;
}

template <typename T>
void axpy(TensorT<T>& dst, const TensorT<T>& src) {
    for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

using MatRM = int;  // placeholder to keep Eigen typedefs local to functions

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binaries with numpy-style broadcasting.
// ---------------------------------------------------------------------------

namespace detail {

enum class BinOp { Add, Sub, Mul, Div, Max };

template <typename T>
Var<T> binary(Var<T> a, Var<T> b, BinOp op) {
    Tape<T>* tape = resolve_tape<T>({&a, &b});
    const TensorT<T>& av = a.val();
    const TensorT<T>& bv = b.val();
    auto oshape = broadcast_shape(av.shape, bv.shape);
    TensorT<T> out(oshape);
    const size_t r = oshape.size();
    const int64_t n = out.numel();

    auto apply = [op](T x, T y) -> T {
        switch (op) {
            case BinOp::Add: return x + y;
            case BinOp::Sub: return x - y;
            case BinOp::Mul: return x * y;
            case BinOp::Div: return x / y;
            case BinOp::Max: return x >= y ? x : y;  // ties take the first argument
        }
        return T(0);
    };

    if (av.shape == bv.shape) {
        for (int64_t i = 0; i < n; ++i) out.data[i] = apply(av.data[i], bv.data[i]);
    } else {
        auto ast = aligned_strides(av.shape, r);
        auto bst = aligned_strides(bv.shape, r);
        std::vector<int64_t> idx(r, 0);
        for (int64_t lin = 0; lin < n; ++lin) {
            int64_t ao = 0, bo = 0;
            for (size_t d = 0; d < r; ++d) {
                ao += idx[d] * ast[d];
                bo += idx[d] * bst[d];
            }
            out.data[static_cast<size_t>(lin)] =
                apply(av.data[static_cast<size_t>(ao)], bv.data[static_cast<size_t>(bo)]);
            for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
                if (++idx[static_cast<size_t>(d)] < oshape[static_cast<size_t>(d)]) break;
                idx[static_cast<size_t>(d)] = 0;
            }
        }
    }

    bool needs = any_needs(tape, {&a, &b});
    int aid = a.id, bid = b.id;
    auto bw = [aid, bid, op, oshape](Tape<T>& tp, int self) {
        const TensorT<T>& g = tp.nodes[static_cast<size_t>(self)].grad;
        const TensorT<T>& av2 = tp.val(aid);
        const TensorT<T>& bv2 = tp.val(bid);
        const size_t r2 = oshape.size();
        auto ast = aligned_strides(av2.shape, r2);
        auto bst = aligned_strides(bv2.shape, r2);
        bool aneeds = tp.nodes[static_cast<size_t>(aid)].needs;
        bool bneeds = tp.nodes[static_cast<size_t>(bid)].needs;
        TensorT<T> ga = aneeds ? TensorT<T>(av2.shape) : TensorT<T>();
        TensorT<T> gb = bneeds ? TensorT<T>(bv2.shape) : TensorT<T>();
        std::vector<int64_t> idx(r2, 0);
        const int64_t n2 = g.numel();
        for (int64_t lin = 0; lin < n2; ++lin) {
            int64_t ao = 0, bo = 0;
            for (size_t d = 0; d < r2; ++d) {
                ao += idx[d] * ast[d];
                bo += idx[d] * bst[d];
            }
            T gv = g.data[static_cast<size_t>(lin)];
            T xa = av2.data[static_cast<size_t>(ao)];
            T xb = bv2.data[static_cast<size_t>(bo)];
            switch (op) {
                case BinOp::Add:
                    if (aneeds) ga.data[static_cast<size_t>(ao)] += gv;
                    if (bneeds) gb.data[static_cast<size_t>(bo)] += gv;
                    break;
                case BinOp::Sub:
                    if (aneeds) ga.data[static_cast<size_t>(ao)] += gv;
                    if (bneeds) gb.data[static_cast<size_t>(bo)] -= gv;
                    break;
                case BinOp::Mul:
                    if (aneeds) ga.data[static_cast<size_t>(ao)] += gv * xb;
                    if (bneeds) gb.data[static_cast<size_t>(bo)] += gv * xa;
                    break;
                case BinOp::Div:
                    if (aneeds) ga.data[static_cast<size_t>(ao)] += gv / xb;
                    if (bneeds) gb.data[static_cast<size_t>(bo)] -= gv * xa / (xb * xb);
                    break;
                case BinOp::Max:
                    if (xa >= xb) {
                        if (aneeds) ga.data[static_cast<size_t>(ao)] += gv;
                    } else if (bneeds) {
                        gb.data[static_cast<size_t>(bo)] += gv;
                    }
                    break;
            }
            for (int d = static_cast<int>(r2) - 1; d >= 0; --d) {
                if (++idx[static_cast<size_t>(d)] < oshape[static_cast<size_t>(d)]) break;
                idx[static_cast<size_t>(d)] = 0;
            }
        }
        if (aneeds) axpy(tp.grad(aid), ga);
        if (bneeds) axpy(tp.grad(bid), gb);
    };
    return finish<T>(tape, std::move(out), needs, std::move(bw));
}

}  // namespace detail

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    return detail::binary(std::move(a), std::move(b), detail::BinOp::Add);
}
template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    return detail::binary(std::move(a), std::move(b), detail::BinOp::Sub);
}
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    return detail::binary(std::move(a), std::move(b), detail::BinOp::Mul);
}
template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
    return detail::binary(std::move(a), std::move(b), detail::BinOp::Div);
}
template <typename T>
Var<T> maximum(Var<T> a, Var<T> b) {
    return detail::binary(std::move(a), std::move(b), detail::BinOp::Max);
}

// ---------------------------------------------------------------------------
// Elementwise unaries.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T, typename FwdFn, typename GradFn>
Var<T> unary(Var<T> x, FwdFn f, GradFn dfdx_from_xy) {
    Tape<T>* tape = resolve_tape<T>({&x});
    const TensorT<T>& xv = x.val();
    TensorT<T> out(xv.shape);
    for (int64_t i = 0; i < xv.numel(); ++i) out.data[i] = f(xv.data[i]);
    bool needs = any_needs(tape, {&x});
    int xid = x.id;
    auto bw = [xid, dfdx_from_xy](Tape<T>& tp, int self) {
        const TensorT<T>& g = tp.nodes[static_cast<size_t>(self)].grad;
        const TensorT<T>& xv2 = tp.val(xid);
        const TensorT<T>& yv2 = tp.val(self);
        TensorT<T>& gx = tp.grad(xid);
        for (int64_t i = 0; i < g.numel(); ++i)
            gx.data[i] += g.data[i] * dfdx_from_xy(xv2.data[i], yv2.data[i]);
    };
    return finish<T>(tape, std::move(out), needs, std::move(bw));
}

}  // namespace detail

template <typename T>
Var<T> neg(Var<T> x) {
    return detail::unary(
        std::move(x), [](T v) { return -v; }, [](T, T) { return T(-1); });
}
template <typename T>
Var<T> square(Var<T> x) {
    return detail::unary(
        std::move(x), [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}
template <typename T>
Var<T> exp_op(Var<T> x) {
    return detail::unary(
        std::move(x), [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}
// d/dx sqrt at 0 is taken as 0 (subgradient convention for gradient maps).
template <typename T>
Var<T> sqrt_op(Var<T> x) {
    return detail::unary(
        std::move(x), [](T v) { return std::sqrt(std::max(v, T(0))); },
        [](T, T y) { return y > T(0) ? T(1) / (T(2) * y) : T(0); });
}
// |x|' at 0 is taken as 0.
template <typename T>
Var<T> abs_op(Var<T> x) {
    return detail::unary(
        std::move(x), [](T v) { return std::abs(v); },
        [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}
template <typename T>
Var<T> sigmoid(Var<T> x) {
    return detail::unary(
        std::move(x), [](T v) { return T(1) / (T(1) + std::exp(-v)); },
        [](T, T y) { return y * (T(1) - y); });
}
template <typename T>
Var<T> relu(Var<T> x) {
    return detail::unary(
        std::move(x), [](T v) { return v > T(0) ? v : T(0); },
        [](T v, T) { return v > T(0) ? T(1) : T(0); });
}
// Exact (erf-based) GELU.
template <typename T>
Var<T> gelu(Var<T> x) {
    constexpr double kInvSqrt2 = 0.7071067811865475244;
    constexpr double kInvSqrt2Pi = 0.3989422804014326779;
    return detail::unary(
        std::move(x),
        [](T v) {
            return static_cast<T>(0.5 * static_cast<double>(v) *
                                  (1.0 + std::erf(static_cast<double>(v) * kInvSqrt2)));
        },
        [](T v, T) {
            double vd = static_cast<double>(v);
            double cdf = 0.5 * (1.0 + std::erf(vd * kInvSqrt2));
            double pdf = kInvSqrt2Pi * std::exp(-0.5 * vd * vd);
            return static_cast<T>(cdf + vd * pdf);
        });
}
template <typename T>
Var<T> scale(Var<T> x, T c) {
    return detail::unary(
        std::move(x), [c](T v) { return v * c; }, [c](T, T) { return c; });
}
template <typename T>
Var<T> add_scalar(Var<T> x, T c) {
    return detail::unary(
        std::move(x), [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------

// Sum over `axes` (empty = all axes), optionally keeping reduced dims, with a
// constant post-scale (1/k turns it into a mean).
template <typename T>
Var<T> reduce_sum(Var<T> x, std::vector<int> axes, bool keepdim, T post_scale = T(1)) {
    Tape<T>* tape = detail::resolve_tape<T>({&x});
    const TensorT<T>& xv = x.val();
    const size_t r = xv.shape.size();
    std::vector<bool> reduce(r, axes.empty());
    for (int a : axes) {
        require(a >= 0 && static_cast<size_t>(a) < r, "reduce_sum: bad axis");
        reduce[static_cast<size_t>(a)] = true;
    }
    std::vector<int64_t> oshape;
    std::vector<int64_t> kshape(r);  // keepdim-shaped, for backward broadcasting
    for (size_t d = 0; d < r; ++d) {
        kshape[d] = reduce[d] ? 1 : xv.shape[d];
        if (reduce[d]) {
            if (keepdim) oshape.push_back(1);
        } else {
            oshape.push_back(xv.shape[d]);
        }
    }
    TensorT<T> out(oshape);
    auto ost = detail::aligned_strides(kshape, r);
    std::vector<int64_t> idx(r, 0);
    for (int64_t lin = 0; lin < xv.numel(); ++lin) {
        int64_t oo = 0;
        for (size_t d = 0; d < r; ++d) oo += idx[d] * ost[d];
        out.data[static_cast<size_t>(oo)] += xv.data[static_cast<size_t>(lin)];
        for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
            if (++idx[static_cast<size_t>(d)] < xv.shape[static_cast<size_t>(d)]) break;
            idx[static_cast<size_t>(d)] = 0;
        }
    }
    if (post_scale != T(1))
        for (auto& v : out.data) v *= post_scale;

    bool needs = detail::any_needs(tape, {&x});
    int xid = x.id;
    auto xshape = xv.shape;
    auto bw = [xid, xshape, kshape, post_scale](Tape<T>& tp, int self) {
        const TensorT<T>& g = tp.nodes[static_cast<size_t>(self)].grad;
        TensorT<T>& gx = tp.grad(xid);
        const size_t r2 = xshape.size();
        auto ost = detail::aligned_strides(kshape, r2);
        std::vector<int64_t> idx(r2, 0);
        for (int64_t lin = 0; lin < gx.numel(); ++lin) {
            int64_t oo = 0;
            for (size_t d = 0; d < r2; ++d) oo += idx[d] * ost[d];
            gx.data[static_cast<size_t>(lin)] += g.data[static_cast<size_t>(oo)] * post_scale;
            for (int d = static_cast<int>(r2) - 1; d >= 0; --d) {
                if (++idx[static_cast<size_t>(d)] < xshape[static_cast<size_t>(d)]) break;
                idx[static_cast<size_t>(d)] = 0;
            }
        }
    };
    return detail::finish<T>(tape, std::move(out), needs, std::move(bw));
}

template <typename T>
Var<T> sum_all(Var<T> x) {
    return reduce_sum(std::move(x), {}, false);
}
template <typename T>
Var<T> mean_all(Var<T> x) {
    T k = static_cast<T>(x.val().numel());
    return reduce_sum(std::move(x), {}, false, T(1) / k);
}
template <typename T>
Var<T> mean_axes(Var<T> x, std::vector<int> axes, bool keepdim) {
    int64_t k = 1;
    for (int a : axes) k *= x.val().shape[static_cast<size_t>(a)];
    return reduce_sum(std::move(x), std::move(axes), keepdim, T(1) / static_cast<T>(k));
}

// ---------------------------------------------------------------------------
// Shape ops.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(Var<T> x, std::vector<int64_t> shape) {
    Tape<T>* tape = detail::resolve_tape<T>({&x});
    const TensorT<T>& xv = x.val();
    require(TensorT<T>::count(shape) == xv.numel(), "reshape: numel mismatch");
    TensorT<T> out(std::move(shape), xv.data);
    bool needs = detail::any_needs(tape, {&x});
    int xid = x.id;
    auto bw = [xid](Tape<T>& tp, int self) {
        const TensorT<T>& g = tp.nodes[static_cast<size_t>(self)].grad;
        detail::axpy(tp.grad(xid), TensorT<T>(tp.val(xid).shape, g.data));
    };
    return detail::finish<T>(tape, std::move(out), needs, std::move(bw));
}

template <typename T>
Var<T> permute(Var<T> x, std::vector<int> perm) {
    Tape<T>* tape = detail::resolve_tape<T>({&x});
    const TensorT<T>& xv = x.val();
    const size_t r = xv.shape.size();
    require(perm.size() == r, "permute: rank mismatch");
    std::vector<int64_t> oshape(r);
    for (size_t d = 0; d < r; ++d) oshape[d] = xv.shape[static_cast<size_t>(perm[d])];
    auto xst = row_strides<T>(xv.shape);
    TensorT<T> out(oshape);
    std::vector<int64_t> idx(r, 0);
    for (int64_t lin = 0; lin < out.numel(); ++lin) {
        int64_t xo = 0;
        for (size_t d = 0; d < r; ++d) xo += idx[d] * xst[static_cast<size_t>(perm[d])];
        out.data[static_cast<size_t>(lin)] = xv.data[static_cast<size_t>(xo)];
        for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
            if (++idx[static_cast<size_t>(d)] < oshape[static_cast<size_t>(d)]) break;
            idx[static_cast<size_t>(d)] = 0;
        }
    }
    bool needs = detail::any_needs(tape, {&x});
    int xid = x.id;
    auto bw = [xid, perm, oshape](Tape<T>& tp, int self) {
        const TensorT<T>& g = tp.nodes[static_cast<size_t>(self)].grad;
        TensorT<T>& gx = tp.grad(xid);
        auto xst = row_strides<T>(gx.shape);
        const size_t r2 = oshape.size();
        std::vector<int64_t> idx(r2, 0);
        for (int64_t lin = 0; lin < g.numel(); ++lin) {
            int64_t xo = 0;
            for (size_t d = 0; d < r2; ++d) xo += idx[d] * xst[static_cast<size_t>(perm[d])];
            gx.data[static_cast<size_t>(xo)] += g.data[static_cast<size_t>(lin)];
            for (int d = static_cast<int>(r2) - 1; d >= 0; --d) {
                if (++idx[static_cast<size_t>(d)] < oshape[static_cast<size_t>(d)]) break;
                idx[static_cast<size_t>(d)] = 0;
            }
        }
    };
    return detail::finish<T>(tape, std::move(out), needs, std::move(bw));
}

template <typename T>
Var<T> slice(Var<T> x, int axis, int64_t start, int64_t len) {
    Tape<T>* tape = detail::resolve_tape<T>({&x});
    const TensorT<T>& xv = x.val();
    const size_t r = xv.shape.size();
    require(axis >= 0 && static_cast<size_t>(axis) < r, "slice: bad axis");
    require(start >= 0 && start + len <= xv.shape[static_cast<size_t>(axis)], "slice: out of range");
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= xv.shape[static_cast<size_t>(d)];
    for (size_t d = static_cast<size_t>(axis) + 1; d < r; ++d) inner *= xv.shape[d];
    std::vector<int64_t> oshape = xv.shape;
    oshape[static_cast<size_t>(axis)] = len;
    TensorT<T> out(oshape);
    const int64_t ax = xv.shape[static_cast<size_t>(axis)];
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < len; ++j)
            std::copy_n(xv.data.begin() + ((o * ax + start + j) * inner), inner,
                        out.data.begin() + ((o * len + j) * inner));
    bool needs = detail::any_needs(tape, {&x});
    int xid = x.id;
    auto bw = [xid, axis, start, len, outer, inner, ax](Tape<T>& tp, int self) {
        const TensorT<T>& g = tp.nodes[static_cast<size_t>(self)].grad;
        TensorT<T>& gx = tp.grad(xid);
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t j = 0; j < len; ++j) {
                const T* src = g.data.data() + (o * len + j) * inner;
                T* dst = gx.data.data() + (o * ax + start + j) * inner;
                for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
    };
    return detail::finish<T>(tape, std::move(out), needs, std::move(bw));
}

template <typename T>
Var<T> concat(std::vector<Var<T>> xs, int axis) {
    require(!xs.empty(), "concat: empty input");
    std::vector<Var<T>*> ptrs;
    for (auto& v : xs) ptrs.push_back(&v);
    Tape<T>* tape = detail::resolve_tape<T>(ptrs);
    const size_t r = xs[0].val().shape.size();
    require(axis >= 0 && static_cast<size_t>(axis) < r, "concat: bad axis");
    int64_t total = 0;
    for (auto& v : xs) {
        require(v.val().shape.size() == r, "concat: rank mismatch");
        total += v.val().shape[static_cast<size_t>(axis)];
    }
    std::vector<int64_t> oshape = xs[0].val().shape;
    oshape[static_cast<size_t>(axis)] = total;
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= oshape[static_cast<size_t>(d)];
    for (size_t d = static_cast<size_t>(axis) + 1; d < r; ++d) inner *= oshape[d];
    TensorT<T> out(oshape);
    int64_t pos = 0;
    std::vector<int64_t> lens;
    for (auto& v : xs) {
        const TensorT<T>& xv = v.val();
        int64_t len = xv.shape[static_cast<size_t>(axis)];
        lens.push_back(len);
        for (int64_t o = 0; o < outer; ++o)
            std::copy_n(xv.data.begin() + o * len * inner, len * inner,
                        out.data.begin() + (o * total + pos) * inner);
        pos += len;
    }
    bool needs = false;
    std::vector<int> ids;
    for (auto& v : xs) {
        ids.push_back(v.id);
        if (tape && tape->nodes[static_cast<size_t>(v.id)].needs) needs = true;
    }
    auto bw = [ids, lens, outer, inner, total](Tape<T>& tp, int self) {
        const TensorT<T>& g = tp.nodes[static_cast<size_t>(self)].grad;
        int64_t pos2 = 0;
        for (size_t k = 0; k < ids.size(); ++k) {
            if (tp.nodes[static_cast<size_t>(ids[k])].needs) {
                TensorT<T>& gx = tp.grad(ids[k]);
                for (int64_t o = 0; o < outer; ++o) {
                    const T* src = g.data.data() + (o * total + pos2) * inner;
                    T* dst = gx.data.data() + o * lens[k] * inner;
                    for (int64_t i = 0; i < lens[k] * inner; ++i) dst[i] += src[i];
                }
            }
            pos2 += lens[k];
        }
    };
    return detail::finish<T>(tape, std::move(out), needs, std::move(bw));
}

// ---------------------------------------------------------------------------
// Softmax over the last axis (stable).
// ---------------------------------------------------------------------------

template <typename T>
Var<T> softmax_last(Var<T> x) {
    Tape<T>* tape = detail::resolve_tape<T>({&x});
    const TensorT<T>& xv = x.val();
    require(!xv.shape.empty(), "softmax_last: rank-0 input");
    const int64_t n = xv.shape.back();
    const int64_t rows = xv.numel() / n;
    TensorT<T> out(xv.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const T* xi = xv.data.data() + r * n;
        T* yo = out.data.data() + r * n;
        T mx = xi[0];
        for (int64_t i = 1; i < n; ++i) mx = std::max(mx, xi[i]);
        T s = T(0);
        for (int64_t i = 0; i < n; ++i) {
            yo[i] = std::exp(xi[i] - mx);
            s += yo[i];
        }
        T inv = T(1) / s;
        for (int64_t i = 0; i < n; ++i) yo[i] *= inv;
    }
    bool needs = detail::any_needs(tape, {&x});
    int xid = x.id;
    auto bw = [xid, n, rows](Tape<T>& tp, int self) {
        const TensorT<T>& g = tp.nodes[static_cast<size_t>(self)].grad;
        const TensorT<T>& y = tp.val(self);
        TensorT<T>& gx = tp.grad(xid);
        for (int64_t r = 0; r < rows; ++r) {
            const T* yr = y.data.data() + r * n;
            const T* gr = g.data.data() + r * n;
            T* go = gx.data.data() + r * n;
            T dot = T(0);
            for (int64_t i = 0; i < n; ++i) dot += yr[i] * gr[i];
            for (int64_t i = 0; i < n; ++i) go[i] += yr[i] * (gr[i] - dot);
        }
    };
    return detail::finish<T>(tape, std::move(out), needs, std::move(bw));
}

// ---------------------------------------------------------------------------
// Matrix products (Eigen-backed, single threaded).
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

// C(m,n) += or = A(m,k) * B(k,n) with optional transposes on views.
template <typename T>
void gemm(const T* a, bool ta, int64_t am, int64_t an, const T* b, bool tb, int64_t bm, int64_t bn,
          T* c, bool accumulate) {
    ECMap<T> A(a, am, an);
    ECMap<T> B(b, bm, bn);
    int64_t m = ta ? an : am;
    int64_t n = tb ? bm : bn;
    EMap<T> C(c, m, n);
    if (!ta && !tb) {
        if (accumulate) C.noalias() += A * B;
        else C.noalias() = A * B;
    } else if (ta && !tb) {
        if (accumulate) C.noalias() += A.transpose() * B;
        else C.noalias() = A.transpose() * B;
    } else if (!ta && tb) {
        if (accumulate) C.noalias() += A * B.transpose();
        else C.noalias() = A * B.transpose();
    } else {
        if (accumulate) C.noalias() += A.transpose() * B.transpose();
        else C.noalias() = A.transpose() * B.transpose();
    }
}

}  // namespace detail

// 2-d matmul: (m,k)·(k,n) -> (m,n).
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    Tape<T>* tape = detail::resolve_tape<T>({&a, &b});
    const TensorT<T>& av = a.val();
    const TensorT<T>& bv = b.val();
    require(av.rank() == 2 && bv.rank() == 2 && av.shape[1] == bv.shape[0], "matmul: bad shapes");
    const int64_t m = av.shape[0], k = av.shape[1], n = bv.shape[1];
    TensorT<T> out({m, n});
    detail::gemm(av.data.data(), false, m, k, bv.data.data(), false, k, n, out.data.data(), false);
    bool needs = detail::any_needs(tape, {&a, &b});
    int aid = a.id, bid = b.id;
    auto bw = [aid, bid, m, k, n](Tape<T>& tp, int self) {
        const TensorT<T>& g = tp.nodes[static_cast<size_t>(self)].grad;
        const TensorT<T>& av2 = tp.val(aid);
        const TensorT<T>& bv2 = tp.val(bid);
        if (tp.nodes[static_cast<size_t>(aid)].needs)
            detail::gemm(g.data.data(), false, m, n, bv2.data.data(), true, k, n,
                         tp.grad(aid).data.data(), true);
        if (tp.nodes[static_cast<size_t>(bid)].needs)
            detail::gemm(av2.data.data(), true, m, k, g.data.data(), false, m, n,
                         tp.grad(bid).data.data(), true);
    };
    return detail::finish<T>(tape, std::move(out), needs, std::move(bw));
}

// Batched 3-d matmul: (B,m,k)·(B,k,n) -> (B,m,n).
template <typename T>
Var<T> bmm(Var<T> a, Var<T> b) {
    Tape<T>* tape = detail::resolve_tape<T>({&a, &b});
    const TensorT<T>& av = a.val();
    const TensorT<T>& bv = b.val();
    require(av.rank() == 3 && bv.rank() == 3 && av.shape[0] == bv.shape[0] &&
                av.shape[2] == bv.shape[1],
            "bmm: bad shapes");
    const int64_t B = av.shape[0], m = av.shape[1], k = av.shape[2], n = bv.shape[2];
    TensorT<T> out({B, m, n});
    for (int64_t i = 0; i < B; ++i)
        detail::gemm(av.data.data() + i * m * k, false, m, k, bv.data.data() + i * k * n, false, k,
                     n, out.data.data() + i * m * n, false);
    bool needs = detail::any_needs(tape, {&a, &b});
    int aid = a.id, bid = b.id;
    auto bw = [aid, bid, B, m, k, n](Tape<T>& tp, int self) {
        const TensorT<T>& g = tp.nodes[static_cast<size_t>(self)].grad;
        const TensorT<T>& av2 = tp.val(aid);
        const TensorT<T>& bv2 = tp.val(bid);
        for (int64_t i = 0; i < B; ++i) {
            if (tp.nodes[static_cast<size_t>(aid)].needs)
                detail::gemm(g.data.data() + i * m * n, false, m, n, bv2.data.data() + i * k * n,
                             true, k, n, tp.grad(aid).data.data() + i * m * k, true);
            if (tp.nodes[static_cast<size_t>(bid)].needs)
                detail::gemm(av2.data.data() + i * m * k, true, m, k, g.data.data() + i * m * n,
                             false, m, n, tp.grad(bid).data.data() + i * k * n, true);
        }
    };
    return detail::finish<T>(tape, std::move(out), needs, std::move(bw));
}

// ---------------------------------------------------------------------------
// Convolutions. x: (Cin,H,W); w: (Cout, Cin, k, k) for dense, (C,1,k,k) for
// depthwise (groups == Cin == Cout); zero padding `pad`, stride 1.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void im2col(const TensorT<T>& x, int k, int pad, TensorT<T>& col) {
    const int64_t C = x.shape[0], H = x.shape[1], W = x.shape[2];
    const int64_t Ho = H + 2 * pad - k + 1, Wo = W + 2 * pad - k + 1;
    // col: (C*k*k, Ho*Wo)
    T* cp = col.data.data();
    for (int64_t c = 0; c < C; ++c)
        for (int64_t dy = 0; dy < k; ++dy)
            for (int64_t dx = 0; dx < k; ++dx) {
                const T* xc = x.data.data() + c * H * W;
                for (int64_t oy = 0; oy < Ho; ++oy) {
                    int64_t iy = oy + dy - pad;
                    if (iy < 0 || iy >= H) {
                        std::fill_n(cp, Wo, T(0));
                        cp += Wo;
                        continue;
                    }
                    for (int64_t ox = 0; ox < Wo; ++ox) {
                        int64_t ix = ox + dx - pad;
                        *cp++ = (ix >= 0 && ix < W) ? xc[iy * W + ix] : T(0);
                    }
                }
            }
}

template <typename T>
void col2im_acc(const TensorT<T>& col, int k, int pad, TensorT<T>& gx) {
    const int64_t C = gx.shape[0], H = gx.shape[1], W = gx.shape[2];
    const int64_t Ho = H + 2 * pad - k + 1, Wo = W + 2 * pad - k + 1;
    const T* cp = col.data.data();
    for (int64_t c = 0; c < C; ++c)
        for (int64_t dy = 0; dy < k; ++dy)
            for (int64_t dx = 0; dx < k; ++dx) {
                T* xc = gx.data.data() + c * H * W;
                for (int64_t oy = 0; oy < Ho; ++oy) {
                    int64_t iy = oy + dy - pad;
                    if (iy < 0 || iy >= H) {
                        cp += Wo;
                        continue;
                    }
                    for (int64_t ox = 0; ox < Wo; ++ox) {
                        int64_t ix = ox + dx - pad;
                        if (ix >= 0 && ix < W) xc[iy * W + ix] += cp[ox];
                    }
                    cp += Wo;
                }
            }
}

}  // namespace detail

// Dense conv2d, groups == 1.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int pad) {
    Tape<T>* tape = detail::resolve_tape<T>({&x, &w, &b});
    const TensorT<T>& xv = x.val();
    const TensorT<T>& wv = w.val();
    const TensorT<T>& bv = b.val();
    require(xv.rank() == 3 && wv.rank() == 4, "conv2d: bad ranks");
    const int64_t Cin = xv.shape[0], H = xv.shape[1], W = xv.shape[2];
    const int64_t Cout = wv.shape[0];
    const int k = static_cast<int>(wv.shape[2]);
    require(wv.shape[1] == Cin && wv.shape[3] == k, "conv2d: weight shape");
    require(bv.numel() == Cout, "conv2d: bias shape");
    const int64_t Ho = H + 2 * pad - k + 1, Wo = W + 2 * pad - k + 1;
    require(Ho >= 1 && Wo >= 1, "conv2d: output underflow");

    TensorT<T> out({Cout, Ho, Wo});
    if (k == 1 && pad == 0) {
        detail::gemm(wv.data.data(), false, Cout, Cin, xv.data.data(), false, Cin, H * W,
                     out.data.data(), false);
    } else {
        TensorT<T> col({Cin * k * k, Ho * Wo});
        detail::im2col(xv, k, pad, col);
        detail::gemm(wv.data.data(), false, Cout, Cin * k * k, col.data.data(), false,
                     Cin * k * k, Ho * Wo, out.data.data(), false);
    }
    for (int64_t co = 0; co < Cout; ++co) {
        T bb = bv.data[static_cast<size_t>(co)];
        T* o = out.data.data() + co * Ho * Wo;
        for (int64_t i = 0; i < Ho * Wo; ++i) o[i] += bb;
    }

    bool needs = detail::any_needs(tape, {&x, &w, &b});
    int xid = x.id, wid = w.id, bid = b.id;
    auto bw = [xid, wid, bid, Cin, Cout, k, pad, Ho, Wo](Tape<T>& tp, int self) {
        const TensorT<T>& g = tp.nodes[static_cast<size_t>(self)].grad;
        const TensorT<T>& xv2 = tp.val(xid);
        const TensorT<T>& wv2 = tp.val(wid);
        if (tp.nodes[static_cast<size_t>(bid)].needs) {
            TensorT<T>& gb = tp.grad(bid);
            for (int64_t co = 0; co < Cout; ++co) {
                T s = T(0);
                const T* gp = g.data.data() + co * Ho * Wo;
                for (int64_t i = 0; i < Ho * Wo; ++i) s += gp[i];
                gb.data[static_cast<size_t>(co)] += s;
            }
        }
        if (k == 1 && pad == 0) {
            if (tp.nodes[static_cast<size_t>(wid)].needs)
                detail::gemm(g.data.data(), false, Cout, Ho * Wo, xv2.data.data(), true, Cin,
                             Ho * Wo, tp.grad(wid).data.data(), true);
            if (tp.nodes[static_cast<size_t>(xid)].needs)
                detail::gemm(wv2.data.data(), true, Cout, Cin, g.data.data(), false, Cout, Ho * Wo,
                             tp.grad(xid).data.data(), true);
            return;
        }
        TensorT<T> col({Cin * k * k, Ho * Wo});
        detail::im2col(xv2, k, pad, col);
        if (tp.nodes[static_cast<size_t>(wid)].needs)
            detail::gemm(g.data.data(), false, Cout, Ho * Wo, col.data.data(), true, Cin * k * k,
                         Ho * Wo, tp.grad(wid).data.data(), true);
        if (tp.nodes[static_cast<size_t>(xid)].needs) {
            TensorT<T> gcol({Cin * k * k, Ho * Wo});
            detail::gemm(wv2.data.data(), true, Cout, Cin * k * k, g.data.data(), false, Cout,
                         Ho * Wo, gcol.data.data(), false);
            detail::col2im_acc(gcol, k, pad, tp.grad(xid));
        }
    };
    return detail::finish<T>(tape, std::move(out), needs, std::move(bw));
}

// Depthwise conv2d: w (C,1,k,k), one filter per channel.
template <typename T>
Var<T> dwconv2d(Var<T> x, Var<T> w, Var<T> b, int pad) {
    Tape<T>* tape = detail::resolve_tape<T>({&x, &w, &b});
    const TensorT<T>& xv = x.val();
    const TensorT<T>& wv = w.val();
    const TensorT<T>& bv = b.val();
    const int64_t C = xv.shape[0], H = xv.shape[1], W = xv.shape[2];
    const int k = static_cast<int>(wv.shape[2]);
    require(wv.shape[0] == C && wv.shape[1] == 1 && wv.shape[3] == k, "dwconv2d: weight shape");
    require(bv.numel() == C, "dwconv2d: bias shape");
    const int64_t Ho = H + 2 * pad - k + 1, Wo = W + 2 * pad - k + 1;
    TensorT<T> out({C, Ho, Wo});
    for (int64_t c = 0; c < C; ++c) {
        const T* xc = xv.data.data() + c * H * W;
        const T* wc = wv.data.data() + c * k * k;
        T* oc = out.data.data() + c * Ho * Wo;
        T bb = bv.data[static_cast<size_t>(c)];
        for (int64_t oy = 0; oy < Ho; ++oy)
            for (int64_t ox = 0; ox < Wo; ++ox) {
                T s = bb;
                for (int dy = 0; dy < k; ++dy) {
                    int64_t iy = oy + dy - pad;
                    if (iy < 0 || iy >= H) continue;
                    for (int dx = 0; dx < k; ++dx) {
                        int64_t ix = ox + dx - pad;
                        if (ix < 0 || ix >= W) continue;
                        s += wc[dy * k + dx] * xc[iy * W + ix];
                    }
                }
                oc[oy * Wo + ox] = s;
            }
    }
    bool needs = detail::any_needs(tape, {&x, &w, &b});
    int xid = x.id, wid = w.id, bid = b.id;
    auto bw = [xid, wid, bid, C, H, W, k, pad, Ho, Wo](Tape<T>& tp, int self) {
        const TensorT<T>& g = tp.nodes[static_cast<size_t>(self)].grad;
        const TensorT<T>& xv2 = tp.val(xid);
        const TensorT<T>& wv2 = tp.val(wid);
        bool xn = tp.nodes[static_cast<size_t>(xid)].needs;
        bool wn = tp.nodes[static_cast<size_t>(wid)].needs;
        bool bn = tp.nodes[static_cast<size_t>(bid)].needs;
        for (int64_t c = 0; c < C; ++c) {
            const T* gc = g.data.data() + c * Ho * Wo;
            const T* xc = xv2.data.data() + c * H * W;
            const T* wc = wv2.data.data() + c * k * k;
            T* gxc = xn ? tp.grad(xid).data.data() + c * H * W : nullptr;
            T* gwc = wn ? tp.grad(wid).data.data() + c * k * k : nullptr;
            T gbacc = T(0);
            for (int64_t oy = 0; oy < Ho; ++oy)
                for (int64_t ox = 0; ox < Wo; ++ox) {
                    T gv = gc[oy * Wo + ox];
                    gbacc += gv;
                    for (int dy = 0; dy < k; ++dy) {
                        int64_t iy = oy + dy - pad;
                        if (iy < 0 || iy >= H) continue;
                        for (int dx = 0; dx < k; ++dx) {
                            int64_t ix = ox + dx - pad;
                            if (ix < 0 || ix >= W) continue;
                            if (gwc) gwc[dy * k + dx] += gv * xc[iy * W + ix];
                            if (gxc) gxc[iy * W + ix] += gv * wc[dy * k + dx];
                        }
                    }
                }
            if (bn) tp.grad(bid).data[static_cast<size_t>(c)] += gbacc;
        }
    };
    return detail::finish<T>(tape, std::move(out), needs, std::move(bw));
}

// Replicate (edge-clamp) spatial padding for (C,H,W).
template <typename T>
Var<T> replicate_pad2d(Var<T> x, int p) {
    Tape<T>* tape = detail::resolve_tape<T>({&x});
    const TensorT<T>& xv = x.val();
    const int64_t C = xv.shape[0], H = xv.shape[1], W = xv.shape[2];
    TensorT<T> out({C, H + 2 * p, W + 2 * p});
    const int64_t Ho = H + 2 * p, Wo = W + 2 * p;
    for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < Ho; ++y) {
            int64_t sy = std::clamp<int64_t>(y - p, 0, H - 1);
            for (int64_t x2 = 0; x2 < Wo; ++x2) {
                int64_t sx = std::clamp<int64_t>(x2 - p, 0, W - 1);
                out.data[static_cast<size_t>((c * Ho + y) * Wo + x2)] =
                    xv.data[static_cast<size_t>((c * H + sy) * W + sx)];
            }
        }
    bool needs = detail::any_needs(tape, {&x});
    int xid = x.id;
    auto bw = [xid, C, H, W, p, Ho, Wo](Tape<T>& tp, int self) {
        const TensorT<T>& g = tp.nodes[static_cast<size_t>(self)].grad;
        TensorT<T>& gx = tp.grad(xid);
        for (int64_t c = 0; c < C; ++c)
            for (int64_t y = 0; y < Ho; ++y) {
                int64_t sy = std::clamp<int64_t>(y - p, 0, H - 1);
                for (int64_t x2 = 0; x2 < Wo; ++x2) {
                    int64_t sx = std::clamp<int64_t>(x2 - p, 0, W - 1);
                    gx.data[static_cast<size_t>((c * H + sy) * W + sx)] +=
                        g.data[static_cast<size_t>((c * Ho + y) * Wo + x2)];
                }
            }
    };
    return detail::finish<T>(tape, std::move(out), needs, std::move(bw));
}

// Sliding-window extraction: (C,H,W) -> (num_windows, C*k*k), stride s, no pad.
template <typename T>
Var<T> unfold(Var<T> x, int k, int s) {
    Tape<T>* tape = detail::resolve_tape<T>({&x});
    const TensorT<T>& xv = x.val();
    const int64_t C = xv.shape[0], H = xv.shape[1], W = xv.shape[2];
    require(H >= k && W >= k, "unfold: window larger than input");
    const int64_t ny = (H - k) / s + 1, nx = (W - k) / s + 1;
    TensorT<T> out({ny * nx, C * k * k});
    for (int64_t wy = 0; wy < ny; ++wy)
        for (int64_t wx = 0; wx < nx; ++wx) {
            T* o = out.data.data() + (wy * nx + wx) * C * k * k;
            for (int64_t c = 0; c < C; ++c)
                for (int dy = 0; dy < k; ++dy)
                    for (int dx = 0; dx < k; ++dx)
                        *o++ = xv.data[static_cast<size_t>((c * H + wy * s + dy) * W + wx * s + dx)];
        }
    bool needs = detail::any_needs(tape, {&x});
    int xid = x.id;
    auto bw = [xid, C, H, W, k, s, ny, nx](Tape<T>& tp, int self) {
        const TensorT<T>& g = tp.nodes[static_cast<size_t>(self)].grad;
        TensorT<T>& gx = tp.grad(xid);
        for (int64_t wy = 0; wy < ny; ++wy)
            for (int64_t wx = 0; wx < nx; ++wx) {
                const T* gp = g.data.data() + (wy * nx + wx) * C * k * k;
                for (int64_t c = 0; c < C; ++c)
                    for (int dy = 0; dy < k; ++dy)
                        for (int dx = 0; dx < k; ++dx)
                            gx.data[static_cast<size_t>((c * H + wy * s + dy) * W + wx * s + dx)] +=
                                *gp++;
            }
    };
    return detail::finish<T>(tape, std::move(out), needs, std::move(bw));
}

// ---------------------------------------------------------------------------
// Channel LayerNorm for (C,H,W): normalize across C at every pixel, then
// per-channel affine.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> layernorm_chan(Var<T> x, Var<T> w, Var<T> b, T eps = T(1e-5)) {
    Tape<T>* tape = detail::resolve_tape<T>({&x, &w, &b});
    const TensorT<T>& xv = x.val();
    const TensorT<T>& wv = w.val();
    const TensorT<T>& bv = b.val();
    const int64_t C = xv.shape[0], H = xv.shape[1], W = xv.shape[2];
    require(wv.numel() == C && bv.numel() == C, "layernorm_chan: affine shape");
    const int64_t P = H * W;
    TensorT<T> out({C, H, W});
    std::vector<T> istd(static_cast<size_t>(P));
    std::vector<T> mu(static_cast<size_t>(P));
    for (int64_t p = 0; p < P; ++p) {
        T m = T(0);
        for (int64_t c = 0; c < C; ++c) m += xv.data[static_cast<size_t>(c * P + p)];
        m /= static_cast<T>(C);
        T v = T(0);
        for (int64_t c = 0; c < C; ++c) {
            T d = xv.data[static_cast<size_t>(c * P + p)] - m;
            v += d * d;
        }
        v /= static_cast<T>(C);
        T is = T(1) / std::sqrt(v + eps);
        mu[static_cast<size_t>(p)] = m;
        istd[static_cast<size_t>(p)] = is;
        for (int64_t c = 0; c < C; ++c)
            out.data[static_cast<size_t>(c * P + p)] =
                (xv.data[static_cast<size_t>(c * P + p)] - m) * is * wv.data[static_cast<size_t>(c)] +
                bv.data[static_cast<size_t>(c)];
    }
    bool needs = detail::any_needs(tape, {&x, &w, &b});
    int xid = x.id, wid = w.id, bid = b.id;
    auto bw = [xid, wid, bid, C, P, mu, istd](Tape<T>& tp, int self) {
        const TensorT<T>& g = tp.nodes[static_cast<size_t>(self)].grad;
        const TensorT<T>& xv2 = tp.val(xid);
        const TensorT<T>& wv2 = tp.val(wid);
        bool xn = tp.nodes[static_cast<size_t>(xid)].needs;
        bool wn = tp.nodes[static_cast<size_t>(wid)].needs;
        bool bn = tp.nodes[static_cast<size_t>(bid)].needs;
        for (int64_t p = 0; p < P; ++p) {
            T m = mu[static_cast<size_t>(p)];
            T is = istd[static_cast<size_t>(p)];
            T gdot = T(0), gxdot = T(0);
            for (int64_t c = 0; c < C; ++c) {
                T xh = (xv2.data[static_cast<size_t>(c * P + p)] - m) * is;
                T gw = g.data[static_cast<size_t>(c * P + p)] * wv2.data[static_cast<size_t>(c)];
                gdot += gw;
                gxdot += gw * xh;
                if (wn)
                    tp.grad(wid).data[static_cast<size_t>(c)] +=
                        g.data[static_cast<size_t>(c * P + p)] * xh;
                if (bn) tp.grad(bid).data[static_cast<size_t>(c)] += g.data[static_cast<size_t>(c * P + p)];
            }
            if (xn) {
                T invC = T(1) / static_cast<T>(C);
                for (int64_t c = 0; c < C; ++c) {
                    T xh = (xv2.data[static_cast<size_t>(c * P + p)] - m) * is;
                    T gw = g.data[static_cast<size_t>(c * P + p)] * wv2.data[static_cast<size_t>(c)];
                    tp.grad(xid).data[static_cast<size_t>(c * P + p)] +=
                        is * (gw - invC * gdot - xh * invC * gxdot);
                }
            }
        }
    };
    return detail::finish<T>(tape, std::move(out), needs, std::move(bw));
}

}  // namespace tgfuse
