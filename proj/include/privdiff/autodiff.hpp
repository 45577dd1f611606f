#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "privdiff/errors.hpp"
#include "privdiff/tensor.hpp"

namespace privdiff {

// Reverse-mode autodiff on a linear tape. Ops append nodes in execution
// order, so the record is topological by construction; backward() is one
// reverse sweep that visits each entry exactly once. Everything is
// single-threaded and uses fixed left-to-right reduction order, so identical
// inputs give bit-identical values and gradients.

template <typename T>
class TapeT;

template <typename T>
struct ValT {
    TapeT<T>* tape = nullptr;
    int id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
};

template <typename T>
class TapeT {
public:
    using Ten = TensorT<T>;
    using Val = ValT<T>;

    struct Node {
        Ten value;
        Ten grad;  // empty until backward first touches it
        bool requires_grad = false;
        std::function<void(TapeT&)> backprop;  // null for leaves and constants
    };

    std::vector<Node> nodes;

    void clear() { nodes.clear(); }
    size_t size() const { return nodes.size(); }

    Val leaf(Ten v, bool requires_grad) {
        Node n;
        n.value = std::move(v);
        n.requires_grad = requires_grad;
        nodes.push_back(std::move(n));
        return Val{this, static_cast<int>(nodes.size()) - 1};
    }

    Val constant(Ten v) { return leaf(std::move(v), false); }

    int push(Ten value, bool requires_grad) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        nodes.push_back(std::move(n));
        return static_cast<int>(nodes.size()) - 1;
    }

    const Ten& value(Val v) const { return nodes[static_cast<size_t>(v.id)].value; }
    const Ten& value(int id) const { return nodes[static_cast<size_t>(id)].value; }
    bool requires_grad(int id) const { return nodes[static_cast<size_t>(id)].requires_grad; }

    // Gradient buffer, zero-allocated on first touch.
    Ten& grad_buf(int id) {
        Node& n = nodes[static_cast<size_t>(id)];
        if (n.grad.empty() && n.value.numel() > 0) n.grad = Ten(n.value.shape);
        return n.grad;
    }

    bool has_grad(int id) const { return !nodes[static_cast<size_t>(id)].grad.empty(); }

    // Reverse sweep from a scalar loss. Nodes the loss does not reach keep an
    // empty gradient buffer; callers translate that to zeros.
    void backward(Val loss) {
        if (!loss.valid() || loss.tape != this)
            throw ContractError("backward: loss is not a node of this tape");
        Node& ln = nodes[static_cast<size_t>(loss.id)];
        if (ln.value.numel() != 1) throw ContractError("backward: loss must be scalar");
        grad_buf(loss.id).data[0] = T(1);
        for (int i = static_cast<int>(nodes.size()) - 1; i >= 0; --i) {
            Node& n = nodes[static_cast<size_t>(i)];
            if (!n.backprop || n.grad.empty()) continue;
            n.backprop(*this);
        }
    }
};

using Tape = TapeT<double>;
using Val = ValT<double>;

namespace detail {

template <typename T>
TapeT<T>& tape_of(ValT<T> a) {
    if (!a.valid()) throw ContractError("op applied to invalid value handle");
    return *a.tape;
}

template <typename T>
void same_tape(ValT<T> a, ValT<T> b) {
    if (a.tape != b.tape) throw ContractError("operands live on different tapes");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
ValT<T> add(ValT<T> a, ValT<T> b) {
    auto& t = detail::tape_of(a);
    detail::same_tape(a, b);
    const auto& av = t.value(a);
    const auto& bv = t.value(b);
    if (!av.same_shape(bv))
        throw ShapeError("add: shape mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
    TensorT<T> out(av.shape);
    for (int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] + bv[i];
    check_finite(out, "add");
    bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
    int id = t.push(std::move(out), rg);
    if (rg) {
        int ia = a.id, ib = b.id;
        t.nodes[static_cast<size_t>(id)].backprop = [ia, ib, id](TapeT<T>& tp) {
            const auto& g = tp.nodes[static_cast<size_t>(id)].grad;
            if (tp.requires_grad(ia)) {
                auto& ga = tp.grad_buf(ia);
                for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
            }
            if (tp.requires_grad(ib)) {
                auto& gb = tp.grad_buf(ib);
                for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
            }
        };
    }
    return {&t, id};
}

template <typename T>
ValT<T> sub(ValT<T> a, ValT<T> b) {
    auto& t = detail::tape_of(a);
    detail::same_tape(a, b);
    const auto& av = t.value(a);
    const auto& bv = t.value(b);
    if (!av.same_shape(bv))
        throw ShapeError("sub: shape mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
    TensorT<T> out(av.shape);
    for (int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] - bv[i];
    check_finite(out, "sub");
    bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
    int id = t.push(std::move(out), rg);
    if (rg) {
        int ia = a.id, ib = b.id;
        t.nodes[static_cast<size_t>(id)].backprop = [ia, ib, id](TapeT<T>& tp) {
            const auto& g = tp.nodes[static_cast<size_t>(id)].grad;
            if (tp.requires_grad(ia)) {
                auto& ga = tp.grad_buf(ia);
                for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
            }
            if (tp.requires_grad(ib)) {
                auto& gb = tp.grad_buf(ib);
                for (int64_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
            }
        };
    }
    return {&t, id};
}

template <typename T>
ValT<T> mul(ValT<T> a, ValT<T> b) {
    auto& t = detail::tape_of(a);
    detail::same_tape(a, b);
    const auto& av = t.value(a);
    const auto& bv = t.value(b);
    if (!av.same_shape(bv))
        throw ShapeError("mul: shape mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
    TensorT<T> out(av.shape);
    for (int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] * bv[i];
    check_finite(out, "mul");
    bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
    int id = t.push(std::move(out), rg);
    if (rg) {
        int ia = a.id, ib = b.id;
        t.nodes[static_cast<size_t>(id)].backprop = [ia, ib, id](TapeT<T>& tp) {
            const auto& g = tp.nodes[static_cast<size_t>(id)].grad;
            const auto& av2 = tp.value(ia);
            const auto& bv2 = tp.value(ib);
            if (tp.requires_grad(ia)) {
                auto& ga = tp.grad_buf(ia);
                for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv2[i];
            }
            if (tp.requires_grad(ib)) {
                auto& gb = tp.grad_buf(ib);
                for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av2[i];
            }
        };
    }
    return {&t, id};
}

template <typename T>
ValT<T> scale(ValT<T> a, double c) {
    auto& t = detail::tape_of(a);
    const auto& av = t.value(a);
    TensorT<T> out(av.shape);
    for (int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] * static_cast<T>(c);
    check_finite(out, "scale");
    bool rg = t.requires_grad(a.id);
    int id = t.push(std::move(out), rg);
    if (rg) {
        int ia = a.id;
        t.nodes[static_cast<size_t>(id)].backprop = [ia, id, c](TapeT<T>& tp) {
            const auto& g = tp.nodes[static_cast<size_t>(id)].grad;
            auto& ga = tp.grad_buf(ia);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * static_cast<T>(c);
        };
    }
    return {&t, id};
}

template <typename T>
ValT<T> neg(ValT<T> a) {
    return scale(a, -1.0);
}

template <typename T>
ValT<T> silu(ValT<T> a) {
    auto& t = detail::tape_of(a);
    const auto& av = t.value(a);
    TensorT<T> out(av.shape);
    for (int64_t i = 0; i < av.numel(); ++i) {
        T s = T(1) / (T(1) + std::exp(-av[i]));
        out[i] = av[i] * s;
    }
    check_finite(out, "silu");
    bool rg = t.requires_grad(a.id);
    int id = t.push(std::move(out), rg);
    if (rg) {
        int ia = a.id;
        t.nodes[static_cast<size_t>(id)].backprop = [ia, id](TapeT<T>& tp) {
            const auto& g = tp.nodes[static_cast<size_t>(id)].grad;
            const auto& x = tp.value(ia);
            auto& ga = tp.grad_buf(ia);
            for (int64_t i = 0; i < g.numel(); ++i) {
                T s = T(1) / (T(1) + std::exp(-x[i]));
                ga[i] += g[i] * s * (T(1) + x[i] * (T(1) - s));
            }
        };
    }
    return {&t, id};
}

template <typename T>
ValT<T> tanh_act(ValT<T> a) {
    auto& t = detail::tape_of(a);
    const auto& av = t.value(a);
    TensorT<T> out(av.shape);
    for (int64_t i = 0; i < av.numel(); ++i) out[i] = std::tanh(av[i]);
    check_finite(out, "tanh");
    bool rg = t.requires_grad(a.id);
    int id = t.push(std::move(out), rg);
    if (rg) {
        int ia = a.id;
        t.nodes[static_cast<size_t>(id)].backprop = [ia, id](TapeT<T>& tp) {
            const auto& g = tp.nodes[static_cast<size_t>(id)].grad;
            const auto& y = tp.nodes[static_cast<size_t>(id)].value;
            auto& ga = tp.grad_buf(ia);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * (T(1) - y[i] * y[i]);
        };
    }
    return {&t, id};
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
ValT<T> matmul(ValT<T> a, ValT<T> b) {
    auto& t = detail::tape_of(a);
    detail::same_tape(a, b);
    const auto& av = t.value(a);
    const auto& bv = t.value(b);
    if (av.ndim() != 2 || bv.ndim() != 2)
        throw ShapeError("matmul: expects 2-d operands");
    if (av.dim(1) != bv.dim(0))
        throw ShapeError("matmul: inner extents differ " + shape_str(av.shape) + " vs " +
                         shape_str(bv.shape));
    int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    TensorT<T> out({m, n});
    for (int i = 0; i < m; ++i) {
        const T* arow = av.ptr() + static_cast<int64_t>(i) * k;
        T* orow = out.ptr() + static_cast<int64_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            T aval = arow[p];
            const T* brow = bv.ptr() + static_cast<int64_t>(p) * n;
            for (int j = 0; j < n; ++j) orow[j] += aval * brow[j];
        }
    }
    check_finite(out, "matmul");
    bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
    int id = t.push(std::move(out), rg);
    if (rg) {
        int ia = a.id, ib = b.id;
        t.nodes[static_cast<size_t>(id)].backprop = [ia, ib, id, m, k, n](TapeT<T>& tp) {
            const auto& g = tp.nodes[static_cast<size_t>(id)].grad;
            const auto& av2 = tp.value(ia);
            const auto& bv2 = tp.value(ib);
            if (tp.requires_grad(ia)) {
                // dA = dC B^T
                auto& ga = tp.grad_buf(ia);
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        T acc = T(0);
                        const T* grow = g.ptr() + static_cast<int64_t>(i) * n;
                        const T* brow = bv2.ptr() + static_cast<int64_t>(p) * n;
                        for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        ga[static_cast<int64_t>(i) * k + p] += acc;
                    }
            }
            if (tp.requires_grad(ib)) {
                // dB = A^T dC
                auto& gb = tp.grad_buf(ib);
                for (int p = 0; p < k; ++p)
                    for (int i = 0; i < m; ++i) {
                        T aval = av2[static_cast<int64_t>(i) * k + p];
                        const T* grow = g.ptr() + static_cast<int64_t>(i) * n;
                        T* gbrow = gb.ptr() + static_cast<int64_t>(p) * n;
                        for (int j = 0; j < n; ++j) gbrow[j] += aval * grow[j];
                    }
            }
        };
    }
    return {&t, id};
}

template <typename T>
ValT<T> transpose2d(ValT<T> a) {
    auto& t = detail::tape_of(a);
    const auto& av = t.value(a);
    if (av.ndim() != 2) throw ShapeError("transpose2d: expects 2-d operand");
    int m = av.dim(0), n = av.dim(1);
    TensorT<T> out({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<int64_t>(j) * m + i] = av[static_cast<int64_t>(i) * n + j];
    bool rg = t.requires_grad(a.id);
    int id = t.push(std::move(out), rg);
    if (rg) {
        int ia = a.id;
        t.nodes[static_cast<size_t>(id)].backprop = [ia, id, m, n](TapeT<T>& tp) {
            const auto& g = tp.nodes[static_cast<size_t>(id)].grad;
            auto& ga = tp.grad_buf(ia);
            for (int j = 0; j < n; ++j)
                for (int i = 0; i < m; ++i)
                    ga[static_cast<int64_t>(i) * n + j] += g[static_cast<int64_t>(j) * m + i];
        };
    }
    return {&t, id};
}

// y = x W^T + b with x:[n,din], W:[dout,din], b:[dout] (bias optional).
template <typename T>
ValT<T> linear(ValT<T> x, ValT<T> w, ValT<T> bias = {}) {
    auto& t = detail::tape_of(x);
    detail::same_tape(x, w);
    const auto& xv = t.value(x);
    const auto& wv = t.value(w);
    if (xv.ndim() != 2 || wv.ndim() != 2 || xv.dim(1) != wv.dim(1))
        throw ShapeError("linear: got x=" + shape_str(xv.shape) + " w=" + shape_str(wv.shape));
    int n = xv.dim(0), din = xv.dim(1), dout = wv.dim(0);
    bool has_bias = bias.valid();
    if (has_bias) {
        detail::same_tape(x, bias);
        const auto& bv = t.value(bias);
        if (bv.ndim() != 1 || bv.dim(0) != dout) throw ShapeError("linear: bad bias shape");
    }
    TensorT<T> out({n, dout});
    for (int i = 0; i < n; ++i) {
        const T* xrow = xv.ptr() + static_cast<int64_t>(i) * din;
        T* orow = out.ptr() + static_cast<int64_t>(i) * dout;
        for (int j = 0; j < dout; ++j) {
            const T* wrow = wv.ptr() + static_cast<int64_t>(j) * din;
            T acc = has_bias ? t.value(bias)[j] : T(0);
            for (int p = 0; p < din; ++p) acc += xrow[p] * wrow[p];
            orow[j] = acc;
        }
    }
    check_finite(out, "linear");
    bool rg = t.requires_grad(x.id) || t.requires_grad(w.id) ||
              (has_bias && t.requires_grad(bias.id));
    int id = t.push(std::move(out), rg);
    if (rg) {
        int ix = x.id, iw = w.id, ib = has_bias ? bias.id : -1;
        t.nodes[static_cast<size_t>(id)].backprop = [ix, iw, ib, id, n, din, dout](TapeT<T>& tp) {
            const auto& g = tp.nodes[static_cast<size_t>(id)].grad;
            const auto& xv2 = tp.value(ix);
            const auto& wv2 = tp.value(iw);
            if (tp.requires_grad(ix)) {
                auto& gx = tp.grad_buf(ix);
                for (int i = 0; i < n; ++i) {
                    const T* grow = g.ptr() + static_cast<int64_t>(i) * dout;
                    T* gxrow = gx.ptr() + static_cast<int64_t>(i) * din;
                    for (int j = 0; j < dout; ++j) {
                        T gv = grow[j];
                        const T* wrow = wv2.ptr() + static_cast<int64_t>(j) * din;
                        for (int p = 0; p < din; ++p) gxrow[p] += gv * wrow[p];
                    }
                }
            }
            if (tp.requires_grad(iw)) {
                auto& gw = tp.grad_buf(iw);
                for (int i = 0; i < n; ++i) {
                    const T* grow = g.ptr() + static_cast<int64_t>(i) * dout;
                    const T* xrow = xv2.ptr() + static_cast<int64_t>(i) * din;
                    for (int j = 0; j < dout; ++j) {
                        T gv = grow[j];
                        T* gwrow = gw.ptr() + static_cast<int64_t>(j) * din;
                        for (int p = 0; p < din; ++p) gwrow[p] += gv * xrow[p];
                    }
                }
            }
            if (ib >= 0 && tp.requires_grad(ib)) {
                auto& gb = tp.grad_buf(ib);
                for (int i = 0; i < n; ++i) {
                    const T* grow = g.ptr() + static_cast<int64_t>(i) * dout;
                    for (int j = 0; j < dout; ++j) gb[j] += grow[j];
                }
            }
        };
    }
    return {&t, id};
}

// ---------------------------------------------------------------------------
// Convolution and friends
// ---------------------------------------------------------------------------

// Cross-correlation: x:[b,c,h,w], k:[o,c,kh,kw], bias:[o] optional.
template <typename T>
ValT<T> conv2d(ValT<T> x, ValT<T> kernel, ValT<T> bias, int stride, int pad) {
    auto& t = detail::tape_of(x);
    detail::same_tape(x, kernel);
    const auto& xv = t.value(x);
    const auto& kv = t.value(kernel);
    if (xv.ndim() != 4 || kv.ndim() != 4)
        throw ShapeError("conv2d: expects 4-d input and kernel");
    if (stride < 1 || pad < 0) throw ContractError("conv2d: bad stride/padding");
    int b = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    int o = kv.dim(0), kc = kv.dim(1), kh = kv.dim(2), kw = kv.dim(3);
    if (kc != c) throw ShapeError("conv2d: channel mismatch");
    if (kh > h + 2 * pad || kw > w + 2 * pad)
        throw ShapeError("conv2d: kernel larger than padded input");
    int oh = (h + 2 * pad - kh) / stride + 1;
    int ow = (w + 2 * pad - kw) / stride + 1;
    bool has_bias = bias.valid();
    if (has_bias && (t.value(bias).ndim() != 1 || t.value(bias).dim(0) != o))
        throw ShapeError("conv2d: bad bias shape");

    TensorT<T> out({b, o, oh, ow});
    const T* xp = xv.ptr();
    const T* kp = kv.ptr();
    T* op = out.ptr();
    for (int n = 0; n < b; ++n) {
        for (int oc = 0; oc < o; ++oc) {
            T bval = has_bias ? t.value(bias)[oc] : T(0);
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox) {
                    int iy0 = oy * stride - pad;
                    int ix0 = ox * stride - pad;
                    T acc = bval;
                    for (int ic = 0; ic < c; ++ic) {
                        const T* xc = xp + ((static_cast<int64_t>(n) * c + ic) * h) * w;
                        const T* kc2 = kp + ((static_cast<int64_t>(oc) * c + ic) * kh) * kw;
                        for (int ky = 0; ky < kh; ++ky) {
                            int iy = iy0 + ky;
                            if (iy < 0 || iy >= h) continue;
                            const T* xrow = xc + static_cast<int64_t>(iy) * w;
                            const T* krow = kc2 + static_cast<int64_t>(ky) * kw;
                            for (int kx = 0; kx < kw; ++kx) {
                                int ix = ix0 + kx;
                                if (ix < 0 || ix >= w) continue;
                                acc += xrow[ix] * krow[kx];
                            }
                        }
                    }
                    op[((static_cast<int64_t>(n) * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    check_finite(out, "conv2d");
    bool rg = t.requires_grad(x.id) || t.requires_grad(kernel.id) ||
              (has_bias && t.requires_grad(bias.id));
    int id = t.push(std::move(out), rg);
    if (rg) {
        int ix = x.id, ik = kernel.id, ib = has_bias ? bias.id : -1;
        t.nodes[static_cast<size_t>(id)].backprop = [ix, ik, ib, id, b, c, h, w, o, kh, kw, oh, ow,
                                                     stride, pad](TapeT<T>& tp) {
            const auto& g = tp.nodes[static_cast<size_t>(id)].grad;
            const auto& xv2 = tp.value(ix);
            const auto& kv2 = tp.value(ik);
            bool want_dx = tp.requires_grad(ix);
            bool want_dk = tp.requires_grad(ik);
            bool want_db = ib >= 0 && tp.requires_grad(ib);
            T* dx = want_dx ? tp.grad_buf(ix).ptr() : nullptr;
            T* dk = want_dk ? tp.grad_buf(ik).ptr() : nullptr;
            T* db = want_db ? tp.grad_buf(ib).ptr() : nullptr;
            for (int n = 0; n < b; ++n) {
                for (int oc = 0; oc < o; ++oc) {
                    for (int oy = 0; oy < oh; ++oy) {
                        for (int ox = 0; ox < ow; ++ox) {
                            T gv = g[((static_cast<int64_t>(n) * o + oc) * oh + oy) * ow + ox];
                            if (gv == T(0)) continue;
                            if (db) db[oc] += gv;
                            if (!want_dx && !want_dk) continue;
                            int iy0 = oy * stride - pad;
                            int ix0 = ox * stride - pad;
                            for (int ic = 0; ic < c; ++ic) {
                                int64_t xbase = ((static_cast<int64_t>(n) * c + ic) * h) * w;
                                int64_t kbase = ((static_cast<int64_t>(oc) * c + ic) * kh) * kw;
                                for (int ky = 0; ky < kh; ++ky) {
                                    int iy = iy0 + ky;
                                    if (iy < 0 || iy >= h) continue;
                                    for (int kx = 0; kx < kw; ++kx) {
                                        int ixx = ix0 + kx;
                                        if (ixx < 0 || ixx >= w) continue;
                                        int64_t xi = xbase + static_cast<int64_t>(iy) * w + ixx;
                                        int64_t ki = kbase + static_cast<int64_t>(ky) * kw + kx;
                                        if (want_dx) dx[xi] += gv * kv2[ki];
                                        if (want_dk) dk[ki] += gv * xv2[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        };
    }
    return {&t, id};
}

template <typename T>
ValT<T> upsample2x(ValT<T> x) {
    auto& t = detail::tape_of(x);
    const auto& xv = t.value(x);
    if (xv.ndim() != 4) throw ShapeError("upsample2x: expects 4-d input");
    int b = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    TensorT<T> out({b, c, 2 * h, 2 * w});
    for (int n = 0; n < b; ++n)
        for (int ic = 0; ic < c; ++ic)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx) {
                    T v = xv[((static_cast<int64_t>(n) * c + ic) * h + y) * w + xx];
                    int64_t base = ((static_cast<int64_t>(n) * c + ic) * 2 * h + 2 * y) * 2 * w + 2 * xx;
                    out[base] = v;
                    out[base + 1] = v;
                    out[base + 2 * w] = v;
                    out[base + 2 * w + 1] = v;
                }
    bool rg = t.requires_grad(x.id);
    int id = t.push(std::move(out), rg);
    if (rg) {
        int ix = x.id;
        t.nodes[static_cast<size_t>(id)].backprop = [ix, id, b, c, h, w](TapeT<T>& tp) {
            const auto& g = tp.nodes[static_cast<size_t>(id)].grad;
            auto& gx = tp.grad_buf(ix);
            for (int n = 0; n < b; ++n)
                for (int ic = 0; ic < c; ++ic)
                    for (int y = 0; y < h; ++y)
                        for (int xx = 0; xx < w; ++xx) {
                            int64_t base =
                                ((static_cast<int64_t>(n) * c + ic) * 2 * h + 2 * y) * 2 * w + 2 * xx;
                            gx[((static_cast<int64_t>(n) * c + ic) * h + y) * w + xx] +=
                                g[base] + g[base + 1] + g[base + 2 * w] + g[base + 2 * w + 1];
                        }
        };
    }
    return {&t, id};
}

template <typename T>
ValT<T> global_avg_pool(ValT<T> x) {
    auto& t = detail::tape_of(x);
    const auto& xv = t.value(x);
    if (xv.ndim() != 4) throw ShapeError("global_avg_pool: expects 4-d input");
    int b = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    int64_t hw = static_cast<int64_t>(h) * w;
    TensorT<T> out({b, c});
    for (int n = 0; n < b; ++n)
        for (int ic = 0; ic < c; ++ic) {
            const T* p = xv.ptr() + (static_cast<int64_t>(n) * c + ic) * hw;
            T acc = T(0);
            for (int64_t i = 0; i < hw; ++i) acc += p[i];
            out[static_cast<int64_t>(n) * c + ic] = acc / static_cast<T>(hw);
        }
    bool rg = t.requires_grad(x.id);
    int id = t.push(std::move(out), rg);
    if (rg) {
        int ix = x.id;
        t.nodes[static_cast<size_t>(id)].backprop = [ix, id, b, c, hw](TapeT<T>& tp) {
            const auto& g = tp.nodes[static_cast<size_t>(id)].grad;
            auto& gx = tp.grad_buf(ix);
            for (int n = 0; n < b; ++n)
                for (int ic = 0; ic < c; ++ic) {
                    T gv = g[static_cast<int64_t>(n) * c + ic] / static_cast<T>(hw);
                    T* p = gx.ptr() + (static_cast<int64_t>(n) * c + ic) * hw;
                    for (int64_t i = 0; i < hw; ++i) p[i] += gv;
                }
        };
    }
    return {&t, id};
}

// Per-sample, per-group normalization over (c/groups, h, w) with affine
// parameters gamma, beta of extent c.
template <typename T>
ValT<T> group_norm(ValT<T> x, ValT<T> gamma, ValT<T> beta, int groups, double eps = 1e-5) {
    auto& t = detail::tape_of(x);
    detail::same_tape(x, gamma);
    detail::same_tape(x, beta);
    const auto& xv = t.value(x);
    if (xv.ndim() != 4) throw ShapeError("group_norm: expects 4-d input");
    int b = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    if (groups < 1 || c % groups != 0) throw ConfigError("group_norm: groups must divide channels");
    const auto& gv = t.value(gamma);
    const auto& bv = t.value(beta);
    if (gv.numel() != c || bv.numel() != c) throw ShapeError("group_norm: bad affine shapes");
    int cg = c / groups;
    int64_t m = static_cast<int64_t>(cg) * h * w;
    int64_t hw = static_cast<int64_t>(h) * w;

    std::vector<T> mean(static_cast<size_t>(b) * groups), istd(static_cast<size_t>(b) * groups);
    TensorT<T> out(xv.shape);
    for (int n = 0; n < b; ++n) {
        for (int gidx = 0; gidx < groups; ++gidx) {
            const T* p = xv.ptr() + ((static_cast<int64_t>(n) * c + static_cast<int64_t>(gidx) * cg)) * hw;
            T mu = T(0);
            for (int64_t i = 0; i < m; ++i) mu += p[i];
            mu /= static_cast<T>(m);
            T var = T(0);
            for (int64_t i = 0; i < m; ++i) {
                T d = p[i] - mu;
                var += d * d;
            }
            var /= static_cast<T>(m);
            T is = T(1) / std::sqrt(var + static_cast<T>(eps));
            mean[static_cast<size_t>(n) * groups + gidx] = mu;
            istd[static_cast<size_t>(n) * groups + gidx] = is;
            for (int j = 0; j < cg; ++j) {
                int ch = gidx * cg + j;
                const T* xr = xv.ptr() + (static_cast<int64_t>(n) * c + ch) * hw;
                T* orow = out.ptr() + (static_cast<int64_t>(n) * c + ch) * hw;
                T ga = gv[ch], be = bv[ch];
                for (int64_t i = 0; i < hw; ++i) orow[i] = (xr[i] - mu) * is * ga + be;
            }
        }
    }
    check_finite(out, "group_norm");
    bool rg = t.requires_grad(x.id) || t.requires_grad(gamma.id) || t.requires_grad(beta.id);
    int id = t.push(std::move(out), rg);
    if (rg) {
        int ix = x.id, ig = gamma.id, ibt = beta.id;
        t.nodes[static_cast<size_t>(id)].backprop = [ix, ig, ibt, id, b, c, groups, cg, hw, m, mean,
                                                     istd](TapeT<T>& tp) {
            const auto& g = tp.nodes[static_cast<size_t>(id)].grad;
            const auto& xv2 = tp.value(ix);
            const auto& gv2 = tp.value(ig);
            bool want_dx = tp.requires_grad(ix);
            bool want_dg = tp.requires_grad(ig);
            bool want_db = tp.requires_grad(ibt);
            T* dx = want_dx ? tp.grad_buf(ix).ptr() : nullptr;
            T* dg = want_dg ? tp.grad_buf(ig).ptr() : nullptr;
            T* db = want_db ? tp.grad_buf(ibt).ptr() : nullptr;
            for (int n = 0; n < b; ++n) {
                for (int gidx = 0; gidx < groups; ++gidx) {
                    T mu = mean[static_cast<size_t>(n) * groups + gidx];
                    T is = istd[static_cast<size_t>(n) * groups + gidx];
                    // sums over the group of dy*gamma and dy*gamma*xhat
                    T s1 = T(0), s2 = T(0);
                    for (int j = 0; j < cg; ++j) {
                        int ch = gidx * cg + j;
                        const T* xr = xv2.ptr() + (static_cast<int64_t>(n) * c + ch) * hw;
                        const T* gr = g.ptr() + (static_cast<int64_t>(n) * c + ch) * hw;
                        T ga = gv2[ch];
                        for (int64_t i = 0; i < hw; ++i) {
                            T xh = (xr[i] - mu) * is;
                            T dyg = gr[i] * ga;
                            s1 += dyg;
                            s2 += dyg * xh;
                            if (dg) dg[ch] += gr[i] * xh;
                            if (db) db[ch] += gr[i];
                        }
                    }
                    if (want_dx) {
                        T inv_m = T(1) / static_cast<T>(m);
                        for (int j = 0; j < cg; ++j) {
                            int ch = gidx * cg + j;
                            const T* xr = xv2.ptr() + (static_cast<int64_t>(n) * c + ch) * hw;
                            const T* gr = g.ptr() + (static_cast<int64_t>(n) * c + ch) * hw;
                            T* dxr = dx + (static_cast<int64_t>(n) * c + ch) * hw;
                            T ga = gv2[ch];
                            for (int64_t i = 0; i < hw; ++i) {
                                T xh = (xr[i] - mu) * is;
                                dxr[i] += is * (gr[i] * ga - s1 * inv_m - xh * s2 * inv_m);
                            }
                        }
                    }
                }
            }
        };
    }
    return {&t, id};
}

// ---------------------------------------------------------------------------
// Shape plumbing
// ---------------------------------------------------------------------------

template <typename T>
ValT<T> reshape(ValT<T> a, Shape s) {
    auto& t = detail::tape_of(a);
    const auto& av = t.value(a);
    if (shape_numel(s) != av.numel())
        throw ShapeError("reshape: numel mismatch " + shape_str(av.shape) + " -> " + shape_str(s));
    TensorT<T> out(std::move(s), av.data);
    bool rg = t.requires_grad(a.id);
    int id = t.push(std::move(out), rg);
    if (rg) {
        int ia = a.id;
        t.nodes[static_cast<size_t>(id)].backprop = [ia, id](TapeT<T>& tp) {
            const auto& g = tp.nodes[static_cast<size_t>(id)].grad;
            auto& ga = tp.grad_buf(ia);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        };
    }
    return {&t, id};
}

// [b,c,h,w] -> [b, h*w, c]; token p corresponds to spatial position p.
template <typename T>
ValT<T> chw_to_tokens(ValT<T> x) {
    auto& t = detail::tape_of(x);
    const auto& xv = t.value(x);
    if (xv.ndim() != 4) throw ShapeError("chw_to_tokens: expects 4-d input");
    int b = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    int64_t hw = static_cast<int64_t>(h) * w;
    TensorT<T> out({b, static_cast<int>(hw), c});
    for (int n = 0; n < b; ++n)
        for (int ic = 0; ic < c; ++ic) {
            const T* p = xv.ptr() + (static_cast<int64_t>(n) * c + ic) * hw;
            T* q = out.ptr() + static_cast<int64_t>(n) * hw * c + ic;
            for (int64_t i = 0; i < hw; ++i) q[i * c] = p[i];
        }
    bool rg = t.requires_grad(x.id);
    int id = t.push(std::move(out), rg);
    if (rg) {
        int ix = x.id;
        t.nodes[static_cast<size_t>(id)].backprop = [ix, id, b, c, hw](TapeT<T>& tp) {
            const auto& g = tp.nodes[static_cast<size_t>(id)].grad;
            auto& gx = tp.grad_buf(ix);
            for (int n = 0; n < b; ++n)
                for (int ic = 0; ic < c; ++ic) {
                    T* p = gx.ptr() + (static_cast<int64_t>(n) * c + ic) * hw;
                    const T* q = g.ptr() + static_cast<int64_t>(n) * hw * c + ic;
                    for (int64_t i = 0; i < hw; ++i) p[i] += q[i * c];
                }
        };
    }
    return {&t, id};
}

// [b, h*w, c] -> [b,c,h,w]
template <typename T>
ValT<T> tokens_to_chw(ValT<T> x, int h, int w) {
    auto& t = detail::tape_of(x);
    const auto& xv = t.value(x);
    if (xv.ndim() != 3 || xv.dim(1) != h * w) throw ShapeError("tokens_to_chw: bad token shape");
    int b = xv.dim(0), c = xv.dim(2);
    int64_t hw = static_cast<int64_t>(h) * w;
    TensorT<T> out({b, c, h, w});
    for (int n = 0; n < b; ++n)
        for (int ic = 0; ic < c; ++ic) {
            T* p = out.ptr() + (static_cast<int64_t>(n) * c + ic) * hw;
            const T* q = xv.ptr() + static_cast<int64_t>(n) * hw * c + ic;
            for (int64_t i = 0; i < hw; ++i) p[i] = q[i * c];
        }
    bool rg = t.requires_grad(x.id);
    int id = t.push(std::move(out), rg);
    if (rg) {
        int ix = x.id;
        t.nodes[static_cast<size_t>(id)].backprop = [ix, id, b, c, hw](TapeT<T>& tp) {
            const auto& g = tp.nodes[static_cast<size_t>(id)].grad;
            auto& gx = tp.grad_buf(ix);
            for (int n = 0; n < b; ++n)
                for (int ic = 0; ic < c; ++ic) {
                    const T* p = g.ptr() + (static_cast<int64_t>(n) * c + ic) * hw;
                    T* q = gx.ptr() + static_cast<int64_t>(n) * hw * c + ic;
                    for (int64_t i = 0; i < hw; ++i) q[i * c] += p[i];
                }
        };
    }
    return {&t, id};
}

template <typename T>
ValT<T> concat_channels(ValT<T> a, ValT<T> b) {
    auto& t = detail::tape_of(a);
    detail::same_tape(a, b);
    const auto& av = t.value(a);
    const auto& bv = t.value(b);
    if (av.ndim() != 4 || bv.ndim() != 4 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) ||
        av.dim(3) != bv.dim(3))
        throw ShapeError("concat_channels: incompatible shapes");
    int n = av.dim(0), ca = av.dim(1), cb = bv.dim(1), h = av.dim(2), w = av.dim(3);
    int64_t hw = static_cast<int64_t>(h) * w;
    TensorT<T> out({n, ca + cb, h, w});
    for (int i = 0; i < n; ++i) {
        std::copy(av.ptr() + static_cast<int64_t>(i) * ca * hw,
                  av.ptr() + static_cast<int64_t>(i + 1) * ca * hw,
                  out.ptr() + static_cast<int64_t>(i) * (ca + cb) * hw);
        std::copy(bv.ptr() + static_cast<int64_t>(i) * cb * hw,
                  bv.ptr() + static_cast<int64_t>(i + 1) * cb * hw,
                  out.ptr() + static_cast<int64_t>(i) * (ca + cb) * hw + static_cast<int64_t>(ca) * hw);
    }
    bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
    int id = t.push(std::move(out), rg);
    if (rg) {
        int ia = a.id, ib = b.id;
        t.nodes[static_cast<size_t>(id)].backprop = [ia, ib, id, n, ca, cb, hw](TapeT<T>& tp) {
            const auto& g = tp.nodes[static_cast<size_t>(id)].grad;
            if (tp.requires_grad(ia)) {
                auto& ga = tp.grad_buf(ia);
                for (int i = 0; i < n; ++i) {
                    const T* src = g.ptr() + static_cast<int64_t>(i) * (ca + cb) * hw;
                    T* dst = ga.ptr() + static_cast<int64_t>(i) * ca * hw;
                    for (int64_t j = 0; j < static_cast<int64_t>(ca) * hw; ++j) dst[j] += src[j];
                }
            }
            if (tp.requires_grad(ib)) {
                auto& gb = tp.grad_buf(ib);
                for (int i = 0; i < n; ++i) {
                    const T* src =
                        g.ptr() + static_cast<int64_t>(i) * (ca + cb) * hw + static_cast<int64_t>(ca) * hw;
                    T* dst = gb.ptr() + static_cast<int64_t>(i) * cb * hw;
                    for (int64_t j = 0; j < static_cast<int64_t>(cb) * hw; ++j) dst[j] += src[j];
                }
            }
        };
    }
    return {&t, id};
}

// x:[b,c,h,w] + s:[b,c] broadcast over spatial positions.
template <typename T>
ValT<T> add_channel_bias(ValT<T> x, ValT<T> s) {
    auto& t = detail::tape_of(x);
    detail::same_tape(x, s);
    const auto& xv = t.value(x);
    const auto& sv = t.value(s);
    if (xv.ndim() != 4 || sv.ndim() != 2 || sv.dim(0) != xv.dim(0) || sv.dim(1) != xv.dim(1))
        throw ShapeError("add_channel_bias: incompatible shapes");
    int b = xv.dim(0), c = xv.dim(1);
    int64_t hw = static_cast<int64_t>(xv.dim(2)) * xv.dim(3);
    TensorT<T> out(xv.shape);
    for (int n = 0; n < b; ++n)
        for (int ic = 0; ic < c; ++ic) {
            T bias = sv[static_cast<int64_t>(n) * c + ic];
            const T* p = xv.ptr() + (static_cast<int64_t>(n) * c + ic) * hw;
            T* q = out.ptr() + (static_cast<int64_t>(n) * c + ic) * hw;
            for (int64_t i = 0; i < hw; ++i) q[i] = p[i] + bias;
        }
    check_finite(out, "add_channel_bias");
    bool rg = t.requires_grad(x.id) || t.requires_grad(s.id);
    int id = t.push(std::move(out), rg);
    if (rg) {
        int ix = x.id, is = s.id;
        t.nodes[static_cast<size_t>(id)].backprop = [ix, is, id, b, c, hw](TapeT<T>& tp) {
            const auto& g = tp.nodes[static_cast<size_t>(id)].grad;
            if (tp.requires_grad(ix)) {
                auto& gx = tp.grad_buf(ix);
                for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
            }
            if (tp.requires_grad(is)) {
                auto& gs = tp.grad_buf(is);
                for (int n = 0; n < b; ++n)
                    for (int ic = 0; ic < c; ++ic) {
                        const T* p = g.ptr() + (static_cast<int64_t>(n) * c + ic) * hw;
                        T acc = T(0);
                        for (int64_t i = 0; i < hw; ++i) acc += p[i];
                        gs[static_cast<int64_t>(n) * c + ic] += acc;
                    }
            }
        };
    }
    return {&t, id};
}

// Embedding lookup: table:[K,d], ids -> [len(ids), d].
template <typename T>
ValT<T> embed_rows(ValT<T> table, const std::vector<int>& ids) {
    auto& t = detail::tape_of(table);
    const auto& tv = t.value(table);
    if (tv.ndim() != 2) throw ShapeError("embed_rows: table must be 2-d");
    int K = tv.dim(0), d = tv.dim(1);
    for (int idx : ids)
        if (idx < 0 || idx >= K)
            throw ContractError("embed_rows: id " + std::to_string(idx) + " out of range");
    int b = static_cast<int>(ids.size());
    TensorT<T> out({b, d});
    for (int i = 0; i < b; ++i)
        std::copy(tv.ptr() + static_cast<int64_t>(ids[static_cast<size_t>(i)]) * d,
                  tv.ptr() + static_cast<int64_t>(ids[static_cast<size_t>(i)] + 1) * d,
                  out.ptr() + static_cast<int64_t>(i) * d);
    bool rg = t.requires_grad(table.id);
    int id = t.push(std::move(out), rg);
    if (rg) {
        int it = table.id;
        t.nodes[static_cast<size_t>(id)].backprop = [it, id, ids, d](TapeT<T>& tp) {
            const auto& g = tp.nodes[static_cast<size_t>(id)].grad;
            auto& gt = tp.grad_buf(it);
            for (size_t i = 0; i < ids.size(); ++i) {
                const T* src = g.ptr() + static_cast<int64_t>(i) * d;
                T* dst = gt.ptr() + static_cast<int64_t>(ids[i]) * d;
                for (int j = 0; j < d; ++j) dst[j] += src[j];
            }
        };
    }
    return {&t, id};
}

// ---------------------------------------------------------------------------
// Softmax, reductions, losses
// ---------------------------------------------------------------------------

// Numerically stable softmax along `axis` (max subtraction per slice).
template <typename T>
ValT<T> softmax(ValT<T> x, int axis) {
    auto& t = detail::tape_of(x);
    const auto& xv = t.value(x);
    int nd = xv.ndim();
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) throw ContractError("softmax: axis out of range");
    int L = xv.dim(axis);
    int64_t inner = 1, outer = 1;
    for (int i = axis + 1; i < nd; ++i) inner *= xv.dim(i);
    for (int i = 0; i < axis; ++i) outer *= xv.dim(i);

    TensorT<T> out(xv.shape);
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const T* p = xv.ptr() + o * L * inner + in;
            T* q = out.ptr() + o * L * inner + in;
            T mx = p[0];
            for (int l = 1; l < L; ++l) mx = std::max(mx, p[static_cast<int64_t>(l) * inner]);
            T sum = T(0);
            for (int l = 0; l < L; ++l) {
                T e = std::exp(p[static_cast<int64_t>(l) * inner] - mx);
                q[static_cast<int64_t>(l) * inner] = e;
                sum += e;
            }
            for (int l = 0; l < L; ++l) q[static_cast<int64_t>(l) * inner] /= sum;
        }
    }
    check_finite(out, "softmax");
    bool rg = t.requires_grad(x.id);
    int id = t.push(std::move(out), rg);
    if (rg) {
        int ix = x.id;
        t.nodes[static_cast<size_t>(id)].backprop = [ix, id, L, inner, outer](TapeT<T>& tp) {
            const auto& g = tp.nodes[static_cast<size_t>(id)].grad;
            const auto& y = tp.nodes[static_cast<size_t>(id)].value;
            auto& gx = tp.grad_buf(ix);
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t in = 0; in < inner; ++in) {
                    const T* yp = y.ptr() + o * L * inner + in;
                    const T* gp = g.ptr() + o * L * inner + in;
                    T* xp = gx.ptr() + o * L * inner + in;
                    T dot = T(0);
                    for (int l = 0; l < L; ++l)
                        dot += gp[static_cast<int64_t>(l) * inner] * yp[static_cast<int64_t>(l) * inner];
                    for (int l = 0; l < L; ++l)
                        xp[static_cast<int64_t>(l) * inner] +=
                            yp[static_cast<int64_t>(l) * inner] *
                            (gp[static_cast<int64_t>(l) * inner] - dot);
                }
        };
    }
    return {&t, id};
}

template <typename T>
ValT<T> sum_all(ValT<T> x) {
    auto& t = detail::tape_of(x);
    const auto& xv = t.value(x);
    T acc = T(0);
    for (int64_t i = 0; i < xv.numel(); ++i) acc += xv[i];
    TensorT<T> out(Shape{});
    out.data[0] = acc;
    check_finite(out, "sum");
    bool rg = t.requires_grad(x.id);
    int id = t.push(std::move(out), rg);
    if (rg) {
        int ix = x.id;
        t.nodes[static_cast<size_t>(id)].backprop = [ix, id](TapeT<T>& tp) {
            T gv = tp.nodes[static_cast<size_t>(id)].grad.data[0];
            auto& gx = tp.grad_buf(ix);
            for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += gv;
        };
    }
    return {&t, id};
}

template <typename T>
ValT<T> mean_all(ValT<T> x) {
    const auto& xv = detail::tape_of(x).value(x);
    return scale(sum_all(x), 1.0 / static_cast<double>(xv.numel()));
}

// Mean squared error between same-shaped tensors.
template <typename T>
ValT<T> mse(ValT<T> a, ValT<T> b) {
    auto d = sub(a, b);
    return mean_all(mul(d, d));
}

// Mean cross-entropy over rows of logits:[b,K] against integer labels.
template <typename T>
ValT<T> cross_entropy(ValT<T> logits, const std::vector<int>& labels) {
    auto& t = detail::tape_of(logits);
    const auto& lv = t.value(logits);
    if (lv.ndim() != 2) throw ShapeError("cross_entropy: logits must be 2-d");
    int b = lv.dim(0), K = lv.dim(1);
    if (static_cast<int>(labels.size()) != b)
        throw ContractError("cross_entropy: label count mismatch");
    for (int y : labels)
        if (y < 0 || y >= K) throw ContractError("cross_entropy: label out of range");
    T loss = T(0);
    for (int i = 0; i < b; ++i) {
        const T* row = lv.ptr() + static_cast<int64_t>(i) * K;
        T mx = row[0];
        for (int j = 1; j < K; ++j) mx = std::max(mx, row[j]);
        T lse = T(0);
        for (int j = 0; j < K; ++j) lse += std::exp(row[j] - mx);
        lse = mx + std::log(lse);
        loss += lse - row[labels[static_cast<size_t>(i)]];
    }
    loss /= static_cast<T>(b);
    TensorT<T> out(Shape{});
    out.data[0] = loss;
    check_finite(out, "cross_entropy");
    bool rg = t.requires_grad(logits.id);
    int id = t.push(std::move(out), rg);
    if (rg) {
        int il = logits.id;
        t.nodes[static_cast<size_t>(id)].backprop = [il, id, labels, b, K](TapeT<T>& tp) {
            T gv = tp.nodes[static_cast<size_t>(id)].grad.data[0];
            const auto& lv2 = tp.value(il);
            auto& gl = tp.grad_buf(il);
            for (int i = 0; i < b; ++i) {
                const T* row = lv2.ptr() + static_cast<int64_t>(i) * K;
                T* grow = gl.ptr() + static_cast<int64_t>(i) * K;
                T mx = row[0];
                for (int j = 1; j < K; ++j) mx = std::max(mx, row[j]);
                T sum = T(0);
                for (int j = 0; j < K; ++j) sum += std::exp(row[j] - mx);
                for (int j = 0; j < K; ++j) {
                    T p = std::exp(row[j] - mx) / sum;
                    T delta = (j == labels[static_cast<size_t>(i)]) ? T(1) : T(0);
                    grow[j] += gv * (p - delta) / static_cast<T>(b);
                }
            }
        };
    }
    return {&t, id};
}

// ---------------------------------------------------------------------------
// Fused scaled-dot-product attention
// ---------------------------------------------------------------------------

// psi:[b,N,di] (pixel embedding tokens), cond:[b,M,dc] or invalid for
// self-attention. Weights wq:[dk,di], wk/wv:[dk, dc or di]. Output [b,N,dk]
// = softmax(Q K^T / sqrt(dh)) V per sample, with dh the per-head width.
template <typename T>
ValT<T> attention(ValT<T> psi, ValT<T> cond, ValT<T> wq, ValT<T> wk, ValT<T> wv, int heads = 1) {
    auto& t = detail::tape_of(psi);
    detail::same_tape(psi, wq);
    detail::same_tape(psi, wk);
    detail::same_tape(psi, wv);
    const auto& pv = t.value(psi);
    if (pv.ndim() != 3) throw ShapeError("attention: psi must be [b,N,d]");
    int b = pv.dim(0), N = pv.dim(1), di = pv.dim(2);
    bool cross = cond.valid();
    if (cross) detail::same_tape(psi, cond);
    const TensorT<T>& cv = cross ? t.value(cond) : pv;
    if (cross && (cv.ndim() != 3 || cv.dim(0) != b))
        throw ShapeError("attention: cond must be [b,M,dc]");
    int M = cross ? cv.dim(1) : N;
    int dcx = cross ? cv.dim(2) : di;
    const auto& qv = t.value(wq);
    const auto& kv = t.value(wk);
    const auto& vv = t.value(wv);
    if (qv.ndim() != 2 || qv.dim(1) != di) throw ShapeError("attention: wq must be [dk,di]");
    int dk = qv.dim(0);
    if (kv.ndim() != 2 || kv.dim(0) != dk || kv.dim(1) != dcx)
        throw ShapeError("attention: wk extent mismatch");
    if (vv.ndim() != 2 || vv.dim(0) != dk || vv.dim(1) != dcx)
        throw ShapeError("attention: wv extent mismatch");
    if (heads < 1 || dk % heads != 0) throw ConfigError("attention: heads must divide dk");
    int dh = dk / heads;
    T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));

    // Q = psi wq^T, K = ctx wk^T, V = ctx wv^T, rows split across heads.
    std::vector<T> Q(static_cast<size_t>(b) * N * dk), Km(static_cast<size_t>(b) * M * dk),
        Vm(static_cast<size_t>(b) * M * dk);
    auto project = [&](const TensorT<T>& src, const TensorT<T>& wmat, std::vector<T>& dst, int rows,
                       int dsrc) {
        for (int n = 0; n < b; ++n)
            for (int r = 0; r < rows; ++r) {
                const T* s = src.ptr() + (static_cast<int64_t>(n) * rows + r) * dsrc;
                T* d = dst.data() + (static_cast<int64_t>(n) * rows + r) * dk;
                for (int j = 0; j < dk; ++j) {
                    const T* wrow = wmat.ptr() + static_cast<int64_t>(j) * dsrc;
                    T acc = T(0);
                    for (int p = 0; p < dsrc; ++p) acc += s[p] * wrow[p];
                    d[j] = acc;
                }
            }
    };
    project(pv, qv, Q, N, di);
    project(cv, kv, Km, M, dcx);
    project(cv, vv, Vm, M, dcx);

    // A[b,h,N,M] row-softmaxed attention weights, saved for backward.
    std::vector<T> A(static_cast<size_t>(b) * heads * N * M);
    TensorT<T> out({b, N, dk});
    for (int n = 0; n < b; ++n) {
        for (int hh = 0; hh < heads; ++hh) {
            for (int i = 0; i < N; ++i) {
                const T* qrow = Q.data() + (static_cast<int64_t>(n) * N + i) * dk + hh * dh;
                T* arow = A.data() + ((static_cast<int64_t>(n) * heads + hh) * N + i) * M;
                T mx = -std::numeric_limits<T>::infinity();
                for (int j = 0; j < M; ++j) {
                    const T* krow = Km.data() + (static_cast<int64_t>(n) * M + j) * dk + hh * dh;
                    T s = T(0);
                    for (int p = 0; p < dh; ++p) s += qrow[p] * krow[p];
                    s *= inv_sqrt;
                    arow[j] = s;
                    mx = std::max(mx, s);
                }
                T sum = T(0);
                for (int j = 0; j < M; ++j) {
                    arow[j] = std::exp(arow[j] - mx);
                    sum += arow[j];
                }
                T* orow = out.ptr() + (static_cast<int64_t>(n) * N + i) * dk + hh * dh;
                for (int j = 0; j < M; ++j) {
                    arow[j] /= sum;
                    const T* vrow = Vm.data() + (static_cast<int64_t>(n) * M + j) * dk + hh * dh;
                    for (int p = 0; p < dh; ++p) orow[p] += arow[j] * vrow[p];
                }
            }
        }
    }
    check_finite(out, "attention");

    bool rg = t.requires_grad(psi.id) || (cross && t.requires_grad(cond.id)) ||
              t.requires_grad(wq.id) || t.requires_grad(wk.id) || t.requires_grad(wv.id);
    int id = t.push(std::move(out), rg);
    if (rg) {
        int ip = psi.id, ic = cross ? cond.id : -1;
        int iq = wq.id, ik = wk.id, iv = wv.id;
        t.nodes[static_cast<size_t>(id)].backprop = [=, A = std::move(A), Q = std::move(Q),
                                                     Km = std::move(Km),
                                                     Vm = std::move(Vm)](TapeT<T>& tp) {
            const auto& g = tp.nodes[static_cast<size_t>(id)].grad;
            const auto& pv2 = tp.value(ip);
            const TensorT<T>& cv2 = (ic >= 0) ? tp.value(ic) : pv2;
            const auto& qv2 = tp.value(iq);
            const auto& kv2 = tp.value(ik);
            const auto& vv2 = tp.value(iv);
            bool want_dpsi = tp.requires_grad(ip);
            bool want_dcond = (ic >= 0) ? tp.requires_grad(ic) : want_dpsi;
            // dQ,dK,dV accumulated densely, then pushed through the projections.
            std::vector<T> dQ(static_cast<size_t>(b) * N * dk, T(0)),
                dK(static_cast<size_t>(b) * M * dk, T(0)), dV(static_cast<size_t>(b) * M * dk, T(0));
            std::vector<T> dS(static_cast<size_t>(M));
            for (int n = 0; n < b; ++n) {
                for (int hh = 0; hh < heads; ++hh) {
                    for (int i = 0; i < N; ++i) {
                        const T* grow = g.ptr() + (static_cast<int64_t>(n) * N + i) * dk + hh * dh;
                        const T* arow = A.data() + ((static_cast<int64_t>(n) * heads + hh) * N + i) * M;
                        // dA and softmax backward (within the row)
                        T dot = T(0);
                        for (int j = 0; j < M; ++j) {
                            const T* vrow = Vm.data() + (static_cast<int64_t>(n) * M + j) * dk + hh * dh;
                            T da = T(0);
                            for (int p = 0; p < dh; ++p) da += grow[p] * vrow[p];
                            dS[static_cast<size_t>(j)] = da;
                            dot += da * arow[j];
                        }
                        for (int j = 0; j < M; ++j) {
                            T ds = arow[j] * (dS[static_cast<size_t>(j)] - dot) * inv_sqrt;
                            const T* krow = Km.data() + (static_cast<int64_t>(n) * M + j) * dk + hh * dh;
                            const T* qrow = Q.data() + (static_cast<int64_t>(n) * N + i) * dk + hh * dh;
                            T* dqrow = dQ.data() + (static_cast<int64_t>(n) * N + i) * dk + hh * dh;
                            T* dkrow = dK.data() + (static_cast<int64_t>(n) * M + j) * dk + hh * dh;
                            T* dvrow = dV.data() + (static_cast<int64_t>(n) * M + j) * dk + hh * dh;
                            for (int p = 0; p < dh; ++p) {
                                dqrow[p] += ds * krow[p];
                                dkrow[p] += ds * qrow[p];
                                dvrow[p] += arow[j] * grow[p];
                            }
                        }
                    }
                }
            }
            // Push dQ through Q = psi wq^T; likewise for K, V.
            auto backproject = [&](const std::vector<T>& dproj, const TensorT<T>& src,
                                   const TensorT<T>& wmat, int iw, int isrc, bool want_dsrc,
                                   int rows, int dsrc) {
                bool want_dw = tp.requires_grad(iw);
                T* dw = want_dw ? tp.grad_buf(iw).ptr() : nullptr;
                T* dsv = want_dsrc ? tp.grad_buf(isrc).ptr() : nullptr;
                for (int n = 0; n < b; ++n)
                    for (int r = 0; r < rows; ++r) {
                        const T* dp = dproj.data() + (static_cast<int64_t>(n) * rows + r) * dk;
                        const T* s = src.ptr() + (static_cast<int64_t>(n) * rows + r) * dsrc;
                        for (int j = 0; j < dk; ++j) {
                            T dv2 = dp[j];
                            if (dv2 == T(0)) continue;
                            const T* wrow = wmat.ptr() + static_cast<int64_t>(j) * dsrc;
                            if (dw) {
                                T* dwrow = dw + static_cast<int64_t>(j) * dsrc;
                                for (int p = 0; p < dsrc; ++p) dwrow[p] += dv2 * s[p];
                            }
                            if (dsv) {
                                T* dsrow = dsv + (static_cast<int64_t>(n) * rows + r) * dsrc;
                                for (int p = 0; p < dsrc; ++p) dsrow[p] += dv2 * wrow[p];
                            }
                        }
                    }
            };
            backproject(dQ, pv2, qv2, iq, ip, want_dpsi, N, di);
            int ctx_id = (ic >= 0) ? ic : ip;
            backproject(dK, cv2, kv2, ik, ctx_id, want_dcond, M, dcx);
            backproject(dV, cv2, vv2, iv, ctx_id, want_dcond, M, dcx);
        };
    }
    return {&t, id};
}

// ---------------------------------------------------------------------------
// Gradient maps and per-sample gradients
// ---------------------------------------------------------------------------

struct GradMap {
    std::map<std::string, Tensor> grads;
    double global_norm = 0.0;

    // sqrt of the sum of squared entries, accumulated in key order.
    void compute_norm() {
        double acc = 0.0;
        for (const auto& [name, g] : grads)
            for (double v : g.data) acc += v * v;
        global_norm = std::sqrt(acc);
    }

    GradMap& scaled(double c) {
        for (auto& [name, g] : grads)
            for (auto& v : g.data) v *= c;
        global_norm *= std::abs(c);
        return *this;
    }
};

// Gradients for the bound trainable parameters; parameters the loss never
// reached get zero gradients. Keys are exactly the trainable names.
inline GradMap collect_grads(Tape& tape, const std::map<std::string, Val>& bound) {
    GradMap gm;
    for (const auto& [name, val] : bound) {
        if (!tape.requires_grad(val.id)) continue;
        const auto& node = tape.nodes[static_cast<size_t>(val.id)];
        gm.grads[name] = node.grad.empty() ? Tensor(node.value.shape) : node.grad;
    }
    gm.compute_norm();
    return gm;
}

// Builds the loss for one sample on a fresh tape. The builder must register
// every parameter it binds into the map (name -> leaf Val).
using SampleLossBuilder = std::function<Val(Tape&, std::map<std::string, Val>&, int)>;

// One independent backward pass per sample (microbatch size 1).
inline std::vector<GradMap> per_sample_grads(const SampleLossBuilder& build_loss,
                                             const std::vector<int>& sample_indices) {
    if (sample_indices.empty()) throw ContractError("per_sample_grads: empty batch");
    std::vector<GradMap> out;
    out.reserve(sample_indices.size());
    Tape tape;
    for (int idx : sample_indices) {
        tape.clear();
        std::map<std::string, Val> bound;
        Val loss = build_loss(tape, bound, idx);
        tape.backward(loss);
        out.push_back(collect_grads(tape, bound));
    }
    return out;
}

}  // namespace privdiff
