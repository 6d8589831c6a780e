#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "lcanet/tensor.hpp"

namespace lcanet {

template <typename S>
class Tape;

/// Handle to a node on a tape.
template <typename S>
struct Val {
    Tape<S>* tape = nullptr;
    std::int32_t id = -1;

    const Tensor<S>& value() const { return tape->value(id); }
    const Shape& shape() const { return tape->value(id).shape; }
    bool valid() const { return tape != nullptr && id >= 0; }
};

/// Append-only record of a computation. Node inputs always precede the
/// node itself, so reverse iteration is a valid reverse-topological order.
template <typename S>
class Tape {
public:
    using BackFn = std::function<void(Tape&, std::int32_t)>;

    Val<S> leaf(Tensor<S> t) { return {this, push(std::move(t), nullptr)}; }

    std::int32_t push(Tensor<S> value, BackFn back) {
        nodes_.push_back(Node{std::move(value), std::move(back)});
        return static_cast<std::int32_t>(nodes_.size() - 1);
    }

    const Tensor<S>& value(std::int32_t id) const { return nodes_[static_cast<std::size_t>(id)].value; }

    std::size_t size() const { return nodes_.size(); }

    /// Gradient buffer for a node, created zero-filled on first use.
    Tensor<S>& grad_buf(std::int32_t id) {
        auto& g = grads_[static_cast<std::size_t>(id)];
        if (g.data.empty()) g = Tensor<S>::zeros(nodes_[static_cast<std::size_t>(id)].value.shape);
        return g;
    }

    bool has_grad(std::int32_t id) const {
        return id < static_cast<std::int32_t>(grads_.size()) &&
               !grads_[static_cast<std::size_t>(id)].data.empty();
    }

    /// Gradient of the last backward() root w.r.t. node `id` (zeros if the
    /// node does not influence the root).
    Tensor<S> grad(std::int32_t id) const {
        if (has_grad(id)) return grads_[static_cast<std::size_t>(id)];
        return Tensor<S>::zeros(nodes_[static_cast<std::size_t>(id)].value.shape);
    }

    /// Reverse-mode accumulation from a scalar root.
    void backward(Val<S> root) {
        if (root.tape != this) throw Error("backward: root belongs to another tape");
        const auto& rv = value(root.id);
        if (rv.size() != 1) throw ShapeError("backward: root must be scalar, got " + shape_str(rv.shape));
        grads_.assign(nodes_.size(), Tensor<S>());
        grad_buf(root.id).data[0] = S(1);
        for (std::int32_t i = root.id; i >= 0; --i) {
            auto& node = nodes_[static_cast<std::size_t>(i)];
            if (node.back && has_grad(i)) node.back(*this, i);
        }
    }

private:
    struct Node {
        Tensor<S> value;
        BackFn back;
    };
    std::vector<Node> nodes_;
    std::vector<Tensor<S>> grads_;
};

namespace detail {

// C += A * B, shapes (m,k)x(k,n).
template <typename S>
void mm_nn_acc(const S* a, const S* b, S* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        S* crow = c + i * n;
        const S* arow = a + i * k;
        for (std::int64_t p = 0; p < k; ++p) {
            const S av = arow[p];
            const S* brow = b + p * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C += A * B^T, shapes (m,k)x(n,k).
template <typename S>
void mm_nt_acc(const S* a, const S* b, S* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const S* arow = a + i * k;
        S* crow = c + i * n;
        for (std::int64_t j = 0; j < n; ++j) {
            const S* brow = b + j * k;
            S acc = S(0);
            for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C += A^T * B, shapes (k,m)x(k,n).
template <typename S>
void mm_tn_acc(const S* a, const S* b, S* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t p = 0; p < k; ++p) {
        const S* arow = a + p * m;
        const S* brow = b + p * n;
        for (std::int64_t i = 0; i < m; ++i) {
            const S av = arow[i];
            S* crow = c + i * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename S>
void require_2d(const Tensor<S>& t, const char* op) {
    if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise operations
// ---------------------------------------------------------------------------

template <typename S>
Val<S> add(Val<S> a, Val<S> b) {
    check_same_shape(a.value(), b.value(), "add");
    Tensor<S> out = a.value();
    const auto& bv = b.value();
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    auto ia = a.id, ib = b.id;
    return {a.tape, a.tape->push(std::move(out), [ia, ib](Tape<S>& t, std::int32_t self) {
                const auto& g = t.grad_buf(self);
                auto& ga = t.grad_buf(ia);
                auto& gb = t.grad_buf(ib);
                for (std::int64_t i = 0; i < g.size(); ++i) {
                    ga[i] += g[i];
                    gb[i] += g[i];
                }
            })};
}

template <typename S>
Val<S> mul(Val<S> a, Val<S> b) {
    check_same_shape(a.value(), b.value(), "mul");
    Tensor<S> out = a.value();
    const auto& bv = b.value();
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    auto ia = a.id, ib = b.id;
    return {a.tape, a.tape->push(std::move(out), [ia, ib](Tape<S>& t, std::int32_t self) {
                const auto& g = t.grad_buf(self);
                const auto& av = t.value(ia);
                const auto& bv2 = t.value(ib);
                auto& ga = t.grad_buf(ia);
                auto& gb = t.grad_buf(ib);
                for (std::int64_t i = 0; i < g.size(); ++i) {
                    ga[i] += g[i] * bv2[i];
                    gb[i] += g[i] * av[i];
                }
            })};
}

/// alpha * a + beta, elementwise with scalar constants.
template <typename S>
Val<S> axpb(Val<S> a, S alpha, S beta) {
    Tensor<S> out = a.value();
    for (auto& v : out.data) v = alpha * v + beta;
    auto ia = a.id;
    return {a.tape, a.tape->push(std::move(out), [ia, alpha](Tape<S>& t, std::int32_t self) {
                const auto& g = t.grad_buf(self);
                auto& ga = t.grad_buf(ia);
                for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += alpha * g[i];
            })};
}

template <typename S>
Val<S> scale(Val<S> a, S alpha) {
    return axpb(a, alpha, S(0));
}

template <typename S>
Val<S> sub(Val<S> a, Val<S> b) {
    return add(a, scale(b, S(-1)));
}

template <typename S>
Val<S> operator+(Val<S> a, Val<S> b) { return add(a, b); }
template <typename S>
Val<S> operator*(Val<S> a, Val<S> b) { return mul(a, b); }
template <typename S>
Val<S> operator-(Val<S> a, Val<S> b) { return sub(a, b); }

template <typename S>
Val<S> sigmoid(Val<S> a) {
    Tensor<S> out = a.value();
    for (auto& v : out.data) {
        // Split by sign so exp never overflows.
        if (v >= S(0)) {
            v = S(1) / (S(1) + std::exp(-v));
        } else {
            const S e = std::exp(v);
            v = e / (S(1) + e);
        }
    }
    auto ia = a.id;
    return {a.tape, a.tape->push(std::move(out), [ia](Tape<S>& t, std::int32_t self) {
                const auto& g = t.grad_buf(self);
                const auto& y = t.value(self);
                auto& ga = t.grad_buf(ia);
                for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (S(1) - y[i]);
            })};
}

template <typename S>
Val<S> tanh(Val<S> a) {
    Tensor<S> out = a.value();
    for (auto& v : out.data) v = std::tanh(v);
    auto ia = a.id;
    return {a.tape, a.tape->push(std::move(out), [ia](Tape<S>& t, std::int32_t self) {
                const auto& g = t.grad_buf(self);
                const auto& y = t.value(self);
                auto& ga = t.grad_buf(ia);
                for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (S(1) - y[i] * y[i]);
            })};
}

template <typename S>
Val<S> relu(Val<S> a) {
    Tensor<S> out = a.value();
    for (auto& v : out.data) v = v > S(0) ? v : S(0);
    auto ia = a.id;
    return {a.tape, a.tape->push(std::move(out), [ia](Tape<S>& t, std::int32_t self) {
                const auto& g = t.grad_buf(self);
                const auto& x = t.value(ia);
                auto& ga = t.grad_buf(ia);
                for (std::int64_t i = 0; i < g.size(); ++i)
                    if (x[i] > S(0)) ga[i] += g[i];
            })};
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Max-shifted softmax along `axis`. Throws NumericError on non-finite input.
template <typename S>
Val<S> softmax(Val<S> a, int axis) {
    const auto& x = a.value();
    if (axis < 0 || axis >= x.rank())
        throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape));
    for (auto v : x.data)
        if (!std::isfinite(static_cast<double>(v))) throw NumericError("softmax: non-finite input");

    const std::int64_t n = x.shape[static_cast<std::size_t>(axis)];
    std::int64_t inner = 1, outer = 1;
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.shape[static_cast<std::size_t>(i)];
    for (int i = 0; i < axis; ++i) outer *= x.shape[static_cast<std::size_t>(i)];

    Tensor<S> out(x.shape);
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * n * inner + in;
            S mx = x[base];
            for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, x[base + i * inner]);
            S sum = S(0);
            for (std::int64_t i = 0; i < n; ++i) {
                const S e = std::exp(x[base + i * inner] - mx);
                out[base + i * inner] = e;
                sum += e;
            }
            for (std::int64_t i = 0; i < n; ++i) out[base + i * inner] /= sum;
        }
    }
    auto ia = a.id;
    return {a.tape,
            a.tape->push(std::move(out), [ia, n, inner, outer](Tape<S>& t, std::int32_t self) {
                const auto& g = t.grad_buf(self);
                const auto& y = t.value(self);
                auto& ga = t.grad_buf(ia);
                for (std::int64_t o = 0; o < outer; ++o) {
                    for (std::int64_t in = 0; in < inner; ++in) {
                        const std::int64_t base = o * n * inner + in;
                        S dot = S(0);
                        for (std::int64_t i = 0; i < n; ++i) dot += g[base + i * inner] * y[base + i * inner];
                        for (std::int64_t i = 0; i < n; ++i)
                            ga[base + i * inner] += y[base + i * inner] * (g[base + i * inner] - dot);
                    }
                }
            })};
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <typename S>
Val<S> matmul(Val<S> a, Val<S> b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    detail::require_2d(av, "matmul");
    detail::require_2d(bv, "matmul");
    if (av.cols() != bv.rows())
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(av.shape) + " vs " +
                         shape_str(bv.shape));
    const std::int64_t m = av.rows(), k = av.cols(), n = bv.cols();
    Tensor<S> out({m, n});
    detail::mm_nn_acc(av.data.data(), bv.data.data(), out.data.data(), m, k, n);
    auto ia = a.id, ib = b.id;
    return {a.tape, a.tape->push(std::move(out), [ia, ib, m, k, n](Tape<S>& t, std::int32_t self) {
                const auto& g = t.grad_buf(self);
                const auto& av2 = t.value(ia);
                const auto& bv2 = t.value(ib);
                auto& ga = t.grad_buf(ia);
                auto& gb = t.grad_buf(ib);
                detail::mm_nt_acc(g.data.data(), bv2.data.data(), ga.data.data(), m, n, k);
                detail::mm_tn_acc(av2.data.data(), g.data.data(), gb.data.data(), k, m, n);
            })};
}

/// y = x * W^T (+ bias broadcast over rows). W is (out, in), bias is (out).
template <typename S>
Val<S> linear(Val<S> x, Val<S> w) {
    const auto& xv = x.value();
    const auto& wv = w.value();
    detail::require_2d(xv, "linear");
    detail::require_2d(wv, "linear");
    if (xv.cols() != wv.cols())
        throw ShapeError("linear: input width " + shape_str(xv.shape) + " does not match weight " +
                         shape_str(wv.shape));
    const std::int64_t m = xv.rows(), k = xv.cols(), n = wv.rows();
    Tensor<S> out({m, n});
    detail::mm_nt_acc(xv.data.data(), wv.data.data(), out.data.data(), m, k, n);
    auto ix = x.id, iw = w.id;
    return {x.tape, x.tape->push(std::move(out), [ix, iw, m, k, n](Tape<S>& t, std::int32_t self) {
                const auto& g = t.grad_buf(self);
                const auto& xv2 = t.value(ix);
                const auto& wv2 = t.value(iw);
                auto& gx = t.grad_buf(ix);
                auto& gw = t.grad_buf(iw);
                detail::mm_nn_acc(g.data.data(), wv2.data.data(), gx.data.data(), m, n, k);
                detail::mm_tn_acc(g.data.data(), xv2.data.data(), gw.data.data(), n, m, k);
            })};
}

/// Adds a length-d vector to every row of an (m, d) matrix.
template <typename S>
Val<S> add_rowvec(Val<S> m, Val<S> v) {
    const auto& mv = m.value();
    const auto& vv = v.value();
    detail::require_2d(mv, "add_rowvec");
    if (vv.size() != mv.cols())
        throw ShapeError("add_rowvec: vector " + shape_str(vv.shape) + " vs matrix " + shape_str(mv.shape));
    Tensor<S> out = mv;
    const std::int64_t rows = mv.rows(), cols = mv.cols();
    for (std::int64_t i = 0; i < rows; ++i)
        for (std::int64_t j = 0; j < cols; ++j) out[i * cols + j] += vv[j];
    auto im = m.id, iv = v.id;
    return {m.tape, m.tape->push(std::move(out), [im, iv, rows, cols](Tape<S>& t, std::int32_t self) {
                const auto& g = t.grad_buf(self);
                auto& gm = t.grad_buf(im);
                auto& gv = t.grad_buf(iv);
                for (std::int64_t i = 0; i < rows; ++i)
                    for (std::int64_t j = 0; j < cols; ++j) {
                        gm[i * cols + j] += g[i * cols + j];
                        gv[j] += g[i * cols + j];
                    }
            })};
}

template <typename S>
Val<S> linear(Val<S> x, Val<S> w, Val<S> b) {
    return add_rowvec(linear(x, w), b);
}

// ---------------------------------------------------------------------------
// Convolution and pooling
// ---------------------------------------------------------------------------

struct Dims3 {
    std::int64_t t = 1, h = 1, w = 1;
};

inline std::int64_t conv_out_dim(std::int64_t in, std::int64_t k, std::int64_t s, std::int64_t p) {
    return (in + 2 * p - k) / s + 1;
}

/// 3-D convolution. x is (C_in, T, H, W), kernels are (C_out, C_in, kt, kh, kw),
/// zero padding; out_dim = floor((in + 2p - k)/s) + 1 per axis.
template <typename S>
Val<S> conv3d(Val<S> x, Val<S> kernels, Dims3 stride, Dims3 pad) {
    const auto& xv = x.value();
    const auto& kv = kernels.value();
    if (xv.rank() != 4) throw ShapeError("conv3d: input must be (C,T,H,W), got " + shape_str(xv.shape));
    if (kv.rank() != 5)
        throw ShapeError("conv3d: kernels must be (Co,Ci,kt,kh,kw), got " + shape_str(kv.shape));
    if (kv.shape[1] != xv.shape[0])
        throw ShapeError("conv3d: kernel channels " + shape_str(kv.shape) + " do not match input " +
                         shape_str(xv.shape));
    if (stride.t <= 0 || stride.h <= 0 || stride.w <= 0)
        throw ShapeError("conv3d: stride must be positive");
    const std::int64_t Ci = xv.shape[0], T = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    const std::int64_t Co = kv.shape[0], kt = kv.shape[2], kh = kv.shape[3], kw = kv.shape[4];
    if (kt > T + 2 * pad.t || kh > H + 2 * pad.h || kw > W + 2 * pad.w)
        throw ShapeError("conv3d: kernel " + shape_str(kv.shape) + " larger than padded input " +
                         shape_str(xv.shape));
    const std::int64_t To = conv_out_dim(T, kt, stride.t, pad.t);
    const std::int64_t Ho = conv_out_dim(H, kh, stride.h, pad.h);
    const std::int64_t Wo = conv_out_dim(W, kw, stride.w, pad.w);

    Tensor<S> out({Co, To, Ho, Wo});
    const S* xp = xv.data.data();
    const S* kp = kv.data.data();
    S* op = out.data.data();
    for (std::int64_t co = 0; co < Co; ++co) {
        for (std::int64_t ci = 0; ci < Ci; ++ci) {
            for (std::int64_t dt = 0; dt < kt; ++dt)
                for (std::int64_t dh = 0; dh < kh; ++dh)
                    for (std::int64_t dw = 0; dw < kw; ++dw) {
                        const S kval = kp[(((co * Ci + ci) * kt + dt) * kh + dh) * kw + dw];
                        if (kval == S(0)) continue;
                        for (std::int64_t to = 0; to < To; ++to) {
                            const std::int64_t ti = to * stride.t - pad.t + dt;
                            if (ti < 0 || ti >= T) continue;
                            for (std::int64_t ho = 0; ho < Ho; ++ho) {
                                const std::int64_t hi = ho * stride.h - pad.h + dh;
                                if (hi < 0 || hi >= H) continue;
                                S* orow = op + ((co * To + to) * Ho + ho) * Wo;
                                const S* xrow = xp + ((ci * T + ti) * H + hi) * W;
                                for (std::int64_t wo = 0; wo < Wo; ++wo) {
                                    const std::int64_t wi = wo * stride.w - pad.w + dw;
                                    if (wi < 0 || wi >= W) continue;
                                    orow[wo] += kval * xrow[wi];
                                }
                            }
                        }
                    }
        }
    }
    auto ix = x.id, ik = kernels.id;
    return {x.tape, x.tape->push(std::move(out), [ix, ik, stride, pad](Tape<S>& t, std::int32_t self) {
                const auto& g = t.grad_buf(self);
                const auto& xv2 = t.value(ix);
                const auto& kv2 = t.value(ik);
                auto& gx = t.grad_buf(ix);
                auto& gk = t.grad_buf(ik);
                const std::int64_t Ci2 = xv2.shape[0], T2 = xv2.shape[1], H2 = xv2.shape[2],
                                   W2 = xv2.shape[3];
                const std::int64_t Co2 = kv2.shape[0], kt2 = kv2.shape[2], kh2 = kv2.shape[3],
                                   kw2 = kv2.shape[4];
                const std::int64_t To2 = g.shape[1], Ho2 = g.shape[2], Wo2 = g.shape[3];
                for (std::int64_t co = 0; co < Co2; ++co)
                    for (std::int64_t ci = 0; ci < Ci2; ++ci)
                        for (std::int64_t dt = 0; dt < kt2; ++dt)
                            for (std::int64_t dh = 0; dh < kh2; ++dh)
                                for (std::int64_t dw = 0; dw < kw2; ++dw) {
                                    const std::int64_t kidx =
                                        (((co * Ci2 + ci) * kt2 + dt) * kh2 + dh) * kw2 + dw;
                                    const S kval = kv2[kidx];
                                    S kgrad = S(0);
                                    for (std::int64_t to = 0; to < To2; ++to) {
                                        const std::int64_t ti = to * stride.t - pad.t + dt;
                                        if (ti < 0 || ti >= T2) continue;
                                        for (std::int64_t ho = 0; ho < Ho2; ++ho) {
                                            const std::int64_t hi = ho * stride.h - pad.h + dh;
                                            if (hi < 0 || hi >= H2) continue;
                                            const S* grow =
                                                g.data.data() + ((co * To2 + to) * Ho2 + ho) * Wo2;
                                            const S* xrow =
                                                xv2.data.data() + ((ci * T2 + ti) * H2 + hi) * W2;
                                            S* gxrow =
                                                gx.data.data() + ((ci * T2 + ti) * H2 + hi) * W2;
                                            for (std::int64_t wo = 0; wo < Wo2; ++wo) {
                                                const std::int64_t wi = wo * stride.w - pad.w + dw;
                                                if (wi < 0 || wi >= W2) continue;
                                                kgrad += xrow[wi] * grow[wo];
                                                gxrow[wi] += kval * grow[wo];
                                            }
                                        }
                                    }
                                    gk[kidx] += kgrad;
                                }
            })};
}

/// Max pooling over (C, T, H, W), no padding; gradient routes to the argmax,
/// ties broken toward the lowest flat index.
template <typename S>
Val<S> maxpool3d(Val<S> x, Dims3 window, Dims3 stride) {
    const auto& xv = x.value();
    if (xv.rank() != 4) throw ShapeError("maxpool3d: input must be (C,T,H,W), got " + shape_str(xv.shape));
    if (window.t <= 0 || window.h <= 0 || window.w <= 0)
        throw ShapeError("maxpool3d: window must be positive");
    if (stride.t <= 0 || stride.h <= 0 || stride.w <= 0)
        throw ShapeError("maxpool3d: stride must be positive");
    const std::int64_t C = xv.shape[0], T = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    if (window.t > T || window.h > H || window.w > W)
        throw ShapeError("maxpool3d: window larger than input axis, input " + shape_str(xv.shape));
    const std::int64_t To = (T - window.t) / stride.t + 1;
    const std::int64_t Ho = (H - window.h) / stride.h + 1;
    const std::int64_t Wo = (W - window.w) / stride.w + 1;

    Tensor<S> out({C, To, Ho, Wo});
    std::vector<std::int64_t> argmax(static_cast<std::size_t>(out.size()));
    std::int64_t oi = 0;
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t to = 0; to < To; ++to)
            for (std::int64_t ho = 0; ho < Ho; ++ho)
                for (std::int64_t wo = 0; wo < Wo; ++wo, ++oi) {
                    S best = -std::numeric_limits<S>::infinity();
                    std::int64_t best_idx = -1;
                    for (std::int64_t dt = 0; dt < window.t; ++dt)
                        for (std::int64_t dh = 0; dh < window.h; ++dh)
                            for (std::int64_t dw = 0; dw < window.w; ++dw) {
                                const std::int64_t ti = to * stride.t + dt;
                                const std::int64_t hi = ho * stride.h + dh;
                                const std::int64_t wi = wo * stride.w + dw;
                                const std::int64_t idx = ((c * T + ti) * H + hi) * W + wi;
                                if (xv[idx] > best) {
                                    best = xv[idx];
                                    best_idx = idx;
                                }
                            }
                    out[oi] = best;
                    argmax[static_cast<std::size_t>(oi)] = best_idx;
                }
    auto ixid = x.id;
    return {x.tape,
            x.tape->push(std::move(out), [ixid, argmax = std::move(argmax)](Tape<S>& t, std::int32_t self) {
                const auto& g = t.grad_buf(self);
                auto& gx = t.grad_buf(ixid);
                for (std::int64_t i = 0; i < g.size(); ++i) gx[argmax[static_cast<std::size_t>(i)]] += g[i];
            })};
}

// ---------------------------------------------------------------------------
// Batch normalization and dropout
// ---------------------------------------------------------------------------

template <typename S>
struct BatchMoments {
    Tensor<S> mean;  // per channel
    Tensor<S> var;   // per channel, biased
};

/// Training-mode batch norm over a (C, T, H, W) tensor: statistics per channel
/// across all remaining axes. Writes batch moments to `moments` when non-null.
template <typename S>
Val<S> batchnorm_train(Val<S> x, Val<S> gamma, Val<S> beta, S eps, BatchMoments<S>* moments = nullptr) {
    const auto& xv = x.value();
    if (xv.rank() != 4) throw ShapeError("batchnorm: input must be (C,T,H,W), got " + shape_str(xv.shape));
    const std::int64_t C = xv.shape[0];
    const std::int64_t N = xv.size() / C;
    if (gamma.value().size() != C || beta.value().size() != C)
        throw ShapeError("batchnorm: gamma/beta must have one entry per channel");

    Tensor<S> mean({C}), var({C}), inv_std({C});
    for (std::int64_t c = 0; c < C; ++c) {
        const S* xc = xv.data.data() + c * N;
        S m = S(0);
        for (std::int64_t i = 0; i < N; ++i) m += xc[i];
        m /= static_cast<S>(N);
        S v = S(0);
        for (std::int64_t i = 0; i < N; ++i) {
            const S d = xc[i] - m;
            v += d * d;
        }
        v /= static_cast<S>(N);
        mean[c] = m;
        var[c] = v;
        inv_std[c] = S(1) / std::sqrt(v + eps);
    }
    if (moments) {
        moments->mean = mean;
        moments->var = var;
    }

    Tensor<S> out(xv.shape);
    const auto& gv = gamma.value();
    const auto& bv = beta.value();
    for (std::int64_t c = 0; c < C; ++c) {
        const S* xc = xv.data.data() + c * N;
        S* oc = out.data.data() + c * N;
        const S m = mean[c], is = inv_std[c], ga = gv[c], be = bv[c];
        for (std::int64_t i = 0; i < N; ++i) oc[i] = ga * (xc[i] - m) * is + be;
    }
    auto ix = x.id, ig = gamma.id, ib = beta.id;
    return {x.tape, x.tape->push(std::move(out), [ix, ig, ib, mean = std::move(mean),
                                                   inv_std = std::move(inv_std), C,
                                                   N](Tape<S>& t, std::int32_t self) {
                const auto& g = t.grad_buf(self);
                const auto& xv2 = t.value(ix);
                const auto& gv2 = t.value(ig);
                auto& gx = t.grad_buf(ix);
                auto& gg = t.grad_buf(ig);
                auto& gb = t.grad_buf(ib);
                for (std::int64_t c = 0; c < C; ++c) {
                    const S* xc = xv2.data.data() + c * N;
                    const S* gc = g.data.data() + c * N;
                    S* gxc = gx.data.data() + c * N;
                    const S m = mean[c], is = inv_std[c];
                    S sum_g = S(0), sum_gxh = S(0);
                    for (std::int64_t i = 0; i < N; ++i) {
                        const S xh = (xc[i] - m) * is;
                        sum_g += gc[i];
                        sum_gxh += gc[i] * xh;
                    }
                    gb[c] += sum_g;
                    gg[c] += sum_gxh;
                    const S ga = gv2[c];
                    const S inv_n = S(1) / static_cast<S>(N);
                    for (std::int64_t i = 0; i < N; ++i) {
                        const S xh = (xc[i] - m) * is;
                        gxc[i] += ga * is * (gc[i] - sum_g * inv_n - xh * sum_gxh * inv_n);
                    }
                }
            })};
}

/// Inference-mode batch norm against fixed running statistics.
template <typename S>
Val<S> batchnorm_eval(Val<S> x, Val<S> gamma, Val<S> beta, const Tensor<S>& run_mean,
                      const Tensor<S>& run_var, S eps) {
    const auto& xv = x.value();
    if (xv.rank() != 4) throw ShapeError("batchnorm: input must be (C,T,H,W), got " + shape_str(xv.shape));
    const std::int64_t C = xv.shape[0];
    const std::int64_t N = xv.size() / C;
    if (run_mean.size() != C || run_var.size() != C)
        throw ShapeError("batchnorm: running stats must have one entry per channel");

    Tensor<S> inv_std({C});
    for (std::int64_t c = 0; c < C; ++c) inv_std[c] = S(1) / std::sqrt(run_var[c] + eps);

    Tensor<S> out(xv.shape);
    const auto& gv = gamma.value();
    const auto& bv = beta.value();
    for (std::int64_t c = 0; c < C; ++c) {
        const S* xc = xv.data.data() + c * N;
        S* oc = out.data.data() + c * N;
        const S m = run_mean[c], is = inv_std[c], ga = gv[c], be = bv[c];
        for (std::int64_t i = 0; i < N; ++i) oc[i] = ga * (xc[i] - m) * is + be;
    }
    auto ix = x.id, ig = gamma.id, ib = beta.id;
    return {x.tape, x.tape->push(std::move(out), [ix, ig, ib, mean = run_mean,
                                                   inv_std = std::move(inv_std), C,
                                                   N](Tape<S>& t, std::int32_t self) {
                const auto& g = t.grad_buf(self);
                const auto& xv2 = t.value(ix);
                const auto& gv2 = t.value(ig);
                auto& gx = t.grad_buf(ix);
                auto& gg = t.grad_buf(ig);
                auto& gb = t.grad_buf(ib);
                for (std::int64_t c = 0; c < C; ++c) {
                    const S* xc = xv2.data.data() + c * N;
                    const S* gc = g.data.data() + c * N;
                    S* gxc = gx.data.data() + c * N;
                    const S m = mean[c], is = inv_std[c], ga = gv2[c];
                    for (std::int64_t i = 0; i < N; ++i) {
                        gb[c] += gc[i];
                        gg[c] += gc[i] * (xc[i] - m) * is;
                        gxc[i] += gc[i] * ga * is;
                    }
                }
            })};
}

/// Inverted-scaling dropout; the mask is sampled here and kept for backward.
template <typename S>
Val<S> dropout(Val<S> x, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) throw Error("dropout: rate must be in [0, 1)");
    const auto& xv = x.value();
    Tensor<S> mask(xv.shape);
    const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
    for (auto& m : mask.data) m = rng.uniform() < rate ? S(0) : keep_scale;
    Tensor<S> out = xv;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
    auto ix = x.id;
    return {x.tape, x.tape->push(std::move(out), [ix, mask = std::move(mask)](Tape<S>& t, std::int32_t self) {
                const auto& g = t.grad_buf(self);
                auto& gx = t.grad_buf(ix);
                for (std::int64_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
            })};
}

// ---------------------------------------------------------------------------
// Reductions and layout
// ---------------------------------------------------------------------------

/// Sum of all elements; result has shape (1).
template <typename S>
Val<S> sum_all(Val<S> a) {
    const auto& av = a.value();
    S s = S(0);
    for (auto v : av.data) s += v;
    auto ia = a.id;
    return {a.tape, a.tape->push(Tensor<S>({1}, {s}), [ia](Tape<S>& t, std::int32_t self) {
                const S g = t.grad_buf(self)[0];
                auto& ga = t.grad_buf(ia);
                for (auto& v : ga.data) v += g;
            })};
}

/// -log(y[idx]) for a distribution row; shape (1).
template <typename S>
Val<S> neg_log_pick(Val<S> y, std::int64_t idx) {
    const auto& yv = y.value();
    if (idx < 0 || idx >= yv.size()) throw ShapeError("neg_log_pick: index out of range");
    auto iy = y.id;
    return {y.tape, y.tape->push(Tensor<S>({1}, {static_cast<S>(-std::log(static_cast<double>(yv[idx])))}),
                                 [iy, idx](Tape<S>& t, std::int32_t self) {
                                     const S g = t.grad_buf(self)[0];
                                     const auto& yv2 = t.value(iy);
                                     t.grad_buf(iy)[idx] += -g / yv2[idx];
                                 })};
}

template <typename S>
Val<S> transpose(Val<S> a) {
    const auto& av = a.value();
    detail::require_2d(av, "transpose");
    const std::int64_t m = av.rows(), n = av.cols();
    Tensor<S> out({n, m});
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
    auto ia = a.id;
    return {a.tape, a.tape->push(std::move(out), [ia, m, n](Tape<S>& t, std::int32_t self) {
                const auto& g = t.grad_buf(self);
                auto& ga = t.grad_buf(ia);
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
            })};
}

template <typename S>
Val<S> concat_cols(Val<S> a, Val<S> b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    detail::require_2d(av, "concat_cols");
    detail::require_2d(bv, "concat_cols");
    if (av.rows() != bv.rows())
        throw ShapeError("concat_cols: row counts differ, " + shape_str(av.shape) + " vs " +
                         shape_str(bv.shape));
    const std::int64_t m = av.rows(), p = av.cols(), q = bv.cols();
    Tensor<S> out({m, p + q});
    for (std::int64_t i = 0; i < m; ++i) {
        std::copy_n(av.data.data() + i * p, p, out.data.data() + i * (p + q));
        std::copy_n(bv.data.data() + i * q, q, out.data.data() + i * (p + q) + p);
    }
    auto ia = a.id, ib = b.id;
    return {a.tape, a.tape->push(std::move(out), [ia, ib, m, p, q](Tape<S>& t, std::int32_t self) {
                const auto& g = t.grad_buf(self);
                auto& ga = t.grad_buf(ia);
                auto& gb = t.grad_buf(ib);
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < p + q; ++j) {
                        const S gv = g[i * (p + q) + j];
                        if (j < p)
                            ga[i * p + j] += gv;
                        else
                            gb[i * q + (j - p)] += gv;
                    }
            })};
}

/// Stacks T row vectors (each 1 x d) into a (T, d) matrix.
template <typename S>
Val<S> stack_rows(const std::vector<Val<S>>& rows) {
    if (rows.empty()) throw ShapeError("stack_rows: empty sequence");
    Tape<S>* tape = rows[0].tape;
    const std::int64_t d = rows[0].value().size();
    const std::int64_t T = static_cast<std::int64_t>(rows.size());
    Tensor<S> out({T, d});
    std::vector<std::int32_t> ids;
    ids.reserve(rows.size());
    for (std::int64_t i = 0; i < T; ++i) {
        const auto& rv = rows[static_cast<std::size_t>(i)].value();
        if (rv.size() != d) throw ShapeError("stack_rows: inconsistent row widths");
        std::copy_n(rv.data.data(), d, out.data.data() + i * d);
        ids.push_back(rows[static_cast<std::size_t>(i)].id);
    }
    return {tape, tape->push(std::move(out), [ids = std::move(ids), d](Tape<S>& t, std::int32_t self) {
                const auto& g = t.grad_buf(self);
                for (std::size_t i = 0; i < ids.size(); ++i) {
                    auto& gr = t.grad_buf(ids[i]);
                    for (std::int64_t j = 0; j < d; ++j) gr[j] += g[static_cast<std::int64_t>(i) * d + j];
                }
            })};
}

/// Row i of a (T, d) matrix as a (1, d) value.
template <typename S>
Val<S> slice_row(Val<S> m, std::int64_t row) {
    const auto& mv = m.value();
    detail::require_2d(mv, "slice_row");
    if (row < 0 || row >= mv.rows()) throw ShapeError("slice_row: row index out of range");
    const std::int64_t d = mv.cols();
    Tensor<S> out({1, d});
    std::copy_n(mv.data.data() + row * d, d, out.data.data());
    auto im = m.id;
    return {m.tape, m.tape->push(std::move(out), [im, row, d](Tape<S>& t, std::int32_t self) {
                const auto& g = t.grad_buf(self);
                auto& gm = t.grad_buf(im);
                for (std::int64_t j = 0; j < d; ++j) gm[row * d + j] += g[j];
            })};
}

/// (C, T, H, W) -> (T, C*H*W): per-frame flatten in C, H, W order.
template <typename S>
Val<S> frames_to_rows(Val<S> x) {
    const auto& xv = x.value();
    if (xv.rank() != 4) throw ShapeError("frames_to_rows: input must be (C,T,H,W), got " + shape_str(xv.shape));
    const std::int64_t C = xv.shape[0], T = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    const std::int64_t HW = H * W;
    Tensor<S> out({T, C * HW});
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t t = 0; t < T; ++t)
            std::copy_n(xv.data.data() + (c * T + t) * HW, HW, out.data.data() + t * C * HW + c * HW);
    auto ix = x.id;
    return {x.tape, x.tape->push(std::move(out), [ix, C, T, HW](Tape<S>& t, std::int32_t self) {
                const auto& g = t.grad_buf(self);
                auto& gx = t.grad_buf(ix);
                for (std::int64_t c = 0; c < C; ++c)
                    for (std::int64_t f = 0; f < T; ++f) {
                        const S* gr = g.data.data() + f * C * HW + c * HW;
                        S* gxr = gx.data.data() + (c * T + f) * HW;
                        for (std::int64_t i = 0; i < HW; ++i) gxr[i] += gr[i];
                    }
            })};
}

/// y^T E: soft mixture of embedding rows. y is (1, V), table is (V, d).
template <typename S>
Val<S> embed(Val<S> y, Val<S> table) {
    return matmul(y, table);
}

}  // namespace lcanet
