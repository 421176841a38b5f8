#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "mimg/autodiff.hpp"

namespace mimg {

namespace detail {

// Row-wise softmax with max subtraction, in place.
template <class T>
void softmax_rows_inplace(T* p, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        T* row = p + static_cast<size_t>(r) * cols;
        T mx = row[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
        double sum = 0;
        for (int j = 0; j < cols; ++j) {
            double e = std::exp(static_cast<double>(row[j] - mx));
            row[j] = static_cast<T>(e);
            sum += e;
        }
        T inv = static_cast<T>(1.0 / sum);
        for (int j = 0; j < cols; ++j) row[j] *= inv;
    }
}

} // namespace detail

template <class T>
VarT<T> matmul(const VarT<T>& a, const VarT<T>& b) {
    if (a.value().ndim() != 2 || b.value().ndim() != 2)
        throw ShapeError("matmul: expected 2D tensors");
    if (a.value().cols() != b.value().rows())
        throw ShapeError("matmul: inner extents differ, " + a.value().shape_str() + " vs " +
                         b.value().shape_str());
    int m = a.value().rows(), kk = a.value().cols(), n = b.value().cols();
    TensorT<T> out({m, n});
    matmul_accum(out.ptr(), a.value().ptr(), b.value().ptr(), m, kk, n);
    auto an = a.node(), bn = b.node();
    return VarT<T>(detail::make_node<T>(std::move(out), {an, bn},
                                        [an, bn, m, kk, n](NodeT<T>& self) {
        const T* g = self.grad.ptr();
        if (an->requires_grad) {
            // dA += dY * B^T
            std::vector<T> bt(static_cast<size_t>(n) * kk);
            transpose_into(bt.data(), bn->value.ptr(), kk, n);
            matmul_accum(an->grad.ptr(), g, bt.data(), m, n, kk);
        }
        if (bn->requires_grad) {
            // dB += A^T * dY
            std::vector<T> at(static_cast<size_t>(kk) * m);
            transpose_into(at.data(), an->value.ptr(), m, kk);
            matmul_accum(bn->grad.ptr(), at.data(), g, kk, m, n);
        }
    }));
}

// y = x * w^T + bias with x [m,k], w [out,k], bias [out].
// Weights are stored output-major so each output unit owns a contiguous row.
template <class T>
VarT<T> linear(const VarT<T>& x, const VarT<T>& w, const VarT<T>& bias) {
    if (x.value().ndim() != 2 || w.value().ndim() != 2)
        throw ShapeError("linear: expected 2D input and weight");
    if (x.value().cols() != w.value().cols())
        throw ShapeError("linear: input width " + x.value().shape_str() +
                         " does not match weight " + w.value().shape_str());
    const bool has_bias = bias.defined();
    int m = x.value().rows(), kk = x.value().cols(), o = w.value().rows();
    if (has_bias && bias.value().numel() != o)
        throw ShapeError("linear: bias length does not match output width");
    TensorT<T> out({m, o});
    if (has_bias) {
        const T* bp = bias.value().ptr();
        for (int i = 0; i < m; ++i)
            std::copy(bp, bp + o, out.ptr() + static_cast<size_t>(i) * o);
    }
    std::vector<T> wt(static_cast<size_t>(kk) * o);
    transpose_into(wt.data(), w.value().ptr(), o, kk);
    matmul_accum(out.ptr(), x.value().ptr(), wt.data(), m, kk, o);

    auto xn = x.node(), wn = w.node();
    auto bnode = has_bias ? bias.node() : nullptr;
    std::vector<std::shared_ptr<NodeT<T>>> parents{xn, wn};
    if (bnode) parents.push_back(bnode);
    return VarT<T>(detail::make_node<T>(std::move(out), std::move(parents),
                                        [xn, wn, bnode, m, kk, o](NodeT<T>& self) {
        const T* g = self.grad.ptr();
        if (xn->requires_grad) {
            // dX += dY * W
            matmul_accum(xn->grad.ptr(), g, wn->value.ptr(), m, o, kk);
        }
        if (wn->requires_grad) {
            // dW += dY^T * X
            std::vector<T> gt(static_cast<size_t>(o) * m);
            transpose_into(gt.data(), g, m, o);
            matmul_accum(wn->grad.ptr(), gt.data(), xn->value.ptr(), o, m, kk);
        }
        if (bnode && bnode->requires_grad) {
            T* db = bnode->grad.ptr();
            for (int i = 0; i < m; ++i) {
                const T* grow = g + static_cast<size_t>(i) * o;
                for (int j = 0; j < o; ++j) db[j] += grow[j];
            }
        }
    }));
}

template <class T>
VarT<T> linear(const VarT<T>& x, const VarT<T>& w) {
    return linear(x, w, VarT<T>());
}

// Softmax along one axis. Rejects non-finite inputs.
template <class T>
VarT<T> softmax(const VarT<T>& x, int axis) {
    const auto& v = x.value();
    if (axis < 0 || axis >= v.ndim()) throw ShapeError("softmax: axis out of range");
    if (!v.all_finite()) throw NumericError("softmax: non-finite input");
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= v.extent(i);
    int ax = v.extent(axis);
    for (int i = axis + 1; i < v.ndim(); ++i) inner *= v.extent(i);
    if (ax == 0) throw ShapeError("softmax: empty axis");

    TensorT<T> out(v.shape);
    for (int64_t ou = 0; ou < outer; ++ou) {
        for (int64_t in = 0; in < inner; ++in) {
            const T* src = v.ptr() + ou * ax * inner + in;
            T* dst = out.ptr() + ou * ax * inner + in;
            T mx = src[0];
            for (int j = 1; j < ax; ++j) mx = std::max(mx, src[j * inner]);
            double sum = 0;
            for (int j = 0; j < ax; ++j) {
                double e = std::exp(static_cast<double>(src[j * inner] - mx));
                dst[j * inner] = static_cast<T>(e);
                sum += e;
            }
            T invs = static_cast<T>(1.0 / sum);
            for (int j = 0; j < ax; ++j) dst[j * inner] *= invs;
        }
    }
    auto xn = x.node();
    return VarT<T>(detail::make_node<T>(std::move(out), {xn},
                                        [xn, outer, ax, inner](NodeT<T>& self) {
        // dx = y .* (dy - sum(dy .* y)) along the axis
        const T* y = self.value.ptr();
        const T* gy = self.grad.ptr();
        T* gx = xn->grad.ptr();
        for (int64_t ou = 0; ou < outer; ++ou) {
            for (int64_t in = 0; in < inner; ++in) {
                int64_t base = ou * ax * inner + in;
                double dot = 0;
                for (int j = 0; j < ax; ++j)
                    dot += static_cast<double>(gy[base + j * inner]) * y[base + j * inner];
                for (int j = 0; j < ax; ++j)
                    gx[base + j * inner] +=
                        y[base + j * inner] * (gy[base + j * inner] - static_cast<T>(dot));
            }
        }
    }));
}

// Normalize the last axis to zero mean and unit (population) variance,
// then apply a learned per-channel affine.
template <class T>
VarT<T> layer_norm(const VarT<T>& x, const VarT<T>& gain, const VarT<T>& bias,
                   T eps = T(1e-5)) {
    const auto& v = x.value();
    if (v.ndim() < 1) throw ShapeError("layer_norm: scalar input");
    int d = v.extent(v.ndim() - 1);
    int64_t rows = v.numel() / d;
    if (gain.value().numel() != d || bias.value().numel() != d)
        throw ShapeError("layer_norm: gain/bias length must equal last extent");

    TensorT<T> out(v.shape);
    auto xhat = std::make_shared<TensorT<T>>(v.shape);
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
    const T* gp = gain.value().ptr();
    const T* bp = bias.value().ptr();
    for (int64_t r = 0; r < rows; ++r) {
        const T* src = v.ptr() + r * d;
        T* xh = xhat->ptr() + r * d;
        T* dst = out.ptr() + r * d;
        double mu = 0;
        for (int j = 0; j < d; ++j) mu += src[j];
        mu /= d;
        double var = 0;
        for (int j = 0; j < d; ++j) {
            double c = src[j] - mu;
            var += c * c;
        }
        var /= d;
        T inv = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        (*inv_std)[static_cast<size_t>(r)] = inv;
        for (int j = 0; j < d; ++j) {
            xh[j] = static_cast<T>((src[j] - mu) * inv);
            dst[j] = xh[j] * gp[j] + bp[j];
        }
    }
    auto xn = x.node(), gn = gain.node(), bn = bias.node();
    return VarT<T>(detail::make_node<T>(std::move(out), {xn, gn, bn},
                                        [xn, gn, bn, xhat, inv_std, rows, d](NodeT<T>& self) {
        const T* g = self.grad.ptr();
        const T* gp2 = gn->value.ptr();
        for (int64_t r = 0; r < rows; ++r) {
            const T* grow = g + r * d;
            const T* xh = xhat->ptr() + r * d;
            if (gn->requires_grad) {
                T* dg = gn->grad.ptr();
                for (int j = 0; j < d; ++j) dg[j] += grow[j] * xh[j];
            }
            if (bn->requires_grad) {
                T* db = bn->grad.ptr();
                for (int j = 0; j < d; ++j) db[j] += grow[j];
            }
            if (xn->requires_grad) {
                // dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat .* xhat))
                double m1 = 0, m2 = 0;
                for (int j = 0; j < d; ++j) {
                    double dxh = static_cast<double>(grow[j]) * gp2[j];
                    m1 += dxh;
                    m2 += dxh * xh[j];
                }
                m1 /= d;
                m2 /= d;
                T inv = (*inv_std)[static_cast<size_t>(r)];
                T* dx = xn->grad.ptr() + r * d;
                for (int j = 0; j < d; ++j) {
                    double dxh = static_cast<double>(grow[j]) * gp2[j];
                    dx[j] += inv * static_cast<T>(dxh - m1 - xh[j] * m2);
                }
            }
        }
    }));
}

// Scaled dot-product multi-head attention over row-major token matrices.
// q is [batch*n_q, d]; k and v are [batch*n_kv, d]. Self attention passes the
// same rows for all three; cross attention feeds caption rows as k and v.
template <class T>
VarT<T> attention(const VarT<T>& q, const VarT<T>& k, const VarT<T>& v, int heads,
                  int batch = 1) {
    const auto &qv = q.value(), &kv = k.value(), &vv = v.value();
    if (qv.ndim() != 2 || kv.ndim() != 2 || vv.ndim() != 2)
        throw ShapeError("attention: expected 2D tensors");
    int d = qv.cols();
    if (kv.cols() != d || vv.cols() != d) throw ShapeError("attention: feature widths differ");
    if (!kv.same_shape(vv)) throw ShapeError("attention: k/v shape mismatch");
    if (heads < 1 || d % heads != 0)
        throw ConfigError("attention: feature dim " + std::to_string(d) +
                          " not divisible by heads " + std::to_string(heads));
    if (batch < 1 || qv.rows() % batch != 0 || kv.rows() % batch != 0)
        throw ShapeError("attention: row counts not divisible by batch");
    const int nq = qv.rows() / batch, nk = kv.rows() / batch, dh = d / heads;
    const int blocks = batch * heads;
    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

    // Pack per (batch, head) blocks so every matmul runs on contiguous data.
    auto packQ = std::make_shared<std::vector<T>>(static_cast<size_t>(blocks) * nq * dh);
    auto packK = std::make_shared<std::vector<T>>(static_cast<size_t>(blocks) * nk * dh);
    auto packV = std::make_shared<std::vector<T>>(static_cast<size_t>(blocks) * nk * dh);
    auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(blocks) * nq * nk);

    auto pack = [&](std::vector<T>& dst, const TensorT<T>& src, int n) {
        for (int b = 0; b < batch; ++b)
            for (int h = 0; h < heads; ++h) {
                T* blk = dst.data() + (static_cast<size_t>(b) * heads + h) * n * dh;
                for (int i = 0; i < n; ++i) {
                    const T* row = src.ptr() + (static_cast<size_t>(b) * n + i) * d + h * dh;
                    std::copy(row, row + dh, blk + static_cast<size_t>(i) * dh);
                }
            }
    };
    pack(*packQ, qv, nq);
    pack(*packK, kv, nk);
    pack(*packV, vv, nk);

    TensorT<T> out({qv.rows(), d});
    std::vector<T> kt(static_cast<size_t>(dh) * nk);
    std::vector<T> oblk(static_cast<size_t>(nq) * dh);
    for (int blk = 0; blk < blocks; ++blk) {
        const T* Qb = packQ->data() + static_cast<size_t>(blk) * nq * dh;
        const T* Kb = packK->data() + static_cast<size_t>(blk) * nk * dh;
        const T* Vb = packV->data() + static_cast<size_t>(blk) * nk * dh;
        T* Pb = probs->data() + static_cast<size_t>(blk) * nq * nk;
        transpose_into(kt.data(), Kb, nk, dh);
        std::fill(Pb, Pb + static_cast<size_t>(nq) * nk, T(0));
        matmul_accum(Pb, Qb, kt.data(), nq, dh, nk);
        for (size_t i = 0; i < static_cast<size_t>(nq) * nk; ++i) Pb[i] *= inv_sqrt;
        detail::softmax_rows_inplace(Pb, nq, nk);
        std::fill(oblk.begin(), oblk.end(), T(0));
        matmul_accum(oblk.data(), Pb, Vb, nq, nk, dh);
        int b = blk / heads, h = blk % heads;
        for (int i = 0; i < nq; ++i) {
            T* row = out.ptr() + (static_cast<size_t>(b) * nq + i) * d + h * dh;
            std::copy(oblk.begin() + static_cast<size_t>(i) * dh,
                      oblk.begin() + static_cast<size_t>(i + 1) * dh, row);
        }
    }

    auto qn = q.node(), kn = k.node(), vn = v.node();
    return VarT<T>(detail::make_node<T>(
        std::move(out), {qn, kn, vn},
        [qn, kn, vn, packQ, packK, packV, probs, batch, heads, nq, nk, dh, d,
         inv_sqrt](NodeT<T>& self) {
            const int blocks = batch * heads;
            std::vector<T> dOb(static_cast<size_t>(nq) * dh), dP(static_cast<size_t>(nq) * nk);
            std::vector<T> dQb(static_cast<size_t>(nq) * dh), dKb(static_cast<size_t>(nk) * dh);
            std::vector<T> dVb(static_cast<size_t>(nk) * dh), tmp;
            for (int blk = 0; blk < blocks; ++blk) {
                int b = blk / heads, h = blk % heads;
                const T* Qb = packQ->data() + static_cast<size_t>(blk) * nq * dh;
                const T* Kb = packK->data() + static_cast<size_t>(blk) * nk * dh;
                const T* Vb = packV->data() + static_cast<size_t>(blk) * nk * dh;
                const T* Pb = probs->data() + static_cast<size_t>(blk) * nq * nk;
                for (int i = 0; i < nq; ++i) {
                    const T* row =
                        self.grad.ptr() + (static_cast<size_t>(b) * nq + i) * d + h * dh;
                    std::copy(row, row + dh, dOb.begin() + static_cast<size_t>(i) * dh);
                }
                // dV += P^T dO
                if (vn->requires_grad) {
                    tmp.assign(static_cast<size_t>(nk) * nq, T(0));
                    transpose_into(tmp.data(), Pb, nq, nk);
                    std::fill(dVb.begin(), dVb.end(), T(0));
                    matmul_accum(dVb.data(), tmp.data(), dOb.data(), nk, nq, dh);
                    for (int i = 0; i < nk; ++i) {
                        T* row = vn->grad.ptr() + (static_cast<size_t>(b) * nk + i) * d + h * dh;
                        for (int c = 0; c < dh; ++c) row[c] += dVb[static_cast<size_t>(i) * dh + c];
                    }
                }
                if (!qn->requires_grad && !kn->requires_grad) continue;
                // dP = dO V^T, then softmax backward into dS (reusing dP).
                tmp.assign(static_cast<size_t>(dh) * nk, T(0));
                transpose_into(tmp.data(), Vb, nk, dh);
                std::fill(dP.begin(), dP.end(), T(0));
                matmul_accum(dP.data(), dOb.data(), tmp.data(), nq, dh, nk);
                for (int i = 0; i < nq; ++i) {
                    const T* prow = Pb + static_cast<size_t>(i) * nk;
                    T* gr = dP.data() + static_cast<size_t>(i) * nk;
                    double dot = 0;
                    for (int j = 0; j < nk; ++j) dot += static_cast<double>(gr[j]) * prow[j];
                    for (int j = 0; j < nk; ++j)
                        gr[j] = prow[j] * (gr[j] - static_cast<T>(dot)) * inv_sqrt;
                }
                if (qn->requires_grad) {
                    std::fill(dQb.begin(), dQb.end(), T(0));
                    matmul_accum(dQb.data(), dP.data(), Kb, nq, nk, dh);
                    for (int i = 0; i < nq; ++i) {
                        T* row = qn->grad.ptr() + (static_cast<size_t>(b) * nq + i) * d + h * dh;
                        for (int c = 0; c < dh; ++c) row[c] += dQb[static_cast<size_t>(i) * dh + c];
                    }
                }
                if (kn->requires_grad) {
                    tmp.assign(static_cast<size_t>(nk) * nq, T(0));
                    transpose_into(tmp.data(), dP.data(), nq, nk);
                    std::fill(dKb.begin(), dKb.end(), T(0));
                    matmul_accum(dKb.data(), tmp.data(), Qb, nk, nq, dh);
                    for (int i = 0; i < nk; ++i) {
                        T* row = kn->grad.ptr() + (static_cast<size_t>(b) * nk + i) * d + h * dh;
                        for (int c = 0; c < dh; ++c) row[c] += dKb[static_cast<size_t>(i) * dh + c];
                    }
                }
            }
        }));
}

namespace detail {

// col[(c*kh+ky)*kw+kx, oy*wout+ox] = x[c, oy*s+ky-pad_h, ox*s+kx-pad_w]
template <class T>
void im2col(std::vector<T>& col, const T* x, int ch, int hh, int ww, int kh, int kw,
            int stride, int hout, int wout) {
    const int ph = kh / 2, pw = kw / 2;
    col.assign(static_cast<size_t>(ch) * kh * kw * hout * wout, T(0));
    for (int c = 0; c < ch; ++c)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                T* crow = col.data() +
                          (static_cast<size_t>(c) * kh * kw + static_cast<size_t>(ky) * kw + kx) *
                              hout * wout;
                for (int oy = 0; oy < hout; ++oy) {
                    int sy = oy * stride + ky - ph;
                    if (sy < 0 || sy >= hh) continue;
                    const T* xrow = x + (static_cast<size_t>(c) * hh + sy) * ww;
                    T* dst = crow + static_cast<size_t>(oy) * wout;
                    for (int ox = 0; ox < wout; ++ox) {
                        int sx = ox * stride + kx - pw;
                        if (sx >= 0 && sx < ww) dst[ox] = xrow[sx];
                    }
                }
            }
}

// Scatter-add inverse of im2col.
template <class T>
void col2im_add(T* x, const std::vector<T>& col, int ch, int hh, int ww, int kh, int kw,
                int stride, int hout, int wout) {
    const int ph = kh / 2, pw = kw / 2;
    for (int c = 0; c < ch; ++c)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                const T* crow = col.data() +
                                (static_cast<size_t>(c) * kh * kw + static_cast<size_t>(ky) * kw +
                                 kx) *
                                    hout * wout;
                for (int oy = 0; oy < hout; ++oy) {
                    int sy = oy * stride + ky - ph;
                    if (sy < 0 || sy >= hh) continue;
                    T* xrow = x + (static_cast<size_t>(c) * hh + sy) * ww;
                    const T* src = crow + static_cast<size_t>(oy) * wout;
                    for (int ox = 0; ox < wout; ++ox) {
                        int sx = ox * stride + kx - pw;
                        if (sx >= 0 && sx < ww) xrow[sx] += src[ox];
                    }
                }
            }
}

} // namespace detail

// 2D convolution with same padding. x is [batch*c_in, h, w], weight is
// [c_out, c_in, kh, kw], bias is [c_out]. stride 1 keeps the extents,
// stride 2 halves them. Odd kernel extents only.
template <class T>
VarT<T> conv2d(const VarT<T>& x, const VarT<T>& w, const VarT<T>& bias, int stride = 1,
               int batch = 1) {
    const auto& xv = x.value();
    const auto& wv = w.value();
    if (xv.ndim() != 3 || wv.ndim() != 4) throw ShapeError("conv2d: expected [B*C,H,W] and [O,C,kh,kw]");
    if (stride != 1 && stride != 2) throw ConfigError("conv2d: stride must be 1 or 2");
    const int cout = wv.extent(0), cin = wv.extent(1), kh = wv.extent(2), kw = wv.extent(3);
    if (kh % 2 == 0 || kw % 2 == 0) throw ConfigError("conv2d: kernel extents must be odd");
    if (batch < 1 || xv.extent(0) != batch * cin)
        throw ShapeError("conv2d: channel count mismatch");
    const int hh = xv.extent(1), ww = xv.extent(2);
    if (hh < kh || ww < kw) throw ShapeError("conv2d: spatial extents smaller than kernel");
    if (bias.defined() && bias.value().numel() != cout)
        throw ShapeError("conv2d: bias length mismatch");
    const int hout = (hh + 2 * (kh / 2) - kh) / stride + 1;
    const int wout = (ww + 2 * (kw / 2) - kw) / stride + 1;
    const int krows = cin * kh * kw;

    TensorT<T> out({batch * cout, hout, wout});
    std::vector<T> col;
    for (int b = 0; b < batch; ++b) {
        const T* xi = xv.ptr() + static_cast<size_t>(b) * cin * hh * ww;
        T* yi = out.ptr() + static_cast<size_t>(b) * cout * hout * wout;
        detail::im2col(col, xi, cin, hh, ww, kh, kw, stride, hout, wout);
        matmul_accum(yi, wv.ptr(), col.data(), cout, krows, hout * wout);
        if (bias.defined()) {
            const T* bp = bias.value().ptr();
            for (int o = 0; o < cout; ++o) {
                T* row = yi + static_cast<size_t>(o) * hout * wout;
                for (int i = 0; i < hout * wout; ++i) row[i] += bp[o];
            }
        }
    }
    auto xn = x.node(), wn = w.node();
    auto bnode = bias.defined() ? bias.node() : nullptr;
    std::vector<std::shared_ptr<NodeT<T>>> parents{xn, wn};
    if (bnode) parents.push_back(bnode);
    return VarT<T>(detail::make_node<T>(
        std::move(out), std::move(parents),
        [xn, wn, bnode, batch, cin, cout, hh, ww, kh, kw, stride, hout, wout,
         krows](NodeT<T>& self) {
            std::vector<T> col, gt, wt, dcol;
            const int area = hout * wout;
            for (int b = 0; b < batch; ++b) {
                const T* gy = self.grad.ptr() + static_cast<size_t>(b) * cout * area;
                if (wn->requires_grad || bnode) {
                    const T* xi = xn->value.ptr() + static_cast<size_t>(b) * cin * hh * ww;
                    detail::im2col(col, xi, cin, hh, ww, kh, kw, stride, hout, wout);
                }
                if (wn->requires_grad) {
                    // dW += dY * col^T
                    gt.assign(static_cast<size_t>(krows) * area, T(0));
                    transpose_into(gt.data(), col.data(), krows, area);
                    matmul_accum(wn->grad.ptr(), gy, gt.data(), cout, area, krows);
                }
                if (bnode && bnode->requires_grad) {
                    T* db = bnode->grad.ptr();
                    for (int o = 0; o < cout; ++o) {
                        const T* row = gy + static_cast<size_t>(o) * area;
                        double s = 0;
                        for (int i = 0; i < area; ++i) s += row[i];
                        db[o] += static_cast<T>(s);
                    }
                }
                if (xn->requires_grad) {
                    // dcol = W^T * dY, then scatter back to image layout
                    wt.assign(static_cast<size_t>(krows) * cout, T(0));
                    transpose_into(wt.data(), wn->value.ptr(), cout, krows);
                    dcol.assign(static_cast<size_t>(krows) * area, T(0));
                    matmul_accum(dcol.data(), wt.data(), gy, krows, cout, area);
                    T* dx = xn->grad.ptr() + static_cast<size_t>(b) * cin * hh * ww;
                    detail::col2im_add(dx, dcol, cin, hh, ww, kh, kw, stride, hout, wout);
                }
            }
        }));
}

// Nearest-neighbour 2x upsample of [channels, h, w].
template <class T>
VarT<T> upsample2x(const VarT<T>& x) {
    const auto& v = x.value();
    if (v.ndim() != 3) throw ShapeError("upsample2x: expected [C,H,W]");
    const int c = v.extent(0), hh = v.extent(1), ww = v.extent(2);
    TensorT<T> out({c, 2 * hh, 2 * ww});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < 2 * hh; ++y) {
            const T* src = v.ptr() + (static_cast<size_t>(ch) * hh + y / 2) * ww;
            T* dst = out.ptr() + (static_cast<size_t>(ch) * 2 * hh + y) * 2 * ww;
            for (int xx = 0; xx < 2 * ww; ++xx) dst[xx] = src[xx / 2];
        }
    auto xn = x.node();
    return VarT<T>(detail::make_node<T>(std::move(out), {xn}, [xn, c, hh, ww](NodeT<T>& self) {
        const T* g = self.grad.ptr();
        T* dx = xn->grad.ptr();
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < 2 * hh; ++y) {
                const T* grow = g + (static_cast<size_t>(ch) * 2 * hh + y) * 2 * ww;
                T* drow = dx + (static_cast<size_t>(ch) * hh + y / 2) * ww;
                for (int xx = 0; xx < 2 * ww; ++xx) drow[xx / 2] += grow[xx];
            }
    }));
}

// Gather rows of an embedding table. ids index [0, rows).
template <class T>
VarT<T> embedding(const VarT<T>& table, const std::vector<int>& ids) {
    const auto& tv = table.value();
    if (tv.ndim() != 2) throw ShapeError("embedding: table must be 2D");
    const int vsize = tv.rows(), d = tv.cols();
    for (int id : ids)
        if (id < 0 || id >= vsize)
            throw DomainError("embedding: id " + std::to_string(id) + " outside table of " +
                              std::to_string(vsize) + " rows");
    TensorT<T> out({static_cast<int>(ids.size()), d});
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy(tv.ptr() + static_cast<size_t>(ids[i]) * d,
                  tv.ptr() + static_cast<size_t>(ids[i] + 1) * d, out.ptr() + i * d);
    auto tn = table.node();
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    return VarT<T>(detail::make_node<T>(std::move(out), {tn}, [tn, ids_copy, d](NodeT<T>& self) {
        const T* g = self.grad.ptr();
        for (size_t i = 0; i < ids_copy->size(); ++i) {
            T* row = tn->grad.ptr() + static_cast<size_t>((*ids_copy)[i]) * d;
            const T* grow = g + i * d;
            for (int j = 0; j < d; ++j) row[j] += grow[j];
        }
    }));
}

// Token-major [batch*n, d] -> channel-major [batch*d, h, w] with n = h*w.
template <class T>
VarT<T> seq_to_chw(const VarT<T>& x, int batch, int hh, int ww) {
    const auto& v = x.value();
    if (v.ndim() != 2 || v.rows() != batch * hh * ww)
        throw ShapeError("seq_to_chw: row count must equal batch*h*w");
    const int d = v.cols(), n = hh * ww;
    TensorT<T> out({batch * d, hh, ww});
    for (int b = 0; b < batch; ++b)
        for (int i = 0; i < n; ++i) {
            const T* src = v.ptr() + (static_cast<size_t>(b) * n + i) * d;
            for (int c = 0; c < d; ++c)
                out.ptr()[(static_cast<size_t>(b) * d + c) * n + i] = src[c];
        }
    auto xn = x.node();
    return VarT<T>(detail::make_node<T>(std::move(out), {xn}, [xn, batch, n, d](NodeT<T>& self) {
        const T* g = self.grad.ptr();
        for (int b = 0; b < batch; ++b)
            for (int i = 0; i < n; ++i) {
                T* dst = xn->grad.ptr() + (static_cast<size_t>(b) * n + i) * d;
                for (int c = 0; c < d; ++c)
                    dst[c] += g[(static_cast<size_t>(b) * d + c) * n + i];
            }
    }));
}

// Channel-major [batch*d, h, w] -> token-major [batch*h*w, d].
template <class T>
VarT<T> chw_to_seq(const VarT<T>& x, int batch) {
    const auto& v = x.value();
    if (v.ndim() != 3 || v.extent(0) % batch != 0)
        throw ShapeError("chw_to_seq: channel count not divisible by batch");
    const int d = v.extent(0) / batch, hh = v.extent(1), ww = v.extent(2), n = hh * ww;
    TensorT<T> out({batch * n, d});
    for (int b = 0; b < batch; ++b)
        for (int i = 0; i < n; ++i) {
            T* dst = out.ptr() + (static_cast<size_t>(b) * n + i) * d;
            for (int c = 0; c < d; ++c)
                dst[c] = v.ptr()[(static_cast<size_t>(b) * d + c) * n + i];
        }
    auto xn = x.node();
    return VarT<T>(detail::make_node<T>(std::move(out), {xn}, [xn, batch, n, d](NodeT<T>& self) {
        const T* g = self.grad.ptr();
        for (int b = 0; b < batch; ++b)
            for (int i = 0; i < n; ++i) {
                const T* src = g + (static_cast<size_t>(b) * n + i) * d;
                for (int c = 0; c < d; ++c)
                    xn->grad.ptr()[(static_cast<size_t>(b) * d + c) * n + i] += src[c];
            }
    }));
}

// Per-item row modulation: x is [batch*n, d], g and b are [batch, d];
// row i is scaled by g[i / n] and shifted by b[i / n].
template <class T>
VarT<T> rowwise_affine(const VarT<T>& x, const VarT<T>& g, const VarT<T>& b, int batch = 1) {
    const auto& xv = x.value();
    if (xv.ndim() != 2 || g.value().ndim() != 2 || b.value().ndim() != 2)
        throw ShapeError("rowwise_affine: expected 2D tensors");
    const int d = xv.cols();
    if (g.value().cols() != d || b.value().cols() != d)
        throw ShapeError("rowwise_affine: feature widths differ");
    if (g.value().rows() != batch || b.value().rows() != batch)
        throw ShapeError("rowwise_affine: modulation rows must equal batch");
    if (xv.rows() % batch != 0) throw ShapeError("rowwise_affine: rows not divisible by batch");
    const int n = xv.rows() / batch;
    TensorT<T> out(xv.shape);
    for (int r = 0; r < xv.rows(); ++r) {
        const T* grow = g.value().ptr() + static_cast<size_t>(r / n) * d;
        const T* brow = b.value().ptr() + static_cast<size_t>(r / n) * d;
        const T* src = xv.ptr() + static_cast<size_t>(r) * d;
        T* dst = out.ptr() + static_cast<size_t>(r) * d;
        for (int j = 0; j < d; ++j) dst[j] = src[j] * grow[j] + brow[j];
    }
    auto xn = x.node(), gn = g.node(), bn = b.node();
    return VarT<T>(detail::make_node<T>(std::move(out), {xn, gn, bn},
                                        [xn, gn, bn, batch, n, d](NodeT<T>& self) {
        const T* gy = self.grad.ptr();
        for (int r = 0; r < batch * n; ++r) {
            const size_t blk = static_cast<size_t>(r / n) * d;
            const T* grow = gy + static_cast<size_t>(r) * d;
            if (xn->requires_grad) {
                const T* gv = gn->value.ptr() + blk;
                T* dx = xn->grad.ptr() + static_cast<size_t>(r) * d;
                for (int j = 0; j < d; ++j) dx[j] += grow[j] * gv[j];
            }
            if (gn->requires_grad) {
                const T* xv2 = xn->value.ptr() + static_cast<size_t>(r) * d;
                T* dg = gn->grad.ptr() + blk;
                for (int j = 0; j < d; ++j) dg[j] += grow[j] * xv2[j];
            }
            if (bn->requires_grad) {
                T* db = bn->grad.ptr() + blk;
                for (int j = 0; j < d; ++j) db[j] += grow[j];
            }
        }
    }));
}

// Mean over kept rows within each of `batch` equal row blocks.
// x is [batch*len, d]; keep flags one byte per row; each block needs at
// least one kept row.
template <class T>
VarT<T> masked_mean_rows(const VarT<T>& x, const std::vector<uint8_t>& keep, int batch) {
    const auto& xv = x.value();
    if (xv.ndim() != 2 || batch < 1 || xv.rows() % batch != 0)
        throw ShapeError("masked_mean_rows: rows not divisible by batch");
    if (static_cast<int>(keep.size()) != xv.rows())
        throw ShapeError("masked_mean_rows: keep mask length mismatch");
    const int len = xv.rows() / batch, d = xv.cols();
    auto counts = std::make_shared<std::vector<int>>(batch, 0);
    for (int b = 0; b < batch; ++b) {
        for (int i = 0; i < len; ++i)
            if (keep[static_cast<size_t>(b) * len + i]) ++(*counts)[b];
        if ((*counts)[b] == 0)
            throw DomainError("masked_mean_rows: block " + std::to_string(b) + " has no kept rows");
    }
    TensorT<T> out({batch, d});
    for (int b = 0; b < batch; ++b) {
        T* dst = out.ptr() + static_cast<size_t>(b) * d;
        for (int i = 0; i < len; ++i) {
            if (!keep[static_cast<size_t>(b) * len + i]) continue;
            const T* src = xv.ptr() + (static_cast<size_t>(b) * len + i) * d;
            for (int j = 0; j < d; ++j) dst[j] += src[j];
        }
        const T inv = T(1) / static_cast<T>((*counts)[b]);
        for (int j = 0; j < d; ++j) dst[j] *= inv;
    }
    auto xn = x.node();
    auto keep_copy = std::make_shared<std::vector<uint8_t>>(keep);
    return VarT<T>(detail::make_node<T>(std::move(out), {xn},
                                        [xn, keep_copy, counts, batch, len, d](NodeT<T>& self) {
        const T* g = self.grad.ptr();
        for (int b = 0; b < batch; ++b) {
            const T inv = T(1) / static_cast<T>((*counts)[b]);
            const T* grow = g + static_cast<size_t>(b) * d;
            for (int i = 0; i < len; ++i) {
                if (!(*keep_copy)[static_cast<size_t>(b) * len + i]) continue;
                T* dx = xn->grad.ptr() + (static_cast<size_t>(b) * len + i) * d;
                for (int j = 0; j < d; ++j) dx[j] += grow[j] * inv;
            }
        }
    }));
}

// Cross-entropy averaged over masked rows only. logits is [rows, vocab];
// rows with mask == 0 contribute nothing and receive exactly zero gradient.
// No masked rows yields loss 0 by convention.
template <class T>
VarT<T> masked_ce(const VarT<T>& logits, const std::vector<int>& targets,
                  const std::vector<uint8_t>& mask) {
    const auto& lv = logits.value();
    if (lv.ndim() != 2) throw ShapeError("masked_ce: logits must be 2D");
    const int rows = lv.rows(), vocab = lv.cols();
    if (static_cast<int>(targets.size()) != rows || static_cast<int>(mask.size()) != rows)
        throw ShapeError("masked_ce: targets/mask length mismatch");
    int m = 0;
    for (int r = 0; r < rows; ++r) {
        if (!mask[static_cast<size_t>(r)]) continue;
        ++m;
        if (targets[static_cast<size_t>(r)] < 0 || targets[static_cast<size_t>(r)] >= vocab)
            throw DomainError("masked_ce: target id outside vocabulary");
    }
    double total = 0;
    for (int r = 0; r < rows; ++r) {
        if (!mask[static_cast<size_t>(r)]) continue;
        const T* row = lv.ptr() + static_cast<size_t>(r) * vocab;
        T mx = row[0];
        for (int j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
        double sum = 0;
        for (int j = 0; j < vocab; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
        total += static_cast<double>(mx) + std::log(sum) -
                 static_cast<double>(row[targets[static_cast<size_t>(r)]]);
    }
    TensorT<T> out({1});
    out.data[0] = m ? static_cast<T>(total / m) : T(0);
    if (!std::isfinite(static_cast<double>(out.data[0])))
        throw NumericError("masked_ce: non-finite loss");
    auto ln = logits.node();
    auto tcopy = std::make_shared<std::vector<int>>(targets);
    auto mcopy = std::make_shared<std::vector<uint8_t>>(mask);
    return VarT<T>(detail::make_node<T>(std::move(out), {ln},
                                        [ln, tcopy, mcopy, rows, vocab, m](NodeT<T>& self) {
        if (m == 0) return;
        const T g = self.grad.data[0] / static_cast<T>(m);
        for (int r = 0; r < rows; ++r) {
            if (!(*mcopy)[static_cast<size_t>(r)]) continue;
            const T* row = ln->value.ptr() + static_cast<size_t>(r) * vocab;
            T* drow = ln->grad.ptr() + static_cast<size_t>(r) * vocab;
            T mx = row[0];
            for (int j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
            double sum = 0;
            for (int j = 0; j < vocab; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
            const double inv = 1.0 / sum;
            for (int j = 0; j < vocab; ++j)
                drow[j] += g * static_cast<T>(std::exp(static_cast<double>(row[j] - mx)) * inv);
            drow[(*tcopy)[static_cast<size_t>(r)]] -= g;
        }
    }));
}

// Lowest index wins ties.
template <class T>
int argmax_row(const T* row, int n) {
    int best = 0;
    for (int j = 1; j < n; ++j)
        if (row[j] > row[best]) best = j;
    return best;
}

} // namespace mimg
