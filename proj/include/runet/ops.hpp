#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "runet/tensor.hpp"

namespace runet {

enum class Padding { same, none };
enum class BnMode { train, infer };

// Per-window argmax positions recorded by maxpool2x2 (0..3, row-major within
// the 2x2 source window), keyed by the pooled output shape.
struct PoolIndices {
    Shape pooled;
    std::vector<std::uint8_t> argmax;
};

template <typename S>
struct Pooled {
    Tensor<S> values;
    PoolIndices indices;
};

// --------------------------------------------------------------------------
// conv2d: stride-1 cross-correlation with per-output-channel bias.
// Kernels are 1x1 or 3x3; padding is zero ("same") or absent ("none").
//
// The spatial kernels below process four channels per pass so each input row
// is loaded once per four saxpy streams; plain per-channel loops handle the
// remainder. Accumulation order is fixed, so results are deterministic.
// --------------------------------------------------------------------------
namespace detail {

// Geometry of one kernel tap: output (y,x) reads input (y+dy, x+dx); the
// ranges keep both sides in bounds (zero padding contributes nothing).
struct TapRange {
    int dy, dx, y0, y1, x0, x1;
};

inline TapRange tap_range(int ki, int kj, int ph, int pw, int h, int w, int oh, int ow) {
    TapRange t;
    t.dy = ki - ph;
    t.dx = kj - pw;
    t.y0 = t.dy < 0 ? -t.dy : 0;
    t.y1 = std::min(oh, h - t.dy);
    t.x0 = t.dx < 0 ? -t.dx : 0;
    t.x1 = std::min(ow, w - t.dx);
    return t;
}

struct ConvGeom {
    int cin, cout, kh, kw, ph, pw, oh, ow;
};

// The convolution runs as a GEMM against an im2col matrix: row (ci,tap) of M
// holds the input plane shifted by that tap (zeros where the shift leaves the
// image), so out[co] = sum_k W[co,k] * M[k] over whole contiguous planes.
// 1x1 kernels skip the copy and use the input planes directly. Four output
// channels share each pass, and reductions are striped across fixed lanes so
// they vectorize while staying deterministic.

template <typename S>
void im2col(const S* xn, S* M, Shape xs, const ConvGeom& g) {
    const std::int64_t N = static_cast<std::int64_t>(g.oh) * g.ow;
    const int k2 = g.kh * g.kw;
    for (int ci = 0; ci < g.cin; ++ci) {
        const S* xc = xn + static_cast<std::int64_t>(ci) * xs.plane();
        for (int ki = 0; ki < g.kh; ++ki)
            for (int kj = 0; kj < g.kw; ++kj) {
                const TapRange t = tap_range(ki, kj, g.ph, g.pw, xs.h, xs.w, g.oh, g.ow);
                S* row = M + (static_cast<std::int64_t>(ci) * k2 + ki * g.kw + kj) * N;
                std::fill(row, row + static_cast<std::int64_t>(t.y0) * g.ow, S(0));
                for (int y = t.y0; y < t.y1; ++y) {
                    S* r = row + static_cast<std::int64_t>(y) * g.ow;
                    std::fill(r, r + t.x0, S(0));
                    const S* src = xc + static_cast<std::int64_t>(y + t.dy) * xs.w + t.dx;
                    std::copy(src + t.x0, src + t.x1, r + t.x0);
                    std::fill(r + t.x1, r + g.ow, S(0));
                }
                std::fill(row + static_cast<std::int64_t>(t.y1) * g.ow, row + N, S(0));
            }
    }
}

// dX[ci][y+dy][x+dx] += D[(ci,tap)][y*ow+x]; tap cells that fell on padding
// carry gradient for no real input cell and are dropped.
template <typename S>
void col2im_add(const S* D, S* xn, Shape xs, const ConvGeom& g) {
    const std::int64_t N = static_cast<std::int64_t>(g.oh) * g.ow;
    const int k2 = g.kh * g.kw;
    for (int ci = 0; ci < g.cin; ++ci) {
        S* xc = xn + static_cast<std::int64_t>(ci) * xs.plane();
        for (int ki = 0; ki < g.kh; ++ki)
            for (int kj = 0; kj < g.kw; ++kj) {
                const TapRange t = tap_range(ki, kj, g.ph, g.pw, xs.h, xs.w, g.oh, g.ow);
                const S* row = D + (static_cast<std::int64_t>(ci) * k2 + ki * g.kw + kj) * N;
                for (int y = t.y0; y < t.y1; ++y) {
                    S* __restrict dst = xc + static_cast<std::int64_t>(y + t.dy) * xs.w + t.dx;
                    const S* __restrict src = row + static_cast<std::int64_t>(y) * g.ow;
                    for (int x = t.x0; x < t.x1; ++x)
                        dst[x] += src[x];
                }
            }
    }
}

template <typename S>
inline void gemm_axpy_row4(S* __restrict o0, S* __restrict o1, S* __restrict o2,
                           S* __restrict o3, const S* __restrict m, S w0, S w1, S w2, S w3,
                           std::int64_t n) {
    for (std::int64_t i = 0; i < n; ++i) {
        const S v = m[i];
        o0[i] += w0 * v;
        o1[i] += w1 * v;
        o2[i] += w2 * v;
        o3[i] += w3 * v;
    }
}

template <typename S>
inline void gemm_axpy_row1(S* __restrict o0, const S* __restrict m, S w0, std::int64_t n) {
    for (std::int64_t i = 0; i < n; ++i)
        o0[i] += w0 * m[i];
}

// d[i] += sum_b w_b * g_b[i]
template <typename S>
inline void gemm_gather_row4(S* __restrict d, const S* __restrict g0, const S* __restrict g1,
                             const S* __restrict g2, const S* __restrict g3, S w0, S w1, S w2,
                             S w3, std::int64_t n) {
    for (std::int64_t i = 0; i < n; ++i)
        d[i] += w0 * g0[i] + w1 * g1[i] + w2 * g2[i] + w3 * g3[i];
}

// Dot products run on explicit 8-lane vectors (GCC/Clang vector extensions):
// the compiler will not vectorize a serial floating-point reduction on its
// own, and the fixed lane order keeps results deterministic.
template <typename S>
struct VecOf {
    typedef S type __attribute__((vector_size(sizeof(S) * 8)));
};

template <typename S>
using Vec = typename VecOf<S>::type;

template <typename S>
inline Vec<S> vload(const S* p) {
    Vec<S> v;
    __builtin_memcpy(&v, p, sizeof(v));
    return v;
}

template <typename S>
inline S vsum(Vec<S> v) {
    S s = S(0);
    for (int l = 0; l < 8; ++l)
        s += v[l];
    return s;
}

// a_b += dot(g_b, m)
template <typename S>
inline void gemm_dot4(S& a0, S& a1, S& a2, S& a3, const S* __restrict g0, const S* __restrict g1,
                      const S* __restrict g2, const S* __restrict g3, const S* __restrict m,
                      std::int64_t n) {
    Vec<S> acc0{}, acc1{}, acc2{}, acc3{};
    std::int64_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const Vec<S> v = vload(m + i);
        acc0 += vload(g0 + i) * v;
        acc1 += vload(g1 + i) * v;
        acc2 += vload(g2 + i) * v;
        acc3 += vload(g3 + i) * v;
    }
    S t0 = S(0), t1 = S(0), t2 = S(0), t3 = S(0);
    for (; i < n; ++i) {
        const S v = m[i];
        t0 += g0[i] * v;
        t1 += g1[i] * v;
        t2 += g2[i] * v;
        t3 += g3[i] * v;
    }
    a0 += t0 + vsum<S>(acc0);
    a1 += t1 + vsum<S>(acc1);
    a2 += t2 + vsum<S>(acc2);
    a3 += t3 + vsum<S>(acc3);
}

template <typename S>
inline S gemm_dot1(const S* __restrict g, const S* __restrict m, std::int64_t n) {
    Vec<S> acc{};
    std::int64_t i = 0;
    for (; i + 8 <= n; i += 8)
        acc += vload(g + i) * vload(m + i);
    S s = S(0);
    for (; i < n; ++i)
        s += g[i] * m[i];
    return s + vsum<S>(acc);
}

template <typename S>
std::vector<S>& conv_scratch(int which) {
    thread_local std::vector<S> buffers[2];
    return buffers[which];
}

// Row pointers of the implicit im2col matrix: the input planes themselves for
// 1x1 kernels, otherwise the materialized scratch copy.
template <typename S>
void conv_make_rows(const S* xn, Shape xs, const ConvGeom& g, std::vector<const S*>& rows,
                    int scratch_id) {
    const std::int64_t N = static_cast<std::int64_t>(g.oh) * g.ow;
    const std::int64_t K = static_cast<std::int64_t>(g.cin) * g.kh * g.kw;
    rows.resize(K);
    if (g.kh == 1 && g.kw == 1) {
        for (std::int64_t k = 0; k < K; ++k)
            rows[k] = xn + k * xs.plane();
        return;
    }
    auto& scratch = conv_scratch<S>(scratch_id);
    scratch.resize(static_cast<std::size_t>(K * N));
    im2col(xn, scratch.data(), xs, g);
    for (std::int64_t k = 0; k < K; ++k)
        rows[k] = scratch.data() + k * N;
}

template <typename S>
void conv_forward_kernel(const S* xd, const S* wd, const S* bd, S* od, Shape xs,
                         const ConvGeom& g) {
    const std::int64_t N = static_cast<std::int64_t>(g.oh) * g.ow;
    const std::int64_t K = static_cast<std::int64_t>(g.cin) * g.kh * g.kw;
    std::vector<const S*> rows;
    for (int nb = 0; nb < xs.n; ++nb) {
        conv_make_rows(xd + static_cast<std::int64_t>(nb) * g.cin * xs.plane(), xs, g, rows, 0);
        S* on = od + static_cast<std::int64_t>(nb) * g.cout * N;
        int co = 0;
        for (; co + 4 <= g.cout; co += 4) {
            S* o0 = on + (co + 0) * N;
            S* o1 = on + (co + 1) * N;
            S* o2 = on + (co + 2) * N;
            S* o3 = on + (co + 3) * N;
            std::fill(o0, o0 + N, bd ? bd[co + 0] : S(0));
            std::fill(o1, o1 + N, bd ? bd[co + 1] : S(0));
            std::fill(o2, o2 + N, bd ? bd[co + 2] : S(0));
            std::fill(o3, o3 + N, bd ? bd[co + 3] : S(0));
            const S* w0 = wd + (co + 0) * K;
            const S* w1 = wd + (co + 1) * K;
            const S* w2 = wd + (co + 2) * K;
            const S* w3 = wd + (co + 3) * K;
            for (std::int64_t k = 0; k < K; ++k)
                gemm_axpy_row4(o0, o1, o2, o3, rows[k], w0[k], w1[k], w2[k], w3[k], N);
        }
        for (; co < g.cout; ++co) {
            S* o0 = on + static_cast<std::int64_t>(co) * N;
            std::fill(o0, o0 + N, bd ? bd[co] : S(0));
            const S* w0 = wd + static_cast<std::int64_t>(co) * K;
            for (std::int64_t k = 0; k < K; ++k)
                gemm_axpy_row1(o0, rows[k], w0[k], N);
        }
    }
}

// dx += w (transposed taps) * dy
template <typename S>
void conv_backward_x_kernel(S* xg, const S* wd, const S* gd, Shape xs, const ConvGeom& g) {
    const std::int64_t N = static_cast<std::int64_t>(g.oh) * g.ow;
    const std::int64_t K = static_cast<std::int64_t>(g.cin) * g.kh * g.kw;
    const bool direct = g.kh == 1 && g.kw == 1;
    std::vector<S*> drows(K);
    for (int nb = 0; nb < xs.n; ++nb) {
        S* xn = xg + static_cast<std::int64_t>(nb) * g.cin * xs.plane();
        if (direct) {
            for (std::int64_t k = 0; k < K; ++k)
                drows[k] = xn + k * xs.plane();
        } else {
            auto& scratch = conv_scratch<S>(1);
            scratch.assign(static_cast<std::size_t>(K * N), S(0));
            for (std::int64_t k = 0; k < K; ++k)
                drows[k] = scratch.data() + k * N;
        }
        const S* gn = gd + static_cast<std::int64_t>(nb) * g.cout * N;
        int co = 0;
        for (; co + 4 <= g.cout; co += 4) {
            const S* g0 = gn + (co + 0) * N;
            const S* g1 = gn + (co + 1) * N;
            const S* g2 = gn + (co + 2) * N;
            const S* g3 = gn + (co + 3) * N;
            const S* w0 = wd + (co + 0) * K;
            const S* w1 = wd + (co + 1) * K;
            const S* w2 = wd + (co + 2) * K;
            const S* w3 = wd + (co + 3) * K;
            for (std::int64_t k = 0; k < K; ++k)
                gemm_gather_row4(drows[k], g0, g1, g2, g3, w0[k], w1[k], w2[k], w3[k], N);
        }
        for (; co < g.cout; ++co) {
            const S* g0 = gn + static_cast<std::int64_t>(co) * N;
            const S* w0 = wd + static_cast<std::int64_t>(co) * K;
            for (std::int64_t k = 0; k < K; ++k)
                gemm_axpy_row1(drows[k], g0, w0[k], N);
        }
        if (!direct)
            col2im_add(drows[0], xn, xs, g);
    }
}

// dw[co,k] += sum over batch of dot(dy[co], M[k])
template <typename S>
void conv_backward_w_kernel(S* wg, const S* xd, const S* gd, Shape xs, const ConvGeom& g) {
    const std::int64_t N = static_cast<std::int64_t>(g.oh) * g.ow;
    const std::int64_t K = static_cast<std::int64_t>(g.cin) * g.kh * g.kw;
    std::vector<const S*> rows;
    for (int nb = 0; nb < xs.n; ++nb) {
        conv_make_rows(xd + static_cast<std::int64_t>(nb) * g.cin * xs.plane(), xs, g, rows, 0);
        const S* gn = gd + static_cast<std::int64_t>(nb) * g.cout * N;
        int co = 0;
        for (; co + 4 <= g.cout; co += 4) {
            const S* g0 = gn + (co + 0) * N;
            const S* g1 = gn + (co + 1) * N;
            const S* g2 = gn + (co + 2) * N;
            const S* g3 = gn + (co + 3) * N;
            for (std::int64_t k = 0; k < K; ++k)
                gemm_dot4(wg[(co + 0) * K + k], wg[(co + 1) * K + k], wg[(co + 2) * K + k],
                          wg[(co + 3) * K + k], g0, g1, g2, g3, rows[k], N);
        }
        for (; co < g.cout; ++co) {
            const S* g0 = gn + static_cast<std::int64_t>(co) * N;
            for (std::int64_t k = 0; k < K; ++k)
                wg[co * K + k] += gemm_dot1(g0, rows[k], N);
        }
    }
}

} // namespace detail

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& weight,
                 const std::optional<Tensor<S>>& bias, Padding padding) {
    const Shape xs = x.shape();
    const Shape ws = weight.shape(); // (cout, cin, kh, kw)
    const int cout = ws.n, cin = ws.c, kh = ws.h, kw = ws.w;
    if ((kh != 1 && kh != 3) || (kw != 1 && kw != 3))
        throw ShapeError("conv2d kernel dims must be 1 or 3, got " + ws.str());
    if (xs.c != cin)
        throw ShapeError("conv2d channel mismatch: input " + xs.str() +
                         " vs weight " + ws.str());
    if (bias && bias->count() != cout)
        throw ShapeError("conv2d bias length " + std::to_string(bias->count()) +
                         " does not match cout " + std::to_string(cout));
    const int ph = padding == Padding::same ? (kh - 1) / 2 : 0;
    const int pw = padding == Padding::same ? (kw - 1) / 2 : 0;
    const int oh = padding == Padding::same ? xs.h : xs.h - kh + 1;
    const int ow = padding == Padding::same ? xs.w : xs.w - kw + 1;
    if (oh < 1 || ow < 1)
        throw ShapeError("conv2d output has non-positive spatial dims for input " + xs.str());

    const detail::ConvGeom geom{cin, cout, kh, kw, ph, pw, oh, ow};
    Tensor<S> out(Shape{xs.n, cout, oh, ow});
    detail::conv_forward_kernel(x.data(), weight.data(), bias ? bias->data() : nullptr,
                                out.data(), xs, geom);

    Tensor<S> xh = x, wh = weight;
    std::optional<Tensor<S>> bh = bias;
    std::vector<Tensor<S>> inputs{x, weight};
    if (bias)
        inputs.push_back(*bias);
    detail::record(OpKind::conv2d, out, inputs,
                   [xh, wh, bh, geom](const std::vector<S>& og) mutable {
        const Shape xs = xh.shape();
        const std::int64_t oplane = static_cast<std::int64_t>(geom.oh) * geom.ow;
        if (bh && bh->tracked()) {
            S* bg = bh->grad().data();
            for (int nb = 0; nb < xs.n; ++nb)
                for (int co = 0; co < geom.cout; ++co) {
                    const S* gc = og.data() + (static_cast<std::int64_t>(nb) * geom.cout + co) * oplane;
                    S acc = S(0);
                    for (std::int64_t i = 0; i < oplane; ++i)
                        acc += gc[i];
                    bg[co] += acc;
                }
        }
        if (wh.tracked())
            detail::conv_backward_w_kernel(wh.grad().data(), xh.data(), og.data(), xs, geom);
        if (xh.tracked())
            detail::conv_backward_x_kernel(xh.grad().data(), wh.data(), og.data(), xs, geom);
    });
    return out;
}

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& weight, Padding padding) {
    return conv2d(x, weight, std::optional<Tensor<S>>{}, padding);
}

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias,
                 Padding padding) {
    return conv2d(x, weight, std::optional<Tensor<S>>(bias), padding);
}

// --------------------------------------------------------------------------
// maxpool2x2: non-overlapping 2x2 max. Ties pick the first maximum in
// row-major window order. Gradient flows only to the argmax cell.
// --------------------------------------------------------------------------
template <typename S>
Pooled<S> maxpool2x2(const Tensor<S>& x) {
    const Shape xs = x.shape();
    if (xs.h % 2 != 0 || xs.w % 2 != 0)
        throw ShapeError("maxpool2x2 requires even spatial dims, got " + xs.str());
    const int oh = xs.h / 2, ow = xs.w / 2;
    Tensor<S> out(Shape{xs.n, xs.c, oh, ow});
    PoolIndices idx{Shape{xs.n, xs.c, oh, ow}, std::vector<std::uint8_t>(out.count())};

    const S* xd = x.data();
    S* od = out.data();
    std::uint8_t* id = idx.argmax.data();
    const std::int64_t planes = static_cast<std::int64_t>(xs.n) * xs.c;
    for (std::int64_t p = 0; p < planes; ++p) {
        const S* xp = xd + p * xs.plane();
        S* op = od + p * static_cast<std::int64_t>(oh) * ow;
        std::uint8_t* ip = id + p * static_cast<std::int64_t>(oh) * ow;
        for (int y = 0; y < oh; ++y) {
            const S* r0 = xp + static_cast<std::int64_t>(2 * y) * xs.w;
            const S* r1 = r0 + xs.w;
            for (int xx = 0; xx < ow; ++xx) {
                const S v[4] = {r0[2 * xx], r0[2 * xx + 1], r1[2 * xx], r1[2 * xx + 1]};
                int best = 0;
                for (int k = 1; k < 4; ++k)
                    if (v[k] > v[best])
                        best = k;
                op[y * ow + xx] = v[best];
                ip[y * ow + xx] = static_cast<std::uint8_t>(best);
            }
        }
    }

    Tensor<S> xh = x;
    auto saved = std::make_shared<std::vector<std::uint8_t>>(idx.argmax);
    detail::record(OpKind::maxpool2x2, out, {x},
                   [xh, saved, oh, ow](const std::vector<S>& og) mutable {
        if (!xh.tracked())
            return;
        const Shape xs = xh.shape();
        S* xg = xh.grad().data();
        const std::int64_t planes = static_cast<std::int64_t>(xs.n) * xs.c;
        for (std::int64_t p = 0; p < planes; ++p) {
            S* xp = xg + p * xs.plane();
            const S* gp = og.data() + p * static_cast<std::int64_t>(oh) * ow;
            const std::uint8_t* ip = saved->data() + p * static_cast<std::int64_t>(oh) * ow;
            for (int y = 0; y < oh; ++y)
                for (int xx = 0; xx < ow; ++xx) {
                    const int k = ip[y * ow + xx];
                    xp[static_cast<std::int64_t>(2 * y + k / 2) * xs.w + 2 * xx + k % 2] +=
                        gp[y * ow + xx];
                }
        }
    });
    return {out, std::move(idx)};
}

// --------------------------------------------------------------------------
// max_unpool2x2: place each value at its recorded window position, zeros
// elsewhere. Gradient gathers from the same positions.
// --------------------------------------------------------------------------
template <typename S>
Tensor<S> max_unpool2x2(const Tensor<S>& y, const PoolIndices& idx) {
    const Shape ys = y.shape();
    if (!(idx.pooled == ys))
        throw ShapeError("max_unpool2x2 index shape " + idx.pooled.str() +
                         " does not match input " + ys.str());
    Tensor<S> out(Shape{ys.n, ys.c, ys.h * 2, ys.w * 2});
    const S* yd = y.data();
    S* od = out.data();
    const int oh = ys.h * 2, ow = ys.w * 2;
    const std::int64_t planes = static_cast<std::int64_t>(ys.n) * ys.c;
    for (std::int64_t p = 0; p < planes; ++p) {
        const S* yp = yd + p * ys.plane();
        S* op = od + p * static_cast<std::int64_t>(oh) * ow;
        const std::uint8_t* ip = idx.argmax.data() + p * ys.plane();
        for (int yy = 0; yy < ys.h; ++yy)
            for (int xx = 0; xx < ys.w; ++xx) {
                const int k = ip[yy * ys.w + xx];
                op[static_cast<std::int64_t>(2 * yy + k / 2) * ow + 2 * xx + k % 2] =
                    yp[yy * ys.w + xx];
            }
    }

    Tensor<S> yh = y;
    auto saved = std::make_shared<std::vector<std::uint8_t>>(idx.argmax);
    detail::record(OpKind::max_unpool2x2, out, {y},
                   [yh, saved](const std::vector<S>& og) mutable {
        if (!yh.tracked())
            return;
        const Shape ys = yh.shape();
        const int ow = ys.w * 2;
        S* yg = yh.grad().data();
        const std::int64_t planes = static_cast<std::int64_t>(ys.n) * ys.c;
        for (std::int64_t p = 0; p < planes; ++p) {
            S* yp = yg + p * ys.plane();
            const S* gp = og.data() + p * ys.plane() * 4;
            const std::uint8_t* ip = saved->data() + p * ys.plane();
            for (int yy = 0; yy < ys.h; ++yy)
                for (int xx = 0; xx < ys.w; ++xx) {
                    const int k = ip[yy * ys.w + xx];
                    yp[yy * ys.w + xx] +=
                        gp[static_cast<std::int64_t>(2 * yy + k / 2) * ow + 2 * xx + k % 2];
                }
        }
    });
    return out;
}

// --------------------------------------------------------------------------
// upsample_nearest2x: replicate each cell into a 2x2 block; gradient sums the
// four replicas.
// --------------------------------------------------------------------------
template <typename S>
Tensor<S> upsample_nearest2x(const Tensor<S>& x) {
    const Shape xs = x.shape();
    Tensor<S> out(Shape{xs.n, xs.c, xs.h * 2, xs.w * 2});
    const S* xd = x.data();
    S* od = out.data();
    const int ow = xs.w * 2;
    const std::int64_t planes = static_cast<std::int64_t>(xs.n) * xs.c;
    for (std::int64_t p = 0; p < planes; ++p) {
        const S* xp = xd + p * xs.plane();
        S* op = od + p * xs.plane() * 4;
        for (int y = 0; y < xs.h; ++y) {
            const S* xrow = xp + static_cast<std::int64_t>(y) * xs.w;
            S* o0 = op + static_cast<std::int64_t>(2 * y) * ow;
            S* o1 = o0 + ow;
            for (int xx = 0; xx < xs.w; ++xx) {
                const S v = xrow[xx];
                o0[2 * xx] = v;
                o0[2 * xx + 1] = v;
                o1[2 * xx] = v;
                o1[2 * xx + 1] = v;
            }
        }
    }

    Tensor<S> xh = x;
    detail::record(OpKind::upsample_nearest2x, out, {x},
                   [xh](const std::vector<S>& og) mutable {
        if (!xh.tracked())
            return;
        const Shape xs = xh.shape();
        const int ow = xs.w * 2;
        S* xg = xh.grad().data();
        const std::int64_t planes = static_cast<std::int64_t>(xs.n) * xs.c;
        for (std::int64_t p = 0; p < planes; ++p) {
            S* xp = xg + p * xs.plane();
            const S* gp = og.data() + p * xs.plane() * 4;
            for (int y = 0; y < xs.h; ++y) {
                S* xrow = xp + static_cast<std::int64_t>(y) * xs.w;
                const S* g0 = gp + static_cast<std::int64_t>(2 * y) * ow;
                const S* g1 = g0 + ow;
                for (int xx = 0; xx < xs.w; ++xx)
                    xrow[xx] += g0[2 * xx] + g0[2 * xx + 1] + g1[2 * xx] + g1[2 * xx + 1];
            }
        }
    });
    return out;
}

// --------------------------------------------------------------------------
// concat_channels: a's channels first, then b's.
// --------------------------------------------------------------------------
template <typename S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
    const Shape as = a.shape(), bs = b.shape();
    if (as.n != bs.n || as.h != bs.h || as.w != bs.w)
        throw ShapeError("concat_channels mismatch: " + as.str() + " vs " + bs.str());
    Tensor<S> out(Shape{as.n, as.c + bs.c, as.h, as.w});
    const std::int64_t plane = as.plane();
    S* od = out.data();
    for (int nb = 0; nb < as.n; ++nb) {
        std::copy_n(a.data() + static_cast<std::int64_t>(nb) * as.c * plane, as.c * plane,
                    od + static_cast<std::int64_t>(nb) * (as.c + bs.c) * plane);
        std::copy_n(b.data() + static_cast<std::int64_t>(nb) * bs.c * plane, bs.c * plane,
                    od + (static_cast<std::int64_t>(nb) * (as.c + bs.c) + as.c) * plane);
    }

    Tensor<S> ah = a, bh = b;
    detail::record(OpKind::concat_channels, out, {a, b},
                   [ah, bh](const std::vector<S>& og) mutable {
        const Shape as = ah.shape(), bs = bh.shape();
        const std::int64_t plane = as.plane();
        const int cc = as.c + bs.c;
        if (ah.tracked()) {
            S* ag = ah.grad().data();
            for (int nb = 0; nb < as.n; ++nb) {
                const S* gp = og.data() + static_cast<std::int64_t>(nb) * cc * plane;
                S* ap = ag + static_cast<std::int64_t>(nb) * as.c * plane;
                for (std::int64_t i = 0; i < as.c * plane; ++i)
                    ap[i] += gp[i];
            }
        }
        if (bh.tracked()) {
            S* bg = bh.grad().data();
            for (int nb = 0; nb < bs.n; ++nb) {
                const S* gp = og.data() + (static_cast<std::int64_t>(nb) * cc + as.c) * plane;
                S* bp = bg + static_cast<std::int64_t>(nb) * bs.c * plane;
                for (std::int64_t i = 0; i < bs.c * plane; ++i)
                    bp[i] += gp[i];
            }
        }
    });
    return out;
}

// --------------------------------------------------------------------------
// batchnorm2d: per-channel normalization over (n,h,w).
//
// Train mode normalizes by batch statistics (biased variance), updates the
// running stats in place by exponential moving average, and records the full
// batch-statistics chain rule. Infer mode normalizes by the running stats and
// records nothing.
// --------------------------------------------------------------------------
template <typename S>
Tensor<S> batchnorm2d(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                      BnMode mode, Tensor<S>& running_mean, Tensor<S>& running_var,
                      S eps = S(1e-5), S momentum = S(0.99)) {
    const Shape xs = x.shape();
    const int c = xs.c;
    if (gamma.count() != c || beta.count() != c)
        throw ShapeError("batchnorm2d gamma/beta length does not match channels " +
                         std::to_string(c));
    if (running_mean.count() != c || running_var.count() != c)
        throw ShapeError("batchnorm2d running stats length does not match channels " +
                         std::to_string(c));
    const std::int64_t m = static_cast<std::int64_t>(xs.n) * xs.h * xs.w;
    if (m <= 0)
        throw ShapeError("batchnorm2d needs at least one element per channel");

    Tensor<S> out(xs);
    const S* xd = x.data();
    S* od = out.data();
    const S* gm = gamma.data();
    const S* bt = beta.data();
    const std::int64_t plane = xs.plane();

    if (mode == BnMode::infer) {
        for (int ci = 0; ci < c; ++ci) {
            const S invstd = S(1) / std::sqrt(running_var.data()[ci] + eps);
            const S scale = gm[ci] * invstd;
            const S shift = bt[ci] - running_mean.data()[ci] * scale;
            for (int nb = 0; nb < xs.n; ++nb) {
                const S* xp = xd + (static_cast<std::int64_t>(nb) * c + ci) * plane;
                S* op = od + (static_cast<std::int64_t>(nb) * c + ci) * plane;
                for (std::int64_t i = 0; i < plane; ++i)
                    op[i] = scale * xp[i] + shift;
            }
        }
        return out;
    }

    // Batch statistics, normalized values saved for the backward rule.
    std::vector<S> mean(c), invstd(c);
    auto xhat = std::make_shared<std::vector<S>>(x.count());
    for (int ci = 0; ci < c; ++ci) {
        S sum = S(0);
        for (int nb = 0; nb < xs.n; ++nb) {
            const S* xp = xd + (static_cast<std::int64_t>(nb) * c + ci) * plane;
            for (std::int64_t i = 0; i < plane; ++i)
                sum += xp[i];
        }
        const S mu = sum / static_cast<S>(m);
        S var = S(0);
        for (int nb = 0; nb < xs.n; ++nb) {
            const S* xp = xd + (static_cast<std::int64_t>(nb) * c + ci) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
                const S d = xp[i] - mu;
                var += d * d;
            }
        }
        var /= static_cast<S>(m);
        mean[ci] = mu;
        invstd[ci] = S(1) / std::sqrt(var + eps);
        for (int nb = 0; nb < xs.n; ++nb) {
            const S* xp = xd + (static_cast<std::int64_t>(nb) * c + ci) * plane;
            S* op = od + (static_cast<std::int64_t>(nb) * c + ci) * plane;
            S* hp = xhat->data() + (static_cast<std::int64_t>(nb) * c + ci) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
                const S h = (xp[i] - mu) * invstd[ci];
                hp[i] = h;
                op[i] = gm[ci] * h + bt[ci];
            }
        }
        // EMA update of running statistics.
        running_mean.data()[ci] = momentum * running_mean.data()[ci] + (S(1) - momentum) * mu;
        running_var.data()[ci] = momentum * running_var.data()[ci] + (S(1) - momentum) * var;
    }

    Tensor<S> xh = x, gh = gamma, bh = beta;
    auto inv = std::make_shared<std::vector<S>>(std::move(invstd));
    detail::record(OpKind::batchnorm2d, out, {x, gamma, beta},
                   [xh, gh, bh, xhat, inv](const std::vector<S>& og) mutable {
        const Shape xs = xh.shape();
        const int c = xs.c;
        const std::int64_t plane = xs.plane();
        const std::int64_t m = static_cast<std::int64_t>(xs.n) * plane;
        const bool need_x = xh.tracked();
        const bool need_g = gh.tracked();
        const bool need_b = bh.tracked();
        S* xg = need_x ? xh.grad().data() : nullptr;
        S* gg = need_g ? gh.grad().data() : nullptr;
        S* bg = need_b ? bh.grad().data() : nullptr;
        for (int ci = 0; ci < c; ++ci) {
            S sum_g = S(0), sum_gh = S(0);
            for (int nb = 0; nb < xs.n; ++nb) {
                const std::int64_t off = (static_cast<std::int64_t>(nb) * c + ci) * plane;
                const S* gp = og.data() + off;
                const S* hp = xhat->data() + off;
                for (std::int64_t i = 0; i < plane; ++i) {
                    sum_g += gp[i];
                    sum_gh += gp[i] * hp[i];
                }
            }
            if (need_b)
                bg[ci] += sum_g;
            if (need_g)
                gg[ci] += sum_gh;
            if (need_x) {
                const S k = gh.data()[ci] * (*inv)[ci];
                const S mg = sum_g / static_cast<S>(m);
                const S mgh = sum_gh / static_cast<S>(m);
                for (int nb = 0; nb < xs.n; ++nb) {
                    const std::int64_t off = (static_cast<std::int64_t>(nb) * c + ci) * plane;
                    const S* gp = og.data() + off;
                    const S* hp = xhat->data() + off;
                    S* xp = xg + off;
                    for (std::int64_t i = 0; i < plane; ++i)
                        xp[i] += k * (gp[i] - mg - hp[i] * mgh);
                }
            }
        }
    });
    return out;
}

// --------------------------------------------------------------------------
// Elementwise ops. The relu derivative at exactly 0 is 0.
// --------------------------------------------------------------------------
template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
    Tensor<S> out(x.shape());
    const S* xd = x.data();
    S* od = out.data();
    const std::int64_t n = x.count();
    for (std::int64_t i = 0; i < n; ++i)
        od[i] = xd[i] > S(0) ? xd[i] : S(0);

    Tensor<S> xh = x;
    detail::record(OpKind::relu, out, {x}, [xh](const std::vector<S>& og) mutable {
        if (!xh.tracked())
            return;
        S* xg = xh.grad().data();
        const S* xd = xh.data();
        for (std::size_t i = 0; i < og.size(); ++i)
            if (xd[i] > S(0))
                xg[i] += og[i];
    });
    return out;
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
    Tensor<S> out(x.shape());
    const S* xd = x.data();
    S* od = out.data();
    const std::int64_t n = x.count();
    for (std::int64_t i = 0; i < n; ++i) {
        const S v = xd[i];
        if (v >= S(0)) {
            od[i] = S(1) / (S(1) + std::exp(-v));
        } else {
            const S e = std::exp(v);
            od[i] = e / (S(1) + e);
        }
    }

    Tensor<S> xh = x;
    auto yv = std::make_shared<std::vector<S>>(out.vec());
    detail::record(OpKind::sigmoid, out, {x}, [xh, yv](const std::vector<S>& og) mutable {
        if (!xh.tracked())
            return;
        S* xg = xh.grad().data();
        for (std::size_t i = 0; i < og.size(); ++i) {
            const S y = (*yv)[i];
            xg[i] += og[i] * y * (S(1) - y);
        }
    });
    return out;
}

// out = a + scale * b, with scale a scalar (1,1,1,1) tensor so it can be
// checked as a differentiable input.
template <typename S>
Tensor<S> add_scaled(const Tensor<S>& a, const Tensor<S>& b, const Tensor<S>& scale) {
    if (!(a.shape() == b.shape()))
        throw ShapeError("add_scaled shape mismatch: " + a.shape().str() + " vs " +
                         b.shape().str());
    if (scale.count() != 1)
        throw ShapeError("add_scaled scale must be a scalar tensor");
    Tensor<S> out(a.shape());
    const S s = scale.data()[0];
    const S* ad = a.data();
    const S* bd = b.data();
    S* od = out.data();
    const std::int64_t n = a.count();
    for (std::int64_t i = 0; i < n; ++i)
        od[i] = ad[i] + s * bd[i];

    Tensor<S> ah = a, bh = b, sh = scale;
    detail::record(OpKind::add_scaled, out, {a, b, scale},
                   [ah, bh, sh](const std::vector<S>& og) mutable {
        if (ah.tracked()) {
            S* ag = ah.grad().data();
            for (std::size_t i = 0; i < og.size(); ++i)
                ag[i] += og[i];
        }
        if (bh.tracked()) {
            const S s = sh.data()[0];
            S* bg = bh.grad().data();
            for (std::size_t i = 0; i < og.size(); ++i)
                bg[i] += s * og[i];
        }
        if (sh.tracked()) {
            S acc = S(0);
            const S* bd = bh.data();
            for (std::size_t i = 0; i < og.size(); ++i)
                acc += og[i] * bd[i];
            sh.grad()[0] += acc;
        }
    });
    return out;
}

template <typename S>
Tensor<S> add_scaled(const Tensor<S>& a, const Tensor<S>& b, S scale) {
    Tensor<S> s(Shape{1, 1, 1, 1}, scale);
    return add_scaled(a, b, s);
}

// Reduce to a (1,1,1,1) scalar by summation.
template <typename S>
Tensor<S> sum_all(const Tensor<S>& x) {
    Tensor<S> out(Shape{1, 1, 1, 1});
    const S* xd = x.data();
    S acc = S(0);
    const std::int64_t n = x.count();
    for (std::int64_t i = 0; i < n; ++i)
        acc += xd[i];
    out.data()[0] = acc;

    Tensor<S> xh = x;
    detail::record(OpKind::sum_all, out, {x}, [xh](const std::vector<S>& og) mutable {
        if (!xh.tracked())
            return;
        S* xg = xh.grad().data();
        const S g = og[0];
        const std::int64_t n = xh.count();
        for (std::int64_t i = 0; i < n; ++i)
            xg[i] += g;
    });
    return out;
}

} // namespace runet
