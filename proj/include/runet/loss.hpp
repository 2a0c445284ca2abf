#pragma once

#include <memory>
#include <vector>

#include "runet/common.hpp"
#include "runet/tensor.hpp"

namespace runet {

struct DiceLossCfg {
    double k = 1.0; // smoothing constant; keeps empty-vs-empty well defined
};

// Smoothed soft Dice dissimilarity of one prediction/mask pair:
//   S(X,Y) = 1 - (2*sum(x*y) + k) / (sum(x) + sum(y) + k)
// X holds probabilities in [0,1], Y a binary mask. Result lies in [0,1) for
// k > 0; both masks empty gives exactly 0.
template <typename S>
S dice_similarity(const Tensor<S>& x, const Tensor<S>& y, S k) {
    if (!(x.shape() == y.shape()))
        throw ShapeError("dice_similarity shape mismatch: " + x.shape().str() + " vs " +
                         y.shape().str());
    if (!(k > S(0)))
        throw UsageError("dice smoothing k must be > 0");
    S sxy = S(0), sx = S(0), sy = S(0);
    const S* xd = x.data();
    const S* yd = y.data();
    const std::int64_t n = x.count();
    for (std::int64_t i = 0; i < n; ++i) {
        sxy += xd[i] * yd[i];
        sx += xd[i];
        sy += yd[i];
    }
    return S(1) - (S(2) * sxy + k) / (sx + sy + k);
}

// Batch loss of Eq.-style form: mean over samples of the smoothed Dice
// dissimilarity. Participates in the tape; the gradient reaches X only.
template <typename S>
Tensor<S> dice_loss(const Tensor<S>& x, const Tensor<S>& y, const DiceLossCfg& cfg = {}) {
    if (!(x.shape() == y.shape()))
        throw ShapeError("dice_loss shape mismatch: " + x.shape().str() + " vs " +
                         y.shape().str());
    if (!(cfg.k > 0))
        throw UsageError("dice smoothing k must be > 0");
    const Shape xs = x.shape();
    const int n = xs.n;
    if (n < 1)
        throw UsageError("dice_loss needs a non-empty batch");
    const std::int64_t per = static_cast<std::int64_t>(xs.c) * xs.h * xs.w;
    const S k = static_cast<S>(cfg.k);

    auto sums = std::make_shared<std::vector<S>>(); // per sample: A = 2*sxy+k, D = sx+sy+k
    sums->reserve(2 * n);
    S loss = S(0);
    for (int i = 0; i < n; ++i) {
        const S* xd = x.data() + i * per;
        const S* yd = y.data() + i * per;
        S sxy = S(0), sx = S(0), sy = S(0);
        for (std::int64_t j = 0; j < per; ++j) {
            sxy += xd[j] * yd[j];
            sx += xd[j];
            sy += yd[j];
        }
        const S a = S(2) * sxy + k;
        const S d = sx + sy + k;
        sums->push_back(a);
        sums->push_back(d);
        loss += S(1) - a / d;
    }
    Tensor<S> out(Shape{1, 1, 1, 1}, loss / static_cast<S>(n));

    Tensor<S> xh = x, yh = y;
    detail::record(OpKind::dice_loss, out, {x}, [xh, yh, sums, per, n](const std::vector<S>& og) mutable {
        if (!xh.tracked())
            return;
        const S g = og[0] / static_cast<S>(n);
        S* xg = xh.grad().data();
        const S* yd = yh.data();
        for (int i = 0; i < n; ++i) {
            const S a = (*sums)[2 * i];
            const S d = (*sums)[2 * i + 1];
            const S inv_d2 = S(1) / (d * d);
            S* xp = xg + i * per;
            const S* yp = yd + i * per;
            // dS/dx_j = (A - 2*y_j*D) / D^2
            for (std::int64_t j = 0; j < per; ++j)
                xp[j] += g * (a - S(2) * yp[j] * d) * inv_d2;
        }
    });
    return out;
}

// Hard Dice coefficient of two binary masks; 1.0 when both are empty.
template <typename S>
double dice_coefficient(const Tensor<S>& x_bin, const Tensor<S>& y_bin) {
    if (!(x_bin.shape() == y_bin.shape()))
        throw ShapeError("dice_coefficient shape mismatch: " + x_bin.shape().str() + " vs " +
                         y_bin.shape().str());
    double inter = 0.0, sx = 0.0, sy = 0.0;
    const S* xd = x_bin.data();
    const S* yd = y_bin.data();
    const std::int64_t n = x_bin.count();
    for (std::int64_t i = 0; i < n; ++i) {
        inter += static_cast<double>(xd[i]) * yd[i];
        sx += xd[i];
        sy += yd[i];
    }
    if (sx + sy == 0.0)
        return 1.0;
    return 2.0 * inter / (sx + sy);
}

} // namespace runet
