#pragma once

#include <cmath>
#include <optional>

#include "runet/common.hpp"
#include "runet/ops.hpp"
#include "runet/tensor.hpp"

namespace runet {

enum class StageKind { encoder, decoder, bottleneck };

struct StageSpec {
    int cin = 0;
    int cout = 0;
    StageKind kind = StageKind::encoder;
    bool use_shortcut = false;
    bool use_bn = false;
};

// Kaiming fan-in scaled normal init for conv weights feeding ReLU.
template <typename S>
void kaiming_init(Tensor<S>& weight, Rng& rng) {
    const Shape ws = weight.shape();
    const double fan_in = static_cast<double>(ws.c) * ws.h * ws.w;
    const double stddev = std::sqrt(2.0 / fan_in);
    for (auto& v : weight.vec())
        v = static_cast<S>(stddev * rng.normal());
}

template <typename S>
struct BatchNormParams {
    Tensor<S> gamma, beta, running_mean, running_var;

    explicit BatchNormParams(int channels)
        : gamma(Shape{1, channels, 1, 1}, S(1)),
          beta(Shape{1, channels, 1, 1}, S(0)),
          running_mean(Shape{1, channels, 1, 1}, S(0)),
          running_var(Shape{1, channels, 1, 1}, S(1)) {
        gamma.set_requires_grad(true);
        beta.set_requires_grad(true);
    }
};

// A conv layer with optional batch norm. When BN is enabled the conv carries
// no bias (BN's beta subsumes it). ReLU placement is chosen by the caller
// because the residual branch activates before the addition, not after its
// last conv.
template <typename S>
struct ConvBNRelu {
    Tensor<S> weight;
    std::optional<Tensor<S>> bias;
    std::optional<BatchNormParams<S>> bn;

    ConvBNRelu(int cin, int cout, int ksize, bool use_bn, Rng& rng)
        : weight(Shape{cout, cin, ksize, ksize}) {
        weight.set_requires_grad(true);
        kaiming_init(weight, rng);
        if (use_bn) {
            bn.emplace(cout);
        } else {
            bias.emplace(Shape{1, cout, 1, 1}, S(0));
            bias->set_requires_grad(true);
        }
    }

    Tensor<S> forward(const Tensor<S>& x, BnMode mode, bool apply_relu) {
        Tensor<S> y = conv2d(x, weight, bias, Padding::same);
        if (bn)
            y = batchnorm2d(y, bn->gamma, bn->beta, mode, bn->running_mean, bn->running_var);
        return apply_relu ? relu(y) : y;
    }
};

// Residual stage: out = ReLU(branch(x) + scale_b * projection(x)), where
// branch = conv3 -> [BN] -> ReLU -> conv3 -> [BN] and projection is a 1x1
// conv (+BN when enabled) mapping cin -> cout. scale_b is a fixed
// hyperparameter, 1 by default.
template <typename S>
struct ShortcutBlock {
    ConvBNRelu<S> conv1, conv2, projection;
    S scale_b = S(1);

    ShortcutBlock(int cin, int cout, bool use_bn, Rng& rng)
        : conv1(cin, cout, 3, use_bn, rng),
          conv2(cout, cout, 3, use_bn, rng),
          projection(cin, cout, 1, use_bn, rng) {}

    Tensor<S> forward(const Tensor<S>& x, BnMode mode) {
        if (x.shape().c != conv1.weight.shape().c)
            throw ShapeError("shortcut block expects " +
                             std::to_string(conv1.weight.shape().c) + " channels, got " +
                             x.shape().str());
        Tensor<S> branch = conv2.forward(conv1.forward(x, mode, true), mode, false);
        Tensor<S> shortcut = projection.forward(x, mode, false);
        return relu(add_scaled(branch, shortcut, scale_b));
    }
};

// One encoder/decoder/bottleneck stage body: either a plain pair of conv
// layers or a ShortcutBlock.
template <typename S>
struct Stage {
    StageSpec spec;
    std::optional<ShortcutBlock<S>> shortcut;
    std::optional<ConvBNRelu<S>> conv1, conv2;

    Stage(StageSpec sp, Rng& rng) : spec(sp) {
        if (sp.cout < 1)
            throw ShapeError("stage cout must be positive");
        if (sp.use_shortcut) {
            shortcut.emplace(sp.cin, sp.cout, sp.use_bn, rng);
        } else {
            conv1.emplace(sp.cin, sp.cout, 3, sp.use_bn, rng);
            conv2.emplace(sp.cout, sp.cout, 3, sp.use_bn, rng);
        }
    }

    Tensor<S> body(const Tensor<S>& x, BnMode mode) {
        if (shortcut)
            return shortcut->forward(x, mode);
        return conv2->forward(conv1->forward(x, mode, true), mode, true);
    }
};

template <typename S>
struct EncoderOut {
    Tensor<S> features; // pre-pool, retained for skip merges
    Tensor<S> pooled;
    PoolIndices indices;
};

// features = stage body; pooled = maxpool2x2(features).
template <typename S>
EncoderOut<S> encoder_stage(Stage<S>& stage, const Tensor<S>& x, BnMode mode) {
    Tensor<S> features = stage.body(x, mode);
    Pooled<S> p = maxpool2x2(features);
    return {features, p.values, std::move(p.indices)};
}

// up = upsample2x(x); merged = concat(skip, up); out = stage body(merged).
// Skip channels come first in the merge.
template <typename S>
Tensor<S> decoder_stage(Stage<S>& stage, const Tensor<S>& x, const Tensor<S>& skip, BnMode mode) {
    const Shape xs = x.shape(), ss = skip.shape();
    if (ss.h != 2 * xs.h || ss.w != 2 * xs.w || ss.n != xs.n)
        throw ShapeError("decoder skip " + ss.str() + " does not match 2x of " + xs.str());
    Tensor<S> up = upsample_nearest2x(x);
    Tensor<S> merged = concat_channels(skip, up);
    return stage.body(merged, mode);
}

} // namespace runet
