#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "runet/loss.hpp"
#include "runet/model.hpp"
#include "runet/ops.hpp"
#include "runet/tensor.hpp"

namespace runet {

struct FdOpts {
    double eps = 1e-5;   // central-difference step
    double floor = 1e-7; // absolute floor in the relative-error denominator
};

// Test-only scalarizer: fixed random projection of a tensor. A plain sum
// would let transposition-style backward bugs cancel out.
template <typename S>
Tensor<S> weighted_sum(const Tensor<S>& x, std::shared_ptr<std::vector<S>> weights) {
    if (static_cast<std::int64_t>(weights->size()) != x.count())
        throw ShapeError("weighted_sum size mismatch");
    S acc = S(0);
    for (std::int64_t i = 0; i < x.count(); ++i)
        acc += x.data()[i] * (*weights)[i];
    Tensor<S> out(Shape{1, 1, 1, 1}, acc);
    Tensor<S> xh = x;
    detail::record(OpKind::sum_all, out, {x}, [xh, weights](const std::vector<S>& og) mutable {
        if (!xh.tracked())
            return;
        S* xg = xh.grad().data();
        const S g = og[0];
        for (std::size_t i = 0; i < weights->size(); ++i)
            xg[i] += g * (*weights)[i];
    });
    return out;
}

// Compares the analytic gradients already accumulated in `vars` against
// central finite differences of `value_fn` (which must re-run the forward
// pass from the current contents of `vars`). Returns the worst element-wise
// relative error max|fd - g| / max(|fd|, |g|, floor).
template <typename S, typename F>
double fd_max_rel_err(F&& value_fn, std::vector<Tensor<S>> vars, FdOpts opts = {}) {
    double worst = 0.0;
    const S eps = static_cast<S>(opts.eps);
    for (auto& var : vars) {
        const std::int64_t n = var.count();
        for (std::int64_t i = 0; i < n; ++i) {
            const S old = var.data()[i];
            var.data()[i] = old + eps;
            const double f1 = static_cast<double>(value_fn());
            var.data()[i] = old - eps;
            const double f2 = static_cast<double>(value_fn());
            var.data()[i] = old;
            const double fd = (f1 - f2) / (2.0 * static_cast<double>(eps));
            const double g =
                var.has_grad() ? static_cast<double>(var.grad()[i]) : 0.0;
            const double denom = std::max({std::fabs(fd), std::fabs(g), opts.floor});
            worst = std::max(worst, std::fabs(fd - g) / denom);
        }
    }
    return worst;
}

// Runs backward on build() once for analytic gradients, then finite
// differences of the same construction.
template <typename S>
double check_op_gradient(const std::function<Tensor<S>()>& build, std::vector<Tensor<S>> vars,
                         FdOpts opts = {}) {
    for (auto& v : vars) {
        v.set_requires_grad(true);
        v.zero_grad();
    }
    Tensor<S> loss = build();
    backward(loss);
    auto value_fn = [&]() {
        NoGradGuard guard;
        return build().data()[0];
    };
    return fd_max_rel_err(value_fn, vars, opts);
}

struct OpCheckResult {
    std::string op;
    double max_rel_err = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

// Signed uniform values with magnitude in [lo, hi]; the default keeps finite
// differences clear of relu/pooling kinks.
template <typename S>
Tensor<S> gradcheck_random(Shape shape, Rng& rng, double lo = 0.05, double hi = 1.0) {
    Tensor<S> t(shape);
    for (auto& v : t.vec())
        v = static_cast<S>(rng.uniform(lo, hi) * (rng.uniform() < 0.5 ? -1.0 : 1.0));
    return t;
}

// Uniform values in (lo, hi), for probability-valued inputs.
template <typename S>
Tensor<S> gradcheck_random_unit(Shape shape, Rng& rng, double lo = 0.01, double hi = 0.99) {
    Tensor<S> t(shape);
    for (auto& v : t.vec())
        v = static_cast<S>(rng.uniform(lo, hi));
    return t;
}

template <typename S>
std::shared_ptr<std::vector<S>> make_projection(std::int64_t n, Rng& rng) {
    auto w = std::make_shared<std::vector<S>>(n);
    for (auto& v : *w)
        v = static_cast<S>(rng.uniform(-1.0, 1.0));
    return w;
}

// The finite-difference suite behind `gradcheck`: every primitive in double
// precision over `seeds` random draws, plus one end-to-end residual-U-Net
// loss gradient on a 16x16 single-sample instance.
inline std::vector<OpCheckResult> gradcheck_suite(std::uint64_t base_seed, int seeds = 5,
                                                  double primitive_tol = 1e-4,
                                                  double end_to_end_tol = 1e-3) {
    using S = double;
    std::vector<OpCheckResult> results;

    auto run = [&](const std::string& name, double tol,
                   const std::function<double(Rng&)>& one_seed) {
        double worst = 0.0;
        for (int si = 0; si < seeds; ++si) {
            Rng rng(base_seed + 0x9e37ull * si + std::hash<std::string>{}(name));
            worst = std::max(worst, one_seed(rng));
        }
        results.push_back({name, worst, tol, worst < tol});
    };

    run("conv2d_3x3_same", primitive_tol, [](Rng& rng) {
        auto x = gradcheck_random<S>({1, 2, 5, 5}, rng);
        auto w = gradcheck_random<S>({3, 2, 3, 3}, rng);
        auto b = gradcheck_random<S>({1, 3, 1, 1}, rng);
        auto prj = make_projection<S>(1 * 3 * 5 * 5, rng);
        auto build = [&]() { return weighted_sum(conv2d(x, w, b, Padding::same), prj); };
        return check_op_gradient<S>(build, {x, w, b});
    });

    run("conv2d_3x3_none", primitive_tol, [](Rng& rng) {
        auto x = gradcheck_random<S>({2, 2, 5, 6}, rng);
        auto w = gradcheck_random<S>({2, 2, 3, 3}, rng);
        auto b = gradcheck_random<S>({1, 2, 1, 1}, rng);
        auto prj = make_projection<S>(2 * 2 * 3 * 4, rng);
        auto build = [&]() { return weighted_sum(conv2d(x, w, b, Padding::none), prj); };
        return check_op_gradient<S>(build, {x, w, b});
    });

    run("conv2d_1x1", primitive_tol, [](Rng& rng) {
        auto x = gradcheck_random<S>({2, 3, 4, 4}, rng);
        auto w = gradcheck_random<S>({2, 3, 1, 1}, rng);
        auto b = gradcheck_random<S>({1, 2, 1, 1}, rng);
        auto prj = make_projection<S>(2 * 2 * 4 * 4, rng);
        auto build = [&]() { return weighted_sum(conv2d(x, w, b, Padding::same), prj); };
        return check_op_gradient<S>(build, {x, w, b});
    });

    run("maxpool2x2", primitive_tol, [](Rng& rng) {
        auto x = gradcheck_random_unit<S>({1, 1, 4, 4}, rng);
        auto prj = make_projection<S>(1 * 1 * 2 * 2, rng);
        auto build = [&]() { return weighted_sum(maxpool2x2(x).values, prj); };
        return check_op_gradient<S>(build, {x});
    });

    run("max_unpool2x2", primitive_tol, [](Rng& rng) {
        auto src = gradcheck_random_unit<S>({1, 2, 6, 6}, rng);
        PoolIndices idx = maxpool2x2(src).indices;
        auto y = gradcheck_random<S>({1, 2, 3, 3}, rng);
        auto prj = make_projection<S>(1 * 2 * 6 * 6, rng);
        auto build = [&]() { return weighted_sum(max_unpool2x2(y, idx), prj); };
        return check_op_gradient<S>(build, {y});
    });

    run("upsample_nearest2x", primitive_tol, [](Rng& rng) {
        auto x = gradcheck_random<S>({1, 1, 3, 3}, rng);
        auto prj = make_projection<S>(1 * 1 * 6 * 6, rng);
        auto build = [&]() { return weighted_sum(upsample_nearest2x(x), prj); };
        return check_op_gradient<S>(build, {x});
    });

    run("concat_channels", primitive_tol, [](Rng& rng) {
        auto a = gradcheck_random<S>({1, 2, 4, 4}, rng);
        auto b = gradcheck_random<S>({1, 3, 4, 4}, rng);
        auto prj = make_projection<S>(1 * 5 * 4 * 4, rng);
        auto build = [&]() { return weighted_sum(concat_channels(a, b), prj); };
        return check_op_gradient<S>(build, {a, b});
    });

    run("batchnorm2d_train", primitive_tol, [](Rng& rng) {
        auto x = gradcheck_random<S>({4, 3, 5, 5}, rng);
        auto gamma = gradcheck_random<S>({1, 3, 1, 1}, rng, 0.5, 1.5);
        auto beta = gradcheck_random<S>({1, 3, 1, 1}, rng, 0.0, 0.5);
        Tensor<S> rmean({1, 3, 1, 1}, S(0));
        Tensor<S> rvar({1, 3, 1, 1}, S(1));
        auto prj = make_projection<S>(4 * 3 * 5 * 5, rng);
        auto build = [&, rmean, rvar]() mutable {
            return weighted_sum(
                batchnorm2d(x, gamma, beta, BnMode::train, rmean, rvar, S(1e-5), S(0.99)), prj);
        };
        return check_op_gradient<S>(build, {x, gamma, beta});
    });

    run("relu", primitive_tol, [](Rng& rng) {
        auto x = gradcheck_random<S>({2, 3, 4, 4}, rng);
        auto prj = make_projection<S>(2 * 3 * 4 * 4, rng);
        auto build = [&]() { return weighted_sum(relu(x), prj); };
        return check_op_gradient<S>(build, {x});
    });

    run("sigmoid", primitive_tol, [](Rng& rng) {
        auto x = gradcheck_random<S>({2, 3, 4, 4}, rng);
        auto prj = make_projection<S>(2 * 3 * 4 * 4, rng);
        auto build = [&]() { return weighted_sum(sigmoid(x), prj); };
        return check_op_gradient<S>(build, {x});
    });

    run("add_scaled", primitive_tol, [](Rng& rng) {
        auto a = gradcheck_random<S>({2, 2, 3, 3}, rng);
        auto b = gradcheck_random<S>({2, 2, 3, 3}, rng);
        Tensor<S> scale({1, 1, 1, 1}, rng.uniform(0.3, 1.5));
        auto prj = make_projection<S>(2 * 2 * 3 * 3, rng);
        auto build = [&]() { return weighted_sum(add_scaled(a, b, scale), prj); };
        return check_op_gradient<S>(build, {a, b, scale});
    });

    run("dice_loss", primitive_tol, [](Rng& rng) {
        auto x = gradcheck_random_unit<S>({2, 1, 8, 8}, rng);
        Tensor<S> y({2, 1, 8, 8});
        for (auto& v : y.vec())
            v = rng.uniform() < 0.4 ? S(1) : S(0);
        auto build = [&]() { return dice_loss(x, y, DiceLossCfg{1.0}); };
        return check_op_gradient<S>(build, {x});
    });

    // End to end: full loss gradient of a tiny residual U-Net w.r.t. every
    // parameter and the input. Freshly built models sit exactly on relu
    // kinks (zero-initialized BN betas meet the residual add at 0), where
    // one-sided finite differences disagree with the subgradient convention,
    // so every parameter is nudged to a generic point first.
    {
        Rng rng(base_seed ^ 0xe2e0ull);
        ModelGraph<S> model(Arch::resunet, 2, base_seed + 7);
        for (auto& p : model.trainable_params())
            for (auto& v : p.vec())
                v += static_cast<S>(rng.uniform(0.02, 0.12) * (rng.uniform() < 0.5 ? -1.0 : 1.0));
        auto x = gradcheck_random_unit<S>({1, 1, 16, 16}, rng);
        Tensor<S> y({1, 1, 16, 16});
        for (auto& v : y.vec())
            v = rng.uniform() < 0.3 ? S(1) : S(0);
        auto build = [&]() {
            return dice_loss(model.forward(x, BnMode::train), y, DiceLossCfg{1.0});
        };
        std::vector<Tensor<S>> vars = model.trainable_params();
        vars.push_back(x);
        const double err = check_op_gradient<S>(build, vars);
        results.push_back({"resunet_end_to_end_16x16", err, end_to_end_tol, err < end_to_end_tol});
    }

    return results;
}

} // namespace runet
