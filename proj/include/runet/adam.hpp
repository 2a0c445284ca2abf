#pragma once

#include <cmath>
#include <vector>

#include "runet/common.hpp"
#include "runet/tensor.hpp"

namespace runet {

struct AdamCfg {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam with bias correction. Moment buffers are created to match the
// parameter list handed to the first step() and keyed by position, so the
// caller must pass the same parameter list every step.
template <typename S>
class Adam {
public:
    explicit Adam(AdamCfg cfg = {}) : cfg_(cfg) {
        if (cfg.beta1 < 0 || cfg.beta1 >= 1 || cfg.beta2 < 0 || cfg.beta2 >= 1)
            throw ConfigError("adam betas must lie in [0,1)");
    }

    const AdamCfg& cfg() const { return cfg_; }
    long long steps() const { return t_; }

    void step(std::vector<Tensor<S>>& params) {
        if (m_.empty()) {
            for (auto& p : params) {
                m_.emplace_back(p.count(), S(0));
                v_.emplace_back(p.count(), S(0));
            }
        }
        if (m_.size() != params.size())
            throw UsageError("adam step received a different parameter list");
        ++t_;
        const S lr = static_cast<S>(cfg_.lr);
        const S b1 = static_cast<S>(cfg_.beta1);
        const S b2 = static_cast<S>(cfg_.beta2);
        const S eps = static_cast<S>(cfg_.eps);
        const S c1 = S(1) - static_cast<S>(std::pow(cfg_.beta1, static_cast<double>(t_)));
        const S c2 = S(1) - static_cast<S>(std::pow(cfg_.beta2, static_cast<double>(t_)));
        for (std::size_t pi = 0; pi < params.size(); ++pi) {
            auto& p = params[pi];
            if (!p.has_grad())
                throw UsageError("adam step on parameter without gradient: index " +
                                 std::to_string(pi));
            S* pd = p.data();
            const S* g = p.grad().data();
            S* m = m_[pi].data();
            S* v = v_[pi].data();
            const std::int64_t count = p.count();
            for (std::int64_t i = 0; i < count; ++i) {
                m[i] = b1 * m[i] + (S(1) - b1) * g[i];
                v[i] = b2 * v[i] + (S(1) - b2) * g[i] * g[i];
                const S mhat = m[i] / c1;
                const S vhat = v[i] / c2;
                pd[i] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }

private:
    AdamCfg cfg_;
    long long t_ = 0;
    std::vector<std::vector<S>> m_, v_;
};

} // namespace runet
