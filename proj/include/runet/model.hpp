#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "runet/blocks.hpp"
#include "runet/common.hpp"
#include "runet/ops.hpp"
#include "runet/tensor.hpp"

namespace runet {

enum class Arch { unet, segnet, resunet };

inline std::string arch_name(Arch a) {
    switch (a) {
    case Arch::unet: return "unet";
    case Arch::segnet: return "segnet";
    case Arch::resunet: return "resunet";
    }
    return "?";
}

inline Arch arch_from_name(const std::string& name) {
    if (name == "unet") return Arch::unet;
    if (name == "segnet") return Arch::segnet;
    if (name == "resunet") return Arch::resunet;
    throw ConfigError("unknown arch '" + name + "' (expected unet|segnet|resunet)");
}

enum class ParamRole { conv_weight, conv_bias, bn_gamma, bn_beta, bn_running_mean, bn_running_var };

template <typename S>
struct ParamEntry {
    std::string name;
    Tensor<S> tensor;
    ParamRole role;
    bool trainable;
    bool bn_follows = false; // conv weights only: BN directly after this conv
};

// Parameter accounting conventions for reproducing reference totals:
//  - as_built: exactly the trainable tensors this implementation allocates
//    (convs followed by BN carry no bias; BN counts gamma+beta).
//  - reference: a bias for every conv whether allocated or not, and BN
//    counted with its running statistics (4 values per channel) -- the
//    convention most framework summaries report.
enum class Accounting { as_built, reference };

struct ParamCount {
    std::int64_t total = 0;
    std::vector<std::pair<std::string, std::int64_t>> per_layer;
};

// One of the three encoder-decoder segmentation networks, assembled from the
// fixed layer schedule for its architecture:
//   unet    -- 4 plain conv stages (f,2f,4f,8f) + bottleneck 16f, skip-concat
//              decoder, no BN, conv biases;
//   resunet -- same topology with every stage a ShortcutBlock and BN
//              throughout;
//   segnet  -- VGG16-style 13-conv encoder (f,2f,4f,8f,8f) with BN, pooling
//              indices saved, mirrored 13-conv decoder driven by max
//              unpooling, no skip concatenation.
// All end in a 1x1 conv to one channel plus sigmoid.
template <typename S>
class ModelGraph {
public:
    ModelGraph(Arch arch, int base_filters, std::uint64_t seed)
        : arch_(arch), base_filters_(base_filters) {
        if (base_filters < 1)
            throw ConfigError("base_filters must be >= 1");
        Rng rng(seed ^ 0x756e6574u);
        const int f = base_filters;
        if (arch == Arch::segnet) {
            const std::vector<std::vector<std::pair<int, int>>> enc_groups = {
                {{1, f}, {f, f}},
                {{f, 2 * f}, {2 * f, 2 * f}},
                {{2 * f, 4 * f}, {4 * f, 4 * f}, {4 * f, 4 * f}},
                {{4 * f, 8 * f}, {8 * f, 8 * f}, {8 * f, 8 * f}},
                {{8 * f, 8 * f}, {8 * f, 8 * f}, {8 * f, 8 * f}},
            };
            // Decoder conv widths mirror the encoder (reversed sequence of
            // conv outputs). Unpooling replays encoder indices, whose channel
            // counts are fixed, so each group's channel-reducing conv runs at
            // the coarse scale before its unpool; the rest follow it.
            struct DecGroupSpec {
                int pre; // convs executed before the unpool
                std::vector<std::pair<int, int>> convs;
            };
            const std::vector<DecGroupSpec> dec_groups = {
                {0, {{8 * f, 8 * f}, {8 * f, 8 * f}, {8 * f, 8 * f}}},
                {0, {{8 * f, 8 * f}, {8 * f, 8 * f}, {8 * f, 8 * f}}},
                {1, {{8 * f, 4 * f}, {4 * f, 4 * f}, {4 * f, 4 * f}}},
                {1, {{4 * f, 2 * f}, {2 * f, 2 * f}}},
                {1, {{2 * f, f}, {f, f}}},
            };
            for (std::size_t g = 0; g < enc_groups.size(); ++g) {
                seg_enc_.emplace_back();
                for (auto [ci, co] : enc_groups[g])
                    seg_enc_.back().emplace_back(ci, co, 3, true, rng);
            }
            for (const auto& spec : dec_groups) {
                seg_dec_.push_back({spec.pre, {}});
                for (auto [ci, co] : spec.convs)
                    seg_dec_.back().convs.emplace_back(ci, co, 3, true, rng);
            }
            final_.emplace(f, 1, 1, false, rng);
            for (std::size_t g = 0; g < seg_enc_.size(); ++g)
                for (std::size_t i = 0; i < seg_enc_[g].size(); ++i)
                    register_conv("enc" + std::to_string(g + 1) + ".conv" + std::to_string(i + 1),
                                  seg_enc_[g][i]);
            for (std::size_t g = 0; g < seg_dec_.size(); ++g)
                for (std::size_t i = 0; i < seg_dec_[g].convs.size(); ++i)
                    register_conv("dec" + std::to_string(seg_dec_.size() - g) + ".conv" +
                                      std::to_string(i + 1),
                                  seg_dec_[g].convs[i]);
            register_conv("final", *final_);
        } else {
            const bool res = arch == Arch::resunet;
            const int enc_out[4] = {f, 2 * f, 4 * f, 8 * f};
            int cin = 1;
            for (int i = 0; i < 4; ++i) {
                enc_.emplace_back(StageSpec{cin, enc_out[i], StageKind::encoder, res, res}, rng);
                cin = enc_out[i];
            }
            bottleneck_.emplace(StageSpec{8 * f, 16 * f, StageKind::bottleneck, res, res}, rng);
            // Decoder in execution order, deepest first; merged input is
            // skip channels + upsampled channels.
            const int dec_out[4] = {8 * f, 4 * f, 2 * f, f};
            int up_c = 16 * f;
            for (int i = 0; i < 4; ++i) {
                dec_.emplace_back(
                    StageSpec{dec_out[i] + up_c, dec_out[i], StageKind::decoder, res, res}, rng);
                up_c = dec_out[i];
            }
            final_.emplace(f, 1, 1, false, rng);
            for (int i = 0; i < 4; ++i)
                register_stage("enc" + std::to_string(i + 1), enc_[i]);
            register_stage("bottleneck", *bottleneck_);
            for (int i = 0; i < 4; ++i)
                register_stage("dec" + std::to_string(4 - i), dec_[i]);
            register_conv("final", *final_);
        }
    }

    ModelGraph(const ModelGraph&) = delete;
    ModelGraph& operator=(const ModelGraph&) = delete;
    ModelGraph(ModelGraph&&) = default;
    ModelGraph& operator=(ModelGraph&&) = default;

    Arch arch() const { return arch_; }
    int base_filters() const { return base_filters_; }

    // 2^(pooling levels): input h,w must be divisible by this.
    int required_divisor() const { return arch_ == Arch::segnet ? 32 : 16; }

    // Per-pixel probability map in (0,1), same (h,w) as the input. Train mode
    // normalizes by batch statistics and records the tape; infer mode uses
    // running statistics and records nothing.
    Tensor<S> forward(const Tensor<S>& x, BnMode mode) {
        if (mode == BnMode::infer) {
            NoGradGuard guard;
            return forward_impl(x, mode);
        }
        return forward_impl(x, mode);
    }

    const std::vector<ParamEntry<S>>& entries() const { return entries_; }

    std::vector<Tensor<S>> trainable_params() const {
        std::vector<Tensor<S>> out;
        for (const auto& e : entries_)
            if (e.trainable)
                out.push_back(e.tensor);
        return out;
    }

    void zero_grad() {
        for (auto& e : entries_)
            if (e.trainable)
                e.tensor.zero_grad();
    }

    ParamCount count_params(Accounting acc = Accounting::as_built) const {
        ParamCount pc;
        for (const auto& e : entries_) {
            const bool is_running =
                e.role == ParamRole::bn_running_mean || e.role == ParamRole::bn_running_var;
            if (acc == Accounting::as_built && is_running)
                continue;
            pc.per_layer.emplace_back(e.name, e.tensor.count());
            if (acc == Accounting::reference && e.role == ParamRole::conv_weight && e.bn_follows) {
                // Bias the reference convention assumes but this build omits.
                std::string base = e.name.substr(0, e.name.size() - std::string(".weight").size());
                pc.per_layer.emplace_back(base + ".bias", e.tensor.shape().n);
            }
        }
        for (const auto& [name, cnt] : pc.per_layer)
            pc.total += cnt;
        return pc;
    }

private:
    Tensor<S> forward_impl(const Tensor<S>& x, BnMode mode) {
        const Shape xs = x.shape();
        if (xs.c != 1)
            throw ShapeError("model expects 1-channel input, got " + xs.str());
        const int div = required_divisor();
        if (xs.h % div != 0 || xs.w % div != 0)
            throw ShapeError("input " + xs.str() + " spatial dims must be divisible by " +
                             std::to_string(div) + " for " + arch_name(arch_));

        Tensor<S> cur;
        if (arch_ == Arch::segnet) {
            cur = x;
            std::vector<PoolIndices> indices;
            for (auto& group : seg_enc_) {
                for (auto& conv : group)
                    cur = conv.forward(cur, mode, true);
                Pooled<S> p = maxpool2x2(cur);
                cur = p.values;
                indices.push_back(std::move(p.indices));
            }
            for (std::size_t g = 0; g < seg_dec_.size(); ++g) {
                auto& group = seg_dec_[g];
                for (int i = 0; i < group.pre; ++i)
                    cur = group.convs[i].forward(cur, mode, true);
                cur = max_unpool2x2(cur, indices[indices.size() - 1 - g]);
                for (std::size_t i = group.pre; i < group.convs.size(); ++i)
                    cur = group.convs[i].forward(cur, mode, true);
            }
        } else {
            std::vector<Tensor<S>> skips;
            cur = x;
            for (auto& st : enc_) {
                EncoderOut<S> e = encoder_stage(st, cur, mode);
                skips.push_back(e.features);
                cur = e.pooled;
            }
            cur = bottleneck_->body(cur, mode);
            for (std::size_t i = 0; i < dec_.size(); ++i)
                cur = decoder_stage(dec_[i], cur, skips[skips.size() - 1 - i], mode);
        }
        return sigmoid(final_->forward(cur, mode, false));
    }

    void register_conv(const std::string& name, ConvBNRelu<S>& c) {
        const bool has_bn = c.bn.has_value();
        entries_.push_back({name + ".weight", c.weight, ParamRole::conv_weight, true, has_bn});
        if (c.bias)
            entries_.push_back({name + ".bias", *c.bias, ParamRole::conv_bias, true, false});
        if (c.bn) {
            entries_.push_back({name + ".bn.gamma", c.bn->gamma, ParamRole::bn_gamma, true, false});
            entries_.push_back({name + ".bn.beta", c.bn->beta, ParamRole::bn_beta, true, false});
            entries_.push_back({name + ".bn.running_mean", c.bn->running_mean,
                                ParamRole::bn_running_mean, false, false});
            entries_.push_back({name + ".bn.running_var", c.bn->running_var,
                                ParamRole::bn_running_var, false, false});
        }
    }

    void register_stage(const std::string& name, Stage<S>& st) {
        if (st.shortcut) {
            register_conv(name + ".conv1", st.shortcut->conv1);
            register_conv(name + ".conv2", st.shortcut->conv2);
            register_conv(name + ".shortcut", st.shortcut->projection);
        } else {
            register_conv(name + ".conv1", *st.conv1);
            register_conv(name + ".conv2", *st.conv2);
        }
    }

    struct SegDecGroup {
        int pre = 0; // convs executed before the unpool
        std::vector<ConvBNRelu<S>> convs;
    };

    Arch arch_;
    int base_filters_;
    std::vector<Stage<S>> enc_, dec_;
    std::optional<Stage<S>> bottleneck_;
    std::vector<std::vector<ConvBNRelu<S>>> seg_enc_;
    std::vector<SegDecGroup> seg_dec_;
    std::optional<ConvBNRelu<S>> final_;
    std::vector<ParamEntry<S>> entries_;
};

template <typename S>
ModelGraph<S> build_unet(int base_filters, std::uint64_t seed = 1) {
    return ModelGraph<S>(Arch::unet, base_filters, seed);
}

template <typename S>
ModelGraph<S> build_resunet(int base_filters, std::uint64_t seed = 1) {
    return ModelGraph<S>(Arch::resunet, base_filters, seed);
}

template <typename S>
ModelGraph<S> build_segnet(int base_filters, std::uint64_t seed = 1) {
    return ModelGraph<S>(Arch::segnet, base_filters, seed);
}

template <typename S>
ModelGraph<S> build_model(Arch arch, int base_filters, std::uint64_t seed = 1) {
    return ModelGraph<S>(arch, base_filters, seed);
}

} // namespace runet
