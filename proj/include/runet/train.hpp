#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "runet/adam.hpp"
#include "runet/data.hpp"
#include "runet/loss.hpp"
#include "runet/model.hpp"

namespace runet {

struct TrainRow {
    int epoch = 0; // 1-based
    double train_loss = 0.0;
    double val_dice = 0.0;
    double seconds = 0.0;
};

// Per-epoch metrics, one row per completed epoch. CSV layout:
// epoch,train_loss,val_dice,seconds
struct TrainReport {
    std::vector<TrainRow> rows;

    static const char* csv_header() { return "epoch,train_loss,val_dice,seconds"; }

    void write_csv(std::ostream& out) const {
        out << csv_header() << "\n";
        char buf[128];
        for (const auto& r : rows) {
            std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.3f\n", r.epoch, r.train_loss,
                          r.val_dice, r.seconds);
            out << buf;
        }
    }
};

struct TrainCfg {
    int epochs = 30;
    int batch_size = 8;
    std::uint64_t seed = 1;
    AdamCfg adam;
    DiceLossCfg dice;
    double threshold = 0.5;
    // Wall time is inherently nondeterministic; turning this off writes 0.000
    // in the seconds column so identical runs produce identical bytes.
    bool record_seconds = true;
};

// One pass over the dataset: deterministic shuffle, forward(train) ->
// dice_loss -> backward -> adam step -> zero grads. Returns the sample-count
// weighted mean batch loss.
template <typename S>
double train_epoch(ModelGraph<S>& model, const std::vector<Sample>& dataset, Adam<S>& opt,
                   const TrainCfg& cfg, std::uint64_t shuffle_seed) {
    auto params = model.trainable_params();
    double loss_sum = 0.0;
    std::int64_t seen = 0;
    for (auto& batch : make_batches<S>(dataset, cfg.batch_size, shuffle_seed)) {
        Tensor<S> out = model.forward(batch.images, BnMode::train);
        Tensor<S> loss = dice_loss(out, batch.masks, cfg.dice);
        backward(loss);
        opt.step(params);
        model.zero_grad();
        const int n = batch.images.shape().n;
        loss_sum += static_cast<double>(loss.data()[0]) * n;
        seen += n;
    }
    return loss_sum / static_cast<double>(seen);
}

// Mean hard Dice over the dataset: infer-mode forward, binarize at
// `threshold` (strictly greater), dice_coefficient against the mask.
template <typename S>
double evaluate(ModelGraph<S>& model, const std::vector<Sample>& dataset, double threshold = 0.5) {
    if (threshold < 0.0 || threshold > 1.0)
        throw UsageError("threshold must lie in [0,1]");
    double acc = 0.0;
    for (const auto& s : dataset) {
        Tensor<S> x(Shape{1, 1, s.h, s.w},
                    std::vector<S>(s.image.begin(), s.image.end()));
        Tensor<S> pred = model.forward(x, BnMode::infer);
        Tensor<S> bin(pred.shape());
        for (std::int64_t i = 0; i < pred.count(); ++i)
            bin.data()[i] = pred.data()[i] > static_cast<S>(threshold) ? S(1) : S(0);
        Tensor<S> y(Shape{1, 1, s.h, s.w}, std::vector<S>(s.mask.begin(), s.mask.end()));
        acc += dice_coefficient(bin, y);
    }
    return acc / static_cast<double>(dataset.size());
}

// Full training driver: per-epoch shuffle seeds derive deterministically from
// cfg.seed, validation runs after every epoch.
template <typename S>
TrainReport train_model(ModelGraph<S>& model, const std::vector<Sample>& train_set,
                        const std::vector<Sample>& val_set, const TrainCfg& cfg) {
    if (train_set.empty())
        throw UsageError("training set is empty");
    Adam<S> opt(cfg.adam);
    Rng seed_stream(cfg.seed ^ 0x747261696eull);
    TrainReport report;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const std::uint64_t shuffle_seed = seed_stream.next_u64();
        TrainRow row;
        row.epoch = epoch;
        row.train_loss = train_epoch(model, train_set, opt, cfg, shuffle_seed);
        row.val_dice = val_set.empty() ? 0.0 : evaluate(model, val_set, cfg.threshold);
        if (cfg.record_seconds) {
            const auto t1 = std::chrono::steady_clock::now();
            row.seconds = std::chrono::duration<double>(t1 - t0).count();
        }
        report.rows.push_back(row);
    }
    return report;
}

} // namespace runet
