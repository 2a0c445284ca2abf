#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "runet/checkpoint.hpp"
#include "runet/data.hpp"
#include "runet/gradcheck.hpp"
#include "runet/model.hpp"
#include "runet/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct RunConfig {
    runet::Arch arch = runet::Arch::resunet;
    int base_filters = 8;
    int image_size = 64;
    int epochs = 30;
    int batch_size = 8;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double dice_k = 1.0;
    std::uint64_t seed = 1;
    std::string train_dir;
    std::string val_dir;
    std::string checkpoint = "model.ckpt";
    std::string metrics = "metrics.csv";
    double threshold = 0.5;
    bool record_seconds = true;
};

RunConfig parse_config(const fs::path& path) {
    json j;
    try {
        j = json::parse(runet::read_file(path));
    } catch (const json::exception& e) {
        throw runet::ConfigError("cannot parse " + path.string() + ": " + e.what());
    }
    if (!j.is_object())
        throw runet::ConfigError("config root must be a JSON object");

    RunConfig cfg;
    auto want = [&](const char* key, json::value_t type, auto setter) {
        auto it = j.find(key);
        if (it == j.end())
            return;
        const bool numeric_ok =
            (type == json::value_t::number_float && it->is_number()) ||
            (type == json::value_t::number_unsigned && it->is_number_unsigned()) ||
            (type == json::value_t::number_integer && it->is_number_integer());
        if (it->type() != type && !numeric_ok)
            throw runet::ConfigError(std::string("config key '") + key + "' has wrong type");
        setter(*it);
        j.erase(it);
    };

    want("arch", json::value_t::string,
         [&](const json& v) { cfg.arch = runet::arch_from_name(v.get<std::string>()); });
    want("base_filters", json::value_t::number_integer,
         [&](const json& v) { cfg.base_filters = v.get<int>(); });
    want("image_size", json::value_t::number_integer,
         [&](const json& v) { cfg.image_size = v.get<int>(); });
    want("epochs", json::value_t::number_integer,
         [&](const json& v) { cfg.epochs = v.get<int>(); });
    want("batch_size", json::value_t::number_integer,
         [&](const json& v) { cfg.batch_size = v.get<int>(); });
    want("learning_rate", json::value_t::number_float,
         [&](const json& v) { cfg.learning_rate = v.get<double>(); });
    want("beta1", json::value_t::number_float, [&](const json& v) { cfg.beta1 = v.get<double>(); });
    want("beta2", json::value_t::number_float, [&](const json& v) { cfg.beta2 = v.get<double>(); });
    want("adam_eps", json::value_t::number_float,
         [&](const json& v) { cfg.adam_eps = v.get<double>(); });
    want("dice_k", json::value_t::number_float,
         [&](const json& v) { cfg.dice_k = v.get<double>(); });
    want("seed", json::value_t::number_unsigned,
         [&](const json& v) { cfg.seed = v.get<std::uint64_t>(); });
    want("train_dir", json::value_t::string,
         [&](const json& v) { cfg.train_dir = v.get<std::string>(); });
    want("val_dir", json::value_t::string,
         [&](const json& v) { cfg.val_dir = v.get<std::string>(); });
    want("checkpoint", json::value_t::string,
         [&](const json& v) { cfg.checkpoint = v.get<std::string>(); });
    want("metrics", json::value_t::string,
         [&](const json& v) { cfg.metrics = v.get<std::string>(); });
    want("threshold", json::value_t::number_float,
         [&](const json& v) { cfg.threshold = v.get<double>(); });
    want("record_seconds", json::value_t::boolean,
         [&](const json& v) { cfg.record_seconds = v.get<bool>(); });

    if (!j.empty())
        throw runet::ConfigError("unknown config key '" + j.begin().key() + "'");

    const int divisor = cfg.arch == runet::Arch::segnet ? 32 : 16;
    if (cfg.base_filters < 1)
        throw runet::ConfigError("base_filters must be >= 1");
    if (cfg.image_size < divisor || cfg.image_size % divisor != 0)
        throw runet::ConfigError("image_size must be a positive multiple of " +
                                 std::to_string(divisor) + " for " + runet::arch_name(cfg.arch));
    if (cfg.epochs < 0)
        throw runet::ConfigError("epochs must be >= 0");
    if (cfg.batch_size < 1)
        throw runet::ConfigError("batch_size must be >= 1");
    if (!(cfg.learning_rate >= 0.0))
        throw runet::ConfigError("learning_rate must be >= 0");
    if (cfg.beta1 < 0.0 || cfg.beta1 >= 1.0 || cfg.beta2 < 0.0 || cfg.beta2 >= 1.0)
        throw runet::ConfigError("adam betas must lie in [0,1)");
    if (!(cfg.adam_eps > 0.0))
        throw runet::ConfigError("adam_eps must be > 0");
    if (!(cfg.dice_k > 0.0))
        throw runet::ConfigError("dice_k must be > 0");
    if (cfg.threshold < 0.0 || cfg.threshold > 1.0)
        throw runet::ConfigError("threshold must lie in [0,1]");
    if (cfg.train_dir.empty())
        throw runet::ConfigError("train_dir is required");
    if (cfg.val_dir.empty())
        throw runet::ConfigError("val_dir is required");
    return cfg;
}

std::vector<runet::Sample> load_sized(const std::string& dir, int image_size, bool require_masks) {
    auto samples = runet::load_dataset(dir, require_masks);
    for (const auto& s : samples)
        if (s.h != image_size || s.w != image_size)
            throw runet::ShapeError("sample " + s.id + " is " + std::to_string(s.w) + "x" +
                                    std::to_string(s.h) + ", config expects " +
                                    std::to_string(image_size) + "x" +
                                    std::to_string(image_size));
    return samples;
}

int cmd_gen(const std::string& out_dir, int count, std::uint64_t seed, const std::string& size,
            double p_empty, double noise, double contrast) {
    runet::SynthCfg cfg;
    if (std::sscanf(size.c_str(), "%dx%d", &cfg.w, &cfg.h) != 2)
        throw runet::ConfigError("bad --size '" + size + "', expected WxH like 64x64");
    cfg.p_empty = p_empty;
    cfg.noise = noise;
    cfg.contrast = contrast;
    runet::validate_synth_cfg(cfg);
    if (count < 0)
        throw runet::ConfigError("--count must be >= 0");

    runet::Rng rng(seed);
    std::vector<runet::Sample> samples;
    char id[32];
    for (int i = 0; i < count; ++i) {
        std::snprintf(id, sizeof(id), "s%05d", i);
        samples.push_back(runet::generate_sample(cfg, rng, id));
    }
    runet::save_dataset(out_dir, samples);
    std::printf("wrote %d sample(s) under %s\n", count, out_dir.c_str());
    return 0;
}

int cmd_train(const std::string& config_path) {
    const RunConfig cfg = parse_config(config_path);
    auto train_set = load_sized(cfg.train_dir, cfg.image_size, true);
    auto val_set = load_sized(cfg.val_dir, cfg.image_size, true);
    if (train_set.empty())
        throw runet::UsageError("training set is empty");

    runet::ModelGraph<float> model(cfg.arch, cfg.base_filters, cfg.seed);
    runet::TrainCfg tc;
    tc.epochs = cfg.epochs;
    tc.batch_size = cfg.batch_size;
    tc.seed = cfg.seed;
    tc.adam = {cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps};
    tc.dice = {cfg.dice_k};
    tc.threshold = cfg.threshold;
    tc.record_seconds = cfg.record_seconds;

    runet::TrainReport report = runet::train_model(model, train_set, val_set, tc);

    std::ostringstream csv;
    report.write_csv(csv);
    runet::write_file(cfg.metrics, csv.str());
    runet::save_checkpoint(model, cfg.checkpoint);

    for (const auto& r : report.rows)
        std::printf("epoch %3d  train_loss %.6f  val_dice %.6f\n", r.epoch, r.train_loss,
                    r.val_dice);
    const double final_dice = runet::evaluate(model, val_set, cfg.threshold);
    std::printf("final_val_dice %.4f\n", final_dice);
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir, double threshold) {
    auto model = runet::load_checkpoint<float>(ckpt);
    auto samples = runet::load_dataset(data_dir, true);
    if (samples.empty())
        throw runet::UsageError("dataset is empty");
    std::printf("%.4f\n", runet::evaluate(model, samples, threshold));
    return 0;
}

int cmd_predict(const std::string& ckpt, const std::string& data_dir, const std::string& out_path,
                double threshold) {
    auto model = runet::load_checkpoint<float>(ckpt);
    auto samples = runet::load_dataset(data_dir, false);
    std::string csv = "img,pixels\n";
    for (const auto& s : samples) {
        runet::Tensor<float> x(runet::Shape{1, 1, s.h, s.w},
                               std::vector<float>(s.image.begin(), s.image.end()));
        runet::Tensor<float> pred = model.forward(x, runet::BnMode::infer);
        std::vector<float> bin(pred.count());
        for (std::int64_t i = 0; i < pred.count(); ++i)
            bin[i] = pred.data()[i] > static_cast<float>(threshold) ? 1.0f : 0.0f;
        csv += s.id + "," + runet::rle_encode(bin, s.h, s.w) + "\n";
    }
    runet::write_file(out_path, csv);
    std::printf("wrote %zu prediction(s) to %s\n", samples.size(), out_path.c_str());
    return 0;
}

int cmd_params(const std::string& arch_str, int base_filters, long long expect, bool has_expect) {
    const runet::Arch arch = runet::arch_from_name(arch_str);
    runet::ModelGraph<float> model(arch, base_filters, 0);
    const auto as_built = model.count_params(runet::Accounting::as_built);
    const auto reference = model.count_params(runet::Accounting::reference);

    std::printf("%-36s %12s\n", "tensor (reference accounting)", "params");
    for (const auto& [name, cnt] : reference.per_layer)
        std::printf("%-36s %12lld\n", name.c_str(), static_cast<long long>(cnt));
    std::printf("%-36s %12lld\n", "total (as built)",
                static_cast<long long>(as_built.total));
    std::printf("%-36s %12lld\n", "total (reference)",
                static_cast<long long>(reference.total));

    // Reference totals at the canonical widths (f=32 for the U-Nets, 64 for
    // SegNet); the reference accounting counts a bias for every conv and four
    // values per BN channel.
    long long target = 0;
    if (arch == runet::Arch::unet && base_filters == 32)
        target = 7848129;
    else if (arch == runet::Arch::resunet && base_filters == 32)
        target = 8301441;
    else if (arch == runet::Arch::segnet && base_filters == 64)
        target = 31819649;
    if (target != 0) {
        const long long delta = reference.total - target;
        std::printf("%-36s %12lld  (delta %+lld, %+.4f%%)\n", "reference target", target, delta,
                    100.0 * static_cast<double>(delta) / static_cast<double>(target));
    }

    if (has_expect && expect != as_built.total && expect != reference.total) {
        std::fprintf(stderr, "error: usage: expected %lld parameters, model has %lld (as built) / %lld (reference)\n",
                     expect, static_cast<long long>(as_built.total),
                     static_cast<long long>(reference.total));
        return 1;
    }
    return 0;
}

int cmd_gradcheck(std::uint64_t seed, int seeds) {
    const auto results = runet::gradcheck_suite(seed, seeds);
    bool all_pass = true;
    for (const auto& r : results) {
        std::printf("%-28s max_rel_err %.3e  tol %.0e  %s\n", r.op.c_str(), r.max_rel_err,
                    r.tolerance, r.pass ? "PASS" : "FAIL");
        all_pass = all_pass && r.pass;
    }
    if (!all_pass) {
        std::fprintf(stderr, "error: usage: gradient check failed\n");
        return 1;
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"runet: desk-scale encoder-decoder segmentation engine"};
    app.require_subcommand(1);

    // gen
    auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
    std::string gen_out, gen_size = "64x64";
    int gen_count = 0;
    std::uint64_t gen_seed = 1;
    double gen_p_empty = 0.3, gen_noise = 0.14, gen_contrast = 0.33;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--count", gen_count, "number of samples")->required();
    gen->add_option("--seed", gen_seed, "rng seed");
    gen->add_option("--size", gen_size, "image size WxH (multiples of 16)");
    gen->add_option("--p-empty", gen_p_empty, "probability of an empty mask");
    gen->add_option("--noise", gen_noise, "speckle noise sigma");
    gen->add_option("--contrast", gen_contrast, "target region intensity lift");

    // train
    auto* train = app.add_subcommand("train", "train a model from a JSON config");
    std::string train_config;
    train->add_option("--config", train_config, "config JSON path")->required();

    // eval
    auto* eval = app.add_subcommand("eval", "mean Dice of a checkpoint on a dataset");
    std::string eval_ckpt, eval_data;
    double eval_threshold = 0.5;
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint path")->required();
    eval->add_option("--data", eval_data, "dataset directory")->required();
    eval->add_option("--threshold", eval_threshold, "binarization threshold");

    // predict
    auto* predict = app.add_subcommand("predict", "write an RLE submission CSV");
    std::string pred_ckpt, pred_data, pred_out;
    double pred_threshold = 0.5;
    predict->add_option("--checkpoint", pred_ckpt, "checkpoint path")->required();
    predict->add_option("--data", pred_data, "dataset directory")->required();
    predict->add_option("--out", pred_out, "output CSV path")->required();
    predict->add_option("--threshold", pred_threshold, "binarization threshold");

    // params
    auto* params = app.add_subcommand("params", "per-layer parameter counts");
    std::string params_arch;
    int params_bf = 32;
    long long params_expect = 0;
    params->add_option("--arch", params_arch, "unet|segnet|resunet")->required();
    params->add_option("--base-filters", params_bf, "base filter count");
    auto* expect_opt = params->add_option("--expect", params_expect, "fail unless total matches");

    // gradcheck
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
    std::uint64_t gc_seed = 1;
    int gc_seeds = 5;
    gradcheck->add_option("--seed", gc_seed, "base rng seed");
    gradcheck->add_option("--seeds", gc_seeds, "number of random draws per op");

    try {
        app.parse(argc, argv);
        if (*gen)
            return cmd_gen(gen_out, gen_count, gen_seed, gen_size, gen_p_empty, gen_noise,
                           gen_contrast);
        if (*train)
            return cmd_train(train_config);
        if (*eval)
            return cmd_eval(eval_ckpt, eval_data, eval_threshold);
        if (*predict)
            return cmd_predict(pred_ckpt, pred_data, pred_out, pred_threshold);
        if (*params)
            return cmd_params(params_arch, params_bf, params_expect, expect_opt->count() > 0);
        if (*gradcheck)
            return cmd_gradcheck(gc_seed, gc_seeds);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0)
            return app.exit(e); // --help
        std::fprintf(stderr, "error: usage: %s\n", e.what());
        return 2;
    } catch (const runet::Error& e) {
        std::fprintf(stderr, "error: %s: %s\n", e.category().c_str(), e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: internal: %s\n", e.what());
        return 1;
    }
    return 0;
}
