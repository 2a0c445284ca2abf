#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "runet/common.hpp"
#include "runet/tensor.hpp"

namespace runet {

// One image/mask pair. Pixels live in [0,1]; the mask is strictly {0,1}.
struct Sample {
    std::string id;
    int h = 0, w = 0;
    std::vector<float> image;
    std::vector<float> mask;
};

// Synthetic ultrasound-like data: a smooth background, an optional filled
// ellipse of elevated intensity with a blurred border, and multiplicative
// speckle noise over everything.
struct SynthCfg {
    int h = 64, w = 64;
    double p_empty = 0.3;        // probability of a no-target image
    double ax_min_frac = 0.12;   // ellipse semi-axes, fraction of min(h,w)
    double ax_max_frac = 0.24;
    double contrast = 0.33;      // intensity lift inside the ellipse
    double noise = 0.14;         // speckle sigma; 0 disables
};

inline void validate_synth_cfg(const SynthCfg& cfg, int divisor = 16) {
    if (cfg.h < divisor || cfg.w < divisor || cfg.h % divisor != 0 || cfg.w % divisor != 0)
        throw ConfigError("image size " + std::to_string(cfg.h) + "x" + std::to_string(cfg.w) +
                          " must be a positive multiple of " + std::to_string(divisor));
    if (cfg.p_empty < 0.0 || cfg.p_empty > 1.0)
        throw ConfigError("p_empty must lie in [0,1]");
    if (cfg.ax_min_frac <= 0.0 || cfg.ax_max_frac < cfg.ax_min_frac)
        throw ConfigError("invalid ellipse axis range");
    if (cfg.noise < 0.0)
        throw ConfigError("noise must be >= 0");
}

inline Sample generate_sample(const SynthCfg& cfg, Rng& rng, const std::string& id = "") {
    validate_synth_cfg(cfg);
    Sample s;
    s.id = id;
    s.h = cfg.h;
    s.w = cfg.w;
    s.image.resize(static_cast<std::size_t>(cfg.h) * cfg.w);
    s.mask.assign(static_cast<std::size_t>(cfg.h) * cfg.w, 0.0f);

    // Smooth background: low-frequency cosine ridges around a mid-dark base.
    const double base = rng.uniform(0.30, 0.40);
    struct Wave { double fx, fy, phase, amp; };
    Wave waves[2];
    for (auto& wv : waves) {
        wv.fx = rng.uniform(0.5, 1.5) / cfg.w;
        wv.fy = rng.uniform(0.5, 1.5) / cfg.h;
        wv.phase = rng.uniform(0.0, 6.283185307179586);
        wv.amp = rng.uniform(0.015, 0.035);
    }

    const bool empty = rng.uniform() < cfg.p_empty;
    double cx = 0, cy = 0, ax = 1, ay = 1, rot = 0;
    if (!empty) {
        const double mind = std::min(cfg.h, cfg.w);
        cx = rng.uniform(0.30, 0.70) * cfg.w;
        cy = rng.uniform(0.30, 0.70) * cfg.h;
        ax = rng.uniform(cfg.ax_min_frac, cfg.ax_max_frac) * mind;
        ay = rng.uniform(cfg.ax_min_frac, cfg.ax_max_frac) * mind;
        rot = rng.uniform(0.0, 3.141592653589793);
    }
    const double cr = std::cos(rot), sr = std::sin(rot);

    for (int y = 0; y < cfg.h; ++y) {
        for (int x = 0; x < cfg.w; ++x) {
            double v = base;
            for (const auto& wv : waves)
                v += wv.amp * std::cos(6.283185307179586 * (wv.fx * x + wv.fy * y) + wv.phase);
            if (!empty) {
                const double dx = x - cx, dy = y - cy;
                const double u = (dx * cr + dy * sr) / ax;
                const double t = (-dx * sr + dy * cr) / ay;
                const double e = u * u + t * t; // <= 1 inside the ellipse
                if (e <= 1.0)
                    s.mask[static_cast<std::size_t>(y) * cfg.w + x] = 1.0f;
                // Blurred border: full lift inside, fading out past the rim.
                const double lift = std::clamp((1.2 - e) / 0.5, 0.0, 1.0);
                v += cfg.contrast * lift;
            }
            if (cfg.noise > 0.0)
                v *= 1.0 + cfg.noise * rng.normal();
            s.image[static_cast<std::size_t>(y) * cfg.w + x] =
                static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
    return s;
}

// ---------------------------------------------------------------------------
// Binary PGM (P5, maxval 255). Quantization is round-half-up; loading maps
// byte q to q/255, so save/load round-trips exactly on already-quantized data.
// ---------------------------------------------------------------------------
inline std::string save_pgm(int h, int w, const std::vector<float>& image) {
    if (static_cast<std::int64_t>(image.size()) != static_cast<std::int64_t>(h) * w)
        throw ShapeError("save_pgm: image size does not match dims");
    std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    out.reserve(out.size() + image.size());
    for (float v : image) {
        const int q = static_cast<int>(std::floor(static_cast<double>(v) * 255.0 + 0.5));
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::clamp(q, 0, 255))));
    }
    return out;
}

struct PgmImage {
    int h = 0, w = 0;
    std::vector<float> pixels;
};

inline PgmImage load_pgm(const std::string& bytes) {
    std::size_t pos = 0;
    auto next_token = [&]() -> std::string {
        while (pos < bytes.size()) {
            if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n')
                    ++pos;
            } else {
                break;
            }
        }
        std::size_t start = pos;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos])))
            ++pos;
        if (start == pos)
            throw ParseError("pgm: unexpected end of header");
        return bytes.substr(start, pos - start);
    };
    auto parse_int = [&](const std::string& tok) -> int {
        for (char c : tok)
            if (!std::isdigit(static_cast<unsigned char>(c)))
                throw ParseError("pgm: bad integer '" + tok + "' in header");
        return std::stoi(tok);
    };

    if (next_token() != "P5")
        throw ParseError("pgm: missing P5 magic");
    PgmImage img;
    img.w = parse_int(next_token());
    img.h = parse_int(next_token());
    const int maxval = parse_int(next_token());
    if (img.w < 1 || img.h < 1)
        throw ParseError("pgm: non-positive dimensions");
    if (maxval != 255)
        throw ParseError("pgm: unsupported maxval " + std::to_string(maxval));
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
        throw ParseError("pgm: missing whitespace before payload");
    ++pos;
    const std::size_t need = static_cast<std::size_t>(img.w) * img.h;
    if (bytes.size() - pos < need)
        throw ParseError("pgm: truncated payload");
    if (bytes.size() - pos > need)
        throw ParseError("pgm: trailing bytes after payload");
    img.pixels.resize(need);
    for (std::size_t i = 0; i < need; ++i)
        img.pixels[i] = static_cast<float>(static_cast<unsigned char>(bytes[pos + i])) / 255.0f;
    return img;
}

// ---------------------------------------------------------------------------
// Kaggle-style run-length encoding: flatten column-major (top-to-bottom, then
// next column), 1-indexed, ascending space-separated "start length" pairs.
// ---------------------------------------------------------------------------
inline std::string rle_encode(const std::vector<float>& mask, int h, int w) {
    if (static_cast<std::int64_t>(mask.size()) != static_cast<std::int64_t>(h) * w)
        throw ShapeError("rle_encode: mask size does not match dims");
    std::string out;
    std::int64_t run_start = -1, run_len = 0;
    for (std::int64_t x = 0; x < w; ++x) {
        for (std::int64_t y = 0; y < h; ++y) {
            const std::int64_t p = x * h + y + 1;
            const bool on = mask[y * w + x] != 0.0f;
            if (on) {
                if (run_start < 0) {
                    run_start = p;
                    run_len = 1;
                } else {
                    ++run_len;
                }
            } else if (run_start >= 0) {
                if (!out.empty())
                    out += ' ';
                out += std::to_string(run_start) + " " + std::to_string(run_len);
                run_start = -1;
            }
        }
    }
    if (run_start >= 0) {
        if (!out.empty())
            out += ' ';
        out += std::to_string(run_start) + " " + std::to_string(run_len);
    }
    return out;
}

inline std::vector<float> rle_decode(const std::string& rle, int h, int w) {
    std::vector<float> mask(static_cast<std::size_t>(h) * w, 0.0f);
    std::istringstream in(rle);
    std::vector<std::int64_t> tokens;
    std::string tok;
    while (in >> tok) {
        try {
            std::size_t used = 0;
            const long long v = std::stoll(tok, &used);
            if (used != tok.size() || v < 1)
                throw std::invalid_argument(tok);
            tokens.push_back(v);
        } catch (const std::exception&) {
            throw ParseError("rle: bad token '" + tok + "'");
        }
    }
    if (tokens.size() % 2 != 0)
        throw ParseError("rle: odd number of tokens");
    const std::int64_t total = static_cast<std::int64_t>(h) * w;
    std::int64_t prev_end = 0; // 1-indexed inclusive end of previous run
    for (std::size_t i = 0; i < tokens.size(); i += 2) {
        const std::int64_t start = tokens[i], len = tokens[i + 1];
        if (start <= prev_end)
            throw ParseError("rle: overlapping or unsorted run at position " +
                             std::to_string(start));
        if (start + len - 1 > total)
            throw ParseError("rle: run exceeds mask size");
        for (std::int64_t p = start; p < start + len; ++p) {
            const std::int64_t idx = p - 1;
            const std::int64_t x = idx / h, y = idx % h;
            mask[y * w + x] = 1.0f;
        }
        prev_end = start + len - 1;
    }
    return mask;
}

// ---------------------------------------------------------------------------
// Batching: deterministic shuffle, final partial batch kept.
// ---------------------------------------------------------------------------
template <typename S>
struct Batch {
    Tensor<S> images; // (n,1,h,w)
    Tensor<S> masks;  // (n,1,h,w)
    std::vector<std::size_t> sample_indices;
};

template <typename S>
std::vector<Batch<S>> make_batches(const std::vector<Sample>& samples, int batch_size,
                                   std::uint64_t shuffle_seed) {
    if (samples.empty())
        throw UsageError("make_batches: empty sample list");
    if (batch_size < 1)
        throw UsageError("make_batches: batch size must be >= 1");
    const int h = samples[0].h, w = samples[0].w;
    for (const auto& s : samples)
        if (s.h != h || s.w != w)
            throw ShapeError("make_batches: mixed sample sizes");

    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i)
        order[i] = i;
    Rng rng(shuffle_seed);
    for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[rng.below(i)]);

    std::vector<Batch<S>> batches;
    for (std::size_t at = 0; at < order.size(); at += batch_size) {
        const int n = static_cast<int>(std::min<std::size_t>(batch_size, order.size() - at));
        Batch<S> b{Tensor<S>(Shape{n, 1, h, w}), Tensor<S>(Shape{n, 1, h, w}), {}};
        for (int i = 0; i < n; ++i) {
            const Sample& s = samples[order[at + i]];
            b.sample_indices.push_back(order[at + i]);
            std::copy(s.image.begin(), s.image.end(),
                      b.images.data() + static_cast<std::int64_t>(i) * h * w);
            std::copy(s.mask.begin(), s.mask.end(),
                      b.masks.data() + static_cast<std::int64_t>(i) * h * w);
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

// ---------------------------------------------------------------------------
// Dataset directory layout: <root>/images/<id>.pgm, <root>/masks/<id>_mask.pgm
// ---------------------------------------------------------------------------
inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw IoError("cannot open for writing: " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw IoError("short write: " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return std::move(ss).str();
}

inline void save_dataset(const std::filesystem::path& root, const std::vector<Sample>& samples) {
    std::error_code ec;
    std::filesystem::create_directories(root / "images", ec);
    std::filesystem::create_directories(root / "masks", ec);
    if (!std::filesystem::is_directory(root / "images") ||
        !std::filesystem::is_directory(root / "masks"))
        throw IoError("cannot create dataset directories under " + root.string());
    for (const auto& s : samples) {
        write_file(root / "images" / (s.id + ".pgm"), save_pgm(s.h, s.w, s.image));
        write_file(root / "masks" / (s.id + "_mask.pgm"), save_pgm(s.h, s.w, s.mask));
    }
}

// Loads samples sorted by id. Masks are binarized at 0.5 on ingest; when
// `require_masks` is false missing masks load as all-zero.
inline std::vector<Sample> load_dataset(const std::filesystem::path& root,
                                        bool require_masks = true) {
    const auto img_dir = root / "images";
    if (!std::filesystem::is_directory(img_dir))
        throw IoError("no images directory under " + root.string());
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(img_dir))
        if (entry.is_regular_file() && entry.path().extension() == ".pgm")
            files.push_back(entry.path());
    std::sort(files.begin(), files.end());

    std::vector<Sample> samples;
    for (const auto& f : files) {
        Sample s;
        s.id = f.stem().string();
        PgmImage img = load_pgm(read_file(f));
        s.h = img.h;
        s.w = img.w;
        s.image = std::move(img.pixels);
        const auto mask_path = root / "masks" / (s.id + "_mask.pgm");
        if (std::filesystem::exists(mask_path)) {
            PgmImage m = load_pgm(read_file(mask_path));
            if (m.h != s.h || m.w != s.w)
                throw ShapeError("mask size mismatch for sample " + s.id);
            s.mask.resize(m.pixels.size());
            for (std::size_t i = 0; i < m.pixels.size(); ++i)
                s.mask[i] = m.pixels[i] > 0.5f ? 1.0f : 0.0f;
        } else if (require_masks) {
            throw IoError("missing mask for sample " + s.id);
        } else {
            s.mask.assign(s.image.size(), 0.0f);
        }
        samples.push_back(std::move(s));
    }
    return samples;
}

} // namespace runet
