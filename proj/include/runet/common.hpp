#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace runet {

// All library failures derive from Error and carry a short category tag
// ("shape", "parse", "usage", "io", "config") that the CLI prints as
// `error: <category>: <detail>`.
class Error : public std::runtime_error {
public:
    Error(std::string category, const std::string& detail)
        : std::runtime_error(detail), category_(std::move(category)) {}
    const std::string& category() const { return category_; }

private:
    std::string category_;
};

class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& detail) : Error("shape", detail) {}
};

class ParseError : public Error {
public:
    explicit ParseError(const std::string& detail) : Error("parse", detail) {}
};

class UsageError : public Error {
public:
    explicit UsageError(const std::string& detail) : Error("usage", detail) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& detail) : Error("io", detail) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& detail) : Error("config", detail) {}
};

// Deterministic PRNG (splitmix64). The standard <random> distributions are
// implementation-defined, so every stream the project relies on for
// reproducibility (weight init, data synthesis, shuffling) goes through this.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

    // standard normal via Box-Muller (one draw per call, pair cached)
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = 0.0;
        while (u1 == 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

private:
    std::uint64_t state_;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

} // namespace runet
