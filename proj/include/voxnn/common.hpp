#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace voxnn {

// Error taxonomy. The CLI maps these onto exit codes: config/usage -> 1,
// data/shape -> 2, numeric -> 3.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

class StateError : public Error {
public:
    using Error::Error;
};

// Shape of a dense row-major tensor, up to 5 axes, extents strictly positive.
class Shape {
public:
    static constexpr int kMaxRank = 5;

    Shape() = default;

    Shape(std::initializer_list<int64_t> extents) {
        init(std::span<const int64_t>(extents.begin(), extents.size()));
    }

    explicit Shape(std::span<const int64_t> extents) { init(extents); }

    int rank() const { return rank_; }

    int64_t operator[](int axis) const { return ext_[static_cast<size_t>(axis)]; }

    int64_t numel() const {
        int64_t n = 1;
        for (int i = 0; i < rank_; ++i) n *= ext_[static_cast<size_t>(i)];
        return n;
    }

    bool operator==(const Shape& o) const {
        if (rank_ != o.rank_) return false;
        for (int i = 0; i < rank_; ++i)
            if (ext_[static_cast<size_t>(i)] != o.ext_[static_cast<size_t>(i)]) return false;
        return true;
    }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const {
        std::string s = "(";
        for (int i = 0; i < rank_; ++i) {
            if (i) s += ", ";
            s += std::to_string(ext_[static_cast<size_t>(i)]);
        }
        s += ")";
        return s;
    }

private:
    void init(std::span<const int64_t> extents) {
        if (extents.empty() || extents.size() > kMaxRank)
            throw ShapeError("shape rank must be in [1, 5], got " + std::to_string(extents.size()));
        rank_ = static_cast<int>(extents.size());
        for (size_t i = 0; i < extents.size(); ++i) {
            if (extents[i] <= 0)
                throw ShapeError("shape extents must be positive, got extent " +
                                 std::to_string(extents[i]) + " at axis " + std::to_string(i));
            ext_[i] = extents[i];
        }
    }

    std::array<int64_t, kMaxRank> ext_{};
    int rank_ = 0;
};

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Deterministic RNG. All draws are derived from the engine's raw 64-bit
// output with fixed arithmetic, so sequences are reproducible across
// platforms and standard libraries. Named streams keep independent uses
// (init, split, sampling, dropout) from perturbing each other.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(splitmix64(seed)) {}

    static uint64_t mix(uint64_t a, uint64_t b) {
        return splitmix64(splitmix64(a) ^ (0x9e3779b97f4a7c15ULL + b));
    }

    static uint64_t stream(uint64_t root, std::string_view name) {
        uint64_t h = 1469598103934665603ULL;
        for (unsigned char c : name) {
            h ^= c;
            h *= 1099511628211ULL;
        }
        return mix(root, h);
    }

    uint64_t next() { return gen_(); }

    // in [0, 1)
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // in [0, n); n must be positive
    size_t index(size_t n) { return static_cast<size_t>(next() % n); }

    bool bernoulli(double p) { return uniform() < p; }

private:
    std::mt19937_64 gen_;
};

}  // namespace voxnn
