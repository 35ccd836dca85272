#pragma once

#include <cmath>
#include <cstring>
#include <span>
#include <vector>

#include "voxnn/common.hpp"

namespace voxnn {

// Dense row-major n-d array (last axis contiguous). The single carrier of
// activations, weights and gradients. Elements are expected to stay finite;
// validate() surfaces NaN/Inf as a NumericError.
template <typename T>
class Tensor {
    static_assert(std::is_floating_point_v<T>);

public:
    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0))
        : shape_(shape), data_(static_cast<size_t>(shape.numel()), fill) {}

    static Tensor zeros(Shape shape) { return Tensor(shape); }
    static Tensor full(Shape shape, T v) { return Tensor(shape, v); }

    const Shape& shape() const { return shape_; }
    int rank() const { return shape_.rank(); }
    int64_t extent(int axis) const { return shape_[axis]; }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    template <typename... Ix>
    int64_t index(Ix... ix) const {
        static_assert(sizeof...(ix) >= 1 && sizeof...(ix) <= Shape::kMaxRank);
        const int64_t idx[] = {static_cast<int64_t>(ix)...};
        int64_t flat = 0;
        for (int a = 0; a < static_cast<int>(sizeof...(ix)); ++a) flat = flat * shape_[a] + idx[a];
        return flat;
    }

    template <typename... Ix>
    T& at(Ix... ix) {
        return data_[static_cast<size_t>(index(ix...))];
    }
    template <typename... Ix>
    const T& at(Ix... ix) const {
        return data_[static_cast<size_t>(index(ix...))];
    }

    bool all_finite() const {
        for (const T v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void validate(std::string_view what) const {
        for (size_t i = 0; i < data_.size(); ++i)
            if (!std::isfinite(data_[i]))
                throw NumericError(std::string(what) + ": non-finite value at flat index " +
                                   std::to_string(i));
    }

    // Same buffer under a new shape; element count must match.
    Tensor reshaped(Shape s) const& {
        Tensor out = *this;
        out.reshape_in_place(s);
        return out;
    }
    Tensor reshaped(Shape s) && {
        reshape_in_place(s);
        return std::move(*this);
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

private:
    void reshape_in_place(Shape s) {
        if (s.numel() != numel())
            throw ShapeError("reshape " + shape_.str() + " -> " + s.str() +
                             " changes element count");
        shape_ = s;
    }

    Shape shape_;
    std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// Volume of class ids. Kept separate from Tensor: labels are small integers,
// not arithmetic values.
struct LabelVolume {
    Shape shape;
    std::vector<uint8_t> v;

    LabelVolume() = default;
    explicit LabelVolume(Shape s, uint8_t fill = 0)
        : shape(s), v(static_cast<size_t>(s.numel()), fill) {}

    int64_t numel() const { return static_cast<int64_t>(v.size()); }

    uint8_t& at(int64_t z, int64_t y, int64_t x) {
        return v[static_cast<size_t>((z * shape[1] + y) * shape[2] + x)];
    }
    uint8_t at(int64_t z, int64_t y, int64_t x) const {
        return v[static_cast<size_t>((z * shape[1] + y) * shape[2] + x)];
    }

    bool operator==(const LabelVolume& o) const { return shape == o.shape && v == o.v; }
};

namespace detail {
template <typename T>
inline void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " +
                         b.shape().str());
}
}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "add");
    Tensor<T> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, T s) {
    Tensor<T> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] + s;
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor<T> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor<T> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    Tensor<T> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * s;
    return out;
}

template <typename T>
Tensor<T> max_pairwise(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "max_pairwise");
    Tensor<T> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] > b[i] ? a[i] : b[i];
    return out;
}

// Stacks channel blocks in argument order. Parts are (C_i, D, H, W); the
// result is (sum C_i, D, H, W) with values copied bit-exactly.
template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> parts) {
    if (parts.empty()) throw ShapeError("concat_channels: no parts");
    for (const auto& p : parts)
        if (p.rank() != 4)
            throw ShapeError("concat_channels: parts must be rank 4, got " + p.shape().str());
    const Shape& s0 = parts[0].shape();
    int64_t channels = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s[1] != s0[1] || s[2] != s0[2] || s[3] != s0[3])
            throw ShapeError("concat_channels: spatial mismatch " + s.str() + " vs " + s0.str());
        channels += s[0];
    }
    Tensor<T> out(Shape{channels, s0[1], s0[2], s0[3]});
    T* dst = out.data();
    for (const auto& p : parts) {
        std::memcpy(dst, p.data(), static_cast<size_t>(p.numel()) * sizeof(T));
        dst += p.numel();
    }
    return out;
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
    return concat_channels(std::span<const Tensor<T>>(parts.data(), parts.size()));
}

// Channel block [c0, c1) of a rank-4 tensor.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& t, int64_t c0, int64_t c1) {
    if (t.rank() != 4) throw ShapeError("slice_channels: need rank 4, got " + t.shape().str());
    if (c0 < 0 || c1 <= c0 || c1 > t.extent(0))
        throw ShapeError("slice_channels: invalid range [" + std::to_string(c0) + ", " +
                         std::to_string(c1) + ") for " + t.shape().str());
    const int64_t spatial = t.extent(1) * t.extent(2) * t.extent(3);
    Tensor<T> out(Shape{c1 - c0, t.extent(1), t.extent(2), t.extent(3)});
    std::memcpy(out.data(), t.data() + c0 * spatial,
                static_cast<size_t>((c1 - c0) * spatial) * sizeof(T));
    return out;
}

}  // namespace voxnn
