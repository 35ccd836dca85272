#pragma once

#include <cstring>
#include <vector>

#include "voxnn/conv3d.hpp"

namespace voxnn {

enum class FusionPoint { early, middle, late };
enum class FusionFn { max, sum, conv };

inline std::string to_string(FusionPoint p) {
    switch (p) {
        case FusionPoint::early: return "early";
        case FusionPoint::middle: return "middle";
        default: return "late";
    }
}

inline std::string to_string(FusionFn f) {
    switch (f) {
        case FusionFn::max: return "max";
        case FusionFn::sum: return "sum";
        default: return "conv";
    }
}

inline FusionPoint parse_fusion_point(std::string_view s) {
    if (s == "early") return FusionPoint::early;
    if (s == "middle") return FusionPoint::middle;
    if (s == "late") return FusionPoint::late;
    throw ConfigError("unknown fusion point '" + std::string(s) +
                      "' (expected early, middle or late)");
}

inline FusionFn parse_fusion_fn(std::string_view s) {
    if (s == "max") return FusionFn::max;
    if (s == "sum") return FusionFn::sum;
    if (s == "conv") return FusionFn::conv;
    throw ConfigError("unknown fusion function '" + std::string(s) +
                      "' (expected max, sum or conv)");
}

// One of the nine experiment cells. The learned kernel for conv fusion lives
// in the owning network's parameter registry, not here.
struct FusionSpec {
    FusionPoint point;
    FusionFn fn;

    bool operator==(const FusionSpec&) const = default;
};

namespace detail {
template <typename T>
inline void check_streams(const Tensor<T>& streams) {
    if (streams.rank() != 5)
        throw ShapeError("fusion input must be rank 5 (N, C, D, H, W), got " +
                         streams.shape().str());
    if (streams.extent(0) < 2)
        throw ConfigError("fusion needs at least 2 streams, got " +
                          std::to_string(streams.extent(0)));
}
}  // namespace detail

template <typename T>
struct MaxFused {
    Tensor<T> out;                // (C, D, H, W)
    std::vector<uint8_t> argmax;  // winning stream per output element
};

// Elementwise max across the stream axis. Ties record the lowest stream
// index, which is where the whole cotangent routes in backward.
template <typename T>
MaxFused<T> fuse_max(const Tensor<T>& streams) {
    detail::check_streams(streams);
    const int64_t n = streams.extent(0);
    const Shape os{streams.extent(1), streams.extent(2), streams.extent(3), streams.extent(4)};
    const int64_t m = os.numel();
    MaxFused<T> r;
    r.out = Tensor<T>(os);
    r.argmax.resize(static_cast<size_t>(m));
    const T* ps = streams.data();
    for (int64_t i = 0; i < m; ++i) {
        T best = ps[i];
        uint8_t who = 0;
        for (int64_t s = 1; s < n; ++s) {
            const T v = ps[s * m + i];
            if (v > best) {
                best = v;
                who = static_cast<uint8_t>(s);
            }
        }
        r.out[i] = best;
        r.argmax[static_cast<size_t>(i)] = who;
    }
    return r;
}

template <typename T>
Tensor<T> fuse_max_backward(const std::vector<uint8_t>& argmax, const Tensor<T>& grad_out,
                            int64_t n_streams) {
    const int64_t m = grad_out.numel();
    if (static_cast<int64_t>(argmax.size()) != m)
        throw ShapeError("fuse_max_backward: argmax size " + std::to_string(argmax.size()) +
                         " does not match cotangent " + grad_out.shape().str());
    Tensor<T> g(Shape{n_streams, grad_out.extent(0), grad_out.extent(1), grad_out.extent(2),
                      grad_out.extent(3)});
    for (int64_t i = 0; i < m; ++i) g[argmax[static_cast<size_t>(i)] * m + i] = grad_out[i];
    return g;
}

// Elementwise sum across streams, accumulated in stream order.
template <typename T>
Tensor<T> fuse_sum(const Tensor<T>& streams) {
    detail::check_streams(streams);
    const int64_t n = streams.extent(0);
    const Shape os{streams.extent(1), streams.extent(2), streams.extent(3), streams.extent(4)};
    const int64_t m = os.numel();
    Tensor<T> out(os);
    const T* ps = streams.data();
    std::memcpy(out.data(), ps, static_cast<size_t>(m) * sizeof(T));
    for (int64_t s = 1; s < n; ++s) {
        const T* row = ps + s * m;
        T* po = out.data();
        for (int64_t i = 0; i < m; ++i) po[i] += row[i];
    }
    return out;
}

template <typename T>
Tensor<T> fuse_sum_backward(const Tensor<T>& grad_out, int64_t n_streams) {
    Tensor<T> g(Shape{n_streams, grad_out.extent(0), grad_out.extent(1), grad_out.extent(2),
                      grad_out.extent(3)});
    const int64_t m = grad_out.numel();
    for (int64_t s = 0; s < n_streams; ++s)
        std::memcpy(g.data() + s * m, grad_out.data(), static_cast<size_t>(m) * sizeof(T));
    return g;
}

namespace detail {
template <typename T>
inline void check_fusion_kernel(const Tensor<T>& streams, const ConvKernel<T>& ker) {
    const int64_t n = streams.extent(0), c = streams.extent(1);
    if (ker.out_channels() != c || ker.in_channels() != n * c || ker.extent() != 1)
        throw ConfigError("conv fusion kernel " + ker.weights.shape().str() + " expected (" +
                          std::to_string(c) + ", " + std::to_string(n * c) + ", 1, 1, 1)");
}
}  // namespace detail

// Learned fusion: the (N, C, D, H, W) stack reinterpreted as N*C channels
// (stream-order channel concatenation) under a unit kernel mapping back to C.
template <typename T>
Tensor<T> fuse_conv(const Tensor<T>& streams, const ConvKernel<T>& ker) {
    detail::check_streams(streams);
    detail::check_fusion_kernel(streams, ker);
    const Tensor<T> stacked = streams.reshaped(
        Shape{streams.extent(0) * streams.extent(1), streams.extent(2), streams.extent(3),
              streams.extent(4)});
    return conv3d(stacked, ker);
}

template <typename T>
struct ConvFusionGrads {
    Tensor<T> streams;  // (N, C, D, H, W)
    Tensor<T> weights;
    Tensor<T> bias;
};

template <typename T>
ConvFusionGrads<T> fuse_conv_backward(const Tensor<T>& streams, const ConvKernel<T>& ker,
                                      const Tensor<T>& grad_out) {
    detail::check_streams(streams);
    detail::check_fusion_kernel(streams, ker);
    const Shape stream_shape = streams.shape();
    const Tensor<T> stacked = streams.reshaped(
        Shape{stream_shape[0] * stream_shape[1], stream_shape[2], stream_shape[3],
              stream_shape[4]});
    Conv3dGrads<T> g = conv3d_backward(stacked, ker, grad_out);
    ConvFusionGrads<T> r;
    r.streams = std::move(g.input).reshaped(stream_shape);
    r.weights = std::move(g.weights);
    r.bias = std::move(g.bias);
    return r;
}

// Kernel whose output channel c puts `weight` on channel c of every stream
// and 0 elsewhere, bias 0. weight = 1 reproduces fuse_sum, 1/N the mean.
template <typename T>
ConvKernel<T> fusion_identity_kernel(int64_t n_streams, int64_t channels, T weight) {
    Tensor<T> w(Shape{channels, n_streams * channels, 1, 1, 1});
    for (int64_t c = 0; c < channels; ++c)
        for (int64_t s = 0; s < n_streams; ++s) w.at(c, s * channels + c, 0, 0, 0) = weight;
    return ConvKernel<T>(std::move(w), Tensor<T>(Shape{channels}));
}

}  // namespace voxnn
