#pragma once

#include "voxnn/tensor.hpp"

namespace voxnn {

// Weights (C_out, C_in, k, k, k) with cubic odd spatial extent (1 or 3 in
// this architecture) plus a per-output-channel bias.
template <typename T>
struct ConvKernel {
    Tensor<T> weights;
    Tensor<T> bias;

    ConvKernel() = default;

    ConvKernel(Tensor<T> w, Tensor<T> b) : weights(std::move(w)), bias(std::move(b)) {
        if (weights.rank() != 5)
            throw ShapeError("conv kernel weights must be rank 5, got " + weights.shape().str());
        const int64_t k = weights.extent(2);
        if (weights.extent(3) != k || weights.extent(4) != k)
            throw ShapeError("conv kernel must be cubic, got " + weights.shape().str());
        if (k != 1 && k != 3)
            throw ShapeError("conv kernel extent must be 1 or 3, got " + std::to_string(k));
        if (bias.rank() != 1 || bias.extent(0) != weights.extent(0))
            throw ShapeError("conv bias shape " + bias.shape().str() +
                             " does not match kernel " + weights.shape().str());
    }

    int64_t out_channels() const { return weights.extent(0); }
    int64_t in_channels() const { return weights.extent(1); }
    int64_t extent() const { return weights.extent(2); }
};

// Valid (no padding, stride 1) output shape: each spatial extent shrinks by k-1.
template <typename T>
inline Shape conv3d_output_shape(const Shape& in, const ConvKernel<T>& ker) {
    if (in.rank() != 4)
        throw ShapeError("conv3d input must be rank 4 (C, D, H, W), got " + in.str());
    if (in[0] != ker.in_channels())
        throw ShapeError("conv3d channel mismatch: input " + in.str() + " vs kernel " +
                         ker.weights.shape().str());
    const int64_t k = ker.extent();
    if (in[1] < k || in[2] < k || in[3] < k)
        throw ShapeError("conv3d input " + in.str() + " smaller than kernel " +
                         ker.weights.shape().str());
    return Shape{ker.out_channels(), in[1] - k + 1, in[2] - k + 1, in[3] - k + 1};
}

template <typename T>
struct Conv3dGrads {
    Tensor<T> input;
    Tensor<T> weights;
    Tensor<T> bias;
};

// ---------------------------------------------------------------------------
// Reference path: direct textbook loops, serial. Kept as the oracle the
// optimized path must reproduce bit-exactly at f64 (same per-element
// reduction order; the build disables FP contraction).
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv3d_ref(const Tensor<T>& in, const ConvKernel<T>& ker) {
    const Shape os = conv3d_output_shape(in.shape(), ker);
    in.validate("conv3d input");
    const int64_t ci_n = ker.in_channels(), k = ker.extent();
    const int64_t di = in.extent(1), hi = in.extent(2), wi = in.extent(3);
    (void)di;
    Tensor<T> out(os);
    for (int64_t co = 0; co < os[0]; ++co)
        for (int64_t z = 0; z < os[1]; ++z)
            for (int64_t y = 0; y < os[2]; ++y)
                for (int64_t x = 0; x < os[3]; ++x) {
                    T acc = ker.bias[co];
                    for (int64_t ci = 0; ci < ci_n; ++ci)
                        for (int64_t kz = 0; kz < k; ++kz)
                            for (int64_t ky = 0; ky < k; ++ky)
                                for (int64_t kx = 0; kx < k; ++kx)
                                    acc += ker.weights.at(co, ci, kz, ky, kx) *
                                           in[((ci * di + z + kz) * hi + y + ky) * wi + x + kx];
                    out.at(co, z, y, x) = acc;
                }
    return out;
}

template <typename T>
Conv3dGrads<T> conv3d_backward_ref(const Tensor<T>& in, const ConvKernel<T>& ker,
                                   const Tensor<T>& grad_out) {
    const Shape os = conv3d_output_shape(in.shape(), ker);
    if (grad_out.shape() != os)
        throw ShapeError("conv3d_backward: grad_out " + grad_out.shape().str() +
                         " does not match output " + os.str());
    const int64_t co_n = ker.out_channels(), ci_n = ker.in_channels(), k = ker.extent();
    const int64_t di = in.extent(1), hi = in.extent(2), wi = in.extent(3);
    const int64_t dz = os[1], hy = os[2], wx = os[3];

    Conv3dGrads<T> g;
    g.input = Tensor<T>(in.shape());
    g.weights = Tensor<T>(ker.weights.shape());
    g.bias = Tensor<T>(ker.bias.shape());

    for (int64_t co = 0; co < co_n; ++co) {
        T acc = 0;
        for (int64_t z = 0; z < dz; ++z)
            for (int64_t y = 0; y < hy; ++y)
                for (int64_t x = 0; x < wx; ++x) acc += grad_out.at(co, z, y, x);
        g.bias[co] = acc;
    }

    for (int64_t co = 0; co < co_n; ++co)
        for (int64_t ci = 0; ci < ci_n; ++ci)
            for (int64_t kz = 0; kz < k; ++kz)
                for (int64_t ky = 0; ky < k; ++ky)
                    for (int64_t kx = 0; kx < k; ++kx) {
                        T acc = 0;
                        for (int64_t z = 0; z < dz; ++z)
                            for (int64_t y = 0; y < hy; ++y)
                                for (int64_t x = 0; x < wx; ++x)
                                    acc += grad_out.at(co, z, y, x) *
                                           in[((ci * di + z + kz) * hi + y + ky) * wi + x + kx];
                        g.weights.at(co, ci, kz, ky, kx) = acc;
                    }

    for (int64_t ci = 0; ci < ci_n; ++ci)
        for (int64_t zi = 0; zi < di; ++zi)
            for (int64_t yi = 0; yi < hi; ++yi)
                for (int64_t xi = 0; xi < wi; ++xi) {
                    T acc = 0;
                    for (int64_t co = 0; co < co_n; ++co)
                        for (int64_t kz = 0; kz < k; ++kz) {
                            const int64_t z = zi - kz;
                            if (z < 0 || z >= dz) continue;
                            for (int64_t ky = 0; ky < k; ++ky) {
                                const int64_t y = yi - ky;
                                if (y < 0 || y >= hy) continue;
                                for (int64_t kx = 0; kx < k; ++kx) {
                                    const int64_t x = xi - kx;
                                    if (x < 0 || x >= wx) continue;
                                    acc += ker.weights.at(co, ci, kz, ky, kx) *
                                           grad_out.at(co, z, y, x);
                                }
                            }
                        }
                    g.input.at(ci, zi, yi, xi) = acc;
                }
    return g;
}

// ---------------------------------------------------------------------------
// Optimized path: OpenMP over output channels, inner loops restructured so
// the contiguous W axis vectorizes (forward, grad_input) or so independent
// accumulator chains hide FP latency (grad_weights). Every output element
// still receives its contributions in exactly the reference order, so the
// two paths agree bit for bit.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv3d(const Tensor<T>& in, const ConvKernel<T>& ker) {
    const Shape os = conv3d_output_shape(in.shape(), ker);
    in.validate("conv3d input");
    const int64_t co_n = os[0], dz = os[1], hy = os[2], wx = os[3];
    const int64_t ci_n = ker.in_channels(), k = ker.extent();
    const int64_t di = in.extent(1), hi = in.extent(2), wi = in.extent(3);
    (void)di;
    Tensor<T> out(os);
    const T* __restrict pin = in.data();
    const T* __restrict pw = ker.weights.data();
    T* __restrict pout = out.data();

#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t co = 0; co < co_n; ++co)
        for (int64_t z = 0; z < dz; ++z) {
            const T b = ker.bias[co];
            for (int64_t y = 0; y < hy; ++y) {
                T* __restrict orow = pout + ((co * dz + z) * hy + y) * wx;
                for (int64_t x = 0; x < wx; ++x) orow[x] = b;
                for (int64_t ci = 0; ci < ci_n; ++ci)
                    for (int64_t kz = 0; kz < k; ++kz)
                        for (int64_t ky = 0; ky < k; ++ky) {
                            const T* __restrict irow =
                                pin + ((ci * di + z + kz) * hi + y + ky) * wi;
                            const T* __restrict wrow = pw + (((co * ci_n + ci) * k + kz) * k + ky) * k;
                            for (int64_t kx = 0; kx < k; ++kx) {
                                const T kv = wrow[kx];
                                const T* __restrict ir = irow + kx;
                                for (int64_t x = 0; x < wx; ++x) orow[x] += kv * ir[x];
                            }
                        }
            }
        }
    return out;
}

template <typename T>
Conv3dGrads<T> conv3d_backward(const Tensor<T>& in, const ConvKernel<T>& ker,
                               const Tensor<T>& grad_out) {
    const Shape os = conv3d_output_shape(in.shape(), ker);
    if (grad_out.shape() != os)
        throw ShapeError("conv3d_backward: grad_out " + grad_out.shape().str() +
                         " does not match output " + os.str());
    const int64_t co_n = ker.out_channels(), ci_n = ker.in_channels(), k = ker.extent();
    const int64_t di = in.extent(1), hi = in.extent(2), wi = in.extent(3);
    const int64_t dz = os[1], hy = os[2], wx = os[3];
    const int64_t kk = k * k * k;

    Conv3dGrads<T> g;
    g.input = Tensor<T>(in.shape());
    g.weights = Tensor<T>(ker.weights.shape());
    g.bias = Tensor<T>(ker.bias.shape());

    const T* __restrict pin = in.data();
    const T* __restrict pgo = grad_out.data();
    const T* __restrict pw = ker.weights.data();
    T* __restrict pgi = g.input.data();
    T* __restrict pgw = g.weights.data();

#pragma omp parallel for schedule(static)
    for (int64_t co = 0; co < co_n; ++co) {
        T acc = 0;
        const T* go_c = pgo + co * dz * hy * wx;
        for (int64_t i = 0; i < dz * hy * wx; ++i) acc += go_c[i];
        g.bias[co] = acc;
    }

    // grad_weights: one (z, y, x) sweep per (co, ci) accumulating all k^3
    // taps at once; accumulation order per tap is (z, y, x), identical to the
    // reference. The k^3 independent chains give the ILP the serial sum lacks.
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t co = 0; co < co_n; ++co)
        for (int64_t ci = 0; ci < ci_n; ++ci) {
            T acc[27];  // k <= 3 in this architecture
            for (int64_t t = 0; t < kk; ++t) acc[t] = 0;
            for (int64_t z = 0; z < dz; ++z)
                for (int64_t y = 0; y < hy; ++y) {
                    const T* __restrict go_row = pgo + ((co * dz + z) * hy + y) * wx;
                    const T* in_rows[9];
                    for (int64_t kz = 0; kz < k; ++kz)
                        for (int64_t ky = 0; ky < k; ++ky)
                            in_rows[kz * k + ky] = pin + ((ci * di + z + kz) * hi + y + ky) * wi;
                    for (int64_t x = 0; x < wx; ++x) {
                        const T gv = go_row[x];
                        for (int64_t r = 0; r < k * k; ++r) {
                            const T* __restrict ir = in_rows[r] + x;
                            T* __restrict a = acc + r * k;
                            for (int64_t kx = 0; kx < k; ++kx) a[kx] += gv * ir[kx];
                        }
                    }
                }
            T* gw = pgw + (co * ci_n + ci) * kk;
            for (int64_t t = 0; t < kk; ++t) gw[t] = acc[t];
        }

    // grad_input: per input channel, scatter rows of grad_out scaled by one
    // kernel tap; contributions arrive in (co, kz, ky, kx) order per element,
    // matching the reference gather.
#pragma omp parallel for schedule(static)
    for (int64_t ci = 0; ci < ci_n; ++ci) {
        T* gi_c = pgi + ci * di * hi * wi;
        for (int64_t co = 0; co < co_n; ++co)
            for (int64_t kz = 0; kz < k; ++kz)
                for (int64_t ky = 0; ky < k; ++ky)
                    for (int64_t kx = 0; kx < k; ++kx) {
                        const T kv = pw[(((co * ci_n + ci) * k + kz) * k + ky) * k + kx];
                        for (int64_t z = 0; z < dz; ++z)
                            for (int64_t y = 0; y < hy; ++y) {
                                T* __restrict gi_row = gi_c + ((z + kz) * hi + y + ky) * wi + kx;
                                const T* __restrict go_row = pgo + ((co * dz + z) * hy + y) * wx;
                                for (int64_t x = 0; x < wx; ++x) gi_row[x] += kv * go_row[x];
                            }
                    }
    }
    return g;
}

}  // namespace voxnn
