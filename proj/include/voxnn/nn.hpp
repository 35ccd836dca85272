#pragma once

#include <algorithm>
#include <cmath>

#include "voxnn/tensor.hpp"

namespace voxnn {

enum class Mode { train, eval };

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
    return y;
}

// Gradient is masked by x > 0; zero at x == 0.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& grad_y) {
    detail::check_same_shape(x, grad_y, "relu_backward");
    Tensor<T> gx(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) gx[i] = x[i] > T(0) ? grad_y[i] : T(0);
    return gx;
}

template <typename T>
struct DropoutResult {
    Tensor<T> y;
    Tensor<T> mask;  // per-element scale: 0 or 1/(1-rate)
};

// Inverted dropout: train mode zeroes each element with probability `rate`
// and scales survivors by 1/(1-rate), so eval mode is the identity.
template <typename T>
DropoutResult<T> dropout_forward(const Tensor<T>& x, double rate, Mode mode, Rng& rng) {
    if (!(rate >= 0.0 && rate < 1.0))
        throw ConfigError("dropout rate must be in [0, 1), got " + std::to_string(rate));
    DropoutResult<T> r;
    if (mode == Mode::eval || rate == 0.0) {
        r.y = x;
        r.mask = Tensor<T>(x.shape(), T(1));
        return r;
    }
    const T keep_scale = T(1.0 / (1.0 - rate));
    r.y = Tensor<T>(x.shape());
    r.mask = Tensor<T>(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) {
        const T m = rng.bernoulli(rate) ? T(0) : keep_scale;
        r.mask[i] = m;
        r.y[i] = m * x[i];
    }
    return r;
}

template <typename T>
Tensor<T> dropout_backward(const Tensor<T>& mask, const Tensor<T>& grad_y) {
    return mul(mask, grad_y);
}

template <typename T>
struct CeResult {
    double loss = 0;         // mean over voxels of -log p(label), nats
    Tensor<T> grad_logits;   // (softmax - onehot) / voxel count
};

// Per-voxel softmax cross-entropy over the class axis of (C, D, H, W) logits
// against (D, H, W) class ids. Softmax uses max-subtraction for stability.
template <typename T>
CeResult<T> softmax_cross_entropy(const Tensor<T>& logits, const LabelVolume& labels) {
    if (logits.rank() != 4)
        throw ShapeError("softmax_cross_entropy: logits must be rank 4, got " +
                         logits.shape().str());
    const int64_t classes = logits.extent(0);
    const Shape want{logits.extent(1), logits.extent(2), logits.extent(3)};
    if (labels.shape != want)
        throw ShapeError("softmax_cross_entropy: labels " + labels.shape.str() +
                         " do not match logits " + logits.shape().str());
    logits.validate("softmax_cross_entropy logits");

    const int64_t vox = want.numel();
    CeResult<T> r;
    r.grad_logits = Tensor<T>(logits.shape());
    const T* pl = logits.data();
    T* pg = r.grad_logits.data();
    double loss_sum = 0;
    const double inv_vox = 1.0 / static_cast<double>(vox);

    for (int64_t v = 0; v < vox; ++v) {
        const int label = labels.v[static_cast<size_t>(v)];
        if (label < 0 || label >= classes) {
            const int64_t z = v / (want[1] * want[2]);
            const int64_t y = (v / want[2]) % want[1];
            const int64_t x = v % want[2];
            throw DataError("label id " + std::to_string(label) + " out of range [0, " +
                            std::to_string(classes) + ") at voxel (" + std::to_string(z) + ", " +
                            std::to_string(y) + ", " + std::to_string(x) + ")");
        }
        T mx = pl[v];
        for (int64_t c = 1; c < classes; ++c) mx = std::max(mx, pl[c * vox + v]);
        double denom = 0;
        for (int64_t c = 0; c < classes; ++c)
            denom += std::exp(static_cast<double>(pl[c * vox + v] - mx));
        const double log_denom = std::log(denom);
        loss_sum += log_denom - static_cast<double>(pl[label * vox + v] - mx);
        for (int64_t c = 0; c < classes; ++c) {
            double p = std::exp(static_cast<double>(pl[c * vox + v] - mx)) / denom;
            if (c == label) p -= 1.0;
            pg[c * vox + v] = static_cast<T>(p * inv_vox);
        }
    }
    r.loss = loss_sum * inv_vox;
    return r;
}

// Per-voxel class probabilities (same softmax as the loss), for inference.
template <typename T>
Tensor<T> softmax_classes(const Tensor<T>& logits) {
    if (logits.rank() != 4)
        throw ShapeError("softmax_classes: logits must be rank 4, got " + logits.shape().str());
    const int64_t classes = logits.extent(0);
    const int64_t vox = logits.numel() / classes;
    Tensor<T> probs(logits.shape());
    const T* pl = logits.data();
    T* pp = probs.data();
    for (int64_t v = 0; v < vox; ++v) {
        T mx = pl[v];
        for (int64_t c = 1; c < classes; ++c) mx = std::max(mx, pl[c * vox + v]);
        double denom = 0;
        for (int64_t c = 0; c < classes; ++c)
            denom += std::exp(static_cast<double>(pl[c * vox + v] - mx));
        for (int64_t c = 0; c < classes; ++c)
            pp[c * vox + v] =
                static_cast<T>(std::exp(static_cast<double>(pl[c * vox + v] - mx)) / denom);
    }
    return probs;
}

struct RegPenalty {
    double l1 = 0;  // sum |w|
    double l2 = 0;  // 0.5 * sum w^2
};

// Accumulates lambda1*sign(w) + lambda2*w into grad and returns the raw
// penalties for this tensor. Applied to weights only; biases are excluded.
template <typename T>
RegPenalty l1_l2_accumulate(const Tensor<T>& w, Tensor<T>& grad, double lambda1, double lambda2) {
    detail::check_same_shape(w, grad, "l1_l2_accumulate");
    RegPenalty p;
    for (int64_t i = 0; i < w.numel(); ++i) {
        const double v = static_cast<double>(w[i]);
        p.l1 += std::abs(v);
        p.l2 += 0.5 * v * v;
        const double sign = v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0);
        grad[i] += static_cast<T>(lambda1 * sign + lambda2 * v);
    }
    return p;
}

// data_loss plus weighted penalties; every term must be finite.
struct LossReport {
    double data_loss = 0;
    double l1_penalty = 0;
    double l2_penalty = 0;
    double total = 0;

    static LossReport make(double data_loss, double l1_raw, double l2_raw, double lambda1,
                           double lambda2) {
        LossReport r;
        r.data_loss = data_loss;
        r.l1_penalty = l1_raw;
        r.l2_penalty = l2_raw;
        r.total = data_loss + lambda1 * l1_raw + lambda2 * l2_raw;
        if (!std::isfinite(r.total))
            throw NumericError("non-finite loss: data=" + std::to_string(data_loss) +
                               " l1=" + std::to_string(l1_raw) + " l2=" + std::to_string(l2_raw));
        return r;
    }
};

}  // namespace voxnn
