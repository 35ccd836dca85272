#pragma once

#include <cmath>

#include "voxnn/model.hpp"

namespace voxnn {

struct TrainConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    int64_t epochs = 50;
    int64_t batch_size = 32;
    double lambda1 = 1e-6;
    double lambda2 = 1e-4;
    uint64_t seed = 0;
    int64_t patches_per_epoch = 4000;
    double tumor_fraction = 0.5;

    void validate() const {
        if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
        if (!(beta1 > 0 && beta1 < 1)) throw ConfigError("beta1 must be in (0, 1)");
        if (!(beta2 > 0 && beta2 < 1)) throw ConfigError("beta2 must be in (0, 1)");
        if (!(epsilon > 0)) throw ConfigError("epsilon must be positive");
        if (epochs < 0) throw ConfigError("epochs must be non-negative");
        if (batch_size < 1) throw ConfigError("batch_size must be positive");
        if (!(lambda1 >= 0) || !(lambda2 >= 0))
            throw ConfigError("regularization coefficients must be non-negative");
        if (patches_per_epoch < 1) throw ConfigError("patches_per_epoch must be positive");
        if (!(tumor_fraction >= 0 && tumor_fraction <= 1))
            throw ConfigError("tumor_fraction must be in [0, 1]");
    }
};

// First/second moment buffers mirroring the parameter registry.
template <typename T>
struct AdamState {
    std::vector<Tensor<T>> m;
    std::vector<Tensor<T>> v;
    int64_t t = 0;

    explicit AdamState(const std::vector<typename Network<T>::Param>& params) {
        m.reserve(params.size());
        v.reserve(params.size());
        for (const auto& p : params) {
            m.emplace_back(p.value.shape());
            v.emplace_back(p.value.shape());
        }
    }
};

// One Adam update with bias correction over every registry parameter. All
// gradients are checked before anything mutates, so a non-finite gradient
// aborts the whole step.
template <typename T>
void adam_step(std::vector<typename Network<T>::Param>& params, AdamState<T>& state,
               const TrainConfig& cfg) {
    if (state.m.size() != params.size())
        throw StateError("optimizer state tracks " + std::to_string(state.m.size()) +
                         " parameters, network has " + std::to_string(params.size()));
    for (const auto& p : params)
        if (!p.grad.all_finite())
            throw NumericError("non-finite gradient for parameter '" + p.name + "'");

    state.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        Tensor<T>& m = state.m[i];
        Tensor<T>& v = state.v[i];
        for (int64_t j = 0; j < p.value.numel(); ++j) {
            const double g = static_cast<double>(p.grad[j]);
            const double mj = cfg.beta1 * static_cast<double>(m[j]) + (1.0 - cfg.beta1) * g;
            const double vj = cfg.beta2 * static_cast<double>(v[j]) + (1.0 - cfg.beta2) * g * g;
            m[j] = static_cast<T>(mj);
            v[j] = static_cast<T>(vj);
            const double mhat = mj / bc1;
            const double vhat = vj / bc2;
            p.value[j] -= static_cast<T>(cfg.learning_rate * mhat /
                                         (std::sqrt(vhat) + cfg.epsilon));
        }
    }
}

}  // namespace voxnn
