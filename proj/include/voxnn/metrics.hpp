#pragma once

#include <algorithm>
#include <vector>

#include "voxnn/tensor.hpp"

namespace voxnn {

inline const std::vector<int>& whole_tumor_classes() {
    static const std::vector<int> c{1, 2, 3, 4};
    return c;
}

// Dice over the binarization "label in class_set". Both volumes empty under
// the binarization counts as perfect agreement (1.0).
inline double dice(const LabelVolume& pred, const LabelVolume& truth,
                   const std::vector<int>& class_set) {
    if (pred.shape != truth.shape)
        throw ShapeError("dice: shape mismatch " + pred.shape.str() + " vs " + truth.shape.str());
    auto member = [&](uint8_t v) {
        for (const int c : class_set)
            if (v == c) return true;
        return false;
    };
    int64_t p = 0, t = 0, both = 0;
    for (size_t i = 0; i < pred.v.size(); ++i) {
        const bool a = member(pred.v[i]), b = member(truth.v[i]);
        p += a;
        t += b;
        both += a && b;
    }
    if (p + t == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(p + t);
}

inline double accuracy(const LabelVolume& pred, const LabelVolume& truth) {
    if (pred.shape != truth.shape)
        throw ShapeError("accuracy: shape mismatch " + pred.shape.str() + " vs " +
                         truth.shape.str());
    int64_t correct = 0;
    for (size_t i = 0; i < pred.v.size(); ++i) correct += pred.v[i] == truth.v[i];
    return static_cast<double>(correct) / static_cast<double>(pred.v.size());
}

// (acc_f / params_f) / (acc_b / params_b), the parameter-normalized accuracy
// with the baseline pinned at 1.
inline double memory_accuracy_ratio(double acc_f, double params_f, double acc_b,
                                    double params_b) {
    if (!(params_f > 0) || !(params_b > 0))
        throw ConfigError("memory_accuracy_ratio: parameter counts must be positive");
    if (!(acc_b > 0))
        throw ConfigError("memory_accuracy_ratio: baseline accuracy must be positive");
    return (acc_f / params_f) / (acc_b / params_b);
}

struct ClassCounts {
    int64_t tp = 0;
    int64_t fp = 0;
    int64_t fn = 0;
};

struct EvalReport {
    double dice_whole_tumor = 0;
    std::vector<double> per_class_dice;
    double accuracy = 0;
    std::vector<ClassCounts> counts;
    int64_t voxels = 0;
};

// Streams (pred, truth) volume pairs and aggregates one report over all of
// them: whole-tumor dice from pooled mask counts, accuracy over all voxels.
class MetricsAccumulator {
public:
    explicit MetricsAccumulator(int n_classes = 5)
        : n_(n_classes), pred_count_(static_cast<size_t>(n_classes), 0),
          truth_count_(static_cast<size_t>(n_classes), 0),
          match_count_(static_cast<size_t>(n_classes), 0) {}

    void add(const LabelVolume& pred, const LabelVolume& truth) {
        if (pred.shape != truth.shape)
            throw ShapeError("metrics: shape mismatch " + pred.shape.str() + " vs " +
                             truth.shape.str());
        for (size_t i = 0; i < pred.v.size(); ++i) {
            const uint8_t p = pred.v[i], t = truth.v[i];
            if (p >= n_ || t >= n_)
                throw DataError("label id " + std::to_string(std::max(p, t)) +
                                " out of range [0, " + std::to_string(n_) + ")");
            pred_count_[p] += 1;
            truth_count_[t] += 1;
            if (p == t) {
                match_count_[p] += 1;
                correct_ += 1;
            }
            const bool pt = p > 0, tt = t > 0;
            whole_p_ += pt;
            whole_t_ += tt;
            whole_both_ += pt && tt;
            total_ += 1;
        }
    }

    EvalReport report() const {
        EvalReport r;
        r.voxels = total_;
        r.dice_whole_tumor =
            whole_p_ + whole_t_ == 0
                ? 1.0
                : 2.0 * static_cast<double>(whole_both_) / static_cast<double>(whole_p_ + whole_t_);
        r.accuracy = total_ == 0 ? 0.0
                                 : static_cast<double>(correct_) / static_cast<double>(total_);
        for (int c = 0; c < n_; ++c) {
            const int64_t p = pred_count_[static_cast<size_t>(c)];
            const int64_t t = truth_count_[static_cast<size_t>(c)];
            const int64_t m = match_count_[static_cast<size_t>(c)];
            r.per_class_dice.push_back(p + t == 0 ? 1.0
                                                  : 2.0 * static_cast<double>(m) /
                                                        static_cast<double>(p + t));
            r.counts.push_back({m, p - m, t - m});
        }
        return r;
    }

private:
    int n_;
    std::vector<int64_t> pred_count_, truth_count_, match_count_;
    int64_t whole_p_ = 0, whole_t_ = 0, whole_both_ = 0;
    int64_t correct_ = 0, total_ = 0;
};

}  // namespace voxnn
