#pragma once

#include <vector>

#include "spine3d/common.hpp"
#include "spine3d/tensor.hpp"

namespace spine3d {

struct IouDice {
    Real iou = 0;
    Real dice = 0;
};

/// Overlap of the two maps binarized at `threshold`. Both-empty masks score
/// (1,1): identical nothing is a perfect match, not a division by zero.
IouDice iou_dice(const Tensor& a, const Tensor& b, Real threshold = 0.5);

/// k x k counts; rows index ground truth, columns index predictions.
struct ConfusionMatrix {
    int k = 0;
    std::vector<long long> counts;  // row-major

    long long at(int gt, int pred) const { return counts[static_cast<std::size_t>(gt) * k + pred]; }
    long long total() const;
};

ConfusionMatrix confusion(const std::vector<int>& pred, const std::vector<int>& gt, int k);

/// A ratio that may be 0/0; `defined` is false in that case and `value`
/// must not be read. Keeps undefined cells out of silent averages.
struct MetricValue {
    Real value = 0;
    bool defined = false;
};

struct ClassMetrics {
    MetricValue sensitivity;  // TP / (TP + FN)
    MetricValue specificity;  // TN / (TN + FP)
    MetricValue precision;    // TP / (TP + FP)
    MetricValue npv;          // TN / (TN + FN)
    MetricValue accuracy;     // (TP + TN) / total
};

/// One-vs-rest metrics for class `cls`.
ClassMetrics class_metrics(const ConfusionMatrix& m, int cls);

/// Unweighted mean of per-class sensitivity; every class needs support.
Real macro_avg_sensitivity(const ConfusionMatrix& m);

}  // namespace spine3d
