#include "spine3d/metrics.hpp"

#include <numeric>

namespace spine3d {

namespace {

MetricValue ratio(long long num, long long den) {
    if (den == 0) return {0.0, false};
    return {static_cast<Real>(num) / static_cast<Real>(den), true};
}

}  // namespace

IouDice iou_dice(const Tensor& a, const Tensor& b, Real threshold) {
    check(a.dims() == b.dims(),
          "iou_dice shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
    std::span<const Real> va = a.values();
    std::span<const Real> vb = b.values();
    long long na = 0, nb = 0, inter = 0;
    for (std::size_t i = 0; i < va.size(); ++i) {
        const bool ia = va[i] > threshold;
        const bool ib = vb[i] > threshold;
        na += ia;
        nb += ib;
        inter += ia && ib;
    }
    if (na + nb == 0) return {1.0, 1.0};
    const long long uni = na + nb - inter;
    return {uni == 0 ? 1.0 : static_cast<Real>(inter) / static_cast<Real>(uni),
            static_cast<Real>(2 * inter) / static_cast<Real>(na + nb)};
}

long long ConfusionMatrix::total() const {
    return std::accumulate(counts.begin(), counts.end(), 0LL);
}

ConfusionMatrix confusion(const std::vector<int>& pred, const std::vector<int>& gt, int k) {
    check(k >= 1, "confusion needs k >= 1 classes");
    check(pred.size() == gt.size(), "confusion length mismatch: " + std::to_string(pred.size()) +
                                        " predictions vs " + std::to_string(gt.size()) + " labels");
    ConfusionMatrix m;
    m.k = k;
    m.counts.assign(static_cast<std::size_t>(k) * k, 0);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        check(gt[i] >= 0 && gt[i] < k && pred[i] >= 0 && pred[i] < k,
              "confusion label out of range at sample " + std::to_string(i));
        ++m.counts[static_cast<std::size_t>(gt[i]) * k + pred[i]];
    }
    return m;
}

ClassMetrics class_metrics(const ConfusionMatrix& m, int cls) {
    check(m.k >= 1 && !m.counts.empty(), "class_metrics on an empty matrix");
    check(cls >= 0 && cls < m.k, "class_metrics class out of range");
    const long long tp = m.at(cls, cls);
    long long fn = 0, fp = 0;
    for (int j = 0; j < m.k; ++j) {
        if (j == cls) continue;
        fn += m.at(cls, j);
        fp += m.at(j, cls);
    }
    const long long tn = m.total() - tp - fn - fp;

    ClassMetrics out;
    out.sensitivity = ratio(tp, tp + fn);
    out.specificity = ratio(tn, tn + fp);
    out.precision = ratio(tp, tp + fp);
    out.npv = ratio(tn, tn + fn);
    out.accuracy = ratio(tp + tn, m.total());
    return out;
}

Real macro_avg_sensitivity(const ConfusionMatrix& m) {
    check(m.k >= 1 && !m.counts.empty(), "macro average on an empty matrix");
    Real sum = 0;
    for (int c = 0; c < m.k; ++c) {
        const MetricValue s = class_metrics(m, c).sensitivity;
        check(s.defined, "macro average needs ground-truth support for class " + std::to_string(c));
        sum += s.value;
    }
    return sum / static_cast<Real>(m.k);
}

}  // namespace spine3d
