#pragma once

// Binary classification metrics. AUC is the Mann-Whitney statistic computed
// from average ranks (ties get half credit); the confusion counts use a 0.5
// threshold on the positive-class score.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace mvssm {

struct Metrics {
    double accuracy = 0, auc = 0, f1 = 0, sensitivity = 0, specificity = 0;
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    bool auc_defined = false;
};

inline Metrics compute_metrics(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw std::invalid_argument("compute_metrics: scores and labels differ in length");
    if (scores.empty()) throw std::invalid_argument("compute_metrics: empty inputs");
    for (double s : scores)
        if (!(s >= 0.0 && s <= 1.0))
            throw std::invalid_argument("compute_metrics: scores must lie in [0,1]");
    for (int l : labels)
        if (l != 0 && l != 1) throw std::invalid_argument("compute_metrics: labels must be 0 or 1");

    Metrics m;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool pred = scores[i] >= 0.5;
        if (labels[i] == 1) (pred ? m.tp : m.fn)++;
        else (pred ? m.fp : m.tn)++;
    }
    const std::size_t pos = m.tp + m.fn, neg = m.fp + m.tn, total = pos + neg;
    m.accuracy = double(m.tp + m.tn) / double(total);
    m.sensitivity = pos ? double(m.tp) / double(pos) : 0.0;
    m.specificity = neg ? double(m.tn) / double(neg) : 0.0;
    const std::size_t f1_den = 2 * m.tp + m.fp + m.fn;
    m.f1 = f1_den ? 2.0 * double(m.tp) / double(f1_den) : 0.0;

    if (pos == 0 || neg == 0) {
        m.auc = std::numeric_limits<double>::quiet_NaN();
        m.auc_defined = false;
        return m;
    }

    // average ranks, 1-based, ties share their mean rank
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t(0));
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    std::vector<double> rank(scores.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg = 0.5 * double(i + 1 + j + 1);
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
        i = j + 1;
    }
    double rank_pos = 0;
    for (std::size_t k = 0; k < scores.size(); ++k)
        if (labels[k] == 1) rank_pos += rank[k];
    const double u = rank_pos - double(pos) * double(pos + 1) / 2.0;
    m.auc = u / (double(pos) * double(neg));
    m.auc_defined = true;
    return m;
}

}  // namespace mvssm
