#ifndef RANKCELL_TESTS_ORACLES_HPP
#define RANKCELL_TESTS_ORACLES_HPP

// Straightforward reimplementations used to check the library. None of these share code
// with the code under test beyond the data structures they read.

#include "rankcell/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace rankcell::test {

struct GroupError {
    std::string name;
    double analytic_norm = 0.0;
    double numeric_norm = 0.0;
    double relative_error = 0.0;
};

/// Central differences of the pretraining loss for every parameter, compared per tensor.
inline std::vector<GroupError> finite_difference_check(ModelParams<double> params, const MaskedBatch& batch, double step,
                                                       const LossWeights& weights = {}) {
    std::vector<double> grads;
    backward(params, batch, grads, weights);
    std::vector<GroupError> out;
    for (const auto& t : params.layout.tensors()) {
        double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
        for (std::size_t i = 0; i < t.size; ++i) {
            double& p = params.data[t.offset + i];
            const double saved = p;
            p = saved + step;
            const double up = pretrain_loss(forward(params, batch), batch, weights).total;
            p = saved - step;
            const double down = pretrain_loss(forward(params, batch), batch, weights).total;
            p = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double analytic = grads[t.offset + i];
            diff2 += (analytic - numeric) * (analytic - numeric);
            a2 += analytic * analytic;
            n2 += numeric * numeric;
        }
        GroupError g{t.name, std::sqrt(a2), std::sqrt(n2), 0.0};
        const double scale = std::max(g.analytic_norm, g.numeric_norm);
        g.relative_error = scale < 1e-12 ? 0.0 : std::sqrt(diff2) / scale;
        out.push_back(g);
    }
    return out;
}

/// Per-cell mean then mean over cells of -log softmax at the target, from raw logit rows.
inline double oracle_mlm_g(const std::vector<std::vector<double>>& logits, const std::vector<std::size_t>& cell_of,
                           const std::vector<std::size_t>& target) {
    std::map<std::size_t, std::vector<double>> per_cell;
    for (std::size_t s = 0; s < logits.size(); ++s) {
        double mx = *std::max_element(logits[s].begin(), logits[s].end());
        double z = 0.0;
        for (double v : logits[s]) {
            z += std::exp(v - mx);
        }
        per_cell[cell_of[s]].push_back(-(logits[s][target[s]] - mx - std::log(z)));
    }
    double total = 0.0;
    for (const auto& [cell, losses] : per_cell) {
        double m = 0.0;
        for (double l : losses) {
            m += l;
        }
        total += m / static_cast<double>(losses.size());
    }
    return per_cell.empty() ? 0.0 : total / static_cast<double>(per_cell.size());
}

struct OracleMetrics {
    double accuracy = 0.0;
    double weighted_f1 = 0.0;
};

/// Confusion matrix, then per-class precision/recall/F1 with 0/0 read as 0.
inline OracleMetrics oracle_metrics(const std::vector<int>& truth, const std::vector<int>& pred, int n_classes) {
    std::vector<std::vector<long>> cm(n_classes, std::vector<long>(n_classes, 0));
    for (std::size_t i = 0; i < truth.size(); ++i) {
        ++cm[truth[i]][pred[i]];
    }
    long correct = 0;
    for (int c = 0; c < n_classes; ++c) {
        correct += cm[c][c];
    }
    OracleMetrics m;
    const double n = static_cast<double>(truth.size());
    m.accuracy = n == 0 ? 0.0 : static_cast<double>(correct) / n;
    for (int c = 0; c < n_classes; ++c) {
        long tp = cm[c][c], fp = 0, fn = 0;
        for (int o = 0; o < n_classes; ++o) {
            if (o != c) {
                fp += cm[o][c];
                fn += cm[c][o];
            }
        }
        const long support = tp + fn;
        const double f1 = (2 * tp + fp + fn) == 0 ? 0.0 : 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
        m.weighted_f1 += n == 0 ? 0.0 : static_cast<double>(support) / n * f1;
    }
    return m;
}

}

#endif
