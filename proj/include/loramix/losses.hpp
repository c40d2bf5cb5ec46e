#pragma once

#include <map>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "loramix/mixer.hpp"
#include "loramix/routing.hpp"
#include "loramix/tensor.hpp"

namespace loramix {

struct LossWeights {
    double alpha = 0.01;
    double lambda = 0.001;
    double beta = 0.1;
    double outer_rsl_weight = 1.0;

    void validate() const;
};

/// (layer name, expert id)
using ExpertKey = std::pair<std::string, int>;

struct PreservationAnchor {
    struct Snapshot {
        std::vector<double> A;
        std::vector<double> B;
    };
    std::map<ExpertKey, Snapshot> anchored;
    std::set<ExpertKey> constrained_set;

    void validate() const;
};

/// Deep copies of every expert in `layers`; `constrained` defaults to all of them.
PreservationAnchor make_anchor(const std::vector<std::shared_ptr<MixerLayer>> &layers,
                               const std::set<ExpertKey> *constrained = nullptr);

/// alpha * sum p_bar * f_bar, with f_bar held constant.
Tensor aux_loss(const RoutingBatchStats &stats, double alpha);
/// aux_loss - lambda * mean entropy.
Tensor rsl_loss(const RoutingBatchStats &stats, const LossWeights &w);
/// beta * sum over constrained experts of ||theta - theta0||^2.
Tensor preservation_loss(const std::vector<std::shared_ptr<MixerLayer>> &layers, const PreservationAnchor &anchor,
                         double beta);
/// Squared L2 distance of constrained experts from their anchors.
double anchor_drift_squared(const std::vector<std::shared_ptr<MixerLayer>> &layers, const PreservationAnchor &anchor);
Tensor task_loss(const Tensor &logits, std::span<const int> labels);

/// task + outer_rsl_weight * rsl + preserve.
double total_loss(double task, double rsl, double preserve, const LossWeights &w);

struct LossReport {
    double task = 0.0;
    double rsl = 0.0;
    double aux = 0.0;
    double preserve = 0.0;
    double total = 0.0;
    std::vector<std::pair<std::string, RoutingBatchStats>> layer_stats;

    double recomputed_total(const LossWeights &w) const { return task + w.outer_rsl_weight * rsl + preserve; }
};

}  // namespace loramix
