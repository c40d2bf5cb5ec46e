#include "loramix/losses.hpp"

#include <cmath>

#include "loramix/errors.hpp"

namespace loramix {

void LossWeights::validate() const {
    const std::pair<const char *, double> fields[] = {
        {"alpha", alpha}, {"lambda", lambda}, {"beta", beta}, {"outer_rsl_weight", outer_rsl_weight}};
    for (const auto &[name, v] : fields) {
        if (!std::isfinite(v) || v < 0.0) {
            throw ConfigError(std::string("loss weight ") + name + " must be finite and >= 0, got " +
                              std::to_string(v));
        }
    }
}

void PreservationAnchor::validate() const {
    for (const auto &key : constrained_set) {
        if (!anchored.count(key)) {
            throw AnchorError("no anchor for constrained expert " + std::to_string(key.second) + " of '" + key.first +
                              "'");
        }
    }
}

PreservationAnchor make_anchor(const std::vector<std::shared_ptr<MixerLayer>> &layers,
                               const std::set<ExpertKey> *constrained) {
    PreservationAnchor anchor;
    for (const auto &layer : layers) {
        for (const auto &e : layer->experts) {
            ExpertKey key{layer->name(), e.expert_id};
            anchor.anchored[key] = {std::vector<double>(e.A.values().begin(), e.A.values().end()),
                                    std::vector<double>(e.B.values().begin(), e.B.values().end())};
            if (!constrained) anchor.constrained_set.insert(key);
        }
    }
    if (constrained) anchor.constrained_set = *constrained;
    anchor.validate();
    return anchor;
}

namespace {

Tensor p_bar_tensor(const RoutingBatchStats &stats) {
    if (stats.p_bar_t.defined()) return stats.p_bar_t;
    return Tensor({stats.p_bar.size()}, stats.p_bar);
}

Tensor entropy_tensor(const RoutingBatchStats &stats) {
    if (stats.mean_entropy_t.defined()) return stats.mean_entropy_t;
    return Tensor::scalar(stats.mean_entropy);
}

const LoraExpert &find_expert(const std::vector<std::shared_ptr<MixerLayer>> &layers, const ExpertKey &key) {
    for (const auto &layer : layers) {
        if (layer->name() != key.first) continue;
        for (const auto &e : layer->experts)
            if (e.expert_id == key.second) return e;
    }
    throw AnchorError("constrained expert " + std::to_string(key.second) + " of '" + key.first +
                      "' is not in the model");
}

void check_snapshot(const LoraExpert &e, const PreservationAnchor::Snapshot &s, const ExpertKey &key) {
    if (s.A.size() != e.A.numel() || s.B.size() != e.B.numel()) {
        throw AnchorError("anchor for expert " + std::to_string(key.second) + " of '" + key.first +
                          "' has a different shape");
    }
}

}  // namespace

Tensor aux_loss(const RoutingBatchStats &stats, double alpha) {
    if (stats.p_bar.empty() || stats.f_bar.size() != stats.p_bar.size()) {
        throw StatisticsError("aux loss needs p_bar and f_bar of equal, non-zero length");
    }
    Tensor f({stats.f_bar.size()}, stats.f_bar);
    return scale(dot(p_bar_tensor(stats), f), alpha);
}

Tensor rsl_loss(const RoutingBatchStats &stats, const LossWeights &w) {
    Tensor aux = aux_loss(stats, w.alpha);
    if (w.lambda == 0.0) return aux;
    return sub(aux, scale(entropy_tensor(stats), w.lambda));
}

Tensor preservation_loss(const std::vector<std::shared_ptr<MixerLayer>> &layers, const PreservationAnchor &anchor,
                         double beta) {
    anchor.validate();
    Tensor total = Tensor::scalar(0.0);
    for (const auto &key : anchor.constrained_set) {
        const auto &e = find_expert(layers, key);
        const auto &snap = anchor.anchored.at(key);
        check_snapshot(e, snap, key);
        Tensor dA = sub(e.A, Tensor(e.A.shape(), snap.A));
        Tensor dB = sub(e.B, Tensor(e.B.shape(), snap.B));
        total = add(total, add(dot(dA, dA), dot(dB, dB)));
    }
    return scale(total, beta);
}

double anchor_drift_squared(const std::vector<std::shared_ptr<MixerLayer>> &layers,
                            const PreservationAnchor &anchor) {
    anchor.validate();
    double total = 0.0;
    for (const auto &key : anchor.constrained_set) {
        const auto &e = find_expert(layers, key);
        const auto &snap = anchor.anchored.at(key);
        check_snapshot(e, snap, key);
        auto a = e.A.values();
        auto b = e.B.values();
        for (std::size_t i = 0; i < a.size(); ++i) total += (a[i] - snap.A[i]) * (a[i] - snap.A[i]);
        for (std::size_t i = 0; i < b.size(); ++i) total += (b[i] - snap.B[i]) * (b[i] - snap.B[i]);
    }
    return total;
}

Tensor task_loss(const Tensor &logits, std::span<const int> labels) { return cross_entropy(logits, labels); }

double total_loss(double task, double rsl, double preserve, const LossWeights &w) {
    if (!std::isfinite(task)) throw PropagationError("task loss is not finite");
    if (!std::isfinite(rsl)) throw PropagationError("rsl loss is not finite");
    if (!std::isfinite(preserve)) throw PropagationError("preservation loss is not finite");
    return task + w.outer_rsl_weight * rsl + preserve;
}

}  // namespace loramix
