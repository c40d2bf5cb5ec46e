#include "loramix/pipeline.hpp"

#include <algorithm>
#include <set>

#include "loramix/rng.hpp"

namespace loramix {

DatasetSplits make_workbench_data(const PipelineConfig &cfg) {
    return generate_dataset(cfg.domain_specs(), cfg.n_per_domain, cfg.seed);
}

ToyModel make_base_model(const PipelineConfig &cfg, const DatasetSplits &data) {
    ToyModel model(cfg.model, derive_seed(cfg.seed, {20}));
    calibrate_head(model, data.train, cfg.head);
    return model;
}

std::vector<std::shared_ptr<MixerLayer>> wrap_model(ToyModel &model, const PipelineConfig &cfg) {
    return attach_mixers(model, cfg.lora, cfg.num_experts, cfg.router, derive_seed(cfg.seed, {21}));
}

TrainResult run_expert_phase(ToyModel &model, const PipelineConfig &cfg, const DatasetSplits &data,
                             const StepLogger &log) {
    MixedStream stream(data.train, uniform_proportions(cfg.num_experts), derive_seed(cfg.phase1.seed, {30}));
    return train_experts(model, stream, cfg.phase1, log);
}

PreservationAnchor phase_anchor(ToyModel &model, const PhaseConfig &phase2) {
    auto mixers = model.mixers();
    std::set<ExpertKey> constrained;
    if (phase2.trainable_set == TrainableSet::router_plus_constrained_experts) {
        for (const auto &m : mixers) {
            for (const auto &e : m->experts) {
                const auto &ids = phase2.constrained_experts;
                if (ids.empty() || std::find(ids.begin(), ids.end(), e.expert_id) != ids.end()) {
                    constrained.insert({m->name(), e.expert_id});
                }
            }
        }
    }
    return make_anchor(mixers, &constrained);
}

TrainResult run_router_phase(ToyModel &model, const PipelineConfig &cfg, const DatasetSplits &data,
                             const PreservationAnchor &anchor, std::size_t sample_limit, const StepLogger &log) {
    MixedStream stream(data.train, uniform_proportions(cfg.num_experts), derive_seed(cfg.phase2.seed, {31}),
                       sample_limit);
    return train_router(model, stream, cfg.phase2, &anchor, log);
}

}  // namespace loramix
