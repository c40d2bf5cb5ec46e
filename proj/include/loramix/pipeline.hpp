#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include "loramix/config.hpp"
#include "loramix/losses.hpp"
#include "loramix/toy_model.hpp"
#include "loramix/training.hpp"
#include "loramix/workbench.hpp"

namespace loramix {

/// Four-domain splits for a pipeline config.
DatasetSplits make_workbench_data(const PipelineConfig &cfg);

/// Frozen base with a calibrated head, not yet wrapped.
ToyModel make_base_model(const PipelineConfig &cfg, const DatasetSplits &data);

std::vector<std::shared_ptr<MixerLayer>> wrap_model(ToyModel &model, const PipelineConfig &cfg);

TrainResult run_expert_phase(ToyModel &model, const PipelineConfig &cfg, const DatasetSplits &data,
                             const StepLogger &log = {});

/// Anchor over the wrapped experts; constrains the configured experts when
/// the router phase also trains experts, nothing otherwise.
PreservationAnchor phase_anchor(ToyModel &model, const PhaseConfig &phase2);

/// `sample_limit` > 0 restricts router training to that many drawn samples.
TrainResult run_router_phase(ToyModel &model, const PipelineConfig &cfg, const DatasetSplits &data,
                             const PreservationAnchor &anchor, std::size_t sample_limit = 0,
                             const StepLogger &log = {});

}  // namespace loramix
