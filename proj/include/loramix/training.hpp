#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "loramix/losses.hpp"
#include "loramix/optimizer.hpp"
#include "loramix/toy_model.hpp"
#include "loramix/workbench.hpp"

namespace loramix {

enum class Phase { expert_phase, router_phase };
enum class TrainableSet { experts_only, router_only, router_plus_constrained_experts };

std::string to_string(Phase p);
Phase parse_phase(const std::string &text);
std::string to_string(TrainableSet t);
TrainableSet parse_trainable_set(const std::string &text);

struct PhaseConfig {
    Phase phase = Phase::expert_phase;
    std::size_t steps = 2000;
    std::size_t batch_size = 32;
    double learning_rate = 1e-5;
    /// Moment decays, eps, weight decay and clipping; its learning_rate is ignored.
    AdamWConfig optimizer;
    TrainableSet trainable_set = TrainableSet::experts_only;
    LossWeights loss_weights;
    std::uint64_t seed = 0;
    AssignmentMode assignment = AssignmentMode::top1;
    /// Expert ids held by the preservation anchor when experts train in the
    /// router phase. Empty means all.
    std::vector<int> constrained_experts;

    static PhaseConfig expert_defaults();
    static PhaseConfig router_defaults();
    void validate() const;
    AdamWConfig optimizer_config() const;
};

/// One line of the training log.
struct StepRecord {
    std::size_t step = 0;
    double task = 0.0;
    double rsl = 0.0;
    double aux = 0.0;
    double preserve = 0.0;
    double total = 0.0;
    double mean_entropy = 0.0;
    double routing_variance = 0.0;
    double grad_norm = 0.0;

    nlohmann::json to_json() const;
};

using StepLogger = std::function<void(const StepRecord &)>;

struct TrainState {
    std::size_t step = 0;
    std::optional<PreservationAnchor> anchor;
    std::mt19937_64 rng;
};

struct TrainResult {
    std::vector<StepRecord> records;
    TrainState state;
};

struct ObjectiveOptions {
    LossWeights weights;
    const PreservationAnchor *anchor = nullptr;
    /// Adds the preservation penalty to the recorded graph (otherwise it is only reported).
    bool preservation_in_graph = true;
    bool routing_terms = true;
    bool training = false;
    std::mt19937_64 *rng = nullptr;
    AssignmentMode assignment = AssignmentMode::top1;
};

struct Objective {
    Tensor total;
    LossReport report;
};

/// task + outer weight * (sum over mixer layers of rsl) + preservation.
Objective compute_objective(ToyModel &model, const Batch &batch, const ObjectiveOptions &opts);

/// Hard routing by domain; only the experts of each sample's domain move.
TrainResult train_experts(ToyModel &model, MixedStream &stream, const PhaseConfig &cfg, const StepLogger &log = {});

/// Soft routing under the total objective. Requires an anchor.
TrainResult train_router(ToyModel &model, MixedStream &stream, const PhaseConfig &cfg,
                         const PreservationAnchor *anchor, const StepLogger &log = {});

struct EvalOptions {
    RoutingMode mode = RoutingMode::topk;
    std::size_t top_k = 3;
    bool renormalize = false;
    /// Route every sample to this expert (hard mode).
    std::optional<int> forced_expert;
    std::size_t batch_size = 256;
};

struct EvalReport {
    std::map<int, double> domain_accuracy;
    std::map<int, std::size_t> domain_counts;
    double pooled = 0.0;
    std::size_t samples = 0;
    /// Per mixer layer, merged over the split.
    std::vector<std::pair<std::string, RoutingBatchStats>> layer_stats;
    /// domain -> mean routing probability per expert over tokens and layers.
    std::map<int, std::vector<double>> mean_gate;

    nlohmann::json to_json() const;
};

EvalReport evaluate(ToyModel &model, const std::vector<LabeledSample> &split, const EvalOptions &opts = {});

/// Gives every router the same mode for the guard's lifetime.
class RoutingOverride {
   public:
    RoutingOverride(HostModel &model, RoutingMode mode, std::optional<std::size_t> top_k = std::nullopt,
                    std::optional<bool> renormalize = std::nullopt);
    ~RoutingOverride();
    RoutingOverride(const RoutingOverride &) = delete;
    RoutingOverride &operator=(const RoutingOverride &) = delete;

   private:
    struct Saved {
        std::shared_ptr<Router> router;
        RoutingMode mode;
        std::size_t top_k;
        bool renormalize;
    };
    std::vector<Saved> saved_;
};

/// Distinct routers of a model in layer order.
std::vector<std::shared_ptr<Router>> unique_routers(const HostModel &model);

/// Checkpoint directory: `manifest.json` plus `tensors/<name>.bin`.
void save_checkpoint(ToyModel &model, const std::filesystem::path &dir, const nlohmann::json &extra = {});
ToyModel load_checkpoint(const std::filesystem::path &dir, nlohmann::json *extra = nullptr);

}  // namespace loramix
