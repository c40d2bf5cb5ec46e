#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "loramix/lora.hpp"
#include "loramix/routing.hpp"
#include "loramix/tensor.hpp"

namespace loramix {

/// A frozen linear map y = W x (+ bias). W is [d_out x d_in].
struct FrozenProjection {
    std::string name;
    Tensor W;
    Tensor bias;  // may be undefined

    std::size_t d_in() const { return W.dim(1); }
    std::size_t d_out() const { return W.dim(0); }
};

struct MixerLayer {
    FrozenProjection base;
    std::vector<LoraExpert> experts;
    std::shared_ptr<Router> router;

    const std::string &name() const { return base.name; }
    std::size_t num_experts() const { return experts.size(); }
    void validate() const;
    std::vector<Tensor> expert_parameters() const;
};

struct MixerOutput {
    Tensor y;
    RoutingDistribution routing;
};

/// W x + bias + sum over selected experts of weight_e(x) * expert_e(x).
/// `token_domains` is only read in hard mode (one id per row, or a single id for all rows).
MixerOutput mixer_forward(const MixerLayer &layer, const Tensor &x, std::span<const int> token_domains,
                          bool training, std::mt19937_64 *rng = nullptr);

/// A named projection inside a host model, optionally wrapped.
struct ProjectionSlot {
    FrozenProjection base;
    std::shared_ptr<MixerLayer> mixer;
};

class HostModel {
   public:
    virtual ~HostModel() = default;
    /// Every wrappable projection in model order.
    virtual std::vector<ProjectionSlot *> projections() = 0;
    std::vector<std::shared_ptr<MixerLayer>> mixers() const;
    void detach_mixers();
};

/// `pattern` is a '|' separated list of globs; each is tried against the full
/// name and against its last dotted component.
bool match_layer_pattern(const std::string &pattern, const std::string &name);
bool match_any_pattern(const std::vector<std::string> &patterns, const std::string &name);

/// Wraps every matching projection. Returns the new layers in model order.
std::vector<std::shared_ptr<MixerLayer>> attach_mixers(HostModel &model, const LoraConfig &cfg, std::size_t E,
                                                       const RouterConfig &router_cfg, std::uint64_t seed);

/// Block prefix of a layer name ("blk0.attn.q" -> "blk0").
std::string block_of(const std::string &layer_name);

}  // namespace loramix
