#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "loramix/mixer.hpp"
#include "loramix/workbench.hpp"

namespace loramix {

struct ToyModelConfig {
    std::size_t vocab = 16;
    std::size_t seq_len = 12;
    std::size_t d_model = 32;
    std::size_t heads = 2;
    std::size_t d_ff = 64;
    std::size_t blocks = 2;
    std::size_t classes = 2;
    /// Scale on the query/key init.
    double qk_gain = 1.5;
    /// Key projection starts as a copy of the query projection.
    bool tie_qk = true;

    void validate() const;
};

struct ForwardContext {
    bool training = false;
    std::mt19937_64 *rng = nullptr;
    /// One domain id per sample, read by layers in hard routing mode.
    std::span<const int> sample_domains;
    /// When set, every mixer's routing is appended here.
    std::vector<std::pair<std::string, RoutingDistribution>> *routing = nullptr;
};

/// Pre-norm transformer classifier. Layer names: blk<i>.attn.{q,k,v,o},
/// blk<i>.ffn.{up,down}. Reads out the final position.
class ToyModel : public HostModel {
   public:
    struct Block {
        ProjectionSlot q, k, v, o, up, down;
    };

    ToyModel(const ToyModelConfig &cfg, std::uint64_t seed);

    std::vector<ProjectionSlot *> projections() override;

    /// Final normalized state at the last position, [batch x d_model].
    Tensor features(const Batch &batch, const ForwardContext &ctx) const;
    Tensor head(const Tensor &features) const;
    Tensor forward(const Batch &batch, const ForwardContext &ctx) const;

    /// Every non-mixer tensor with a stable name.
    std::vector<std::pair<std::string, Tensor>> base_tensors();

    const ToyModelConfig &config() const { return cfg_; }

    /// Deep copy: no tensor is shared with the original. Routers shared
    /// between layers stay shared within the copy.
    ToyModel clone() const;

    Tensor tok_emb;
    Tensor pos_emb;
    std::vector<Block> blocks;
    Tensor head_w;
    Tensor head_b;

   private:
    Tensor project(const ProjectionSlot &slot, const Tensor &x, std::span<const int> token_domains,
                   const ForwardContext &ctx) const;

    ToyModelConfig cfg_;
};

struct HeadCalibration {
    std::size_t steps = 1000;
    std::size_t batch_size = 32;
    double learning_rate = 1e-2;
    std::uint64_t seed = 0;
};

/// Trains only the classifier head on the frozen base, then freezes it.
void calibrate_head(ToyModel &model, const std::vector<LabeledSample> &train, const HeadCalibration &cfg);

}  // namespace loramix
