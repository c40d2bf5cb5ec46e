#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "loramix/tensor.hpp"

namespace loramix {

enum class RoutingMode { hard, soft, topk };
enum class AssignmentMode { top1, topk };

std::string to_string(RoutingMode mode);
RoutingMode parse_routing_mode(const std::string &text);
std::string to_string(AssignmentMode mode);
AssignmentMode parse_assignment_mode(const std::string &text);

struct RouterConfig {
    std::size_t num_experts = 4;
    std::size_t top_k = 3;
    bool renormalize_topk = false;
    RoutingMode mode = RoutingMode::soft;
    /// Gate weights start as N(0, init_std^2).
    double init_std = 0.01;
    /// One router per block instead of one per wrapped projection.
    bool shared_per_block = false;

    void validate() const;
};

/// Linear gate producing G(x) = gate_weight x over E experts.
struct Router {
    Tensor gate_weight;  // [E x d_in]
    std::size_t num_experts = 0;
    std::size_t top_k = 3;
    bool renormalize_topk = false;
    RoutingMode mode = RoutingMode::soft;

    void validate() const;
    std::size_t d_in() const { return gate_weight.dim(1); }
};

Router make_router(std::size_t d_in, const RouterConfig &cfg, std::uint64_t seed);

struct RoutingDistribution {
    Tensor logits;   // [batch x E]
    Tensor probs;    // [batch x E]
    Tensor weights;  // [batch x E], zero outside `selected`
    std::vector<std::vector<std::size_t>> selected;
    RoutingMode mode = RoutingMode::soft;
    std::size_t top_k = 0;

    std::size_t tokens() const { return probs.dim(0); }
    std::size_t experts() const { return probs.dim(1); }
};

/// Routes every token. Hard mode needs `domain_id`.
RoutingDistribution route(const Router &r, const Tensor &x, std::optional<int> domain_id = std::nullopt);
/// Hard mode with one domain per token; other modes ignore `token_domains`.
RoutingDistribution route(const Router &r, const Tensor &x, std::span<const int> token_domains);

/// Indices of the k largest entries, ties to the lower index, in descending order.
std::vector<std::size_t> top_k_indices(std::span<const double> row, std::size_t k);
std::size_t argmax_tiebreak(std::span<const double> row);

/// -sum p log p with 0 log 0 = 0.
double entropy(std::span<const double> probs_row);
/// -log p_i - 1 per coordinate.
std::vector<double> entropy_grad_unconstrained(std::span<const double> probs_row);

struct RoutingBatchStats {
    std::vector<double> p_bar;
    std::vector<double> f_bar;
    double mean_entropy = 0.0;
    double routing_variance = 0.0;
    std::size_t token_count = 0;
    AssignmentMode assignment = AssignmentMode::top1;

    /// Differentiable views, defined when the stats came from a recorded pass.
    Tensor p_bar_t;         // [E]
    Tensor mean_entropy_t;  // [1]

    std::size_t experts() const { return p_bar.size(); }
};

RoutingBatchStats batch_stats(const RoutingDistribution &dist, AssignmentMode mode = AssignmentMode::top1);
/// Token-count weighted merge; the variance merge keeps between-shard spread.
RoutingBatchStats merge_stats(std::span<const RoutingBatchStats> parts);
void validate_stats(const RoutingBatchStats &stats);

}  // namespace loramix
