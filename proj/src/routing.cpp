#include "loramix/routing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "loramix/errors.hpp"

namespace loramix {

namespace {

constexpr double kSimplexTol = 1e-9;

void check_simplex(std::span<const double> row, const char *what) {
    if (row.empty()) throw DomainError(std::string(what) + ": empty probability row");
    double total = 0.0;
    for (double p : row) {
        if (!std::isfinite(p)) throw DomainError(std::string(what) + ": non-finite probability");
        if (p < -kSimplexTol) throw DomainError(std::string(what) + ": negative probability " + std::to_string(p));
        total += p;
    }
    if (std::abs(total - 1.0) > kSimplexTol) {
        throw DomainError(std::string(what) + ": row sums to " + std::to_string(total) + ", not 1");
    }
}

}  // namespace

std::string to_string(RoutingMode mode) {
    switch (mode) {
        case RoutingMode::hard: return "hard";
        case RoutingMode::soft: return "soft";
        case RoutingMode::topk: return "topk";
    }
    return "?";
}

RoutingMode parse_routing_mode(const std::string &text) {
    if (text == "hard") return RoutingMode::hard;
    if (text == "soft") return RoutingMode::soft;
    if (text == "topk") return RoutingMode::topk;
    throw ConfigError("unknown routing mode '" + text + "'");
}

std::string to_string(AssignmentMode mode) { return mode == AssignmentMode::top1 ? "top1" : "topk"; }

AssignmentMode parse_assignment_mode(const std::string &text) {
    if (text == "top1") return AssignmentMode::top1;
    if (text == "topk") return AssignmentMode::topk;
    throw ConfigError("unknown assignment mode '" + text + "'");
}

void RouterConfig::validate() const {
    if (num_experts == 0) throw ConfigError("router needs at least one expert");
    if (top_k == 0 || top_k > num_experts) {
        throw ConfigError("top_k " + std::to_string(top_k) + " outside [1, " + std::to_string(num_experts) + "]");
    }
    if (!(init_std >= 0.0) || !std::isfinite(init_std)) throw ConfigError("router init_std must be finite and >= 0");
}

void Router::validate() const {
    if (!gate_weight.defined() || gate_weight.rank() != 2) throw ConfigError("router gate weight must be a matrix");
    if (gate_weight.dim(0) != num_experts) {
        throw ConfigError("gate weight has " + std::to_string(gate_weight.dim(0)) + " rows for " +
                          std::to_string(num_experts) + " experts");
    }
    if (top_k == 0 || top_k > num_experts) {
        throw ConfigError("top_k " + std::to_string(top_k) + " outside [1, " + std::to_string(num_experts) + "]");
    }
}

Router make_router(std::size_t d_in, const RouterConfig &cfg, std::uint64_t seed) {
    cfg.validate();
    if (d_in == 0) throw ConfigError("router input dimension must be positive");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> w(cfg.num_experts * d_in);
    for (double &v : w) v = cfg.init_std * normal(rng);
    Router r;
    r.gate_weight = Tensor({cfg.num_experts, d_in}, std::move(w), true);
    r.num_experts = cfg.num_experts;
    r.top_k = cfg.top_k;
    r.renormalize_topk = cfg.renormalize_topk;
    r.mode = cfg.mode;
    return r;
}

std::vector<std::size_t> top_k_indices(std::span<const double> row, std::size_t k) {
    if (k > row.size()) throw ConfigError("top_k larger than the row");
    std::vector<std::size_t> idx(row.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    idx.resize(k);
    return idx;
}

std::size_t argmax_tiebreak(std::span<const double> row) {
    if (row.empty()) throw DimensionError("argmax of an empty row");
    std::size_t best = 0;
    for (std::size_t i = 1; i < row.size(); ++i)
        if (row[i] > row[best]) best = i;
    return best;
}

namespace {

RoutingDistribution route_impl(const Router &r, const Tensor &x, const int *domains, std::size_t n_domains,
                               bool single) {
    r.validate();
    if (x.rank() != 2 || x.dim(1) != r.d_in()) {
        throw DimensionError("router expects [batch x " + std::to_string(r.d_in()) + "] input, got " +
                             shape_to_string(x.shape()));
    }
    const std::size_t n = x.dim(0), E = r.num_experts;
    RoutingDistribution dist;
    dist.mode = r.mode;
    dist.top_k = r.mode == RoutingMode::hard ? 1 : r.mode == RoutingMode::soft ? r.num_experts : r.top_k;
    dist.selected.resize(n);

    if (r.mode == RoutingMode::hard) {
        if (n_domains == 0) throw RoutingError("hard routing requires a domain id");
        if (!single && n_domains != n) {
            throw DimensionError("hard routing got " + std::to_string(n_domains) + " domain ids for " +
                                 std::to_string(n) + " tokens");
        }
        {
            NoGradGuard guard;
            dist.logits = linear(x, r.gate_weight);
            dist.probs = softmax(dist.logits);
        }
        std::vector<double> w(n * E, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const int d = single ? domains[0] : domains[i];
            if (d < 0 || static_cast<std::size_t>(d) >= E) {
                throw IndexError("domain id " + std::to_string(d) + " outside [0, " + std::to_string(E) + ")");
            }
            w[i * E + static_cast<std::size_t>(d)] = 1.0;
            dist.selected[i] = {static_cast<std::size_t>(d)};
        }
        dist.weights = Tensor({n, E}, std::move(w));
        return dist;
    }

    dist.logits = linear(x, r.gate_weight);
    dist.probs = softmax(dist.logits);
    if (r.mode == RoutingMode::soft) {
        std::vector<std::size_t> all(E);
        std::iota(all.begin(), all.end(), std::size_t{0});
        for (auto &s : dist.selected) s = all;
        dist.weights = dist.probs;
        return dist;
    }

    auto P = dist.probs.values();
    std::vector<double> mask(n * E, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        dist.selected[i] = top_k_indices(P.subspan(i * E, E), r.top_k);
        std::sort(dist.selected[i].begin(), dist.selected[i].end());
        for (std::size_t e : dist.selected[i]) mask[i * E + e] = 1.0;
    }
    dist.weights = mul(dist.probs, Tensor({n, E}, std::move(mask)));
    if (r.renormalize_topk) dist.weights = normalize_rows(dist.weights);
    return dist;
}

}  // namespace

RoutingDistribution route(const Router &r, const Tensor &x, std::optional<int> domain_id) {
    int d = domain_id.value_or(0);
    return route_impl(r, x, &d, domain_id ? 1 : 0, true);
}

RoutingDistribution route(const Router &r, const Tensor &x, std::span<const int> token_domains) {
    return route_impl(r, x, token_domains.data(), token_domains.size(), false);
}

double entropy(std::span<const double> probs_row) {
    check_simplex(probs_row, "entropy");
    double h = 0.0;
    for (double p : probs_row)
        if (p > 0.0) h -= p * std::log(p);
    return std::max(0.0, h);
}

std::vector<double> entropy_grad_unconstrained(std::span<const double> probs_row) {
    std::vector<double> g(probs_row.size());
    for (std::size_t i = 0; i < probs_row.size(); ++i) {
        if (!(probs_row[i] > 0.0)) {
            throw DomainError("entropy gradient needs strictly positive probabilities, entry " + std::to_string(i) +
                              " is " + std::to_string(probs_row[i]));
        }
        g[i] = -std::log(probs_row[i]) - 1.0;
    }
    return g;
}

RoutingBatchStats batch_stats(const RoutingDistribution &dist, AssignmentMode mode) {
    if (!dist.probs.defined() || dist.probs.rank() != 2 || dist.tokens() == 0) {
        throw StatisticsError("routing statistics need a non-empty batch");
    }
    const std::size_t n = dist.tokens(), E = dist.experts();
    auto P = dist.probs.values();
    RoutingBatchStats s;
    s.token_count = n;
    s.assignment = mode;
    s.p_bar.assign(E, 0.0);
    s.f_bar.assign(E, 0.0);
    double ent = 0.0;
    const std::size_t k = mode == AssignmentMode::top1 ? 1 : std::max<std::size_t>(1, std::min(dist.top_k, E));
    for (std::size_t i = 0; i < n; ++i) {
        auto row = P.subspan(i * E, E);
        for (std::size_t e = 0; e < E; ++e) s.p_bar[e] += row[e];
        if (mode == AssignmentMode::top1) {
            s.f_bar[argmax_tiebreak(row)] += 1.0;
        } else {
            for (std::size_t e : top_k_indices(row, k)) s.f_bar[e] += 1.0;
        }
        double h = 0.0;
        for (double p : row)
            if (p > 0.0) h -= p * std::log(p);
        ent += h;
    }
    const double inv = 1.0 / static_cast<double>(n);
    for (double &v : s.p_bar) v *= inv;
    for (double &v : s.f_bar) v /= static_cast<double>(n * k);
    s.mean_entropy = std::max(0.0, ent * inv);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t e = 0; e < E; ++e) {
            const double d = P[i * E + e] - s.p_bar[e];
            var += d * d;
        }
    s.routing_variance = var * inv;
    if (dist.probs.requires_grad()) {
        s.p_bar_t = mean_rows(dist.probs);
        s.mean_entropy_t = mean(row_entropy(dist.probs));
    }
    return s;
}

RoutingBatchStats merge_stats(std::span<const RoutingBatchStats> parts) {
    if (parts.empty()) throw StatisticsError("nothing to merge");
    const std::size_t E = parts[0].experts();
    RoutingBatchStats out;
    out.assignment = parts[0].assignment;
    out.p_bar.assign(E, 0.0);
    out.f_bar.assign(E, 0.0);
    for (const auto &p : parts) {
        if (p.experts() != E) throw StatisticsError("cannot merge stats over different expert counts");
        out.token_count += p.token_count;
    }
    if (out.token_count == 0) throw StatisticsError("merged stats cover no tokens");
    const double N = static_cast<double>(out.token_count);
    for (const auto &p : parts) {
        const double w = static_cast<double>(p.token_count) / N;
        for (std::size_t e = 0; e < E; ++e) {
            out.p_bar[e] += w * p.p_bar[e];
            out.f_bar[e] += w * p.f_bar[e];
        }
        out.mean_entropy += w * p.mean_entropy;
    }
    for (const auto &p : parts) {
        const double w = static_cast<double>(p.token_count) / N;
        double shift = 0.0;
        for (std::size_t e = 0; e < E; ++e) shift += (p.p_bar[e] - out.p_bar[e]) * (p.p_bar[e] - out.p_bar[e]);
        out.routing_variance += w * (p.routing_variance + shift);
    }
    return out;
}

void validate_stats(const RoutingBatchStats &stats) {
    if (stats.token_count == 0 || stats.p_bar.empty()) throw StatisticsError("empty routing statistics");
    if (stats.f_bar.size() != stats.p_bar.size()) throw StatisticsError("p_bar and f_bar lengths differ");
    auto total = [](const std::vector<double> &v) { return std::accumulate(v.begin(), v.end(), 0.0); };
    if (std::abs(total(stats.p_bar) - 1.0) > 1e-9) throw StatisticsError("p_bar does not sum to 1");
    if (std::abs(total(stats.f_bar) - 1.0) > 1e-9) throw StatisticsError("f_bar does not sum to 1");
    const double max_h = std::log(static_cast<double>(stats.experts()));
    if (stats.mean_entropy < 0.0 || stats.mean_entropy > max_h + 1e-12) {
        throw StatisticsError("mean entropy outside [0, ln E]");
    }
    if (stats.routing_variance < 0.0) throw StatisticsError("negative routing variance");
}

}  // namespace loramix
