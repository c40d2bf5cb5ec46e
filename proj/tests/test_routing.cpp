#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "loramix/errors.hpp"
#include "loramix/routing.hpp"
#include "oracles.hpp"

using namespace loramix;

namespace {

Router router_with(Tensor gate, RoutingMode mode, std::size_t k = 3, bool renorm = false) {
    Router r;
    r.gate_weight = gate;
    r.num_experts = gate.dim(0);
    r.top_k = k;
    r.mode = mode;
    r.renormalize_topk = renorm;
    return r;
}

/// A router whose probabilities equal `target` for input x = [1]: logits are log(target).
Router fixed_router(const std::vector<double> &target, RoutingMode mode, std::size_t k, bool renorm = false) {
    std::vector<double> w;
    for (double p : target) w.push_back(std::log(p));
    return router_with(Tensor({target.size(), 1}, w), mode, k, renorm);
}

}  // namespace

TEST_CASE("hard routing is one-hot on the domain") {
    std::mt19937_64 rng(1);
    Router r = router_with(oracle::random_tensor({4, 3}, rng), RoutingMode::hard);
    Tensor x = oracle::random_tensor({5, 3}, rng);
    auto d = route(r, x, 2);
    for (std::size_t t = 0; t < 5; ++t) {
        for (std::size_t e = 0; e < 4; ++e) CHECK(d.weights.at(t, e) == (e == 2 ? 1.0 : 0.0));
        CHECK(d.selected[t] == std::vector<std::size_t>{2});
    }
    CHECK_THROWS_AS(route(r, x), RoutingError);
    CHECK_THROWS_AS(route(r, x, 4), IndexError);
    CHECK_THROWS_AS(route(r, x, -1), IndexError);
}

TEST_CASE("top-k masks the literal probabilities") {
    Router r = fixed_router({0.5, 0.3, 0.2}, RoutingMode::topk, 2);
    auto d = route(r, Tensor({1, 1}, {1.0}));
    CHECK(d.weights[0] == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(d.weights[1] == doctest::Approx(0.3).epsilon(1e-14));
    CHECK(d.weights[2] == 0.0);

    Router rn = fixed_router({0.5, 0.3, 0.2}, RoutingMode::topk, 2, true);
    auto dn = route(rn, Tensor({1, 1}, {1.0}));
    CHECK(dn.weights[0] == doctest::Approx(0.625));
    CHECK(dn.weights[1] == doctest::Approx(0.375));
}

TEST_CASE("top-k agrees with an exhaustive search over masks") {
    std::mt19937_64 rng(2);
    const std::size_t E = 5, K = 3;
    for (int trial = 0; trial < 200; ++trial) {
        Router r = router_with(oracle::random_tensor({E, 4}, rng), RoutingMode::topk, K);
        Tensor x = oracle::random_tensor({1, 4}, rng);
        auto d = route(r, x);
        auto p = d.probs.values();
        // The admissible mask keeps the K entries with the largest total probability.
        double best = -1.0;
        unsigned best_mask = 0;
        for (unsigned mask = 0; mask < (1u << E); ++mask) {
            if (static_cast<std::size_t>(__builtin_popcount(mask)) != K) continue;
            double mass = 0.0;
            for (std::size_t e = 0; e < E; ++e)
                if (mask & (1u << e)) mass += p[e];
            if (mass > best) {
                best = mass;
                best_mask = mask;
            }
        }
        for (std::size_t e = 0; e < E; ++e) CHECK(d.weights[e] == ((best_mask & (1u << e)) ? p[e] : 0.0));
    }
}

TEST_CASE("soft routing uses every expert") {
    std::mt19937_64 rng(3);
    Router r = router_with(oracle::random_tensor({3, 2}, rng), RoutingMode::soft);
    auto d = route(r, oracle::random_tensor({4, 2}, rng));
    for (std::size_t i = 0; i < d.weights.numel(); ++i) CHECK(d.weights[i] == d.probs[i]);
    CHECK(d.selected[0].size() == 3);
}

TEST_CASE("router input shape is checked") {
    Router r = router_with(Tensor::zeros({3, 2}), RoutingMode::soft);
    CHECK_THROWS_AS(route(r, Tensor::zeros({4, 5})), DimensionError);
}

TEST_CASE("entropy values") {
    std::vector<double> uniform(4, 0.25);
    CHECK(entropy(uniform) == doctest::Approx(1.386294).epsilon(1e-6));
    std::vector<double> one_hot{0.0, 1.0, 0.0};
    CHECK(entropy(one_hot) == 0.0);
    std::vector<double> p{0.7, 0.2, 0.1};
    std::vector<long double> pl{0.7L, 0.2L, 0.1L};
    CHECK(std::fabs(entropy(p) - static_cast<double>(oracle::entropy(pl))) < 1e-15);
    std::vector<double> not_simplex{0.5, 0.6};
    CHECK_THROWS_AS(entropy(not_simplex), DomainError);
    std::vector<double> negative{1.2, -0.2};
    CHECK_THROWS_AS(entropy(negative), DomainError);
}

TEST_CASE("entropy gradient") {
    std::vector<double> half{0.5, 0.5};
    auto g = entropy_grad_unconstrained(half);
    CHECK(g[0] == doctest::Approx(-0.306853).epsilon(1e-6));
    CHECK(g[1] == doctest::Approx(-0.306853).epsilon(1e-6));
    std::vector<double> at_root{std::exp(-1.0), 1.0 - std::exp(-1.0)};
    CHECK(std::fabs(entropy_grad_unconstrained(at_root)[0]) < 1e-15);
    std::vector<double> with_zero{1.0, 0.0};
    CHECK_THROWS_AS(entropy_grad_unconstrained(with_zero), DomainError);
}

TEST_CASE("argmax ties go to the lowest index") {
    std::vector<double> tie{0.5, 0.5};
    CHECK(argmax_tiebreak(tie) == 0);
    std::vector<double> second{0.1, 0.9};
    CHECK(argmax_tiebreak(second) == 1);
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0.0, 0.5);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> row(7);
        for (auto &v : row) v = u(rng);
        std::size_t a = rng() % 7, b = rng() % 7;
        row[a] = row[b] = 0.9;
        CHECK(argmax_tiebreak(row) == std::min(a, b));
    }
}

TEST_CASE("batch statistics") {
    SUBCASE("identical tokens have zero variance") {
        Router r = fixed_router({0.6, 0.3, 0.1}, RoutingMode::soft, 3);
        auto s = batch_stats(route(r, Tensor({5, 1}, {1, 1, 1, 1, 1})));
        CHECK(s.p_bar[0] == doctest::Approx(0.6));
        CHECK(s.routing_variance == doctest::Approx(0.0));
    }
    SUBCASE("top1 counting") {
        RoutingDistribution d;
        d.probs = Tensor({2, 2}, {0.8, 0.2, 0.3, 0.7});
        d.logits = d.probs;
        d.weights = d.probs;
        auto s = batch_stats(d, AssignmentMode::top1);
        CHECK(s.f_bar == std::vector<double>{0.5, 0.5});
    }
    SUBCASE("naive loop oracle") {
        std::mt19937_64 rng(5);
        for (auto mode : {AssignmentMode::top1, AssignmentMode::topk}) {
            Router r = router_with(oracle::random_tensor({4, 3}, rng), RoutingMode::topk, 2);
            Tensor x = oracle::random_tensor({9, 3}, rng, 2.0);
            auto d = route(r, x);
            auto s = batch_stats(d, mode);
            const std::size_t n = 9, E = 4;
            std::vector<long double> pbar(E, 0), fbar(E, 0);
            long double ent = 0;
            for (std::size_t t = 0; t < n; ++t) {
                std::vector<std::pair<double, std::size_t>> row;
                for (std::size_t e = 0; e < E; ++e) {
                    pbar[e] += d.probs.at(t, e) / n;
                    row.push_back({-d.probs.at(t, e), e});
                    if (d.probs.at(t, e) > 0) ent -= d.probs.at(t, e) * std::log((long double)d.probs.at(t, e)) / n;
                }
                std::sort(row.begin(), row.end());
                const std::size_t k = mode == AssignmentMode::top1 ? 1 : 2;
                for (std::size_t j = 0; j < k; ++j) fbar[row[j].second] += 1.0L / (n * k);
            }
            long double var = 0;
            for (std::size_t t = 0; t < n; ++t)
                for (std::size_t e = 0; e < E; ++e) var += (d.probs.at(t, e) - pbar[e]) * (d.probs.at(t, e) - pbar[e]) / n;
            for (std::size_t e = 0; e < E; ++e) {
                CHECK(std::fabs(s.p_bar[e] - static_cast<double>(pbar[e])) < 1e-12);
                CHECK(std::fabs(s.f_bar[e] - static_cast<double>(fbar[e])) < 1e-12);
            }
            CHECK(std::fabs(s.mean_entropy - static_cast<double>(ent)) < 1e-12);
            CHECK(std::fabs(s.routing_variance - static_cast<double>(var)) < 1e-12);
            validate_stats(s);
        }
    }
    SUBCASE("empty batch") {
        RoutingDistribution d;
        d.probs = Tensor::zeros({0, 3});
        CHECK_THROWS_AS(batch_stats(d), StatisticsError);
    }
}

TEST_CASE("merged shards equal the whole batch") {
    std::mt19937_64 rng(6);
    Router r = router_with(oracle::random_tensor({3, 2}, rng), RoutingMode::soft);
    Tensor x = oracle::random_tensor({10, 2}, rng, 2.0);
    auto whole = batch_stats(route(r, x));
    std::vector<std::size_t> first(4), second(6);
    std::iota(first.begin(), first.end(), 0);
    std::iota(second.begin(), second.end(), 4);
    std::vector<RoutingBatchStats> parts{batch_stats(route(r, gather_rows(x, first))),
                                         batch_stats(route(r, gather_rows(x, second)))};
    auto merged = merge_stats(parts);
    CHECK(merged.token_count == 10);
    for (std::size_t e = 0; e < 3; ++e) {
        CHECK(merged.p_bar[e] == doctest::Approx(whole.p_bar[e]).epsilon(1e-12));
        CHECK(merged.f_bar[e] == doctest::Approx(whole.f_bar[e]).epsilon(1e-12));
    }
    CHECK(merged.mean_entropy == doctest::Approx(whole.mean_entropy).epsilon(1e-12));
    CHECK(merged.routing_variance == doctest::Approx(whole.routing_variance).epsilon(1e-12));
}

TEST_CASE("router config validation") {
    RouterConfig c;
    c.num_experts = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.num_experts = 4;
    c.top_k = 5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.top_k = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK(parse_routing_mode("topk") == RoutingMode::topk);
    CHECK_THROWS_AS(parse_routing_mode("dense"), ConfigError);
}
