#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "loramix/errors.hpp"
#include "loramix/losses.hpp"
#include "oracles.hpp"

using namespace loramix;

namespace {

RoutingBatchStats uniform_stats(std::size_t E) {
    RoutingBatchStats s;
    s.p_bar.assign(E, 1.0 / static_cast<double>(E));
    s.f_bar.assign(E, 1.0 / static_cast<double>(E));
    s.mean_entropy = std::log(static_cast<double>(E));
    s.token_count = 8;
    return s;
}

std::vector<std::shared_ptr<MixerLayer>> two_expert_layer(std::mt19937_64 &rng) {
    auto layer = std::make_shared<MixerLayer>();
    layer->base.name = "blk0.attn.v";
    layer->base.W = oracle::random_tensor({3, 4}, rng);
    for (int e = 0; e < 2; ++e) {
        LoraExpert ex;
        ex.A = oracle::random_tensor({2, 4}, rng, 1.0, true);
        ex.B = oracle::random_tensor({3, 2}, rng, 1.0, true);
        ex.rank = 2;
        ex.lora_alpha = 4.0;
        ex.expert_id = e;
        layer->experts.push_back(ex);
    }
    return {layer};
}

}  // namespace

TEST_CASE("aux loss values") {
    CHECK(aux_loss(uniform_stats(4), 1.0).item() == doctest::Approx(0.25).epsilon(1e-15));
    auto s = uniform_stats(3);
    s.p_bar = {0.2, 0.5, 0.3};
    s.f_bar = {0.0, 1.0, 0.0};
    CHECK(aux_loss(s, 0.7).item() == doctest::Approx(0.7 * 0.5));
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 20; ++trial) {
        RoutingBatchStats r;
        long double ref = 0;
        for (int e = 0; e < 5; ++e) {
            r.p_bar.push_back(u(rng));
            r.f_bar.push_back(u(rng));
            ref += static_cast<long double>(r.p_bar.back()) * r.f_bar.back();
        }
        CHECK(std::fabs(aux_loss(r, 0.3).item() - static_cast<double>(0.3L * ref)) < 1e-12);
    }
    RoutingBatchStats bad;
    CHECK_THROWS_AS(aux_loss(bad, 1.0), StatisticsError);
}

TEST_CASE("rsl loss values") {
    LossWeights w;
    w.alpha = 1.0;
    w.lambda = 0.01;
    CHECK(rsl_loss(uniform_stats(4), w).item() == doctest::Approx(0.236137).epsilon(1e-6));
    w.lambda = 0.0;
    CHECK(rsl_loss(uniform_stats(4), w).item() == aux_loss(uniform_stats(4), 1.0).item());
    auto s = uniform_stats(2);
    s.p_bar = {0.5, 0.5};
    s.f_bar = {0.5, 0.5};
    s.mean_entropy = 0.0;
    w.lambda = 0.3;
    CHECK(rsl_loss(s, w).item() == aux_loss(s, 1.0).item());
}

TEST_CASE("rsl gradient on probabilities") {
    // d/dP of alpha * <mean_rows(P), f> - lambda * mean(H(P)) = alpha f / n + lambda (log p + 1) / n
    std::mt19937_64 rng(2);
    const std::size_t n = 5, E = 3;
    Tensor logits = oracle::random_tensor({n, E}, rng);
    Tensor P = softmax(logits).detach();
    P.set_requires_grad(true);
    RoutingDistribution d;
    d.logits = logits;
    d.probs = P;
    d.weights = P;
    auto stats = batch_stats(d);
    LossWeights w;
    w.alpha = 0.4;
    w.lambda = 0.2;
    backward(rsl_loss(stats, w));
    for (std::size_t t = 0; t < n; ++t)
        for (std::size_t e = 0; e < E; ++e) {
            const double expect = (w.alpha * stats.f_bar[e] + w.lambda * (std::log(P.at(t, e)) + 1.0)) / n;
            CHECK(P.grad()[t * E + e] == doctest::Approx(expect).epsilon(1e-12));
        }
}

TEST_CASE("preservation loss") {
    std::mt19937_64 rng(3);
    auto layers = two_expert_layer(rng);
    auto anchor = make_anchor(layers);
    CHECK(preservation_loss(layers, anchor, 0.5).item() == 0.0);

    auto moved = layers[0]->experts[1].A.mutable_values();
    moved[3] += 2.0;
    CHECK(preservation_loss(layers, anchor, 0.5).item() == doctest::Approx(2.0).epsilon(1e-12));

    std::normal_distribution<double> n(0.0, 0.3);
    for (auto &e : layers[0]->experts) {
        for (auto &v : e.A.mutable_values()) v += n(rng);
        for (auto &v : e.B.mutable_values()) v += n(rng);
    }
    long double ref = 0;
    for (const auto &e : layers[0]->experts) {
        const auto &snap = anchor.anchored.at({"blk0.attn.v", e.expert_id});
        for (std::size_t i = 0; i < e.A.numel(); ++i) ref += (e.A[i] - snap.A[i]) * (e.A[i] - snap.A[i]);
        for (std::size_t i = 0; i < e.B.numel(); ++i) ref += (e.B[i] - snap.B[i]) * (e.B[i] - snap.B[i]);
    }
    CHECK(std::fabs(preservation_loss(layers, anchor, 0.1).item() - static_cast<double>(0.1L * ref)) < 1e-12);
    CHECK(std::fabs(anchor_drift_squared(layers, anchor) - static_cast<double>(ref)) < 1e-12);
}

TEST_CASE("preservation grows with any single deviation") {
    std::mt19937_64 rng(4);
    auto layers = two_expert_layer(rng);
    auto anchor = make_anchor(layers);
    auto B = layers[0]->experts[0].B.mutable_values();
    double previous = 0.0;
    for (double delta : {0.1, 0.2, 0.5, 1.0}) {
        B[1] = anchor.anchored.at({"blk0.attn.v", 0}).B[1] - delta;
        const double v = preservation_loss(layers, anchor, 0.2).item();
        CHECK(v > previous);
        previous = v;
    }
}

TEST_CASE("constrained subset") {
    std::mt19937_64 rng(5);
    auto layers = two_expert_layer(rng);
    std::set<ExpertKey> only_one{{"blk0.attn.v", 1}};
    auto anchor = make_anchor(layers, &only_one);
    layers[0]->experts[0].A.mutable_values()[0] += 10.0;
    CHECK(preservation_loss(layers, anchor, 1.0).item() == 0.0);
    layers[0]->experts[1].A.mutable_values()[0] += 1.0;
    CHECK(preservation_loss(layers, anchor, 1.0).item() == doctest::Approx(1.0));

    PreservationAnchor broken = anchor;
    broken.anchored.clear();
    CHECK_THROWS_AS(broken.validate(), AnchorError);
}

TEST_CASE("task loss and total") {
    std::vector<int> labels{0, 1, 3, 2};
    CHECK(task_loss(Tensor::zeros({4, 4}), labels).item() == doctest::Approx(std::log(4.0)));
    LossWeights w;
    CHECK(total_loss(0, 0, 0, w) == 0.0);
    CHECK(total_loss(1.0, 0.2, 0.05, w) == doctest::Approx(1.25));
    w.outer_rsl_weight = 0.5;
    CHECK(total_loss(1.0, 0.2, 0.05, w) == doctest::Approx(1.15));
    CHECK_THROWS_AS(total_loss(std::nan(""), 0, 0, w), PropagationError);
    CHECK_THROWS_AS(total_loss(0, std::numeric_limits<double>::infinity(), 0, w), PropagationError);
    LossReport rep{0.7, 0.1, 0.05, 0.02, 0.0, {}};
    rep.total = total_loss(rep.task, rep.rsl, rep.preserve, w);
    CHECK(std::fabs(rep.recomputed_total(w) - rep.total) < 1e-12);
}

TEST_CASE("loss weight validation") {
    LossWeights w;
    CHECK(w.alpha == 0.01);
    CHECK(w.lambda == 0.001);
    CHECK(w.beta == 0.1);
    w.beta = -1;
    CHECK_THROWS_AS(w.validate(), ConfigError);
}
