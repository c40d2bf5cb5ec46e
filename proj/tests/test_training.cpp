#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "loramix/config.hpp"
#include "loramix/errors.hpp"
#include "loramix/optimizer.hpp"
#include "loramix/training.hpp"

using namespace loramix;

namespace {

struct Fixture {
    DatasetSplits data = generate_dataset(default_domain_specs(1), 100, 1);
    ToyModel model{ToyModelConfig{}, 2};
    std::vector<std::shared_ptr<MixerLayer>> mixers;

    explicit Fixture(std::size_t E = 4) {
        std::mt19937_64 rng(6);
        std::normal_distribution<double> n(0.0, 1.0);
        for (auto &v : model.head_w.mutable_values()) v = n(rng);
        LoraConfig lc;
        lc.target_projection_names = {"q|v"};
        mixers = attach_mixers(model, lc, E, RouterConfig{}, 3);
    }
};

std::vector<double> copy_of(const Tensor &t) { return {t.values().begin(), t.values().end()}; }

bool same(const Tensor &t, const std::vector<double> &v) {
    auto a = t.values();
    for (std::size_t i = 0; i < v.size(); ++i)
        if (a[i] != v[i]) return false;
    return true;
}

PhaseConfig short_phase(Phase p, std::size_t steps) {
    PhaseConfig c = p == Phase::expert_phase ? PhaseConfig::expert_defaults() : PhaseConfig::router_defaults();
    c.steps = steps;
    c.batch_size = 8;
    c.learning_rate = 1e-2;
    return c;
}

}  // namespace

TEST_CASE("AdamW matches a hand-written update") {
    AdamWConfig cfg;
    cfg.learning_rate = 0.1;
    cfg.weight_decay = 0.01;
    cfg.clip_norm = 1.0;
    Tensor p({2}, {1.0, -2.0}, true);
    Tensor frozen({1}, {3.0});
    AdamW opt({p, frozen}, cfg);
    const std::vector<std::vector<double>> grads{{3.0, 4.0}, {0.2, -0.1}, {-0.3, 0.05}};
    std::vector<double> w{1.0, -2.0}, m(2, 0.0), v(2, 0.0);
    for (std::size_t t = 1; t <= grads.size(); ++t) {
        const auto &g = grads[t - 1];
        opt.zero_grad();
        backward(sum(mul(p, Tensor({2}, g))));
        const double norm = std::hypot(g[0], g[1]);
        CHECK(opt.step() == doctest::Approx(norm).epsilon(1e-14));
        const double c = norm > 1.0 ? 1.0 / (norm + 1e-6) : 1.0;
        for (int j = 0; j < 2; ++j) {
            const double gj = g[j] * c;
            m[j] = 0.9 * m[j] + 0.1 * gj;
            v[j] = 0.999 * v[j] + 0.001 * gj * gj;
            const double mh = m[j] / (1 - std::pow(0.9, t)), vh = v[j] / (1 - std::pow(0.999, t));
            w[j] = w[j] * (1 - 0.1 * 0.01) - 0.1 * mh / (std::sqrt(vh) + 1e-8);
            CHECK(p[j] == doctest::Approx(w[j]).epsilon(1e-13));
        }
    }
    CHECK(frozen[0] == 3.0);
    CHECK(opt.steps_taken(0) == 3);
    CHECK(opt.steps_taken(1) == 0);
    CHECK(opt.effective_step(1)[0] == 0.1);
}

TEST_CASE("AdamW rejects bad settings") {
    AdamWConfig c;
    c.learning_rate = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.learning_rate = 1e-3;
    c.beta2 = 1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("expert phase moves only the domain's expert") {
    Fixture f;
    std::vector<std::vector<std::vector<double>>> before;
    for (auto &m : f.mixers) {
        before.emplace_back();
        for (auto &e : m->experts) before.back().push_back(copy_of(e.B));
    }
    auto router_before = copy_of(f.mixers[0]->router->gate_weight);
    auto W_before = copy_of(f.mixers[0]->base.W);
    MixedStream stream(f.data.train, {0.0, 0.0, 1.0, 0.0}, 4);
    auto result = train_experts(f.model, stream, short_phase(Phase::expert_phase, 5));
    CHECK(result.records.size() == 5);
    for (std::size_t l = 0; l < f.mixers.size(); ++l)
        for (std::size_t e = 0; e < 4; ++e)
            CHECK(same(f.mixers[l]->experts[e].B, before[l][e]) == (e != 2));
    CHECK(same(f.mixers[0]->router->gate_weight, router_before));
    CHECK(same(f.mixers[0]->base.W, W_before));
}

TEST_CASE("zero steps leave the model unchanged") {
    Fixture f;
    auto A = copy_of(f.mixers[1]->experts[0].A);
    MixedStream stream(f.data.train, uniform_proportions(4), 1);
    auto result = train_experts(f.model, stream, short_phase(Phase::expert_phase, 0));
    CHECK(result.records.empty());
    CHECK(same(f.mixers[1]->experts[0].A, A));
}

TEST_CASE("a domain without an expert is a routing error") {
    Fixture f(2);
    MixedStream stream(f.data.train, {0.0, 0.0, 0.0, 1.0}, 1);
    CHECK_THROWS_AS(train_experts(f.model, stream, short_phase(Phase::expert_phase, 2)), RoutingError);
}

TEST_CASE("router phase") {
    Fixture f;
    MixedStream stream(f.data.train, uniform_proportions(4), 2);
    auto cfg = short_phase(Phase::router_phase, 4);
    CHECK_THROWS_AS(train_router(f.model, stream, cfg, nullptr), AnchorError);

    auto anchor = make_anchor(f.mixers);
    auto B = copy_of(f.mixers[0]->experts[1].B);
    auto A = copy_of(f.mixers[1]->experts[3].A);
    auto gate = copy_of(f.mixers[0]->router->gate_weight);
    auto result = train_router(f.model, stream, cfg, &anchor);
    CHECK(result.records.size() == 4);
    CHECK(same(f.mixers[0]->experts[1].B, B));
    CHECK(same(f.mixers[1]->experts[3].A, A));
    CHECK_FALSE(same(f.mixers[0]->router->gate_weight, gate));
    CHECK(anchor_drift_squared(f.mixers, anchor) == 0.0);

    auto bad = cfg;
    bad.trainable_set = TrainableSet::experts_only;
    CHECK_THROWS_AS(train_router(f.model, stream, bad, &anchor), ConfigError);
}

TEST_CASE("objective terms") {
    Fixture f;
    auto samples = MixedStream(f.data.train, uniform_proportions(4), 3).draw(8);
    Batch batch = make_batch(samples);
    ObjectiveOptions o;
    o.weights.alpha = 0.0;
    o.weights.lambda = 0.0;
    auto obj = compute_objective(f.model, batch, o);
    CHECK(obj.report.rsl == 0.0);
    CHECK(obj.report.aux == 0.0);
    CHECK(obj.report.total == doctest::Approx(obj.report.task).epsilon(1e-14));

    ObjectiveOptions w;
    auto full = compute_objective(f.model, batch, w);
    CHECK(full.report.layer_stats.size() == f.mixers.size());
    CHECK(std::fabs(full.report.recomputed_total(w.weights) - full.report.total) < 1e-12);
    CHECK(full.total.item() == doctest::Approx(full.report.total).epsilon(1e-12));
}

TEST_CASE("evaluation") {
    Fixture f;
    // Same seed, no mixers.
    ToyModel plain(ToyModelConfig{}, 2);
    plain.head_w = f.model.head_w;
    auto wrapped = evaluate(f.model, f.data.test);
    auto reference = evaluate(plain, f.data.test);
    CHECK(wrapped.pooled == reference.pooled);
    CHECK(wrapped.samples == f.data.test.size());

    EvalOptions soft;
    soft.mode = RoutingMode::soft;
    EvalOptions all_k;
    all_k.mode = RoutingMode::topk;
    all_k.top_k = 4;
    CHECK(evaluate(f.model, f.data.test, soft).to_json() == evaluate(f.model, f.data.test, all_k).to_json());

    EvalOptions too_many = all_k;
    too_many.top_k = 5;
    CHECK_THROWS_AS(evaluate(f.model, f.data.test, too_many), ConfigError);
    CHECK_THROWS_AS(evaluate(f.model, {}), EvaluationError);
}

TEST_CASE("checkpoint round trip") {
    Fixture f;
    MixedStream stream(f.data.train, uniform_proportions(4), 5);
    train_experts(f.model, stream, short_phase(Phase::expert_phase, 3));
    auto dir = std::filesystem::temp_directory_path() / "loramix_test_ckpt";
    std::filesystem::remove_all(dir);
    save_checkpoint(f.model, dir, {{"stage", "experts"}});
    nlohmann::json extra;
    ToyModel back = load_checkpoint(dir, &extra);
    CHECK(extra["stage"] == "experts");
    Batch batch = make_batch(f.data.val);
    ForwardContext ctx;
    ctx.sample_domains = batch.domains;
    Tensor a = f.model.forward(batch, ctx), b = back.forward(batch, ctx);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
    std::filesystem::remove(dir / "manifest.json");
    CHECK_THROWS_AS(load_checkpoint(dir), IOError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("pipeline config json") {
    PipelineConfig c;
    c.apply_seed(9);
    c.phase2.trainable_set = TrainableSet::router_plus_constrained_experts;
    c.phase2.constrained_experts = {1, 3};
    nlohmann::json j = c;
    PipelineConfig back = j.get<PipelineConfig>();
    CHECK(nlohmann::json(back) == j);
    CHECK(back.phase1.seed == c.phase1.seed);

    nlohmann::json bad = j;
    bad["phase1"]["learning_rat"] = 0.1;
    CHECK_THROWS_AS(bad.get<PipelineConfig>(), ConfigError);
    nlohmann::json extra = j;
    extra["colour"] = "blue";
    CHECK_THROWS_AS(extra.get<PipelineConfig>(), ConfigError);
    CHECK_THROWS_AS(parse_trainable_set("everything"), ConfigError);
}
