#include "loramix/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

#include "loramix/adapters.hpp"
#include "loramix/errors.hpp"
#include "loramix/grad_check.hpp"
#include "loramix/pipeline.hpp"
#include "loramix/rng.hpp"
#include "loramix/training.hpp"

namespace loramix {

namespace fs = std::filesystem;

std::string CheckResult::line() const {
    std::ostringstream os;
    os << id << ' ' << (passed ? "PASS" : "FAIL") << (informational ? " (informational)" : "") << "  " << title;
    if (!detail.empty()) os << "  [" << detail << "]";
    os << "  " << std::fixed << std::setprecision(1) << seconds << "s";
    return os.str();
}

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 4) {
    std::ostringstream os;
    os << std::setprecision(prec) << v;
    return os.str();
}

Tensor randn(Shape shape, std::mt19937_64 &rng, double sd = 1.0, bool requires_grad = true) {
    std::normal_distribution<double> n(0.0, sd);
    std::vector<double> v(shape_numel(shape));
    for (auto &x : v) x = n(rng);
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor randu(Shape shape, std::mt19937_64 &rng, double lo, double hi) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (auto &x : v) x = u(rng);
    return Tensor(std::move(shape), std::move(v), true);
}

void fill_normal(Tensor &t, std::mt19937_64 &rng, double sd) {
    std::normal_distribution<double> n(0.0, sd);
    for (auto &x : t.mutable_values()) x = n(rng);
}

// ---------------------------------------------------------------------------
// Gradient cases

struct GradCase {
    std::vector<Tensor> inputs;
    ScalarFunction f;
};

using CaseMaker = std::function<GradCase(std::mt19937_64 &)>;

/// Reduces an op's output to a scalar through a fixed random projection.
ScalarFunction projected(std::function<Tensor(const std::vector<Tensor> &)> op, std::uint64_t seed) {
    auto weights = std::make_shared<Tensor>();
    return [op, weights, seed](const std::vector<Tensor> &in) {
        Tensor out = op(in);
        if (out.numel() == 1) return reshape(out, {1});
        if (!weights->defined()) {
            std::mt19937_64 rng(seed);
            *weights = randn({out.numel()}, rng, 1.0, false);
        }
        return dot(reshape(out, {out.numel()}), *weights);
    };
}

std::vector<std::pair<std::string, CaseMaker>> op_cases() {
    std::vector<std::pair<std::string, CaseMaker>> cases;
    auto simple = [&](std::string name, std::function<std::vector<Tensor>(std::mt19937_64 &)> make,
                      std::function<Tensor(const std::vector<Tensor> &)> op) {
        cases.emplace_back(std::move(name), [make, op](std::mt19937_64 &rng) {
            GradCase c;
            c.inputs = make(rng);
            c.f = projected(op, rng());
            return c;
        });
    };
    auto mats = [](std::vector<Shape> shapes) {
        return [shapes](std::mt19937_64 &rng) {
            std::vector<Tensor> out;
            for (const auto &s : shapes) out.push_back(randn(s, rng));
            return out;
        };
    };
    simple("matmul", mats({{3, 4}, {4, 2}}), [](auto &in) { return matmul(in[0], in[1]); });
    simple("linear", mats({{3, 4}, {2, 4}}), [](auto &in) { return linear(in[0], in[1]); });
    simple("linear+bias", mats({{3, 4}, {2, 4}, {2}}), [](auto &in) { return linear(in[0], in[1], in[2]); });
    simple("add", mats({{3, 4}, {3, 4}}), [](auto &in) { return add(in[0], in[1]); });
    simple("sub", mats({{3, 4}, {3, 4}}), [](auto &in) { return sub(in[0], in[1]); });
    simple("mul", mats({{3, 4}, {3, 4}}), [](auto &in) { return mul(in[0], in[1]); });
    simple("scale", mats({{3, 4}}), [](auto &in) { return scale(in[0], -1.7); });
    simple("reshape", mats({{3, 4}}), [](auto &in) { return mul(reshape(in[0], {2, 6}), reshape(in[0], {2, 6})); });
    simple("sum", mats({{3, 4}}), [](auto &in) { return sum(mul(in[0], in[0])); });
    simple("mean", mats({{3, 4}}), [](auto &in) { return mean(mul(in[0], in[0])); });
    simple("dot", mats({{5}, {5}}), [](auto &in) { return dot(in[0], in[1]); });
    simple("mean_rows", mats({{3, 4}}), [](auto &in) { return mean_rows(in[0]); });
    simple("relu", mats({{3, 4}}), [](auto &in) { return relu(in[0]); });
    simple("softmax", mats({{3, 4}}), [](auto &in) { return softmax(in[0]); });
    simple("layer_norm", mats({{3, 5}}), [](auto &in) { return layer_norm(in[0]); });
    simple(
        "row_entropy", [](std::mt19937_64 &rng) { return std::vector<Tensor>{randu({3, 4}, rng, 0.05, 1.0)}; },
        [](auto &in) { return row_entropy(in[0]); });
    simple(
        "normalize_rows", [](std::mt19937_64 &rng) { return std::vector<Tensor>{randu({3, 4}, rng, 0.1, 1.0)}; },
        [](auto &in) { return normalize_rows(in[0]); });
    simple("cross_entropy", mats({{4, 3}}), [](auto &in) {
        static const std::vector<int> labels{2, 0, 1, 2};
        return cross_entropy(in[0], labels);
    });
    simple("gather_rows", mats({{4, 3}}), [](auto &in) {
        static const std::vector<std::size_t> rows{2, 0, 2};
        return gather_rows(in[0], rows);
    });
    simple("scatter_rows", mats({{2, 3}}), [](auto &in) {
        static const std::vector<std::size_t> rows{3, 1};
        return scatter_rows(in[0], rows, 4);
    });
    simple("column", mats({{3, 4}}), [](auto &in) { return column(in[0], 2); });
    simple("scale_rows", mats({{3, 4}, {3}}), [](auto &in) { return scale_rows(in[0], in[1]); });
    simple("embedding", mats({{5, 3}}), [](auto &in) {
        static const std::vector<int> ids{4, 0, 4, 2};
        return embedding(in[0], ids);
    });
    simple("dropout", mats({{3, 4}}), [](auto &in) {
        std::mt19937_64 rng(7);
        return dropout(in[0], 0.3, rng);
    });
    simple("attention", mats({{6, 4}, {6, 4}, {6, 4}}),
           [](auto &in) { return multi_head_attention(in[0], in[1], in[2], 2, 3, 2); });
    simple("expert_forward", mats({{5, 4}, {2, 4}, {3, 2}}), [](auto &in) {
        LoraExpert e;
        e.A = in[1];
        e.B = in[2];
        e.rank = 2;
        e.lora_alpha = 4.0;
        e.dropout_p = 0.2;
        std::mt19937_64 rng(11);
        return expert_forward(e, in[0], true, &rng);
    });
    for (RoutingMode mode : {RoutingMode::soft, RoutingMode::topk}) {
        cases.emplace_back("mixer_" + to_string(mode), [mode](std::mt19937_64 &rng) {
            auto layer = std::make_shared<MixerLayer>();
            layer->base.name = "blk0.attn.q";
            layer->base.W = randn({3, 4}, rng, 1.0, false);
            layer->base.bias = randn({3}, rng, 1.0, false);
            GradCase c;
            c.inputs.push_back(randn({5, 4}, rng));
            for (int e = 0; e < 3; ++e) {
                LoraExpert ex;
                ex.A = randn({2, 4}, rng);
                ex.B = randn({3, 2}, rng);
                ex.rank = 2;
                ex.lora_alpha = 3.0;
                ex.expert_id = e;
                c.inputs.push_back(ex.A);
                c.inputs.push_back(ex.B);
                layer->experts.push_back(ex);
            }
            layer->router = std::make_shared<Router>();
            layer->router->gate_weight = randn({3, 4}, rng);
            layer->router->num_experts = 3;
            layer->router->top_k = 2;
            layer->router->mode = mode;
            c.inputs.push_back(layer->router->gate_weight);
            c.f = projected(
                [layer](const std::vector<Tensor> &in) {
                    return mixer_forward(*layer, in[0], std::span<const int>{}, false).y;
                },
                rng());
            return c;
        });
    }
    for (AssignmentMode assignment : {AssignmentMode::top1, AssignmentMode::topk}) {
        cases.emplace_back("rsl_loss_" + to_string(assignment), [assignment](std::mt19937_64 &rng) {
            GradCase c;
            c.inputs.push_back(randn({6, 3}, rng));
            c.f = [assignment](const std::vector<Tensor> &in) {
                RoutingDistribution d;
                d.logits = in[0];
                d.probs = softmax(in[0]);
                d.weights = d.probs;
                d.mode = RoutingMode::topk;
                d.top_k = 2;
                for (std::size_t t = 0; t < 6; ++t) d.selected.push_back(top_k_indices(d.probs.values().subspan(t * 3, 3), 2));
                LossWeights w;
                w.alpha = 0.5;
                w.lambda = 0.2;
                return rsl_loss(batch_stats(d, assignment), w);
            };
            return c;
        });
    }
    cases.emplace_back("preservation_loss", [](std::mt19937_64 &rng) {
        auto layer = std::make_shared<MixerLayer>();
        layer->base.name = "blk0.ffn.up";
        layer->base.W = randn({3, 4}, rng, 1.0, false);
        GradCase c;
        for (int e = 0; e < 2; ++e) {
            LoraExpert ex;
            ex.A = randn({2, 4}, rng);
            ex.B = randn({3, 2}, rng);
            ex.rank = 2;
            ex.lora_alpha = 2.0;
            ex.expert_id = e;
            layer->experts.push_back(ex);
        }
        std::vector<std::shared_ptr<MixerLayer>> layers{layer};
        auto anchor = std::make_shared<PreservationAnchor>(make_anchor(layers));
        for (auto &ex : layer->experts) {
            Tensor da = randn(ex.A.shape(), rng, 0.3, false);
            Tensor db = randn(ex.B.shape(), rng, 0.3, false);
            for (std::size_t i = 0; i < ex.A.numel(); ++i) ex.A.mutable_values()[i] += da[i];
            for (std::size_t i = 0; i < ex.B.numel(); ++i) ex.B.mutable_values()[i] += db[i];
            c.inputs.push_back(ex.A);
            c.inputs.push_back(ex.B);
        }
        c.f = [layers, anchor](const std::vector<Tensor> &) { return preservation_loss(layers, *anchor, 0.3); };
        return c;
    });
    return cases;
}

/// The full objective on a reduced model: soft or top-k routing, dropout,
/// RSL and the preservation penalty all in the graph.
GradCase objective_case(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ToyModelConfig mc;
    mc.vocab = 16;
    mc.seq_len = 4;
    mc.d_model = 8;
    mc.heads = 2;
    mc.d_ff = 16;
    mc.blocks = 1;
    auto model = std::make_shared<ToyModel>(mc, derive_seed(seed, {1}));
    fill_normal(model->head_w, rng, 0.5);
    fill_normal(model->head_b, rng, 0.5);
    LoraConfig lc;
    lc.r = 2;
    lc.lora_alpha = 4.0;
    lc.dropout_p = 0.1;
    lc.target_projection_names = {"q", "k", "v", "o", "up", "down"};
    RouterConfig rc;
    rc.num_experts = 3;
    rc.top_k = 2;
    rc.mode = seed % 2 == 0 ? RoutingMode::soft : RoutingMode::topk;
    auto mixers = attach_mixers(*model, lc, 3, rc, derive_seed(seed, {2}));
    GradCase c;
    for (auto &m : mixers) {
        for (auto &e : m->experts) fill_normal(e.B, rng, 0.2);
    }
    auto anchor = std::make_shared<PreservationAnchor>(make_anchor(mixers));
    for (auto &m : mixers) {
        for (auto &e : m->experts) {
            for (auto &v : e.A.mutable_values()) v += std::normal_distribution<double>(0.0, 0.05)(rng);
            for (auto &v : e.B.mutable_values()) v += std::normal_distribution<double>(0.0, 0.05)(rng);
            c.inputs.push_back(e.A);
            c.inputs.push_back(e.B);
        }
    }
    for (auto &r : unique_routers(*model)) {
        fill_normal(r->gate_weight, rng, 0.5);
        r->gate_weight.set_requires_grad(true);
        c.inputs.push_back(r->gate_weight);
    }
    auto specs = default_domain_specs(seed, mc.vocab, mc.seq_len);
    std::vector<LabeledSample> samples;
    for (int i = 0; i < 6; ++i) {
        const auto &spec = specs[static_cast<std::size_t>(i) % specs.size()];
        LabeledSample s;
        s.domain_id = spec.domain_id;
        std::uniform_int_distribution<int> tok(spec.band_offset, spec.band_offset + spec.band_width - 1);
        for (std::size_t t = 0; t < mc.seq_len; ++t) s.tokens.push_back(tok(rng));
        s.label = apply_rule(spec, s.tokens);
        samples.push_back(std::move(s));
    }
    auto batch = std::make_shared<Batch>(make_batch(samples));
    c.f = [model, anchor, batch](const std::vector<Tensor> &) {
        std::mt19937_64 drop_rng(99);
        ObjectiveOptions o;
        o.weights.alpha = 0.1;
        o.weights.lambda = 0.05;
        o.weights.beta = 0.2;
        o.anchor = anchor.get();
        o.preservation_in_graph = true;
        o.training = true;
        o.rng = &drop_rng;
        return compute_objective(*model, *batch, o).total;
    };
    return c;
}

// ---------------------------------------------------------------------------
// Free logit table used by the equilibrium check

struct TableOutcome {
    double max_dev = 0.0;
    double variance = 0.0;
};

TableOutcome optimize_table(std::size_t E, std::uint64_t seed, double lambda, double planted_offset) {
    constexpr std::size_t N = 256;
    constexpr double sigma = 0.04;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n01(0.0, 1.0);
    std::vector<double> skew(E);
    for (auto &s : skew) s = n01(rng);
    std::normal_distribution<double> noise(0.0, sigma);
    std::vector<double> z(N * E);
    for (std::size_t t = 0; t < N; ++t) {
        for (std::size_t e = 0; e < E; ++e) z[t * E + e] = skew[e] + noise(rng);
        if (planted_offset != 0.0) z[t * E + (t % 4) % E] += planted_offset;
    }
    Tensor logits({N, E}, z, true);
    AdamWConfig oc;
    oc.learning_rate = 0.05;
    oc.weight_decay = 0.0;
    oc.clip_norm = 0.0;
    AdamW opt({logits}, oc);
    LossWeights w;
    w.alpha = 1.0;
    w.lambda = lambda;
    auto distribution = [&] {
        RoutingDistribution d;
        d.logits = logits;
        d.probs = softmax(logits);
        d.weights = d.probs;
        d.mode = RoutingMode::soft;
        d.top_k = E;
        return d;
    };
    for (int step = 0; step < 2000; ++step) {
        auto stats = batch_stats(distribution(), AssignmentMode::top1);
        backward(rsl_loss(stats, w));
        opt.step();
        opt.zero_grad();
    }
    NoGradGuard guard;
    auto stats = batch_stats(distribution(), AssignmentMode::top1);
    TableOutcome out;
    for (double p : stats.p_bar) out.max_dev = std::max(out.max_dev, std::abs(p - 1.0 / static_cast<double>(E)));
    out.variance = stats.routing_variance;
    return out;
}

double raw_entropy(const std::vector<double> &p) {
    double h = 0.0;
    for (double v : p) h -= v * std::log(v);
    return h;
}

std::vector<Tensor> expert_tensors(HostModel &model) {
    std::vector<Tensor> out;
    for (auto &m : model.mixers()) {
        for (auto &e : m->experts) {
            out.push_back(e.A);
            out.push_back(e.B);
        }
    }
    return out;
}

bool bitwise_equal(const Tensor &a, const Tensor &b) {
    return a.shape() == b.shape() && std::memcmp(a.values().data(), b.values().data(), a.numel() * sizeof(double)) == 0;
}

double max_abs_diff(const Tensor &a, const Tensor &b) {
    if (a.shape() != b.shape()) return INFINITY;
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

/// Every trainable or frozen tensor of a wrapped model, in a fixed order.
std::vector<Tensor> all_tensors(ToyModel &model) {
    std::vector<Tensor> out;
    for (auto &[name, t] : model.base_tensors()) out.push_back(t);
    for (auto &t : expert_tensors(model)) out.push_back(t);
    for (auto &r : unique_routers(model)) out.push_back(r->gate_weight);
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------

CheckResult check_gradients(std::size_t seeds) {
    auto t0 = Clock::now();
    CheckResult r{"AC1", "gradient certification", false, false, "", 0.0};
    const auto cases = op_cases();
    double worst = 0.0;
    std::string worst_name;
    std::size_t coords = 0;
    auto consider = [&](const std::string &name, const GradCheckResult &g) {
        coords += g.coords_checked;
        if (g.max_rel_error >= worst) {
            worst = g.max_rel_error;
            worst_name = name;
        }
    };
    for (std::size_t s = 0; s < seeds; ++s) {
        for (std::size_t i = 0; i < cases.size(); ++i) {
            std::mt19937_64 rng(derive_seed(s, {i}));
            GradCase c = cases[i].second(rng);
            consider(cases[i].first, grad_check(c.f, c.inputs));
        }
        GradCase c = objective_case(derive_seed(s, {0x0B}));
        consider("objective", grad_check(c.f, c.inputs));
    }
    r.seconds = since(t0);
    r.passed = worst <= 1e-5 && r.seconds <= 120.0;
    r.detail = "ops=" + std::to_string(cases.size() + 1) + " seeds=" + std::to_string(seeds) +
               " coords=" + std::to_string(coords) + " max_rel_err=" + fmt(worst, 3) + " (" + worst_name + ")";
    return r;
}

CheckResult check_balance_equilibrium(bool rsl_clause_informational) {
    auto t0 = Clock::now();
    CheckResult r{"AC2", "balance equilibrium", false, false, "", 0.0};
    bool aux_ok = true;
    double worst_dev = 0.0, worst_var = 0.0;
    for (std::size_t E : {2u, 4u, 8u}) {
        for (std::uint64_t s = 0; s < 3; ++s) {
            auto o = optimize_table(E, derive_seed(s, {E}), 0.0, 0.0);
            worst_dev = std::max(worst_dev, o.max_dev);
            worst_var = std::max(worst_var, o.variance);
            aux_ok = aux_ok && o.max_dev <= 0.05 && o.variance <= 1e-3;
        }
    }
    bool rsl_ok = true;
    double min_ratio = INFINITY;
    for (std::uint64_t s = 0; s < 3; ++s) {
        const auto seed = derive_seed(s, {0xD0});
        auto aux = optimize_table(4, seed, 0.0, 0.5);
        auto rsl = optimize_table(4, seed, 0.001, 0.5);
        const double ratio = rsl.variance / aux.variance;
        min_ratio = std::min(min_ratio, ratio);
        rsl_ok = rsl_ok && ratio >= 5.0;
    }
    r.seconds = since(t0);
    r.passed = aux_ok && (rsl_ok || rsl_clause_informational) && r.seconds <= 60.0;
    r.detail = "aux: max|p-1/E|=" + fmt(worst_dev, 3) + " max_var=" + fmt(worst_var, 3) +
               (aux_ok ? " ok" : " FAIL") + "; rsl/aux variance ratio min=" + fmt(min_ratio, 3) +
               (rsl_ok ? " ok" : " below 5") + (rsl_clause_informational && !rsl_ok ? " (not gating)" : "");
    return r;
}

CheckResult check_entropy_gradient(std::size_t points) {
    auto t0 = Clock::now();
    CheckResult r{"AC3", "entropy gradient identity", false, false, "", 0.0};
    std::mt19937_64 rng(0xE17);
    std::normal_distribution<double> n01(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> dim(2, 8);
    constexpr double eps = 1e-6;
    double worst = 0.0;
    for (std::size_t i = 0; i < points; ++i) {
        const std::size_t E = dim(rng);
        Tensor z = randn({1, E}, rng, 1.0, false);
        Tensor p = softmax(z);
        std::vector<double> probs(p.values().begin(), p.values().end());
        const auto analytic = entropy_grad_unconstrained(probs);
        for (std::size_t k = 0; k < E; ++k) {
            auto up = probs, down = probs;
            up[k] += eps;
            down[k] -= eps;
            const double fd = (raw_entropy(up) - raw_entropy(down)) / (2.0 * eps);
            worst = std::max(worst, std::abs(fd - analytic[k]));
        }
    }
    r.seconds = since(t0);
    r.passed = worst <= 1e-7;
    r.detail = "points=" + std::to_string(points) + " max_abs_err=" + fmt(worst, 3);
    return r;
}

CheckResult check_adapter_fidelity(const fs::path &scratch) {
    auto t0 = Clock::now();
    CheckResult r{"AC9", "adapter fidelity", false, false, "", 0.0};
    fs::remove_all(scratch);
    fs::create_directories(scratch);
    ToyModelConfig mc;
    LoraConfig lc;
    lc.r = 4;
    lc.lora_alpha = 8.0;
    lc.target_projection_names = {"q", "k", "v", "o", "up", "down"};
    RouterConfig rc;
    const std::size_t E = 4;

    ToyModel source(mc, 5);
    auto src_mixers = attach_mixers(source, lc, E, rc, 100);
    std::mt19937_64 rng(77);
    for (auto &m : src_mixers)
        for (auto &e : m->experts) fill_normal(e.B, rng, 0.1);

    ToyModel target(mc, 5);
    auto dst_mixers = attach_mixers(target, lc, E, rc, 200);
    const auto fp = architecture_fingerprint(source);
    bool loadable = true, bitwise = true;
    std::size_t bundle_bytes_expected = 0, bundle_bytes = 0;
    for (std::size_t e = 0; e < E; ++e) {
        const auto dir = scratch / ("expert" + std::to_string(e));
        export_bundle(src_mixers, static_cast<int>(e), dir, fp);
        for (const auto &f : fs::recursive_directory_iterator(dir / "tensors")) bundle_bytes += fs::file_size(f.path());
        auto report = import_bundle(dir, target, static_cast<int>(e));
        loadable = loadable && report.overall == CompatOverall::loadable;
    }
    for (std::size_t l = 0; l < src_mixers.size(); ++l) {
        for (std::size_t e = 0; e < E; ++e) {
            const auto &a = src_mixers[l]->experts[e];
            const auto &b = dst_mixers[l]->experts[e];
            bitwise = bitwise && bitwise_equal(a.A, b.A) && bitwise_equal(a.B, b.B);
            bundle_bytes_expected += a.parameter_count() * sizeof(double);
        }
    }

    // Tampering with one byte must be caught.
    bool tamper_caught = false;
    {
        const auto dir = scratch / "expert0";
        auto bundle = read_bundle(dir);
        const auto blob = dir / bundle.entries.front().file;
        std::fstream f(blob, std::ios::in | std::ios::out | std::ios::binary);
        char c = 0;
        f.seekg(3);
        f.read(&c, 1);
        c = static_cast<char>(c ^ 0x5A);
        f.seekp(3);
        f.write(&c, 1);
        f.close();
        try {
            import_bundle(dir, target, 0);
        } catch (const IntegrityError &) {
            tamper_caught = true;
        }
    }

    // Mixer-layer outputs per expert under hard routing, and model logits.
    double worst = 0.0;
    {
        NoGradGuard guard;
        for (std::size_t l = 0; l < src_mixers.size(); ++l) {
            Tensor x = randn({7, src_mixers[l]->base.d_in()}, rng, 1.0, false);
            for (std::size_t e = 0; e < E; ++e) {
                std::vector<int> dom{static_cast<int>(e)};
                Router hard_src = *src_mixers[l]->router, hard_dst = *dst_mixers[l]->router;
                MixerLayer ls = *src_mixers[l], ld = *dst_mixers[l];
                hard_src.mode = hard_dst.mode = RoutingMode::hard;
                ls.router = std::make_shared<Router>(hard_src);
                ld.router = std::make_shared<Router>(hard_dst);
                worst = std::max(worst, max_abs_diff(mixer_forward(ls, x, dom, false).y, mixer_forward(ld, x, dom, false).y));
            }
        }
        fill_normal(source.head_w, rng, 0.5);
        target.head_w = source.head_w;
        auto specs = default_domain_specs(5);
        std::vector<LabeledSample> samples;
        for (int i = 0; i < 8; ++i) {
            const auto &spec = specs[static_cast<std::size_t>(i % 4)];
            LabeledSample s;
            s.domain_id = spec.domain_id;
            std::uniform_int_distribution<int> tok(spec.band_offset, spec.band_offset + spec.band_width - 1);
            for (std::size_t t = 0; t < mc.seq_len; ++t) s.tokens.push_back(tok(rng));
            s.label = apply_rule(spec, s.tokens);
            samples.push_back(s);
        }
        Batch batch = make_batch(samples);
        RoutingOverride hs(source, RoutingMode::hard), ht(target, RoutingMode::hard);
        ForwardContext ctx;
        ctx.sample_domains = batch.domains;
        worst = std::max(worst, max_abs_diff(source.forward(batch, ctx), target.forward(batch, ctx)));
    }
    fs::remove_all(scratch);
    r.seconds = since(t0);
    r.passed = loadable && bitwise && tamper_caught && worst <= 1e-12 && bundle_bytes == bundle_bytes_expected;
    r.detail = std::string("round_trip=") + (bitwise ? "bitwise" : "MISMATCH") + " loadable=" + (loadable ? "yes" : "no") +
               " tamper=" + (tamper_caught ? "caught" : "MISSED") + " transfer_max_diff=" + fmt(worst, 3) +
               " blob_bytes=" + std::to_string(bundle_bytes) + "/" + std::to_string(bundle_bytes_expected);
    return r;
}

CheckResult check_transparency_determinism() {
    auto t0 = Clock::now();
    CheckResult r{"AC10", "transparency and determinism", false, false, "", 0.0};

    PipelineConfig cfg;
    cfg.apply_seed(9);
    cfg.n_per_domain = 200;
    auto data = make_workbench_data(cfg);
    double worst = 0.0;
    {
        ToyModel model(cfg.model, 9);
        std::mt19937_64 rng(3);
        fill_normal(model.head_w, rng, 0.5);
        fill_normal(model.head_b, rng, 0.5);
        Batch batch = make_batch(std::span<const LabeledSample>(data.test).first(64));
        ForwardContext ctx;
        ctx.sample_domains = batch.domains;
        NoGradGuard guard;
        Tensor plain = model.forward(batch, ctx);
        wrap_model(model, cfg);
        for (RoutingMode mode : {RoutingMode::hard, RoutingMode::soft, RoutingMode::topk}) {
            RoutingOverride o(model, mode);
            worst = std::max(worst, max_abs_diff(plain, model.forward(batch, ctx)));
        }
    }

    auto run = [&](std::uint64_t seed) {
        PipelineConfig c = cfg;
        c.apply_seed(seed);
        c.head.steps = 100;
        c.phase1.steps = 60;
        c.phase2.steps = 40;
        c.phase2.trainable_set = TrainableSet::router_plus_constrained_experts;
        ToyModel model = make_base_model(c, data);
        wrap_model(model, c);
        auto p1 = run_expert_phase(model, c, data);
        auto anchor = phase_anchor(model, c.phase2);
        auto p2 = run_router_phase(model, c, data, anchor);
        std::string log;
        for (const auto &rec : p1.records) log += rec.to_json().dump() + "\n";
        for (const auto &rec : p2.records) log += rec.to_json().dump() + "\n";
        return std::make_pair(std::move(model), log);
    };
    auto [m1, log1] = run(4);
    auto [m2, log2] = run(4);
    auto [m3, log3] = run(5);
    auto t1 = all_tensors(m1), t2 = all_tensors(m2), t3 = all_tensors(m3);
    bool identical = t1.size() == t2.size() && log1 == log2;
    for (std::size_t i = 0; identical && i < t1.size(); ++i) identical = bitwise_equal(t1[i], t2[i]);
    bool differs = log1 != log3;
    r.seconds = since(t0);
    r.passed = worst <= 1e-12 && identical && differs;
    r.detail = "zero_delta_max_diff=" + fmt(worst, 3) + " same_seed=" + (identical ? "bitwise" : "DIFFERENT") +
               " other_seed=" + (differs ? "differs" : "SAME");
    return r;
}

// ---------------------------------------------------------------------------

struct WorkbenchSuite::Run {
    std::uint64_t seed = 0;
    PipelineConfig cfg;
    DatasetSplits data;
    double base_accuracy = 0.0;
    std::unique_ptr<ToyModel> after_experts;
    std::unique_ptr<ToyModel> trained;
};

WorkbenchSuite::WorkbenchSuite(std::vector<std::uint64_t> seeds) : seeds_(std::move(seeds)) {}
WorkbenchSuite::~WorkbenchSuite() = default;

const std::vector<std::unique_ptr<WorkbenchSuite::Run>> &WorkbenchSuite::runs() {
    if (!runs_.empty()) return runs_;
    auto t0 = Clock::now();
    for (auto seed : seeds_) {
        auto run = std::make_unique<Run>();
        run->seed = seed;
        run->cfg.apply_seed(seed);
        run->data = make_workbench_data(run->cfg);
        ToyModel model = make_base_model(run->cfg, run->data);
        run->base_accuracy = evaluate(model, run->data.test).pooled;
        wrap_model(model, run->cfg);
        run_expert_phase(model, run->cfg, run->data);
        run->after_experts = std::make_unique<ToyModel>(model.clone());
        auto anchor = phase_anchor(model, run->cfg.phase2);
        run_router_phase(model, run->cfg, run->data, anchor);
        run->trained = std::make_unique<ToyModel>(std::move(model));
        runs_.push_back(std::move(run));
    }
    pipeline_seconds_ = since(t0);
    return runs_;
}

CheckResult WorkbenchSuite::specialization() {
    auto t0 = Clock::now();
    CheckResult r{"AC4", "expert specialization", true, false, "", 0.0};
    for (const auto &run : runs()) {
        EvalOptions o;
        o.mode = RoutingMode::soft;
        auto rep = evaluate(*run->trained, run->data.test, o);
        int matched = 0;
        for (const auto &[d, gate] : rep.mean_gate) {
            const auto best = static_cast<int>(std::max_element(gate.begin(), gate.end()) - gate.begin());
            if (best == d) ++matched;
        }
        r.passed = r.passed && matched >= 3;
        r.detail += "seed" + std::to_string(run->seed) + ":" + std::to_string(matched) + "/4 ";
    }
    r.seconds = since(t0);
    r.passed = r.passed && pipeline_seconds_ <= 600.0;
    r.detail += "pipeline=" + fmt(pipeline_seconds_, 3) + "s";
    return r;
}

CheckResult WorkbenchSuite::mixture_benefit() {
    auto t0 = Clock::now();
    CheckResult r{"AC5", "mixture benefit", true, false, "", 0.0};
    for (const auto &run : runs()) {
        const double mixed = evaluate(*run->trained, run->data.test).pooled;
        double best_single = 0.0;
        for (int e = 0; e < static_cast<int>(run->cfg.num_experts); ++e) {
            EvalOptions o;
            o.forced_expert = e;
            best_single = std::max(best_single, evaluate(*run->trained, run->data.test, o).pooled);
        }
        const bool ok = mixed >= best_single && mixed >= run->base_accuracy + 0.05;
        r.passed = r.passed && ok;
        r.detail += "seed" + std::to_string(run->seed) + ": mixed=" + fmt(mixed) + " single=" + fmt(best_single) +
                    " base=" + fmt(run->base_accuracy) + "; ";
    }
    r.seconds = since(t0);
    return r;
}

CheckResult WorkbenchSuite::topk_behavior() {
    auto t0 = Clock::now();
    CheckResult r{"AC6", "top-k behavior", true, false, "", 0.0};
    for (const auto &run : runs()) {
        EvalOptions k1, k3, kE, soft;
        k1.top_k = 1;
        k3.top_k = 3;
        kE.top_k = run->cfg.num_experts;
        soft.mode = RoutingMode::soft;
        const auto a1 = evaluate(*run->trained, run->data.test, k1).pooled;
        const auto a3 = evaluate(*run->trained, run->data.test, k3).pooled;
        const bool same = evaluate(*run->trained, run->data.test, kE).to_json().dump() ==
                          evaluate(*run->trained, run->data.test, soft).to_json().dump();
        r.passed = r.passed && a3 >= a1 - 0.005 && same;
        r.detail += "seed" + std::to_string(run->seed) + ": K1=" + fmt(a1) + " K3=" + fmt(a3) +
                    (same ? " KE==soft" : " KE!=soft") + "; ";
    }
    r.seconds = since(t0);
    return r;
}

CheckResult WorkbenchSuite::data_efficiency() {
    auto t0 = Clock::now();
    CheckResult r{"AC7", "data efficiency direction", false, false, "", 0.0};
    int wins = 0;
    for (const auto &run : runs()) {
        double acc[2] = {0.0, 0.0};
        for (int variant = 0; variant < 2; ++variant) {
            ToyModel model = run->after_experts->clone();
            PipelineConfig c = run->cfg;
            c.phase2.loss_weights.lambda = variant == 0 ? 0.0 : run->cfg.phase2.loss_weights.lambda;
            auto anchor = phase_anchor(model, c.phase2);
            run_router_phase(model, c, run->data, anchor, 1000);
            acc[variant] = evaluate(model, run->data.test).pooled;
        }
        if (acc[1] >= acc[0]) ++wins;
        r.detail += "seed" + std::to_string(run->seed) + ": aux=" + fmt(acc[0]) + " rsl=" + fmt(acc[1]) + "; ";
    }
    r.passed = wins >= 2;
    r.detail += "rsl>=aux on " + std::to_string(wins) + "/" + std::to_string(runs().size());
    r.seconds = since(t0);
    return r;
}

CheckResult WorkbenchSuite::preservation() {
    auto t0 = Clock::now();
    CheckResult r{"AC8", "expert preservation", false, false, "", 0.0};
    const auto &run = *runs().front();
    EvalOptions by_domain;
    by_domain.mode = RoutingMode::hard;
    const auto before = evaluate(*run.after_experts, run.data.test, by_domain);
    auto router_phase = [&](double beta) {
        ToyModel model = run.after_experts->clone();
        PipelineConfig c = run.cfg;
        c.phase2.trainable_set = TrainableSet::router_plus_constrained_experts;
        c.phase2.loss_weights.beta = beta;
        auto anchor = phase_anchor(model, c.phase2);
        run_router_phase(model, c, run.data, anchor);
        const double drift = std::sqrt(anchor_drift_squared(model.mixers(), anchor));
        return std::make_pair(drift, evaluate(model, run.data.test, by_domain));
    };
    const auto [drift_hi, rep_hi] = router_phase(1e6);
    const auto [drift_zero, rep_zero] = router_phase(0.0);
    const auto [drift_def, rep_def] = router_phase(run.cfg.phase2.loss_weights.beta);
    double worst_drop = 0.0;
    for (const auto &[d, acc] : before.domain_accuracy) worst_drop = std::max(worst_drop, acc - rep_def.domain_accuracy.at(d));
    r.passed = drift_hi <= 1e-3 && drift_zero > drift_hi && worst_drop <= 0.01;
    r.detail = "drift(beta=1e6)=" + fmt(drift_hi, 3) + " drift(beta=0)=" + fmt(drift_zero, 3) + " drift(beta=" +
               fmt(run.cfg.phase2.loss_weights.beta, 3) + ")=" + fmt(drift_def, 3) +
               " worst_domain_drop=" + fmt(worst_drop, 3);
    r.seconds = since(t0);
    return r;
}

std::vector<CheckResult> quick_suite(const fs::path &scratch) {
    std::vector<CheckResult> out;
    out.push_back(check_gradients());
    out.push_back(check_balance_equilibrium(true));
    out.push_back(check_entropy_gradient());
    out.push_back(check_adapter_fidelity(scratch));
    out.push_back(check_transparency_determinism());
    return out;
}

}  // namespace loramix
