#include "loramix/training.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "loramix/blob_io.hpp"
#include "loramix/config.hpp"
#include "loramix/errors.hpp"
#include "loramix/rng.hpp"
#include "loramix/version.hpp"

namespace loramix {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Phase p) { return p == Phase::expert_phase ? "expert_phase" : "router_phase"; }

Phase parse_phase(const std::string &text) {
    if (text == "expert_phase") return Phase::expert_phase;
    if (text == "router_phase") return Phase::router_phase;
    throw ConfigError("unknown phase '" + text + "'");
}

std::string to_string(TrainableSet t) {
    switch (t) {
        case TrainableSet::experts_only: return "experts_only";
        case TrainableSet::router_only: return "router_only";
        case TrainableSet::router_plus_constrained_experts: return "router_plus_constrained_experts";
    }
    return "?";
}

TrainableSet parse_trainable_set(const std::string &text) {
    for (auto t : {TrainableSet::experts_only, TrainableSet::router_only, TrainableSet::router_plus_constrained_experts})
        if (to_string(t) == text) return t;
    throw ConfigError("unknown trainable set '" + text + "'");
}

PhaseConfig PhaseConfig::expert_defaults() {
    PhaseConfig c;
    c.phase = Phase::expert_phase;
    c.steps = 2000;
    c.learning_rate = 3e-3;
    c.trainable_set = TrainableSet::experts_only;
    return c;
}

PhaseConfig PhaseConfig::router_defaults() {
    PhaseConfig c;
    c.phase = Phase::router_phase;
    c.steps = 1000;
    c.learning_rate = 1e-2;
    c.trainable_set = TrainableSet::router_only;
    return c;
}

void PhaseConfig::validate() const {
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    optimizer_config().validate();
    loss_weights.validate();
    if (phase == Phase::expert_phase && trainable_set != TrainableSet::experts_only) {
        throw ConfigError("the expert phase trains experts only");
    }
    if (phase == Phase::router_phase && trainable_set == TrainableSet::experts_only) {
        throw ConfigError("the router phase must train the router");
    }
}

AdamWConfig PhaseConfig::optimizer_config() const {
    AdamWConfig c = optimizer;
    c.learning_rate = learning_rate;
    return c;
}

json StepRecord::to_json() const {
    return {{"step", step},         {"task", task},
            {"rsl", rsl},           {"aux", aux},
            {"preserve", preserve}, {"total", total},
            {"mean_entropy", mean_entropy}, {"routing_variance", routing_variance},
            {"grad_norm", grad_norm}};
}

// ---------------------------------------------------------------------------

std::vector<std::shared_ptr<Router>> unique_routers(const HostModel &model) {
    std::vector<std::shared_ptr<Router>> out;
    for (const auto &m : model.mixers())
        if (std::find(out.begin(), out.end(), m->router) == out.end()) out.push_back(m->router);
    return out;
}

RoutingOverride::RoutingOverride(HostModel &model, RoutingMode mode, std::optional<std::size_t> top_k,
                                 std::optional<bool> renormalize) {
    for (auto &r : unique_routers(model)) {
        saved_.push_back({r, r->mode, r->top_k, r->renormalize_topk});
        r->mode = mode;
        if (top_k) {
            if (*top_k == 0 || *top_k > r->num_experts) {
                for (auto &s : saved_) {
                    s.router->mode = s.mode;
                    s.router->top_k = s.top_k;
                    s.router->renormalize_topk = s.renormalize;
                }
                throw ConfigError("top_k " + std::to_string(*top_k) + " outside [1, " +
                                  std::to_string(r->num_experts) + "]");
            }
            r->top_k = *top_k;
        }
        if (renormalize) r->renormalize_topk = *renormalize;
    }
}

RoutingOverride::~RoutingOverride() {
    for (auto &s : saved_) {
        s.router->mode = s.mode;
        s.router->top_k = s.top_k;
        s.router->renormalize_topk = s.renormalize;
    }
}

// ---------------------------------------------------------------------------

Objective compute_objective(ToyModel &model, const Batch &batch, const ObjectiveOptions &opts) {
    std::vector<std::pair<std::string, RoutingDistribution>> routing;
    ForwardContext ctx;
    ctx.training = opts.training;
    ctx.rng = opts.rng;
    ctx.sample_domains = batch.domains;
    ctx.routing = &routing;
    Objective out;
    Tensor task = task_loss(model.forward(batch, ctx), batch.labels);
    out.report.task = task.item();
    Tensor total = task;
    if (opts.routing_terms) {
        Tensor rsl_sum;
        for (auto &[name, dist] : routing) {
            if (dist.mode == RoutingMode::hard) continue;
            auto stats = batch_stats(dist, opts.assignment);
            Tensor rsl = rsl_loss(stats, opts.weights);
            double aux = 0.0;
            for (std::size_t e = 0; e < stats.experts(); ++e) aux += stats.p_bar[e] * stats.f_bar[e];
            out.report.aux += opts.weights.alpha * aux;
            out.report.rsl += rsl.item();
            rsl_sum = rsl_sum.defined() ? add(rsl_sum, rsl) : rsl;
            out.report.layer_stats.emplace_back(name, std::move(stats));
        }
        if (rsl_sum.defined() && opts.weights.outer_rsl_weight != 0.0) {
            total = add(total, scale(rsl_sum, opts.weights.outer_rsl_weight));
        }
    }
    if (opts.anchor) {
        auto mixers = model.mixers();
        if (opts.preservation_in_graph) {
            Tensor p = preservation_loss(mixers, *opts.anchor, opts.weights.beta);
            out.report.preserve = p.item();
            total = add(total, p);
        } else {
            out.report.preserve = opts.weights.beta * anchor_drift_squared(mixers, *opts.anchor);
        }
    }
    out.report.total = total_loss(out.report.task, out.report.rsl, out.report.preserve, opts.weights);
    out.total = total;
    return out;
}

namespace {

StepRecord make_record(std::size_t step, const LossReport &r, double grad_norm) {
    StepRecord rec;
    rec.step = step;
    rec.task = r.task;
    rec.rsl = r.rsl;
    rec.aux = r.aux;
    rec.preserve = r.preserve;
    rec.total = r.total;
    rec.grad_norm = grad_norm;
    if (!r.layer_stats.empty()) {
        for (const auto &[name, s] : r.layer_stats) {
            rec.mean_entropy += s.mean_entropy;
            rec.routing_variance += s.routing_variance;
        }
        rec.mean_entropy /= static_cast<double>(r.layer_stats.size());
        rec.routing_variance /= static_cast<double>(r.layer_stats.size());
    }
    return rec;
}

void check_domains(const Batch &batch, std::size_t E) {
    for (int d : batch.domains) {
        if (d < 0 || static_cast<std::size_t>(d) >= E) {
            throw RoutingError("sample domain " + std::to_string(d) + " has no expert (E = " + std::to_string(E) + ")");
        }
    }
}

template <typename F>
Objective guarded(std::size_t step, F &&f) {
    try {
        return f();
    } catch (const EvaluationError &e) {
        throw DivergenceError("training diverged at step " + std::to_string(step) + ": " + e.what());
    } catch (const PropagationError &e) {
        throw DivergenceError("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
}

}  // namespace

TrainResult train_experts(ToyModel &model, MixedStream &stream, const PhaseConfig &cfg, const StepLogger &log) {
    cfg.validate();
    if (cfg.phase != Phase::expert_phase) throw ConfigError("train_experts needs an expert-phase config");
    auto mixers = model.mixers();
    if (mixers.empty()) throw ConfigError("model has no mixer layers");
    const std::size_t E = mixers.front()->num_experts();
    RoutingOverride hard(model, RoutingMode::hard);
    std::vector<Tensor> params;
    for (auto &r : unique_routers(model)) r->gate_weight.set_requires_grad(false);
    for (auto &m : mixers) {
        for (auto &e : m->experts) {
            e.A.set_requires_grad(true);
            e.B.set_requires_grad(true);
            params.push_back(e.A);
            params.push_back(e.B);
        }
    }
    TrainResult result;
    result.state.rng.seed(derive_seed(cfg.seed, {0xE1}));
    AdamW opt(params, cfg.optimizer_config());
    ObjectiveOptions oo;
    oo.weights = cfg.loss_weights;
    oo.routing_terms = false;
    oo.training = true;
    oo.rng = &result.state.rng;
    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        Batch batch = stream.next(cfg.batch_size);
        check_domains(batch, E);
        Objective obj = guarded(step, [&] { return compute_objective(model, batch, oo); });
        backward(obj.total);
        double norm = 0.0;
        try {
            norm = opt.step();
        } catch (const DivergenceError &e) {
            throw DivergenceError("training diverged at step " + std::to_string(step) + ": " + e.what());
        }
        opt.zero_grad();
        result.records.push_back(make_record(step, obj.report, norm));
        if (log) log(result.records.back());
        result.state.step = step;
    }
    return result;
}

TrainResult train_router(ToyModel &model, MixedStream &stream, const PhaseConfig &cfg,
                         const PreservationAnchor *anchor, const StepLogger &log) {
    cfg.validate();
    if (cfg.phase != Phase::router_phase) throw ConfigError("train_router needs a router-phase config");
    if (!anchor) throw AnchorError("router phase needs a preservation anchor taken after the expert phase");
    anchor->validate();
    auto mixers = model.mixers();
    if (mixers.empty()) throw ConfigError("model has no mixer layers");
    RoutingOverride soft(model, RoutingMode::soft);

    std::vector<Tensor> params;
    for (auto &r : unique_routers(model)) {
        r->gate_weight.set_requires_grad(true);
        params.push_back(r->gate_weight);
    }
    const bool experts_train = cfg.trainable_set == TrainableSet::router_plus_constrained_experts;
    struct Constrained {
        LoraExpert *expert;
        const PreservationAnchor::Snapshot *snap;
        std::size_t param_index;
    };
    std::vector<Constrained> constrained;
    for (auto &m : mixers) {
        for (auto &e : m->experts) {
            ExpertKey key{m->name(), e.expert_id};
            const bool train = experts_train && anchor->constrained_set.count(key) > 0;
            e.A.set_requires_grad(train);
            e.B.set_requires_grad(train);
            if (train) {
                constrained.push_back({&e, &anchor->anchored.at(key), params.size()});
                params.push_back(e.A);
                params.push_back(e.B);
            }
        }
    }
    if (experts_train && constrained.empty()) {
        throw AnchorError("expert training requested but the anchor constrains no expert of this model");
    }

    TrainResult result;
    result.state.anchor = *anchor;
    result.state.rng.seed(derive_seed(cfg.seed, {0xE2}));
    AdamW opt(params, cfg.optimizer_config());
    ObjectiveOptions oo;
    oo.weights = cfg.loss_weights;
    oo.anchor = anchor;
    oo.preservation_in_graph = false;
    oo.routing_terms = true;
    oo.training = true;
    oo.rng = &result.state.rng;
    oo.assignment = cfg.assignment;
    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        Batch batch = stream.next(cfg.batch_size);
        Objective obj = guarded(step, [&] { return compute_objective(model, batch, oo); });
        backward(obj.total);
        double norm = 0.0;
        try {
            norm = opt.step();
        } catch (const DivergenceError &e) {
            throw DivergenceError("training diverged at step " + std::to_string(step) + ": " + e.what());
        }
        opt.zero_grad();
        if (cfg.loss_weights.beta > 0.0) {
            // Proximal step for the preservation penalty, in the optimizer's
            // per-coordinate metric.
            const double two_beta = 2.0 * cfg.loss_weights.beta;
            auto pull = [&](Tensor &t, const std::vector<double> &anchor_vals, std::size_t idx) {
                auto w = t.mutable_values();
                const auto eta = opt.effective_step(idx);
                for (std::size_t i = 0; i < w.size(); ++i) {
                    w[i] = anchor_vals[i] + (w[i] - anchor_vals[i]) / (1.0 + two_beta * eta[i]);
                }
            };
            for (auto &c : constrained) {
                pull(c.expert->A, c.snap->A, c.param_index);
                pull(c.expert->B, c.snap->B, c.param_index + 1);
            }
        }
        result.records.push_back(make_record(step, obj.report, norm));
        if (log) log(result.records.back());
        result.state.step = step;
    }
    return result;
}

// ---------------------------------------------------------------------------

json EvalReport::to_json() const {
    json domains = json::array();
    for (const auto &[d, acc] : domain_accuracy) {
        domains.push_back({{"domain", d}, {"accuracy", acc}, {"count", domain_counts.at(d)}});
    }
    json layers = json::array();
    for (const auto &[name, s] : layer_stats) {
        layers.push_back({{"layer", name},
                          {"p_bar", s.p_bar},
                          {"f_bar", s.f_bar},
                          {"mean_entropy", s.mean_entropy},
                          {"routing_variance", s.routing_variance},
                          {"token_count", s.token_count}});
    }
    json gates = json::array();
    for (const auto &[d, g] : mean_gate) gates.push_back({{"domain", d}, {"mean_gate", g}});
    return {{"pooled_accuracy", pooled}, {"samples", samples}, {"domains", domains}, {"layers", layers},
            {"gates", gates}};
}

EvalReport evaluate(ToyModel &model, const std::vector<LabeledSample> &split, const EvalOptions &opts) {
    if (split.empty()) throw EvaluationError("cannot evaluate an empty split");
    if (opts.batch_size == 0) throw ConfigError("evaluation batch size must be positive");
    NoGradGuard no_grad;
    auto mixers = model.mixers();
    std::optional<RoutingOverride> override_guard;
    if (!mixers.empty()) {
        if (opts.forced_expert) {
            override_guard.emplace(model, RoutingMode::hard);
        } else if (opts.mode == RoutingMode::topk) {
            override_guard.emplace(model, RoutingMode::topk, opts.top_k, opts.renormalize);
        } else {
            override_guard.emplace(model, opts.mode);
        }
    }
    const std::size_t L = model.config().seq_len;
    std::map<int, std::size_t> correct;
    EvalReport report;
    std::vector<std::string> layer_names;
    std::vector<std::vector<RoutingBatchStats>> per_layer;
    std::map<int, std::vector<double>> gate_sum;
    std::map<int, std::size_t> gate_tokens;
    std::size_t total_correct = 0;
    for (std::size_t i = 0; i < split.size(); i += opts.batch_size) {
        const std::size_t n = std::min(opts.batch_size, split.size() - i);
        Batch batch = make_batch(std::span<const LabeledSample>(split).subspan(i, n));
        std::vector<int> domains = batch.domains;
        if (opts.forced_expert) std::fill(domains.begin(), domains.end(), *opts.forced_expert);
        std::vector<std::pair<std::string, RoutingDistribution>> routing;
        ForwardContext ctx;
        ctx.sample_domains = domains;
        ctx.routing = &routing;
        Tensor logits = model.forward(batch, ctx);
        const std::size_t C = logits.dim(1);
        for (std::size_t b = 0; b < n; ++b) {
            const auto pred = argmax_tiebreak(logits.values().subspan(b * C, C));
            const int d = batch.domains[b];
            report.domain_counts[d] += 1;
            if (static_cast<int>(pred) == batch.labels[b]) {
                correct[d] += 1;
                ++total_correct;
            }
        }
        for (std::size_t l = 0; l < routing.size(); ++l) {
            const auto &[name, dist] = routing[l];
            if (per_layer.size() <= l) {
                per_layer.emplace_back();
                layer_names.push_back(name);
            }
            per_layer[l].push_back(batch_stats(dist, AssignmentMode::topk));
            const std::size_t E = dist.experts();
            auto P = dist.probs.values();
            for (std::size_t t = 0; t < dist.tokens(); ++t) {
                const int d = batch.domains[t / L];
                auto &g = gate_sum[d];
                g.resize(E, 0.0);
                for (std::size_t e = 0; e < E; ++e) g[e] += P[t * E + e];
                gate_tokens[d] += 1;
            }
        }
    }
    for (const auto &[d, count] : report.domain_counts) {
        report.domain_accuracy[d] = static_cast<double>(correct[d]) / static_cast<double>(count);
    }
    report.samples = split.size();
    report.pooled = static_cast<double>(total_correct) / static_cast<double>(split.size());
    for (std::size_t l = 0; l < per_layer.size(); ++l) {
        report.layer_stats.emplace_back(layer_names[l], merge_stats(per_layer[l]));
    }
    for (auto &[d, g] : gate_sum) {
        for (double &v : g) v /= static_cast<double>(gate_tokens[d]);
        report.mean_gate[d] = g;
    }
    return report;
}

// ---------------------------------------------------------------------------

namespace {

json tensor_entry(const fs::path &dir, const std::string &name, const Tensor &t) {
    const std::string file = "tensors/" + name + ".bin";
    const std::string sha = write_blob(dir / file, t.values());
    return {{"shape", t.shape()}, {"file", file}, {"sha256", sha}};
}

Tensor load_entry(const fs::path &dir, const json &tensors, const std::string &name) {
    if (!tensors.contains(name)) throw FormatError("checkpoint lacks tensor '" + name + "'");
    const auto &e = tensors.at(name);
    try {
        Shape shape = e.at("shape").get<Shape>();
        auto values = read_blob(dir / e.at("file").get<std::string>(), shape_numel(shape),
                                e.at("sha256").get<std::string>());
        return Tensor(std::move(shape), std::move(values));
    } catch (const json::exception &ex) {
        throw FormatError("bad checkpoint entry for '" + name + "': " + ex.what());
    }
}

void copy_into(Tensor &dst, const Tensor &src, const std::string &name) {
    if (dst.shape() != src.shape()) {
        throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_to_string(src.shape()) +
                          ", model expects " + shape_to_string(dst.shape()));
    }
    std::copy(src.values().begin(), src.values().end(), dst.mutable_values().begin());
}

}  // namespace

void save_checkpoint(ToyModel &model, const fs::path &dir, const json &extra) {
    std::error_code ec;
    fs::create_directories(dir / "tensors", ec);
    if (ec) throw IOError("cannot create '" + dir.string() + "': " + ec.message());
    json tensors = json::object();
    for (auto &[name, t] : model.base_tensors()) tensors[name] = tensor_entry(dir, name, t);
    auto routers = unique_routers(model);
    json router_list = json::array();
    for (std::size_t i = 0; i < routers.size(); ++i) {
        const std::string name = "router" + std::to_string(i) + ".gate";
        tensors[name] = tensor_entry(dir, name, routers[i]->gate_weight);
        router_list.push_back({{"key", i},
                               {"num_experts", routers[i]->num_experts},
                               {"top_k", routers[i]->top_k},
                               {"renormalize_topk", routers[i]->renormalize_topk},
                               {"mode", to_string(routers[i]->mode)},
                               {"gate", name}});
    }
    json layers = json::array();
    for (auto &m : model.mixers()) {
        const auto key = std::find(routers.begin(), routers.end(), m->router) - routers.begin();
        json experts = json::array();
        for (auto &e : m->experts) {
            const std::string base = m->name() + "." + std::to_string(e.expert_id);
            tensors[base + ".A"] = tensor_entry(dir, base + ".A", e.A);
            tensors[base + ".B"] = tensor_entry(dir, base + ".B", e.B);
            experts.push_back({{"id", e.expert_id},
                               {"rank", e.rank},
                               {"lora_alpha", e.lora_alpha},
                               {"dropout_p", e.dropout_p}});
        }
        layers.push_back({{"name", m->name()}, {"router", key}, {"experts", experts}});
    }
    json manifest = {{"format", "loramix-checkpoint"},
                     {"format_version", 1},
                     {"engine_version", kEngineVersion},
                     {"precision", kPrecision},
                     {"model", model.config()},
                     {"tensors", tensors},
                     {"routers", router_list},
                     {"layers", layers},
                     {"extra", extra}};
    write_text_atomic(dir / "manifest.json", manifest.dump(2));
}

ToyModel load_checkpoint(const fs::path &dir, json *extra) {
    if (!fs::exists(dir / "manifest.json")) throw IOError("no checkpoint manifest in '" + dir.string() + "'");
    json manifest;
    try {
        manifest = json::parse(read_text_file(dir / "manifest.json"));
    } catch (const json::parse_error &e) {
        throw FormatError("cannot parse checkpoint manifest: " + std::string(e.what()));
    }
    if (manifest.value("format", "") != "loramix-checkpoint") throw FormatError("not a checkpoint manifest");
    try {
        ToyModelConfig cfg;
        from_json(manifest.at("model"), cfg);
        ToyModel model(cfg, 0);
        const auto &tensors = manifest.at("tensors");
        for (auto &[name, t] : model.base_tensors()) copy_into(t, load_entry(dir, tensors, name), name);
        std::vector<std::shared_ptr<Router>> routers;
        for (const auto &r : manifest.at("routers")) {
            auto router = std::make_shared<Router>();
            router->gate_weight = load_entry(dir, tensors, r.at("gate").get<std::string>());
            router->gate_weight.set_requires_grad(true);
            router->num_experts = r.at("num_experts").get<std::size_t>();
            router->top_k = r.at("top_k").get<std::size_t>();
            router->renormalize_topk = r.at("renormalize_topk").get<bool>();
            router->mode = parse_routing_mode(r.at("mode").get<std::string>());
            router->validate();
            routers.push_back(router);
        }
        std::map<std::string, ProjectionSlot *> slots;
        for (auto *s : model.projections()) slots[s->base.name] = s;
        for (const auto &l : manifest.at("layers")) {
            const auto name = l.at("name").get<std::string>();
            auto it = slots.find(name);
            if (it == slots.end()) throw FormatError("checkpoint layer '" + name + "' not in model");
            auto layer = std::make_shared<MixerLayer>();
            layer->base = it->second->base;
            const auto key = l.at("router").get<std::size_t>();
            if (key >= routers.size()) throw FormatError("layer '" + name + "' names a missing router");
            layer->router = routers[key];
            for (const auto &e : l.at("experts")) {
                LoraExpert ex;
                ex.expert_id = e.at("id").get<int>();
                ex.rank = e.at("rank").get<std::size_t>();
                ex.lora_alpha = e.at("lora_alpha").get<double>();
                ex.dropout_p = e.at("dropout_p").get<double>();
                const std::string base = name + "." + std::to_string(ex.expert_id);
                ex.A = load_entry(dir, tensors, base + ".A");
                ex.B = load_entry(dir, tensors, base + ".B");
                ex.A.set_requires_grad(true);
                ex.B.set_requires_grad(true);
                layer->experts.push_back(std::move(ex));
            }
            layer->validate();
            it->second->mixer = layer;
        }
        if (extra) *extra = manifest.value("extra", json::object());
        return model;
    } catch (const json::exception &e) {
        throw FormatError("malformed checkpoint manifest: " + std::string(e.what()));
    }
}

}  // namespace loramix
