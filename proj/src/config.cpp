#include "loramix/config.hpp"

#include <set>

#include "loramix/blob_io.hpp"
#include "loramix/errors.hpp"
#include "loramix/rng.hpp"

namespace loramix {

using nlohmann::json;

namespace {

void check_keys(const json &j, const char *what, std::initializer_list<const char *> allowed) {
    if (!j.is_object()) throw ConfigError(std::string(what) + " must be an object");
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!ok.count(it.key())) throw ConfigError(std::string("unknown key '") + it.key() + "' in " + what);
    }
}

template <typename T>
void read(const json &j, const char *key, T &out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception &e) {
        throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
    }
}

}  // namespace

void PipelineConfig::apply_seed(std::uint64_t s) {
    seed = s;
    head.seed = derive_seed(s, {10});
    phase1.seed = derive_seed(s, {11});
    phase2.seed = derive_seed(s, {12});
}

void PipelineConfig::validate() const {
    model.validate();
    lora.validate();
    RouterConfig rc = router;
    rc.num_experts = num_experts;
    rc.validate();
    phase1.validate();
    phase2.validate();
    if (phase1.phase != Phase::expert_phase) throw ConfigError("phase1 must be the expert phase");
    if (phase2.phase != Phase::router_phase) throw ConfigError("phase2 must be the router phase");
    if (n_per_domain < 10) throw ConfigError("n_per_domain must be at least 10");
    for (const auto &d : domains) {
        d.validate();
        if (d.vocab != model.vocab || d.seq_len != model.seq_len) {
            throw ConfigError("domain " + std::to_string(d.domain_id) + " disagrees with the model's vocab or seq_len");
        }
    }
}

void to_json(json &j, const ToyModelConfig &c) {
    j = {{"vocab", c.vocab},   {"seq_len", c.seq_len}, {"d_model", c.d_model}, {"heads", c.heads},
         {"d_ff", c.d_ff},     {"blocks", c.blocks},   {"classes", c.classes}, {"qk_gain", c.qk_gain},
         {"tie_qk", c.tie_qk}};
}

void from_json(const json &j, ToyModelConfig &c) {
    check_keys(j, "model", {"vocab", "seq_len", "d_model", "heads", "d_ff", "blocks", "classes", "qk_gain", "tie_qk"});
    read(j, "vocab", c.vocab);
    read(j, "seq_len", c.seq_len);
    read(j, "d_model", c.d_model);
    read(j, "heads", c.heads);
    read(j, "d_ff", c.d_ff);
    read(j, "blocks", c.blocks);
    read(j, "classes", c.classes);
    read(j, "qk_gain", c.qk_gain);
    read(j, "tie_qk", c.tie_qk);
}

void to_json(json &j, const LoraConfig &c) {
    j = {{"r", c.r},
         {"lora_alpha", c.lora_alpha},
         {"lora_dropout", c.dropout_p},
         {"target_modules", c.target_projection_names},
         {"init_lora_weights", c.init_scheme}};
}

void from_json(const json &j, LoraConfig &c) {
    check_keys(j, "lora", {"r", "lora_alpha", "lora_dropout", "target_modules", "init_lora_weights"});
    read(j, "r", c.r);
    read(j, "lora_alpha", c.lora_alpha);
    read(j, "lora_dropout", c.dropout_p);
    read(j, "target_modules", c.target_projection_names);
    if (j.contains("init_lora_weights")) {
        const auto &v = j.at("init_lora_weights");
        if (v.is_boolean()) {
            if (!v.get<bool>()) throw ConfigError("init_lora_weights=false is not supported");
            c.init_scheme = "kaiming_uniform";
        } else {
            read(j, "init_lora_weights", c.init_scheme);
        }
    }
}

void to_json(json &j, const RouterConfig &c) {
    j = {{"top_k", c.top_k},
         {"renormalize_topk", c.renormalize_topk},
         {"mode", to_string(c.mode)},
         {"init_std", c.init_std},
         {"shared_per_block", c.shared_per_block}};
}

void from_json(const json &j, RouterConfig &c) {
    check_keys(j, "router", {"top_k", "renormalize_topk", "mode", "init_std", "shared_per_block", "num_experts"});
    read(j, "num_experts", c.num_experts);
    read(j, "top_k", c.top_k);
    read(j, "renormalize_topk", c.renormalize_topk);
    if (j.contains("mode")) c.mode = parse_routing_mode(j.at("mode").get<std::string>());
    read(j, "init_std", c.init_std);
    read(j, "shared_per_block", c.shared_per_block);
}

void to_json(json &j, const LossWeights &c) {
    j = {{"alpha", c.alpha}, {"lambda", c.lambda}, {"beta", c.beta}, {"outer_rsl_weight", c.outer_rsl_weight}};
}

void from_json(const json &j, LossWeights &c) {
    check_keys(j, "loss_weights", {"alpha", "lambda", "beta", "outer_rsl_weight"});
    read(j, "alpha", c.alpha);
    read(j, "lambda", c.lambda);
    read(j, "beta", c.beta);
    read(j, "outer_rsl_weight", c.outer_rsl_weight);
}

void to_json(json &j, const AdamWConfig &c) {
    j = {{"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}, {"weight_decay", c.weight_decay},
         {"clip_norm", c.clip_norm}};
}

void from_json(const json &j, AdamWConfig &c) {
    check_keys(j, "optimizer", {"beta1", "beta2", "eps", "weight_decay", "clip_norm"});
    read(j, "beta1", c.beta1);
    read(j, "beta2", c.beta2);
    read(j, "eps", c.eps);
    read(j, "weight_decay", c.weight_decay);
    read(j, "clip_norm", c.clip_norm);
}

void to_json(json &j, const PhaseConfig &c) {
    j = {{"phase", to_string(c.phase)},
         {"steps", c.steps},
         {"batch_size", c.batch_size},
         {"learning_rate", c.learning_rate},
         {"optimizer", c.optimizer},
         {"trainable_set", to_string(c.trainable_set)},
         {"loss_weights", c.loss_weights},
         {"seed", c.seed},
         {"assignment", to_string(c.assignment)},
         {"constrained_experts", c.constrained_experts}};
}

void from_json(const json &j, PhaseConfig &c) {
    check_keys(j, "phase", {"phase", "steps", "batch_size", "learning_rate", "optimizer", "trainable_set",
                            "loss_weights", "seed", "assignment", "constrained_experts"});
    if (j.contains("phase")) c.phase = parse_phase(j.at("phase").get<std::string>());
    read(j, "steps", c.steps);
    read(j, "batch_size", c.batch_size);
    read(j, "learning_rate", c.learning_rate);
    if (j.contains("optimizer")) from_json(j.at("optimizer"), c.optimizer);
    if (j.contains("trainable_set")) c.trainable_set = parse_trainable_set(j.at("trainable_set").get<std::string>());
    if (j.contains("loss_weights")) from_json(j.at("loss_weights"), c.loss_weights);
    read(j, "seed", c.seed);
    if (j.contains("assignment")) c.assignment = parse_assignment_mode(j.at("assignment").get<std::string>());
    read(j, "constrained_experts", c.constrained_experts);
}

void to_json(json &j, const HeadCalibration &c) {
    j = {{"steps", c.steps}, {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate}, {"seed", c.seed}};
}

void from_json(const json &j, HeadCalibration &c) {
    check_keys(j, "head", {"steps", "batch_size", "learning_rate", "seed"});
    read(j, "steps", c.steps);
    read(j, "batch_size", c.batch_size);
    read(j, "learning_rate", c.learning_rate);
    read(j, "seed", c.seed);
}

void to_json(json &j, const DomainSpec &c) {
    j = {{"domain_id", c.domain_id}, {"rule", to_string(c.rule)}, {"vocab", c.vocab},
         {"seq_len", c.seq_len},     {"seed", c.seed},            {"band_offset", c.band_offset},
         {"band_width", c.band_width}};
}

void from_json(const json &j, DomainSpec &c) {
    check_keys(j, "domain", {"domain_id", "rule", "vocab", "seq_len", "seed", "band_offset", "band_width"});
    read(j, "domain_id", c.domain_id);
    if (j.contains("rule")) c.rule = parse_domain_rule(j.at("rule").get<std::string>());
    read(j, "vocab", c.vocab);
    read(j, "seq_len", c.seq_len);
    read(j, "seed", c.seed);
    read(j, "band_offset", c.band_offset);
    read(j, "band_width", c.band_width);
}

std::vector<DomainSpec> PipelineConfig::domain_specs() const {
    return domains.empty() ? default_domain_specs(seed, model.vocab, model.seq_len) : domains;
}

void to_json(json &j, const PipelineConfig &c) {
    j = {{"model", c.model},   {"lora", c.lora},     {"router", c.router},     {"num_experts", c.num_experts},
         {"n_per_domain", c.n_per_domain}, {"head", c.head}, {"phase1", c.phase1}, {"phase2", c.phase2},
         {"seed", c.seed}};
    if (!c.domains.empty()) j["domains"] = c.domains;
}

void from_json(const json &j, PipelineConfig &c) {
    check_keys(j, "config",
               {"model", "lora", "router", "num_experts", "n_per_domain", "domains", "head", "phase1", "phase2",
                "seed"});
    if (j.contains("seed")) c.apply_seed(j.at("seed").get<std::uint64_t>());
    if (j.contains("model")) from_json(j.at("model"), c.model);
    if (j.contains("lora")) from_json(j.at("lora"), c.lora);
    if (j.contains("router")) from_json(j.at("router"), c.router);
    read(j, "num_experts", c.num_experts);
    read(j, "n_per_domain", c.n_per_domain);
    if (j.contains("head")) from_json(j.at("head"), c.head);
    if (j.contains("phase1")) from_json(j.at("phase1"), c.phase1);
    if (j.contains("phase2")) from_json(j.at("phase2"), c.phase2);
    if (j.contains("domains")) {
        c.domains.clear();
        for (const auto &d : j.at("domains")) {
            DomainSpec spec;
            spec.vocab = c.model.vocab;
            spec.seq_len = c.model.seq_len;
            from_json(d, spec);
            c.domains.push_back(spec);
        }
    }
}

PipelineConfig load_pipeline_config(const std::filesystem::path &path) {
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::parse_error &e) {
        throw ConfigError("cannot parse config '" + path.string() + "': " + e.what());
    }
    PipelineConfig c;
    from_json(j, c);
    c.validate();
    return c;
}

}  // namespace loramix
