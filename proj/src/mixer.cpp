#include "loramix/mixer.hpp"

#include <fnmatch.h>

#include <algorithm>
#include <map>
#include <sstream>

#include "loramix/errors.hpp"
#include "loramix/rng.hpp"

namespace loramix {

void MixerLayer::validate() const {
    if (!router) throw ConfigError("mixer layer '" + name() + "' has no router");
    router->validate();
    if (experts.empty()) throw ConfigError("mixer layer '" + name() + "' has no experts");
    if (router->num_experts != experts.size()) {
        throw ConfigError("mixer layer '" + name() + "': router covers " + std::to_string(router->num_experts) +
                          " experts, layer has " + std::to_string(experts.size()));
    }
    if (router->d_in() != base.d_in()) throw DimensionError("router input width differs from layer '" + name() + "'");
    const std::size_t rank = experts.front().rank;
    for (std::size_t i = 0; i < experts.size(); ++i) {
        const auto &e = experts[i];
        if (e.expert_id != static_cast<int>(i)) throw ConfigError("expert ids of '" + name() + "' are not 0..E-1");
        if (e.d_in() != base.d_in() || e.d_out() != base.d_out()) {
            throw DimensionError("expert " + std::to_string(i) + " of '" + name() + "' has shape " +
                                 shape_to_string({e.d_out(), e.d_in()}) + ", base is " +
                                 shape_to_string(base.W.shape()));
        }
        if (e.rank != rank) throw ConfigError("experts of '" + name() + "' disagree on rank");
    }
}

std::vector<Tensor> MixerLayer::expert_parameters() const {
    std::vector<Tensor> out;
    for (const auto &e : experts) {
        out.push_back(e.A);
        out.push_back(e.B);
    }
    return out;
}

MixerOutput mixer_forward(const MixerLayer &layer, const Tensor &x, std::span<const int> token_domains,
                          bool training, std::mt19937_64 *rng) {
    if (x.rank() != 2 || x.dim(1) != layer.base.d_in()) {
        throw DimensionError("layer '" + layer.name() + "' expects [batch x " + std::to_string(layer.base.d_in()) +
                             "] input, got " + shape_to_string(x.shape()));
    }
    const std::size_t n = x.dim(0);
    MixerOutput out;
    out.y = layer.base.bias.defined() ? linear(x, layer.base.W, layer.base.bias) : linear(x, layer.base.W);
    if (token_domains.size() == 1 && n != 1) {
        out.routing = route(*layer.router, x, std::optional<int>(token_domains[0]));
    } else {
        out.routing = route(*layer.router, x, token_domains);
    }
    const auto &dist = out.routing;
    for (std::size_t e = 0; e < layer.experts.size(); ++e) {
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < n; ++i) {
            const auto &sel = dist.selected[i];
            if (std::find(sel.begin(), sel.end(), e) != sel.end()) rows.push_back(i);
        }
        if (rows.empty()) continue;
        if (rows.size() == n) {
            Tensor delta = expert_forward(layer.experts[e], x, training, rng);
            out.y = add(out.y, scale_rows(delta, column(dist.weights, e)));
        } else {
            Tensor delta = expert_forward(layer.experts[e], gather_rows(x, rows), training, rng);
            Tensor w = column(gather_rows(dist.weights, rows), e);
            out.y = add(out.y, scatter_rows(scale_rows(delta, w), rows, n));
        }
    }
    return out;
}

std::vector<std::shared_ptr<MixerLayer>> HostModel::mixers() const {
    std::vector<std::shared_ptr<MixerLayer>> out;
    for (auto *slot : const_cast<HostModel *>(this)->projections())
        if (slot->mixer) out.push_back(slot->mixer);
    return out;
}

void HostModel::detach_mixers() {
    for (auto *slot : projections()) slot->mixer.reset();
}

bool match_layer_pattern(const std::string &pattern, const std::string &name) {
    const auto dot = name.find_last_of('.');
    const std::string leaf = dot == std::string::npos ? name : name.substr(dot + 1);
    std::stringstream ss(pattern);
    std::string glob;
    while (std::getline(ss, glob, '|')) {
        if (glob.empty()) continue;
        if (fnmatch(glob.c_str(), name.c_str(), 0) == 0) return true;
        if (fnmatch(glob.c_str(), leaf.c_str(), 0) == 0) return true;
    }
    return false;
}

bool match_any_pattern(const std::vector<std::string> &patterns, const std::string &name) {
    for (const auto &p : patterns)
        if (match_layer_pattern(p, name)) return true;
    return false;
}

std::string block_of(const std::string &layer_name) { return layer_name.substr(0, layer_name.find('.')); }

std::vector<std::shared_ptr<MixerLayer>> attach_mixers(HostModel &model, const LoraConfig &cfg, std::size_t E,
                                                       const RouterConfig &router_cfg, std::uint64_t seed) {
    cfg.validate();
    RouterConfig rc = router_cfg;
    rc.num_experts = E;
    rc.top_k = std::min(rc.top_k, E);
    rc.validate();
    auto slots = model.projections();
    std::vector<ProjectionSlot *> matched;
    std::vector<std::size_t> indices;
    for (std::size_t i = 0; i < slots.size(); ++i) {
        if (match_any_pattern(cfg.target_projection_names, slots[i]->base.name)) {
            matched.push_back(slots[i]);
            indices.push_back(i);
        }
    }
    if (matched.empty()) {
        std::string names;
        for (auto *s : slots) names += (names.empty() ? "" : ", ") + s->base.name;
        std::string targets;
        for (auto &t : cfg.target_projection_names) targets += (targets.empty() ? "" : ", ") + t;
        throw ConfigError("target patterns [" + targets + "] match no projection; available: " + names);
    }
    for (auto *s : matched) {
        if (s->mixer) throw ConfigError("projection '" + s->base.name + "' is already wrapped");
    }
    std::map<std::string, std::shared_ptr<Router>> shared;
    std::vector<std::shared_ptr<MixerLayer>> out;
    for (std::size_t m = 0; m < matched.size(); ++m) {
        auto *slot = matched[m];
        const std::uint64_t idx = indices[m];
        auto layer = std::make_shared<MixerLayer>();
        layer->base = slot->base;
        layer->base.W.set_requires_grad(false);
        if (layer->base.bias.defined()) layer->base.bias.set_requires_grad(false);
        for (std::size_t e = 0; e < E; ++e) {
            layer->experts.push_back(init_expert(cfg, layer->base.d_in(), layer->base.d_out(),
                                                 derive_seed(seed, {1, idx, e}), static_cast<int>(e)));
        }
        if (rc.shared_per_block) {
            const auto block = block_of(slot->base.name);
            auto it = shared.find(block);
            if (it == shared.end()) {
                auto r = std::make_shared<Router>(make_router(layer->base.d_in(), rc, derive_seed(seed, {2, idx})));
                it = shared.emplace(block, r).first;
            }
            if (it->second->d_in() != layer->base.d_in()) {
                throw ConfigError("shared router of block '" + block + "' cannot serve layers of different widths");
            }
            layer->router = it->second;
        } else {
            layer->router = std::make_shared<Router>(make_router(layer->base.d_in(), rc, derive_seed(seed, {2, idx})));
        }
        layer->validate();
        slot->mixer = layer;
        out.push_back(layer);
    }
    return out;
}

}  // namespace loramix
