#include "loramix/adapters.hpp"

#include <algorithm>
#include <map>
#include <set>

#include "loramix/blob_io.hpp"
#include "loramix/config.hpp"
#include "loramix/errors.hpp"
#include "loramix/version.hpp"

namespace loramix {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(LayerVerdict v) {
    switch (v) {
        case LayerVerdict::exact: return "exact";
        case LayerVerdict::shape_mismatch: return "shape-mismatch";
        case LayerVerdict::missing_layer: return "missing-layer";
    }
    return "?";
}

std::string to_string(CompatOverall v) {
    switch (v) {
        case CompatOverall::loadable: return "loadable";
        case CompatOverall::partial: return "partial";
        case CompatOverall::incompatible: return "incompatible";
    }
    return "?";
}

json CompatReport::to_json() const {
    json layers_j = json::array();
    for (const auto &[name, v] : layers) layers_j.push_back({{"layer", name}, {"verdict", to_string(v)}});
    return {{"overall", to_string(overall)}, {"layers", layers_j}};
}

std::string architecture_fingerprint(HostModel &model) {
    std::string desc;
    for (auto *s : model.projections()) {
        desc += s->base.name + ":" + shape_to_string(s->base.W.shape());
        if (s->base.bias.defined()) desc += "+bias";
        desc += ";";
    }
    return sha256_hex(std::span<const unsigned char>(reinterpret_cast<const unsigned char *>(desc.data()), desc.size()));
}

std::vector<std::string> AdapterBundle::layers() const {
    std::vector<std::string> out;
    for (const auto &e : entries)
        if (std::find(out.begin(), out.end(), e.layer) == out.end()) out.push_back(e.layer);
    return out;
}

bool AdapterBundle::covers(const std::string &layer) const {
    return std::any_of(entries.begin(), entries.end(), [&](const BundleEntry &e) { return e.layer == layer; });
}

std::pair<Tensor, Tensor> AdapterBundle::load_layer(const std::string &layer) const {
    const BundleEntry *a = nullptr;
    const BundleEntry *b = nullptr;
    for (const auto &e : entries) {
        if (e.layer != layer) continue;
        (e.role == "A" ? a : b) = &e;
    }
    if (!a || !b) throw FormatError("bundle lacks the A/B pair of layer '" + layer + "'");
    auto load = [&](const BundleEntry &e) {
        return Tensor(e.shape, read_blob(path / e.file, shape_numel(e.shape), e.sha256));
    };
    return {load(*a), load(*b)};
}

AdapterBundle export_bundle(const std::vector<std::shared_ptr<MixerLayer>> &layers, int expert_id,
                            const fs::path &path, const std::string &fingerprint) {
    if (layers.empty()) throw ExportError("no layers to export");
    std::vector<const LoraExpert *> experts;
    for (const auto &l : layers) {
        const LoraExpert *found = nullptr;
        for (const auto &e : l->experts)
            if (e.expert_id == expert_id) found = &e;
        if (!found) throw ExportError("layer '" + l->name() + "' has no expert " + std::to_string(expert_id));
        experts.push_back(found);
    }
    const auto &first = *experts.front();
    AdapterBundle bundle;
    bundle.path = path;
    bundle.expert_id = expert_id;
    bundle.fingerprint = fingerprint;
    bundle.engine_version = kEngineVersion;
    bundle.precision = kPrecision;
    bundle.lora.r = first.rank;
    bundle.lora.lora_alpha = first.lora_alpha;
    bundle.lora.dropout_p = first.dropout_p;
    bundle.lora.target_projection_names.clear();
    std::error_code ec;
    fs::create_directories(path / "tensors", ec);
    if (ec) throw IOError("cannot create bundle directory '" + path.string() + "': " + ec.message());
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto &name = layers[i]->name();
        bundle.lora.target_projection_names.push_back(name);
        for (const auto &[role, t] : {std::pair<std::string, Tensor>{"A", experts[i]->A}, {"B", experts[i]->B}}) {
            BundleEntry e;
            e.layer = name;
            e.role = role;
            e.shape = t.shape();
            e.file = "tensors/" + name + "." + role + ".bin";
            e.sha256 = write_blob(path / e.file, t.values());
            bundle.entries.push_back(std::move(e));
        }
    }
    json entries = json::array();
    for (const auto &e : bundle.entries) {
        entries.push_back(
            {{"layer", e.layer}, {"role", e.role}, {"shape", e.shape}, {"file", e.file}, {"sha256", e.sha256}});
    }
    json manifest = {{"format", "loramix-adapter"},
                     {"format_version", 1},
                     {"engine_version", bundle.engine_version},
                     {"precision", bundle.precision},
                     {"fingerprint", fingerprint},
                     {"expert_id", expert_id},
                     {"lora", bundle.lora},
                     {"entries", entries}};
    write_text_atomic(path / "manifest", manifest.dump(2));
    return bundle;
}

AdapterBundle read_bundle(const fs::path &path) {
    if (!fs::exists(path / "manifest")) throw IOError("no adapter manifest in '" + path.string() + "'");
    json m;
    try {
        m = json::parse(read_text_file(path / "manifest"));
    } catch (const json::parse_error &e) {
        throw FormatError("malformed adapter manifest: " + std::string(e.what()));
    }
    AdapterBundle b;
    b.path = path;
    try {
        if (m.at("format").get<std::string>() != "loramix-adapter") throw FormatError("not an adapter manifest");
        if (m.at("format_version").get<int>() != 1) throw FormatError("unsupported adapter format version");
        if (m.at("precision").get<std::string>() != kPrecision) throw FormatError("unsupported blob precision");
        b.expert_id = m.at("expert_id").get<int>();
        b.fingerprint = m.value("fingerprint", "");
        b.engine_version = m.value("engine_version", "");
        b.precision = m.at("precision").get<std::string>();
        from_json(m.at("lora"), b.lora);
        for (const auto &e : m.at("entries")) {
            BundleEntry be;
            be.layer = e.at("layer").get<std::string>();
            be.role = e.at("role").get<std::string>();
            be.shape = e.at("shape").get<Shape>();
            be.file = e.at("file").get<std::string>();
            be.sha256 = e.at("sha256").get<std::string>();
            if (be.role != "A" && be.role != "B") throw FormatError("entry role must be A or B, got '" + be.role + "'");
            if (be.shape.size() != 2) throw FormatError("entry '" + be.layer + "." + be.role + "' is not a matrix");
            if (be.file.find("..") != std::string::npos) throw FormatError("entry file escapes the bundle");
            b.entries.push_back(std::move(be));
        }
    } catch (const json::exception &e) {
        throw FormatError("malformed adapter manifest: " + std::string(e.what()));
    }
    if (b.entries.empty()) throw FormatError("adapter bundle has no tensors");
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto &e : b.entries) {
        if (!seen.insert({e.layer, e.role}).second) {
            throw FormatError("duplicate entry '" + e.layer + "." + e.role + "'");
        }
    }
    for (const auto &layer : b.layers()) {
        if (!seen.count({layer, "A"}) || !seen.count({layer, "B"})) {
            throw FormatError("layer '" + layer + "' lacks its A or B tensor");
        }
    }
    for (const auto &e : b.entries) {
        const fs::path file = path / e.file;
        std::error_code ec;
        const auto size = fs::file_size(file, ec);
        if (ec) throw IOError("cannot stat '" + file.string() + "'");
        if (size != shape_numel(e.shape) * sizeof(double)) {
            throw FormatError("blob '" + e.file + "' size does not match shape " + shape_to_string(e.shape));
        }
        read_blob(file, shape_numel(e.shape), e.sha256);
    }
    return b;
}

namespace {

LayerVerdict layer_verdict(const AdapterBundle &bundle, const MixerLayer &layer, int slot) {
    Shape a_shape, b_shape;
    for (const auto &e : bundle.entries) {
        if (e.layer != layer.name()) continue;
        (e.role == "A" ? a_shape : b_shape) = e.shape;
    }
    const std::size_t r = a_shape[0];
    const bool dims_ok = a_shape[1] == layer.base.d_in() && b_shape[0] == layer.base.d_out() && b_shape[1] == r;
    const auto &target = layer.experts.at(static_cast<std::size_t>(slot));
    if (!dims_ok || r != target.rank) return LayerVerdict::shape_mismatch;
    return LayerVerdict::exact;
}

CompatOverall aggregate(const std::vector<std::pair<std::string, LayerVerdict>> &layers) {
    const auto exact = std::count_if(layers.begin(), layers.end(),
                                     [](const auto &p) { return p.second == LayerVerdict::exact; });
    if (exact == 0) return CompatOverall::incompatible;
    if (static_cast<std::size_t>(exact) == layers.size()) return CompatOverall::loadable;
    return CompatOverall::partial;
}

}  // namespace

CompatReport check_compat(const AdapterBundle &bundle, HostModel &model, int slot) {
    auto mixers = model.mixers();
    if (mixers.empty()) throw ConfigError("model has no wrapped layers to receive an adapter");
    CompatReport report;
    std::set<std::string> model_layers;
    for (const auto &m : mixers) {
        if (slot < 0 || static_cast<std::size_t>(slot) >= m->num_experts()) {
            throw IndexError("expert slot " + std::to_string(slot) + " outside [0, " +
                             std::to_string(m->num_experts()) + ") in layer '" + m->name() + "'");
        }
        model_layers.insert(m->name());
        report.layers.emplace_back(
            m->name(), bundle.covers(m->name()) ? layer_verdict(bundle, *m, slot) : LayerVerdict::missing_layer);
    }
    for (const auto &l : bundle.layers()) {
        if (!model_layers.count(l)) report.layers.emplace_back(l, LayerVerdict::missing_layer);
    }
    report.overall = aggregate(report.layers);
    return report;
}

CompatReport import_bundle(const fs::path &path, HostModel &model, int slot) {
    AdapterBundle bundle = read_bundle(path);
    CompatReport report = check_compat(bundle, model, slot);
    if (report.overall == CompatOverall::incompatible) return report;
    for (auto &m : model.mixers()) {
        auto &expert = m->experts[static_cast<std::size_t>(slot)];
        LayerVerdict v = LayerVerdict::missing_layer;
        for (const auto &[name, verdict] : report.layers)
            if (name == m->name()) v = verdict;
        if (v == LayerVerdict::exact) {
            auto [A, B] = bundle.load_layer(m->name());
            std::copy(A.values().begin(), A.values().end(), expert.A.mutable_values().begin());
            std::copy(B.values().begin(), B.values().end(), expert.B.mutable_values().begin());
            expert.lora_alpha = bundle.lora.lora_alpha;
            expert.dropout_p = bundle.lora.dropout_p;
        } else if (v == LayerVerdict::missing_layer) {
            auto b = expert.B.mutable_values();
            std::fill(b.begin(), b.end(), 0.0);
        }
    }
    return report;
}

std::vector<std::shared_ptr<MixerLayer>> compose(const std::vector<fs::path> &paths, HostModel &model,
                                                 const RouterConfig &router_cfg, std::uint64_t seed) {
    if (paths.empty()) throw CompositionError("compose needs at least one bundle");
    std::vector<AdapterBundle> bundles;
    for (const auto &p : paths) bundles.push_back(read_bundle(p));
    std::set<std::string> wanted;
    for (const auto &b : bundles)
        for (const auto &l : b.layers()) wanted.insert(l);
    std::vector<std::string> ordered;
    for (auto *s : model.projections())
        if (wanted.count(s->base.name)) ordered.push_back(s->base.name);
    if (ordered.size() != wanted.size()) {
        for (const auto &w : wanted)
            if (std::find(ordered.begin(), ordered.end(), w) == ordered.end())
                throw CompositionError("bundle layer '" + w + "' does not exist in the model");
    }
    std::map<std::string, std::size_t> rank;
    for (const auto &b : bundles) {
        for (const auto &e : b.entries) {
            if (e.role != "A") continue;
            auto [it, inserted] = rank.emplace(e.layer, e.shape[0]);
            if (!inserted && it->second != e.shape[0]) {
                throw CompositionError("bundles disagree on the rank of layer '" + e.layer + "' (" +
                                       std::to_string(it->second) + " vs " + std::to_string(e.shape[0]) + ")");
            }
        }
    }
    const std::size_t r = rank.begin()->second;
    for (const auto &[layer, rr] : rank) {
        if (rr != r) throw CompositionError("composition needs one rank across layers");
    }
    LoraConfig cfg = bundles.front().lora;
    cfg.r = r;
    cfg.target_projection_names = ordered;
    model.detach_mixers();
    auto layers = attach_mixers(model, cfg, bundles.size(), router_cfg, seed);
    for (auto &layer : layers) {
        for (std::size_t e = 0; e < bundles.size(); ++e) {
            auto &expert = layer->experts[e];
            if (bundles[e].covers(layer->name())) {
                auto [A, B] = bundles[e].load_layer(layer->name());
                if (A.shape() != expert.A.shape() || B.shape() != expert.B.shape()) {
                    throw CompositionError("bundle " + std::to_string(e) + " does not fit layer '" + layer->name() + "'");
                }
                std::copy(A.values().begin(), A.values().end(), expert.A.mutable_values().begin());
                std::copy(B.values().begin(), B.values().end(), expert.B.mutable_values().begin());
                expert.lora_alpha = bundles[e].lora.lora_alpha;
                expert.dropout_p = bundles[e].lora.dropout_p;
            } else {
                auto b = expert.B.mutable_values();
                std::fill(b.begin(), b.end(), 0.0);
            }
            expert.A.set_requires_grad(false);
            expert.B.set_requires_grad(false);
        }
        layer->router->gate_weight.set_requires_grad(true);
    }
    return layers;
}

}  // namespace loramix
