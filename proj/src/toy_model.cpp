#include "loramix/toy_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "loramix/errors.hpp"
#include "loramix/optimizer.hpp"
#include "loramix/rng.hpp"

namespace loramix {

void ToyModelConfig::validate() const {
    if (vocab == 0 || seq_len == 0 || d_model == 0 || d_ff == 0 || blocks == 0 || classes < 2) {
        throw ConfigError("toy model sizes must be positive (and at least two classes)");
    }
    if (heads == 0 || d_model % heads != 0) throw ConfigError("d_model must split evenly across heads");
    if (!(qk_gain > 0.0)) throw ConfigError("qk_gain must be positive");
}

namespace {

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64 &rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> v(shape_numel(shape));
    for (double &x : v) x = stddev * normal(rng);
    return Tensor(std::move(shape), std::move(v));
}

ProjectionSlot make_slot(std::string name, std::size_t d_out, std::size_t d_in, double gain, std::mt19937_64 &rng) {
    ProjectionSlot s;
    s.base.name = std::move(name);
    s.base.W = normal_tensor({d_out, d_in}, gain / std::sqrt(static_cast<double>(d_in)), rng);
    return s;
}

}  // namespace

ToyModel::ToyModel(const ToyModelConfig &cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(derive_seed(seed, {0x70F}));
    const std::size_t D = cfg_.d_model;
    tok_emb = normal_tensor({cfg_.vocab, D}, 1.0, rng);
    pos_emb = normal_tensor({cfg_.seq_len, D}, 1.0, rng);
    for (std::size_t b = 0; b < cfg_.blocks; ++b) {
        const std::string p = "blk" + std::to_string(b);
        Block blk;
        blk.q = make_slot(p + ".attn.q", D, D, cfg_.qk_gain, rng);
        blk.k = make_slot(p + ".attn.k", D, D, cfg_.qk_gain, rng);
        if (cfg_.tie_qk) blk.k.base.W = blk.q.base.W.clone();
        blk.v = make_slot(p + ".attn.v", D, D, 1.0, rng);
        blk.o = make_slot(p + ".attn.o", D, D, 1.0, rng);
        blk.up = make_slot(p + ".ffn.up", cfg_.d_ff, D, 1.0, rng);
        blk.down = make_slot(p + ".ffn.down", D, cfg_.d_ff, 1.0, rng);
        blocks.push_back(std::move(blk));
    }
    head_w = Tensor::zeros({cfg_.classes, D});
    head_b = Tensor::zeros({cfg_.classes});
}

std::vector<ProjectionSlot *> ToyModel::projections() {
    std::vector<ProjectionSlot *> out;
    for (auto &b : blocks) {
        for (auto *s : {&b.q, &b.k, &b.v, &b.o, &b.up, &b.down}) out.push_back(s);
    }
    return out;
}

std::vector<std::pair<std::string, Tensor>> ToyModel::base_tensors() {
    std::vector<std::pair<std::string, Tensor>> out{{"tok_emb", tok_emb}, {"pos_emb", pos_emb}};
    for (auto *s : projections()) {
        out.emplace_back(s->base.name + ".W", s->base.W);
        if (s->base.bias.defined()) out.emplace_back(s->base.name + ".bias", s->base.bias);
    }
    out.emplace_back("head.W", head_w);
    out.emplace_back("head.b", head_b);
    return out;
}

ToyModel ToyModel::clone() const {
    ToyModel out = *this;
    auto deep = [](Tensor &t) {
        if (t.defined()) t = t.clone();
    };
    deep(out.tok_emb);
    deep(out.pos_emb);
    deep(out.head_w);
    deep(out.head_b);
    std::vector<std::pair<std::shared_ptr<Router>, std::shared_ptr<Router>>> routers;
    for (auto *slot : out.projections()) {
        deep(slot->base.W);
        deep(slot->base.bias);
        if (!slot->mixer) continue;
        auto layer = std::make_shared<MixerLayer>(*slot->mixer);
        layer->base = slot->base;
        for (auto &e : layer->experts) {
            deep(e.A);
            deep(e.B);
        }
        auto it = std::find_if(routers.begin(), routers.end(), [&](const auto &p) { return p.first == layer->router; });
        if (it == routers.end()) {
            auto r = std::make_shared<Router>(*layer->router);
            deep(r->gate_weight);
            routers.emplace_back(layer->router, r);
            layer->router = r;
        } else {
            layer->router = it->second;
        }
        slot->mixer = layer;
    }
    return out;
}

Tensor ToyModel::project(const ProjectionSlot &slot, const Tensor &x, std::span<const int> token_domains,
                         const ForwardContext &ctx) const {
    if (!slot.mixer) {
        return slot.base.bias.defined() ? linear(x, slot.base.W, slot.base.bias) : linear(x, slot.base.W);
    }
    auto out = mixer_forward(*slot.mixer, x, token_domains, ctx.training, ctx.rng);
    if (ctx.routing) ctx.routing->emplace_back(slot.base.name, std::move(out.routing));
    return out.y;
}

Tensor ToyModel::features(const Batch &batch, const ForwardContext &ctx) const {
    const std::size_t B = batch.size, L = cfg_.seq_len;
    if (B == 0) throw DimensionError("empty batch");
    if (batch.seq_len != L || batch.tokens.size() != B * L) {
        throw DimensionError("batch sequences have length " + std::to_string(batch.seq_len) + ", model expects " +
                             std::to_string(L));
    }
    std::vector<int> token_domains;
    if (!ctx.sample_domains.empty()) {
        if (ctx.sample_domains.size() != B) throw DimensionError("one domain id per sample is required");
        token_domains.reserve(B * L);
        for (int d : ctx.sample_domains) token_domains.insert(token_domains.end(), L, d);
    }
    std::vector<int> positions(B * L);
    for (std::size_t i = 0; i < B * L; ++i) positions[i] = static_cast<int>(i % L);

    Tensor x = add(embedding(tok_emb, batch.tokens), embedding(pos_emb, positions));
    for (const auto &blk : blocks) {
        Tensor h = layer_norm(x);
        Tensor q = project(blk.q, h, token_domains, ctx);
        Tensor k = project(blk.k, h, token_domains, ctx);
        Tensor v = project(blk.v, h, token_domains, ctx);
        Tensor a = multi_head_attention(q, k, v, B, L, cfg_.heads);
        x = add(x, project(blk.o, a, token_domains, ctx));
        h = layer_norm(x);
        x = add(x, project(blk.down, relu(project(blk.up, h, token_domains, ctx)), token_domains, ctx));
    }
    std::vector<std::size_t> last(B);
    for (std::size_t b = 0; b < B; ++b) last[b] = b * L + L - 1;
    return layer_norm(gather_rows(x, last));
}

Tensor ToyModel::head(const Tensor &feats) const { return linear(feats, head_w, head_b); }

Tensor ToyModel::forward(const Batch &batch, const ForwardContext &ctx) const { return head(features(batch, ctx)); }

void calibrate_head(ToyModel &model, const std::vector<LabeledSample> &train, const HeadCalibration &cfg) {
    if (train.empty()) throw EvaluationError("head calibration needs training samples");
    const std::size_t D = model.config().d_model;
    std::vector<double> feats;
    feats.reserve(train.size() * D);
    {
        NoGradGuard guard;
        const std::size_t chunk = 512;
        for (std::size_t i = 0; i < train.size(); i += chunk) {
            const std::size_t n = std::min(chunk, train.size() - i);
            Batch b = make_batch(std::span<const LabeledSample>(train).subspan(i, n));
            ForwardContext ctx;
            ctx.sample_domains = b.domains;
            Tensor f = model.features(b, ctx);
            feats.insert(feats.end(), f.values().begin(), f.values().end());
        }
    }
    model.head_w.set_requires_grad(true);
    model.head_b.set_requires_grad(true);
    AdamWConfig oc;
    oc.learning_rate = cfg.learning_rate;
    oc.clip_norm = 0.0;
    AdamW opt({model.head_w, model.head_b}, oc);
    std::mt19937_64 rng(derive_seed(cfg.seed, {0x4EAD}));
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = order.size();
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        std::vector<double> x;
        std::vector<int> y;
        for (std::size_t j = 0; j < cfg.batch_size; ++j) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            const std::size_t idx = order[cursor++];
            x.insert(x.end(), feats.begin() + static_cast<long>(idx * D), feats.begin() + static_cast<long>((idx + 1) * D));
            y.push_back(train[idx].label);
        }
        Tensor f({y.size(), D}, std::move(x));
        Tensor loss = cross_entropy(model.head(f), y);
        backward(loss);
        opt.step();
        opt.zero_grad();
    }
    model.head_w.set_requires_grad(false);
    model.head_b.set_requires_grad(false);
}

}  // namespace loramix
