#include "loramix/optimizer.hpp"

#include <cmath>

#include "loramix/errors.hpp"

namespace loramix {

void AdamWConfig::validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw ConfigError("moment decays must lie in [0, 1)");
    }
    if (!(eps > 0.0)) throw ConfigError("optimizer eps must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be >= 0");
}

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    cfg_.validate();
    for (auto &p : params_) {
        if (!p.defined() || !p.is_leaf()) throw ConfigError("optimizer parameters must be leaf tensors");
        m_.emplace_back(p.numel(), 0.0);
        v_.emplace_back(p.numel(), 0.0);
        t_.push_back(0);
    }
}

double AdamW::step() {
    double sq = 0.0;
    for (auto &p : params_) {
        if (!p.has_grad()) continue;
        for (double g : p.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw DivergenceError("non-finite gradient norm");
    const double clip = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / (norm + 1e-6) : 1.0;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto &p = params_[i];
        if (!p.has_grad()) continue;
        auto g = p.grad();
        auto w = p.mutable_values();
        auto &m = m_[i];
        auto &v = v_[i];
        const std::size_t t = ++t_[i];
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t));
        const double lr = cfg_.learning_rate;
        const double decay = 1.0 - lr * cfg_.weight_decay;
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double gj = g[j] * clip;
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            w[j] = w[j] * decay - lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
    return norm;
}

std::vector<double> AdamW::effective_step(std::size_t i) const {
    const double lr = cfg_.learning_rate;
    std::vector<double> out(params_.at(i).numel(), lr);
    if (t_[i] == 0) return out;
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_[i]));
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = lr / (std::sqrt(v_[i][j] / bc2) + cfg_.eps);
    return out;
}

void AdamW::zero_grad() {
    for (auto &p : params_) p.clear_grad();
}

}  // namespace loramix
