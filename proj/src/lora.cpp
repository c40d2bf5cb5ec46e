#include "loramix/lora.hpp"

#include <algorithm>
#include <cmath>

#include "loramix/errors.hpp"
#include "loramix/log.hpp"

namespace loramix {

void LoraConfig::validate() const {
    if (r == 0) throw ConfigError("LoRA rank must be positive");
    if (!(lora_alpha > 0.0) || !std::isfinite(lora_alpha)) {
        throw ConfigError("lora_alpha must be finite and positive");
    }
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("lora dropout must lie in [0, 1)");
    if (target_projection_names.empty()) throw ConfigError("LoRA target list is empty");
    if (init_scheme != "kaiming_uniform") throw ConfigError("unknown init scheme '" + init_scheme + "'");
}

void check_rank(std::size_t r, std::size_t d_in, std::size_t d_out) {
    const std::size_t limit = std::min(d_in, d_out);
    if (r == 0 || r > limit) {
        throw ConfigError("rank " + std::to_string(r) + " violates 1 <= r <= min(d_in, d_out) = " +
                          std::to_string(limit));
    }
    if (2 * r > limit) {
        warn("rank " + std::to_string(r) + " is above half of min(d_in, d_out) = " + std::to_string(limit));
    }
}

LoraExpert init_expert(const LoraConfig &cfg, std::size_t d_in, std::size_t d_out, std::uint64_t seed,
                       int expert_id) {
    if (d_in == 0 || d_out == 0) throw ConfigError("expert dimensions must be positive");
    cfg.validate();
    check_rank(cfg.r, d_in, d_out);
    std::mt19937_64 rng(seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
    std::uniform_real_distribution<double> uni(-bound, bound);
    std::vector<double> a(cfg.r * d_in);
    for (double &v : a) v = uni(rng);
    LoraExpert e;
    e.A = Tensor({cfg.r, d_in}, std::move(a), true);
    e.B = Tensor::zeros({d_out, cfg.r}, true);
    e.rank = cfg.r;
    e.lora_alpha = cfg.lora_alpha;
    e.dropout_p = cfg.dropout_p;
    e.expert_id = expert_id;
    return e;
}

Tensor expert_forward(const LoraExpert &e, const Tensor &x, bool training, std::mt19937_64 *rng) {
    if (x.rank() != 2 || x.dim(1) != e.d_in()) {
        throw DimensionError("expert " + std::to_string(e.expert_id) + " expects [batch x " +
                             std::to_string(e.d_in()) + "] input, got " + shape_to_string(x.shape()));
    }
    Tensor input = x;
    if (training && e.dropout_p > 0.0) {
        if (!rng) throw ConfigError("expert_forward in training mode needs a random generator");
        input = dropout(x, e.dropout_p, *rng);
    }
    return scale(linear(linear(input, e.A), e.B), e.scaling());
}

}  // namespace loramix
