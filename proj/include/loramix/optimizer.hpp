#pragma once

#include <cstddef>
#include <vector>

#include "loramix/tensor.hpp"

namespace loramix {

struct AdamWConfig {
    double learning_rate = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    /// Global gradient-norm clip; <= 0 disables.
    double clip_norm = 1.0;

    void validate() const;
};

/// Adam with decoupled weight decay. Tensors without a gradient slot are
/// skipped entirely: no moment update, no decay, no step count.
class AdamW {
   public:
    AdamW(std::vector<Tensor> params, AdamWConfig cfg);

    /// Returns the pre-clip global gradient norm.
    double step();
    void zero_grad();

    const std::vector<Tensor> &params() const { return params_; }
    const AdamWConfig &config() const { return cfg_; }
    std::size_t steps_taken(std::size_t i) const { return t_[i]; }
    /// Per-coordinate step lr / (sqrt(v_hat) + eps) of parameter i as of its
    /// last update; lr everywhere before the first one.
    std::vector<double> effective_step(std::size_t i) const;

   private:
    std::vector<Tensor> params_;
    AdamWConfig cfg_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::vector<std::size_t> t_;
};

}  // namespace loramix
