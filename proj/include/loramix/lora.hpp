#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "loramix/tensor.hpp"

namespace loramix {

struct LoraConfig {
    std::size_t r = 16;
    double lora_alpha = 32.0;
    double dropout_p = 0.1;
    /// Layer-name patterns; see match_layer_pattern().
    std::vector<std::string> target_projection_names{"q", "v"};
    /// "kaiming_uniform" (A uniform in ±1/sqrt(d_in), B zero) is the only scheme.
    std::string init_scheme = "kaiming_uniform";

    void validate() const;
};

/// One low-rank pair. A is [r x d_in], B is [d_out x r].
struct LoraExpert {
    Tensor A;
    Tensor B;
    std::size_t rank = 0;
    double lora_alpha = 0.0;
    double dropout_p = 0.0;
    int expert_id = 0;

    double scaling() const { return lora_alpha / static_cast<double>(rank); }
    std::size_t d_in() const { return A.dim(1); }
    std::size_t d_out() const { return B.dim(0); }
    std::size_t parameter_count() const { return rank * (d_in() + d_out()); }
    std::vector<Tensor> parameters() const { return {A, B}; }
};

/// Checks r against min(d_in, d_out); warns above min/2.
void check_rank(std::size_t r, std::size_t d_in, std::size_t d_out);

LoraExpert init_expert(const LoraConfig &cfg, std::size_t d_in, std::size_t d_out, std::uint64_t seed,
                       int expert_id = 0);

/// s * B (A drop(x)). Dropout only when training; `rng` is then required.
Tensor expert_forward(const LoraExpert &e, const Tensor &x, bool training, std::mt19937_64 *rng = nullptr);

}  // namespace loramix
