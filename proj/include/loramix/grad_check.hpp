#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "loramix/tensor.hpp"

namespace loramix {

struct GradCheckOptions {
    double eps = 1e-6;
    /// When nonzero, only this many coordinates per input are probed, spread
    /// evenly across the tensor. Zero probes every coordinate.
    std::size_t max_coords_per_input = 0;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_input = 0;
    std::size_t worst_coord = 0;
    std::size_t coords_checked = 0;
};

using ScalarFunction = std::function<Tensor(const std::vector<Tensor> &)>;

/// Central finite differences against reverse mode.
///
/// For every probed coordinate the error is |g_ad - g_fd| / max(1, |g_fd|);
/// the maximum is returned. `inputs` must be leaves with requires_grad set.
/// Throws EvaluationError if f is non-finite at a perturbed point.
GradCheckResult grad_check(const ScalarFunction &f, std::vector<Tensor> inputs,
                           const GradCheckOptions &options = {});

}  // namespace loramix
