#include "loramix/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "loramix/errors.hpp"

namespace loramix {

namespace {

double eval_scalar(const ScalarFunction &f, const std::vector<Tensor> &inputs) {
    NoGradGuard guard;
    Tensor out = f(inputs);
    if (out.numel() != 1) throw DimensionError("grad_check: function must return a scalar");
    double v = out.item();
    if (!std::isfinite(v)) throw EvaluationError("grad_check: non-finite value at a perturbed point");
    return v;
}

std::vector<std::size_t> probe_coords(std::size_t n, std::size_t limit) {
    std::vector<std::size_t> coords;
    if (limit == 0 || limit >= n) {
        coords.resize(n);
        for (std::size_t i = 0; i < n; ++i) coords[i] = i;
        return coords;
    }
    for (std::size_t j = 0; j < limit; ++j) coords.push_back(j * n / limit);
    coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
    return coords;
}

}  // namespace

GradCheckResult grad_check(const ScalarFunction &f, std::vector<Tensor> inputs, const GradCheckOptions &options) {
    if (!(options.eps > 0.0)) throw ConfigError("grad_check: eps must be positive");
    for (auto &t : inputs) {
        if (!t.defined() || !t.is_leaf() || !t.requires_grad())
            throw ConfigError("grad_check: inputs must be leaves that require grad");
        t.clear_grad();
    }

    Tensor out = f(inputs);
    if (out.numel() != 1) throw DimensionError("grad_check: function must return a scalar");
    if (!std::isfinite(out.item())) throw EvaluationError("grad_check: non-finite value at the base point");
    if (out.requires_grad()) backward(out);

    GradCheckResult result;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        Tensor &t = inputs[i];
        std::vector<double> analytic(t.numel(), 0.0);
        if (t.has_grad()) {
            auto g = t.grad();
            std::copy(g.begin(), g.end(), analytic.begin());
        }
        for (std::size_t c : probe_coords(t.numel(), options.max_coords_per_input)) {
            auto vals = t.mutable_values();
            const double orig = vals[c];
            vals[c] = orig + options.eps;
            double up = eval_scalar(f, inputs);
            t.mutable_values()[c] = orig - options.eps;
            double down = eval_scalar(f, inputs);
            t.mutable_values()[c] = orig;
            double fd = (up - down) / (2.0 * options.eps);
            double err = std::abs(analytic[c] - fd) / std::max(1.0, std::abs(fd));
            ++result.coords_checked;
            if (err > result.max_rel_error) {
                result.max_rel_error = err;
                result.worst_input = i;
                result.worst_coord = c;
            }
        }
        t.clear_grad();
    }
    return result;
}

}  // namespace loramix
