#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "loramix/config.hpp"
#include "loramix/toy_model.hpp"
#include "loramix/workbench.hpp"

namespace loramix {

struct CheckResult {
    std::string id;
    std::string title;
    bool passed = false;
    /// Reported but never fails a suite.
    bool informational = false;
    std::string detail;
    double seconds = 0.0;

    std::string line() const;
};

/// Finite differences against reverse mode for every differentiable op and
/// for the full training objective on small random mini-batches.
CheckResult check_gradients(std::size_t seeds = 100);

/// Aux-only balancing on a free logit table reaches the uniform load; the
/// RSL run on a planted four-domain stream is compared against it.
/// `rsl_clause_informational` reports the RSL comparison without gating on it.
CheckResult check_balance_equilibrium(bool rsl_clause_informational = false);

/// Analytic entropy gradient against finite differences on random simplex points.
CheckResult check_entropy_gradient(std::size_t points = 1000);

/// Bundle round trip, tamper detection and cross-instance transfer.
CheckResult check_adapter_fidelity(const std::filesystem::path &scratch);

/// Zero-delta wrapping and bitwise reproducibility.
CheckResult check_transparency_determinism();

/// The two-phase workbench run over several seeds, computed once and shared
/// by the checks that read it.
class WorkbenchSuite {
   public:
    explicit WorkbenchSuite(std::vector<std::uint64_t> seeds = {1, 2, 3});
    ~WorkbenchSuite();

    CheckResult specialization();
    CheckResult mixture_benefit();
    CheckResult topk_behavior();
    CheckResult data_efficiency();
    CheckResult preservation();

   private:
    struct Run;
    const std::vector<std::unique_ptr<Run>> &runs();

    std::vector<std::uint64_t> seeds_;
    std::vector<std::unique_ptr<Run>> runs_;
    double pipeline_seconds_ = 0.0;
};

/// Fast subset: gradients, equilibrium, entropy identity, adapters,
/// transparency and determinism.
std::vector<CheckResult> quick_suite(const std::filesystem::path &scratch);

}  // namespace loramix
