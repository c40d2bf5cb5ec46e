// Acceptance suite: one line per criterion, nonzero exit if any fails.

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "loramix/verify.hpp"

using namespace loramix;

int main() {
    const auto scratch = std::filesystem::temp_directory_path() / "loramix_acceptance";
    std::filesystem::remove_all(scratch);
    bool ok = true;
    auto report = [&](const CheckResult &r) {
        std::cout << r.line() << std::endl;
        ok = ok && (r.passed || r.informational);
    };
    report(check_gradients());
    report(check_balance_equilibrium(false));
    report(check_entropy_gradient());
    WorkbenchSuite suite;
    report(suite.specialization());
    report(suite.mixture_benefit());
    report(suite.topk_behavior());
    report(suite.data_efficiency());
    report(suite.preservation());
    report(check_adapter_fidelity(scratch));
    report(check_transparency_determinism());
    std::filesystem::remove_all(scratch);
    std::cout << (ok ? "ALL PASSED" : "SOME CRITERIA FAILED") << std::endl;
    return ok ? 0 : 1;
}
