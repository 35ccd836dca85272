#pragma once

#include <cmath>
#include <string>
#include <vector>

namespace voxnn {

inline double gradcheck_rel_err(double analytic, double numeric) {
    return std::abs(analytic - numeric) /
           std::max({std::abs(analytic), std::abs(numeric), 1e-4});
}

struct CheckResult {
    std::string name;
    double worst_rel_err = 0;
    double tol = 0;
    bool pass = false;
};

struct GradCheckOptions {
    std::string filter;  // substring over check names; empty selects all
    uint64_t seed = 0;
    bool inject_fault = false;  // corrupt one analytic gradient; the check must fail
};

// Finite-difference suites for every differentiable operation and all ten
// end-to-end tiny variants, at f64. Throws ConfigError when the filter
// selects nothing.
std::vector<CheckResult> run_gradchecks(const GradCheckOptions& opts = {});

}  // namespace voxnn
