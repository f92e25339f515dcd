#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fec {

struct GradCheckGroup {
    std::string name;
    double max_rel = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckGroup> encode_groups;  // key_proj, value_proj, alpha, beta, mlp_*
    std::vector<GradCheckGroup> pool_groups;    // key_proj, value_proj, alpha, beta, pool_residual
    double input_encode_rel = 0.0;  // gradient w.r.t. the layer input
    double input_pool_rel = 0.0;
    double barrier_leak = 0.0;  // max |grad| reaching weights via assignment indices only
    double tol = 1e-4;
    bool passed() const;
    std::vector<std::string> failing() const;
};

// 64-bit central-difference audit of one encode and one pool layer.
// `corrupt` injects a deliberate analytic-gradient error (negative control).
GradCheckReport run_gradcheck(std::uint64_t seed, double h = 1e-4, bool corrupt = false);

std::string format_report(const GradCheckReport& r);

}  // namespace fec
