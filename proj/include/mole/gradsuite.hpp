#pragma once

#include <string>
#include <vector>

#include "mole/ops.hpp"

namespace mole {

struct GradSuiteEntry {
    std::string name;
    double tol = 1e-5;
    GradCheckReport report;
};

// Finite-difference checks for every layer, the MoLE block end to end, CTC
// and LRL. `filter` keeps entries whose name contains it.
std::vector<GradSuiteEntry> run_gradient_suite(const std::string& filter = "");

}  // namespace mole
