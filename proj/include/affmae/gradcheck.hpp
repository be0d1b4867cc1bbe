#pragma once

#include <functional>
#include <vector>

#include "affmae/tape.hpp"

namespace affmae {

struct GradCheckResult {
    double max_rel_err = 0.0;
    int64_t checked = 0;
    int64_t worst_input = -1;
    int64_t worst_elem = -1;
    bool pass(double tol = 1e-6) const { return checked > 0 && max_rel_err <= tol; }
};

// Central-difference check of reverse-mode gradients. `build` gets a fresh
// b64 tape plus leaf ids for `inputs` (which must all be b64) and returns the
// scalar root id. Each input element is wiggled by +/-step and the analytic
// gradient is compared against (f+ - f-) / (2 step) with
// rel_err = |a - fd| / max(|a|, |fd|, 1e-3).
GradCheckResult grad_check(const std::vector<Tensor>& inputs,
                           const std::function<int(Tape&, const std::vector<int>&)>& build,
                           double step = 1e-5);

} // namespace affmae
