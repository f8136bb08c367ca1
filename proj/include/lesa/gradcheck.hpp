#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lesa/graph.hpp"

namespace lesa {

struct GradCheckResult {
    std::string name;
    double max_rel_err = 0.0;
    bool pass = false;
};

// Central finite differences against reverse-mode gradients. `build` must
// reconstruct the scalar loss from the shared input tensors on every call
// (it only reads forward values, so it stays independent of the backward
// implementation under test). Error metric per element:
//   |analytic - fd| / max(1, |analytic|, |fd|).
GradCheckResult finite_diff_check(const std::string& name,
                                  const std::function<TensorPtr(Graph&)>& build,
                                  const std::vector<TensorPtr>& inputs, double h = 1e-6,
                                  double tol = 1e-4);

std::vector<std::string> registered_gradcheck_names();

// Runs every registered check whose name contains `filter` (all when empty),
// `instances` times each with distinct derived seeds. One result per check,
// reporting the worst instance.
std::vector<GradCheckResult> run_registered_gradchecks(const std::string& filter, uint64_t seed,
                                                       int instances);

}  // namespace lesa
