#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "segstitch/ops.hpp"

namespace segstitch {

// Central finite-difference verification of the analytic gradients, run in
// 64-bit. The error metric is |analytic - numeric| / max(1, |analytic|,
// |numeric|): relative for O(1) gradients, absolute below 1.

struct GradCheckResult {
  std::string name;
  double max_err = 0.0;
  bool pass(double tol) const { return max_err < tol; }
};

// fwd rebuilds the graph from the current contents of *leaves and returns the
// scalar output. The leaves are watched on a fresh tape for the analytic
// pass, then perturbed in place for the difference quotients. At most
// samples_per_leaf elements of each leaf are probed (all, when smaller).
double gradcheck_max_err(const std::function<Tensor64()>& fwd,
                         const std::vector<Tensor64*>& leaves, double h,
                         int samples_per_leaf, uint64_t seed);

// The full verification battery: every differentiable op on random small
// shapes, plus an end-to-end tiny model. Prints one line per check; returns
// the results. tol is the pass threshold applied in print/summary.
std::vector<GradCheckResult> run_gradcheck_suite(std::ostream& os,
                                                 double tol = 1e-4,
                                                 uint64_t seed = 0x5e95);

bool gradcheck_all_pass(const std::vector<GradCheckResult>& results,
                        double tol = 1e-4);

}  // namespace segstitch
