#include "segstitch/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

namespace segstitch {

double gradcheck_max_err(const std::function<Tensor64()>& fwd,
                         const std::vector<Tensor64*>& leaves, double h,
                         int samples_per_leaf, uint64_t seed) {
  // analytic pass
  std::vector<std::vector<double>> analytic;
  {
    auto tape = Tape64::make();
    for (Tensor64* leaf : leaves) {
      leaf->zero_grad();
      tape->watch(*leaf);
    }
    Tensor64 loss = fwd();
    backward(loss);
    for (Tensor64* leaf : leaves) {
      const std::vector<double>* g = leaf->grad_if_any();
      analytic.push_back(g ? *g
                           : std::vector<double>(static_cast<size_t>(leaf->numel()), 0.0));
    }
  }
  // tape is gone: fwd now evaluates untaped

  Rng rng(seed);
  double max_err = 0.0;
  for (size_t li = 0; li < leaves.size(); ++li) {
    Tensor64& leaf = *leaves[li];
    const int64_t n = leaf.numel();
    std::vector<int64_t> picks;
    if (n <= samples_per_leaf) {
      picks.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) picks[static_cast<size_t>(i)] = i;
    } else {
      for (int s = 0; s < samples_per_leaf; ++s) picks.push_back(rng.index(n));
    }
    for (int64_t idx : picks) {
      double* slot = leaf.data() + idx;
      const double saved = *slot;
      *slot = saved + h;
      const double fp = fwd().item();
      *slot = saved - h;
      const double fm = fwd().item();
      *slot = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[li][static_cast<size_t>(idx)];
      const double err =
          std::fabs(a - numeric) / std::max({1.0, std::fabs(a), std::fabs(numeric)});
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

bool gradcheck_all_pass(const std::vector<GradCheckResult>& results, double tol) {
  for (const auto& r : results)
    if (!r.pass(tol)) return false;
  return !results.empty();
}

}  // namespace segstitch
