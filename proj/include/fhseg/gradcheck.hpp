#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fhseg/tensor.hpp"

namespace fhseg {

// Rebuilds the forward graph from the current leaf values and returns the
// scalar output. Called once for the analytic pass and twice per checked
// coordinate for the central differences.
using BuildFn = std::function<TensorPtr(Graph&)>;

// Max over the given coordinates of |analytic - numeric| /
// max(1, |analytic|, |numeric|), with numeric = (f(x+eps) - f(x-eps)) / (2 eps)
// on target's data. eps must lie in [1e-7, 1e-3].
double grad_check_coords(const BuildFn& build, Tensor& target,
                         const std::vector<std::size_t>& coords, double eps);

// Convenience: checks every coordinate of the function's input tensor.
using TensorFn = std::function<TensorPtr(Graph&, const TensorPtr&)>;
double grad_check(const TensorFn& f, const TensorPtr& input, double eps);

struct OpCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  bool pass = false;
};

// One row per registered differentiable op, each checked on a small seeded
// fixture against every input it differentiates through.
std::vector<OpCheckResult> check_all_ops(std::uint64_t seed, double eps = 1e-5,
                                         double tol = 1e-4);

struct ModelCheckResult {
  double max_rel_err = 0.0;
  long long coords = 0;
  int attempt = 0;          // fixture redraws needed to find a measurable point
  bool measurable = false;  // false: every redraw had a probe straddling a relu/pool boundary
};

// Full segmentation loss on a depth-3 model over a 16x16 input: checks a
// sampled subset of image coordinates plus two coordinates of every parameter
// tensor. Batch norm runs on batch statistics without touching the running
// stats, so repeated forwards are pure. Central differences only measure a
// derivative where the function is smooth across the whole probe interval, so
// fixture draws whose probes straddle a relu sign change or a max-pool argmax
// flip (detected exactly via branch tracing) are redrawn deterministically
// until every sampled coordinate is measurable.
ModelCheckResult full_model_check(std::uint64_t seed, double eps = 1e-5);

// Test hook: the named check_all_ops row gets its analytic gradient perturbed
// by 1e-2 so the row must fail. Empty name disables.
void set_fault_injection(const std::string& op_name);

}  // namespace fhseg
