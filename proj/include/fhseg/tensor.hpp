#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace fhseg {

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Dense double-precision tensor of rank 1..4. The gradient buffer is allocated
// lazily the first time something accumulates into it. node_id is assigned the
// first time the tensor participates in a recorded graph (as an op output or
// as a consumed leaf) and is -1 before that.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  int node_id = -1;

  static TensorPtr make(std::vector<int> shape, bool requires_grad = false);
  static TensorPtr full(std::vector<int> shape, double value, bool requires_grad = false);
  static TensorPtr from(std::vector<int> shape, std::vector<double> values, bool requires_grad = false);

  std::size_t numel() const;
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  bool same_shape(const Tensor& other) const { return shape == other.shape; }
  std::string shape_str() const;

  bool grad_allocated() const { return !grad.empty(); }
  void ensure_grad();  // allocates zeros on first use
  void zero_grad();    // zeros if allocated; no-op otherwise
};

// Validated product of extents (all positive, rank 1..4).
std::size_t shape_numel(const std::vector<int>& shape);

// Recorded computation graph. Ops append one node per output in execution
// order; backward replays the suffix ending at the loss node in reverse, so
// every node is visited at most once and fan-out gradients accumulate
// additively into shared inputs.
class Graph {
 public:
  using BackwardFn = std::function<void(const Tensor& out)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Creates the op output, registers consumed leaves, propagates
  // requires_grad, and records the node.
  TensorPtr emit(std::vector<int> shape, std::vector<double> values,
                 const std::vector<TensorPtr>& inputs, BackwardFn backward);

  // Seeds d(loss)/d(loss) = 1 and runs reverse sweep. loss must be a scalar
  // (numel == 1) produced by this graph. Gradients accumulate into existing
  // buffers; callers zero them between steps.
  void backward(const TensorPtr& loss);

  std::size_t node_count() const { return nodes_.size(); }

  // Branch tracing: while enabled, piecewise ops (relu, max pooling) fold the
  // branch they took into a running hash. Two forwards over the same graph
  // structure produce equal hashes iff every piecewise op chose the same
  // branch, which certifies that a finite-difference probe interval lies on a
  // single smooth piece of the function — the only place a central difference
  // measures a derivative at all.
  void trace_branches(bool on) {
    trace_branches_ = on;
    branch_hash_ = 1469598103934665603ull;  // FNV-1a offset basis
  }
  bool tracing_branches() const { return trace_branches_; }
  std::uint64_t branch_hash() const { return branch_hash_; }
  void fold_branch(std::uint64_t v) { branch_hash_ = (branch_hash_ ^ v) * 1099511628211ull; }

 private:
  struct Node {
    TensorPtr out;
    std::vector<TensorPtr> inputs;  // kept alive for the backward closures
    BackwardFn bwd;
  };
  std::vector<Node> nodes_;
  int next_id_ = 0;
  bool trace_branches_ = false;
  std::uint64_t branch_hash_ = 1469598103934665603ull;
};

}  // namespace fhseg
