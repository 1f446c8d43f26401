#include "fhseg/tensor.hpp"

#include <sstream>

#include "fhseg/errors.hpp"

namespace fhseg {

std::size_t shape_numel(const std::vector<int>& shape) {
  if (shape.empty() || shape.size() > 4) {
    throw ShapeError("tensor rank must be 1..4, got rank " + std::to_string(shape.size()));
  }
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("tensor extents must be positive");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

TensorPtr Tensor::make(std::vector<int> shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  t->data.assign(n, 0.0);
  t->requires_grad = requires_grad;
  return t;
}

TensorPtr Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
  auto t = make(std::move(shape), requires_grad);
  for (double& x : t->data) x = value;
  return t;
}

TensorPtr Tensor::from(std::vector<int> shape, std::vector<double> values, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  if (values.size() != n) {
    throw ShapeError("value count " + std::to_string(values.size()) +
                     " does not match shape product " + std::to_string(n));
  }
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  t->data = std::move(values);
  t->requires_grad = requires_grad;
  return t;
}

std::size_t Tensor::numel() const {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string Tensor::shape_str() const {
  std::ostringstream ss;
  ss << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) ss << ",";
    ss << shape[i];
  }
  ss << "]";
  return ss.str();
}

void Tensor::ensure_grad() {
  if (grad.empty()) grad.assign(numel(), 0.0);
}

void Tensor::zero_grad() {
  for (double& g : grad) g = 0.0;
}

TensorPtr Graph::emit(std::vector<int> shape, std::vector<double> values,
                      const std::vector<TensorPtr>& inputs, BackwardFn backward) {
  auto out = Tensor::from(std::move(shape), std::move(values));
  bool needs_grad = false;
  for (const auto& in : inputs) {
    if (!in) throw ContractError("op input is null");
    if (in->node_id < 0) in->node_id = next_id_++;  // leaf registration
    needs_grad = needs_grad || in->requires_grad;
  }
  out->requires_grad = needs_grad;
  out->node_id = next_id_++;
  nodes_.push_back(Node{out, inputs, std::move(backward)});
  return out;
}

void Graph::backward(const TensorPtr& loss) {
  if (!loss) throw ContractError("backward: loss is null");
  if (loss->numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + loss->shape_str());
  }
  std::size_t start = 0;
  for (std::size_t i = nodes_.size(); i > 0; --i) {
    if (nodes_[i - 1].out.get() == loss.get()) {
      start = i;
      break;
    }
  }
  if (start == 0) throw ContractError("backward: loss was not produced by this graph");
  loss->ensure_grad();
  loss->grad[0] += 1.0;
  for (std::size_t i = start; i > 0; --i) {
    Node& node = nodes_[i - 1];
    if (node.out->requires_grad && node.out->grad_allocated() && node.bwd) {
      node.bwd(*node.out);
    }
  }
}

}  // namespace fhseg
