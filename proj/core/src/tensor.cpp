#include "khn/tensor.hpp"

#include <sstream>
#include <unordered_set>

#include "khn/errors.hpp"

namespace khn {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor::Tensor(Shape shape) : node_(std::make_shared<detail::Node>()) {
  node_->data.assign(shape_numel(shape), 0.0);
  node_->shape = std::move(shape);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  Tensor t(std::move(shape));
  t.node_->requires_grad = requires_grad;
  return t;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : node_(std::make_shared<detail::Node>()) {
  if (values.size() != shape_numel(shape)) {
    throw ShapeError("tensor of shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                     " values, got " + std::to_string(values.size()));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

detail::Node& Tensor::checked() const {
  if (!node_) throw StateError("use of an undefined tensor");
  return *node_;
}

const Shape& Tensor::shape() const { return checked().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw IndexError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return checked().data.size(); }

std::span<const double> Tensor::data() const { return checked().data; }

std::span<double> Tensor::mutable_data() { return checked().data; }

double Tensor::item() const {
  const auto& n = checked();
  if (n.data.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(n.shape));
  return n.data[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  const auto& n = checked();
  if (n.shape.size() != 2) throw ShapeError("at(row, col) needs a rank-2 tensor");
  if (row >= n.shape[0] || col >= n.shape[1]) throw IndexError("index out of range");
  return n.data[row * n.shape[1] + col];
}

bool Tensor::requires_grad() const { return checked().requires_grad; }

void Tensor::set_requires_grad(bool value) {
  auto& n = checked();
  if (!n.is_leaf()) throw StateError("requires_grad can only be changed on leaf tensors");
  n.requires_grad = value;
}

bool Tensor::has_grad() const { return !checked().grad.empty(); }

std::span<const double> Tensor::grad() const { return checked().grad; }

std::span<double> Tensor::mutable_grad() {
  auto& n = checked();
  n.ensure_grad();
  return n.grad;
}

void Tensor::zero_grad() {
  auto& n = checked();
  n.grad.assign(n.data.size(), 0.0);
}

void Tensor::clear_grad() { checked().grad.clear(); }

bool Tensor::is_leaf() const { return checked().is_leaf(); }

Tensor Tensor::detach() const {
  const auto& n = checked();
  return Tensor(n.shape, n.data, false);
}

Tensor Tensor::clone() const {
  const auto& n = checked();
  return Tensor(n.shape, n.data, n.requires_grad);
}

ComputationTape ComputationTape::record(const Tensor& loss) {
  ComputationTape tape;
  if (!loss.defined()) throw StateError("backward on an undefined tensor");
  tape.root_ = loss.id();
  if (!loss.requires_grad()) return tape;

  // Iterative post-order DFS; recursion depth would otherwise follow the
  // graph depth.
  std::unordered_set<const detail::Node*> visited;
  struct Frame {
    detail::Node* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.node().get(), 0});
  visited.insert(loss.id());
  while (!stack.empty()) {
    auto& top = stack.back();
    if (top.next_parent < top.node->parents.size()) {
      detail::Node* parent = top.node->parents[top.next_parent++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.push_back({parent, 0});
      continue;
    }
    tape.order_.push_back(top.node);
    stack.pop_back();
  }
  return tape;
}

void backward(const Tensor& loss) { backward(loss, ComputationTape::record(loss)); }

void backward(const Tensor& loss, const ComputationTape& tape) {
  if (!loss.defined()) throw StateError("backward on an undefined tensor");
  if (loss.numel() != 1) throw ShapeError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  if (tape.root() != loss.id()) throw StateError("tape was recorded for a different loss");
  if (tape.size() == 0) return;

  auto nodes = tape.nodes();
  for (auto* node : nodes) {
    if (!node->is_leaf()) node->grad.assign(node->data.size(), 0.0);
  }
  auto* root = nodes.back();
  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward) node->backward(*node);
  }
  // Intermediate grads are scratch space; release them.
  for (auto* node : nodes) {
    if (!node->is_leaf()) {
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
}

}  // namespace khn
