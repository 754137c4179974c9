#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace khn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One vertex of the dynamic graph. Ops that have at least one parent
// requiring grad keep their parents alive and install a backward closure
// that reads `grad` and accumulates into the parents' grads.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return parents.empty(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

// Shared handle to a row-major float64 array that participates in
// reverse-mode differentiation. Copying a Tensor aliases the same storage;
// use detach() or clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;
  // Zero-filled.
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);

  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct write access; only meaningful on leaves (parameters, inputs).
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();
  void clear_grad();
  bool is_leaf() const;

  // New leaf holding a copy of the values; gradient history is dropped.
  Tensor detach() const;
  // Like detach(), but keeps requires_grad.
  Tensor clone() const;

  const detail::Node* id() const noexcept { return node_.get(); }
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::Node> node);

 private:
  detail::Node& checked() const;
  std::shared_ptr<detail::Node> node_;
};

// Topologically ordered record of the differentiable operations reachable
// from a loss. Inputs precede the nodes that consume them, and every node
// appears once.
class ComputationTape {
 public:
  static ComputationTape record(const Tensor& loss);

  std::size_t size() const noexcept { return order_.size(); }
  std::span<detail::Node* const> nodes() const noexcept { return order_; }
  const detail::Node* root() const noexcept { return root_; }

 private:
  std::vector<detail::Node*> order_;
  const detail::Node* root_ = nullptr;
};

// Populates grads of every requires_grad tensor reachable from `loss`.
// Leaf grads accumulate across calls; intermediate grads are reset.
void backward(const Tensor& loss);
void backward(const Tensor& loss, const ComputationTape& tape);

}  // namespace khn
