#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace muse {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

template <typename T>
struct Node;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

// One recorded value in the define-by-run graph. Leaves have no backward_fn.
template <typename T>
struct Node {
  std::uint64_t id = 0;
  std::string op = "leaf";
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until touched by backward
  bool requires_grad = false;
  bool consumed = false;
  std::vector<NodePtr<T>> inputs;
  // Reads self.grad and accumulates into inputs[i]->grad.
  std::function<void(Node<T>& self)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

std::uint64_t next_node_id();

}  // namespace detail

// Disables graph recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

// Dense row-major tensor with optional reverse-mode gradient.
//
// A Tensor is a cheap handle: copies share the same node. Values produced by
// ops are immutable; only leaves expose mutable storage (for optimizers and
// finite-difference probes).
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor();
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  // Negative indices count from the back.
  std::size_t dim(int i) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // Leaf-only write access.
  std::span<T> mutable_data();
  T item() const;
  T at(std::size_t flat) const { return node_->data[flat]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad();

  bool is_leaf() const { return !node_->backward_fn && !node_->consumed; }
  std::uint64_t id() const { return node_->id; }
  const std::string& op() const { return node_->op; }

  // Reverse pass from a scalar. The recorded graph is released afterwards.
  void backward() const;

  Tensor detach() const;
  Tensor clone() const;

  const detail::NodePtr<T>& node() const { return node_; }
  explicit Tensor(detail::NodePtr<T> node) : node_(std::move(node)) {}

 private:
  detail::NodePtr<T> node_;
};

// Op record as seen by backward, in topological order.
struct GraphRecord {
  std::string op;
  std::vector<std::uint64_t> inputs;
  std::uint64_t output = 0;
};

struct Graph {
  std::vector<GraphRecord> nodes;
};

// Records the graph reachable from `root` without running it.
template <typename T>
Graph trace_graph(const Tensor<T>& root);

namespace detail {

// Builds an op result. Inputs that do not require grad are nulled in the
// recorded input list (indices are kept stable for backward_fn); if none
// remain, or grad is disabled, the result is a constant. Throws NumericError
// if any output value is non-finite.
template <typename T>
Tensor<T> make_result(std::string op, Shape shape, std::vector<T> data,
                      std::vector<NodePtr<T>> inputs,
                      std::function<void(Node<T>&)> backward_fn);

// Accumulates into input i's grad if that input requires grad.
template <typename T>
inline std::vector<T>* grad_sink(Node<T>& self, std::size_t i) {
  auto& in = self.inputs[i];
  if (!in || !in->requires_grad) return nullptr;
  in->ensure_grad();
  return &in->grad;
}

}  // namespace detail

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace muse
