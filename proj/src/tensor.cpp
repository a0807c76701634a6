#include "muse/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "muse/errors.hpp"

namespace muse {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

namespace {
thread_local int no_grad_depth = 0;

template <typename T>
void check_finite(const std::string& op, const std::vector<T>& v) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw NumericError(op + ": non-finite value at flat index " + std::to_string(i));
    }
  }
}

// Every node reachable from root, sorted by creation id. Inputs are always
// created before their consumers, so this is a topological order.
template <typename T>
std::vector<Node<T>*> collect(const NodePtr<T>& root) {
  std::vector<Node<T>*> out;
  std::unordered_set<Node<T>*> seen;
  std::vector<Node<T>*> stack{root.get()};
  seen.insert(root.get());
  while (!stack.empty()) {
    Node<T>* n = stack.back();
    stack.pop_back();
    out.push_back(n);
    for (auto& in : n->inputs) {
      if (in && seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  std::sort(out.begin(), out.end(), [](auto* a, auto* b) { return a->id < b->id; });
  return out;
}
}  // namespace

template <typename T>
Tensor<T> make_result(std::string op, Shape shape, std::vector<T> data,
                      std::vector<NodePtr<T>> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  check_finite(op, data);
  auto node = std::make_shared<Node<T>>();
  node->id = next_node_id();
  node->op = std::move(op);
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool any = false;
  if (grad_enabled()) {
    for (auto& in : inputs) {
      if (in && !in->requires_grad) in.reset();
      any = any || static_cast<bool>(in);
    }
  }
  if (any) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

template Tensor<float> make_result(std::string, Shape, std::vector<float>,
                                   std::vector<NodePtr<float>>,
                                   std::function<void(Node<float>&)>);
template Tensor<double> make_result(std::string, Shape, std::vector<double>,
                                    std::vector<NodePtr<double>>,
                                    std::function<void(Node<double>&)>);

}  // namespace detail

NoGradGuard::NoGradGuard() { ++detail::no_grad_depth; }
NoGradGuard::~NoGradGuard() { --detail::no_grad_depth; }
bool grad_enabled() { return detail::no_grad_depth == 0; }

template <typename T>
Tensor<T>::Tensor() : Tensor(Shape{1}, std::vector<T>{T(0)}) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
  detail::check_finite("tensor", data);
  node_ = std::make_shared<detail::Node<T>>();
  node_->id = detail::next_node_id();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::ones(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(1), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
std::size_t Tensor<T>::dim(int i) const {
  const int n = static_cast<int>(ndim());
  const int k = i < 0 ? n + i : i;
  if (k < 0 || k >= n) {
    throw ShapeError("dim " + std::to_string(i) + " out of range for " + shape_str(shape()));
  }
  return node_->shape[static_cast<std::size_t>(k)];
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (node_->backward_fn) throw GraphError("mutable_data on a recorded op result");
  return node_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
  if (node_->backward_fn) throw GraphError("set_requires_grad on a non-leaf");
  node_->requires_grad = on;
}

template <typename T>
void Tensor<T>::zero_grad() {
  node_->grad.clear();
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) {
    throw GraphError("backward: loss must be scalar, got shape " + shape_str(shape()));
  }
  if (node_->consumed) throw GraphError("backward: graph already consumed");
  if (!node_->requires_grad) throw GraphError("backward: loss does not require grad");

  auto order = detail::collect(node_);
  node_->ensure_grad();
  node_->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Release the graph; leaves keep their gradients.
  for (auto* n : order) {
    if (n->backward_fn) {
      n->backward_fn = nullptr;
      n->inputs.clear();
      n->grad.clear();
      n->consumed = true;
    }
  }
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->data, false);
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor(node_->shape, node_->data, node_->requires_grad && !node_->backward_fn);
}

template <typename T>
Graph trace_graph(const Tensor<T>& root) {
  Graph g;
  for (auto* n : detail::collect(root.node())) {
    GraphRecord r;
    r.op = n->op;
    r.output = n->id;
    for (auto& in : n->inputs) {
      if (in) r.inputs.push_back(in->id);
    }
    g.nodes.push_back(std::move(r));
  }
  return g;
}

template class Tensor<float>;
template class Tensor<double>;
template Graph trace_graph(const Tensor<float>&);
template Graph trace_graph(const Tensor<double>&);

}  // namespace muse
