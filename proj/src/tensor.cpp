#include "rstereo/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace rstereo {

Shape::Shape(std::initializer_list<Index> dims) : Shape(std::vector<Index>(dims)) {}

Shape::Shape(std::vector<Index> dims) : dims_(std::move(dims)) {
  for (Index d : dims_) {
    if (d <= 0) throw DimensionError("non-positive extent in shape " + str());
  }
}

Index Shape::numel() const noexcept {
  Index n = 1;
  for (Index d : dims_) n *= d;
  return n;
}

std::string Shape::str() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? ", " : "") << dims_[i];
  os << ']';
  return os.str();
}

namespace {
std::atomic<std::size_t> g_current{0};
std::atomic<std::size_t> g_peak{0};
std::atomic<std::uint64_t> g_sequence{0};
thread_local bool t_grad_enabled = true;
}  // namespace

std::size_t MemoryStats::current_bytes() noexcept { return g_current.load(); }
std::size_t MemoryStats::peak_bytes() noexcept { return g_peak.load(); }
void MemoryStats::reset_peak() noexcept { g_peak.store(g_current.load()); }

void MemoryStats::on_allocate(std::size_t bytes) noexcept {
  const std::size_t now = g_current.fetch_add(bytes) + bytes;
  std::size_t peak = g_peak.load();
  while (now > peak && !g_peak.compare_exchange_weak(peak, now)) {
  }
}

void MemoryStats::on_release(std::size_t bytes) noexcept { g_current.fetch_sub(bytes); }

bool grad_enabled() noexcept { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

namespace detail {

std::uint64_t next_sequence() noexcept { return g_sequence.fetch_add(1); }

template <typename T>
void Node<T>::accumulate(std::span<const T> g) {
  if (grad.empty()) {
    grad.assign(g.begin(), g.end());
    return;
  }
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
}

template <typename T>
T* Node<T>::grad_ptr() {
  if (grad.empty()) grad.assign(data.size(), T(0));
  return grad.data();
}

template <typename T>
BasicTensor<T> make_result(Shape shape, Buffer<T> data, std::vector<BasicTensor<T>> inputs,
                           const char* op, std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  if (grad_enabled()) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const BasicTensor<T>& t) { return t.defined() && t.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->backward = std::move(backward);
      node->inputs.reserve(inputs.size());
      for (auto& t : inputs) node->inputs.push_back(t.node());
    }
  }
  return BasicTensor<T>(std::move(node));
}

template struct Node<float>;
template struct Node<double>;
template BasicTensor<float> make_result(Shape, Buffer<float>, std::vector<BasicTensor<float>>, const char*,
                                        std::function<void(Node<float>&)>);
template BasicTensor<double> make_result(Shape, Buffer<double>, std::vector<BasicTensor<double>>, const char*,
                                         std::function<void(Node<double>&)>);

}  // namespace detail

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(const Shape& shape) {
  return full(shape, T(0));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(const Shape& shape, T value) {
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = shape;
  node->data.assign(static_cast<std::size_t>(shape.numel()), value);
  return BasicTensor(std::move(node));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from(const Shape& shape, std::span<const T> values) {
  if (static_cast<Index>(values.size()) != shape.numel()) {
    throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " + shape.str());
  }
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = shape;
  node->data.assign(values.begin(), values.end());
  return BasicTensor(std::move(node));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from(const Shape& shape, std::initializer_list<T> values) {
  return from(shape, std::span<const T>(values.begin(), values.size()));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value) {
  return full(Shape{}, value);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::uniform(const Shape& shape, T lo, T hi, std::mt19937_64& rng) {
  auto t = zeros(shape);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (T& v : t.node_->data) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::normal(const Shape& shape, T stddev, std::mt19937_64& rng) {
  auto t = zeros(shape);
  std::normal_distribution<double> dist(0.0, stddev);
  for (T& v : t.node_->data) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape().str());
  return node_->data[0];
}

template <typename T>
BasicTensor<T>& BasicTensor<T>::set_requires_grad(bool on) {
  if (!is_leaf()) throw ContractError("requires_grad can only be toggled on leaf tensors");
  node_->requires_grad = on;
  return *this;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  auto out = std::make_shared<detail::Node<T>>();
  out->shape = node_->shape;
  out->data = node_->data;
  return BasicTensor(std::move(out));
}

template <typename T>
void BasicTensor<T>::backward() const {
  if (numel() != 1) throw ContractError("backward() needs a scalar loss, got shape " + shape().str());
  if (!node_->requires_grad) throw ContractError("backward() on a tensor that is not connected to the tape");

  using N = detail::Node<T>;
  std::vector<N*> order;
  std::unordered_set<N*> seen;
  std::vector<N*> stack{node_.get()};
  seen.insert(node_.get());
  while (!stack.empty()) {
    N* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& in : n->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(), [](const N* a, const N* b) { return a->seq > b->seq; });

  for (N* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->data.size(), T(0));
  }
  node_->grad.assign(1, T(1));
  for (N* n : order) {
    if (n->backward) n->backward(*n);
  }
}

template class BasicTensor<float>;
template class BasicTensor<double>;

}  // namespace rstereo
