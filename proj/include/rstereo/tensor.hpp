#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rstereo/errors.hpp"

namespace rstereo {

using Index = std::int64_t;

/// Extents of a dense row-major tensor. Rank 0 denotes a scalar.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<Index> dims);
  explicit Shape(std::vector<Index> dims);

  std::size_t rank() const noexcept { return dims_.size(); }
  Index operator[](std::size_t axis) const { return dims_[axis]; }
  Index numel() const noexcept;
  const std::vector<Index>& dims() const noexcept { return dims_; }
  Index back() const { return dims_.back(); }

  bool operator==(const Shape&) const = default;
  std::string str() const;

 private:
  std::vector<Index> dims_;
};

/// Live and peak bytes held by tensor storage, process wide.
class MemoryStats {
 public:
  static std::size_t current_bytes() noexcept;
  static std::size_t peak_bytes() noexcept;
  /// Resets the high-water mark to the current usage.
  static void reset_peak() noexcept;

  static void on_allocate(std::size_t bytes) noexcept;
  static void on_release(std::size_t bytes) noexcept;
};

template <typename T>
struct TrackingAllocator {
  using value_type = T;
  TrackingAllocator() = default;
  template <typename U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    MemoryStats::on_allocate(n * sizeof(T));
    return std::allocator<T>{}.allocate(n);
  }
  void deallocate(T* p, std::size_t n) noexcept {
    MemoryStats::on_release(n * sizeof(T));
    std::allocator<T>{}.deallocate(p, n);
  }
  template <typename U>
  bool operator==(const TrackingAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using Buffer = std::vector<T, TrackingAllocator<T>>;

/// Gradient recording is on by default; a guard disables it on this thread.
bool grad_enabled() noexcept;

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

std::uint64_t next_sequence() noexcept;

// One vertex of the recorded computation. The sequence number orders nodes by
// creation, so walking reachable nodes by descending sequence replays the tape
// in reverse.
template <typename T>
struct Node {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;
  bool requires_grad = false;
  std::uint64_t seq = next_sequence();
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  bool is_leaf() const noexcept { return !backward; }
  // Adds `g` into this node's gradient, allocating it on first use.
  void accumulate(std::span<const T> g);
  T* grad_ptr();
};

}  // namespace detail

/// Dense row-major tensor with reverse-mode differentiation. Copies share the
/// underlying node; values are immutable once produced except through
/// `mutable_data()` on leaves (parameter updates) and gradient accumulation.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  BasicTensor() = default;
  explicit BasicTensor(NodePtr node) : node_(std::move(node)) {}

  static BasicTensor zeros(const Shape& shape);
  static BasicTensor full(const Shape& shape, T value);
  static BasicTensor from(const Shape& shape, std::span<const T> values);
  static BasicTensor from(const Shape& shape, std::initializer_list<T> values);
  static BasicTensor scalar(T value);
  static BasicTensor uniform(const Shape& shape, T lo, T hi, std::mt19937_64& rng);
  static BasicTensor normal(const Shape& shape, T stddev, std::mt19937_64& rng);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  Index dim(std::size_t axis) const { return node_->shape[axis]; }
  std::size_t rank() const { return node_->shape.rank(); }
  Index numel() const { return node_->shape.numel(); }

  std::span<const T> data() const { return {node_->data.data(), node_->data.size()}; }
  std::span<T> mutable_data() { return {node_->data.data(), node_->data.size()}; }
  T operator[](Index flat) const { return node_->data[static_cast<std::size_t>(flat)]; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  BasicTensor& set_requires_grad(bool on = true);
  bool is_leaf() const { return node_->is_leaf(); }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient values; empty when no gradient has been accumulated.
  std::span<const T> grad() const { return {node_->grad.data(), node_->grad.size()}; }
  void zero_grad() { node_->grad.clear(); }

  /// Back-propagates from this scalar to every reachable node requiring grad.
  /// Leaf gradients accumulate across calls; interior gradients are recomputed.
  void backward() const;

  /// New leaf holding a copy of the values, cut from the graph.
  BasicTensor detach() const;
  template <typename U>
  BasicTensor<U> cast() const;

  const char* op_name() const { return node_->op; }
  const NodePtr& node() const { return node_; }
  bool same_node(const BasicTensor& other) const { return node_ == other.node_; }

 private:
  NodePtr node_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

namespace detail {

// Builds an op result, recording it on the tape when any input requires grad
// and recording is enabled. `backward` reads `self.grad` and pushes into
// `self.inputs[i]` for inputs that require grad.
template <typename T>
BasicTensor<T> make_result(Shape shape, Buffer<T> data, std::vector<BasicTensor<T>> inputs,
                           const char* op, std::function<void(Node<T>&)> backward);

}  // namespace detail

template <typename T>
template <typename U>
BasicTensor<U> BasicTensor<T>::cast() const {
  auto out = std::make_shared<detail::Node<U>>();
  out->shape = node_->shape;
  out->data.assign(node_->data.begin(), node_->data.end());
  return BasicTensor<U>(std::move(out));
}

}  // namespace rstereo
