#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace rstereo::flops {

/// Counts multiply-accumulates issued by conv/matmul kernels on this thread
/// while alive. Counts are bucketed by the innermost active Scope label.
class Counter {
 public:
  Counter();
  ~Counter();
  Counter(const Counter&) = delete;
  Counter& operator=(const Counter&) = delete;

  std::uint64_t total() const;
  std::uint64_t get(const std::string& label) const;
  /// Sum over labels starting with `prefix`.
  std::uint64_t prefixed(const std::string& prefix) const;
  const std::map<std::string, std::uint64_t>& by_label() const { return by_label_; }
  void reset() { by_label_.clear(); }

 private:
  friend void add_macs(std::uint64_t);
  std::map<std::string, std::uint64_t> by_label_;
  Counter* previous_;
};

class Scope {
 public:
  explicit Scope(std::string label);
  ~Scope();
  Scope(const Scope&) = delete;
  Scope& operator=(const Scope&) = delete;

 private:
  std::string previous_;
};

void add_macs(std::uint64_t macs);

}  // namespace rstereo::flops
