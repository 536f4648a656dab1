#include "rstereo/flops.hpp"

#include <numeric>

namespace rstereo::flops {

namespace {
thread_local Counter* t_active = nullptr;
thread_local std::string t_label = "other";
}  // namespace

Counter::Counter() : previous_(t_active) { t_active = this; }
Counter::~Counter() { t_active = previous_; }

std::uint64_t Counter::total() const {
  return std::accumulate(by_label_.begin(), by_label_.end(), std::uint64_t{0},
                         [](std::uint64_t s, const auto& kv) { return s + kv.second; });
}

std::uint64_t Counter::get(const std::string& label) const {
  auto it = by_label_.find(label);
  return it == by_label_.end() ? 0 : it->second;
}

std::uint64_t Counter::prefixed(const std::string& prefix) const {
  std::uint64_t s = 0;
  for (const auto& [label, n] : by_label_) {
    if (label.rfind(prefix, 0) == 0) s += n;
  }
  return s;
}

Scope::Scope(std::string label) : previous_(std::move(t_label)) { t_label = std::move(label); }
Scope::~Scope() { t_label = std::move(previous_); }

void add_macs(std::uint64_t macs) {
  if (t_active) t_active->by_label_[t_label] += macs;
}

}  // namespace rstereo::flops
