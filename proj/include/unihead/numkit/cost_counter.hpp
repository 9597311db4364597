#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace unihead {

struct OpTally {
  std::uint64_t macs = 0;
  std::uint64_t non_mac = 0;
};

/// Dynamic MAC accounting. Forward kernels report into the counter that is
/// active on the calling thread, attributed to the innermost layer scope.
class CostCounter {
 public:
  void add_macs(std::uint64_t n) { tallies_[current()].macs += n; }
  void add_non_mac(std::uint64_t n) { tallies_[current()].non_mac += n; }

  const std::map<std::string, OpTally>& tallies() const { return tallies_; }

  OpTally total() const {
    OpTally t;
    for (const auto& [name, v] : tallies_) {
      t.macs += v.macs;
      t.non_mac += v.non_mac;
    }
    return t;
  }

  OpTally get(const std::string& name) const {
    auto it = tallies_.find(name);
    return it == tallies_.end() ? OpTally{} : it->second;
  }

  void push(std::string name) { stack_.push_back(std::move(name)); }
  void pop() { stack_.pop_back(); }

  static CostCounter*& active() {
    thread_local CostCounter* counter = nullptr;
    return counter;
  }

 private:
  const std::string& current() const {
    static const std::string unscoped = "(unscoped)";
    return stack_.empty() ? unscoped : stack_.back();
  }

  std::map<std::string, OpTally> tallies_;
  std::vector<std::string> stack_;
};

/// Activates a counter on this thread for the lifetime of the scope.
class CountingScope {
 public:
  explicit CountingScope(CostCounter& c) : prev_(CostCounter::active()) { CostCounter::active() = &c; }
  ~CountingScope() { CostCounter::active() = prev_; }
  CountingScope(const CountingScope&) = delete;
  CountingScope& operator=(const CountingScope&) = delete;

 private:
  CostCounter* prev_;
};

/// Names the layer that subsequent kernel work is attributed to.
class LayerScope {
 public:
  explicit LayerScope(std::string name) : counter_(CostCounter::active()) {
    if (counter_) counter_->push(std::move(name));
  }
  ~LayerScope() {
    if (counter_) counter_->pop();
  }
  LayerScope(const LayerScope&) = delete;
  LayerScope& operator=(const LayerScope&) = delete;

 private:
  CostCounter* counter_;
};

namespace cost {

inline void macs(std::uint64_t n) {
  if (auto* c = CostCounter::active()) c->add_macs(n);
}

inline void non_mac(std::uint64_t n) {
  if (auto* c = CostCounter::active()) c->add_non_mac(n);
}

}  // namespace cost

}  // namespace unihead
