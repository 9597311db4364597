#pragma once

#include <algorithm>
#include <cmath>
#include <limits>

namespace unihead {

/// Tracks how close a forward pass comes to a point where it is only piecewise
/// smooth (ReLU at 0, bilinear taps at integer coordinates). Inactive unless a
/// KinkScope is alive on the calling thread.
class KinkMonitor {
 public:
  void note(double distance) { margin_ = std::min(margin_, distance); }
  double margin() const { return margin_; }

  static KinkMonitor*& active() {
    thread_local KinkMonitor* m = nullptr;
    return m;
  }

 private:
  double margin_ = std::numeric_limits<double>::infinity();
};

class KinkScope {
 public:
  explicit KinkScope(KinkMonitor& m) : prev_(KinkMonitor::active()) { KinkMonitor::active() = &m; }
  ~KinkScope() { KinkMonitor::active() = prev_; }
  KinkScope(const KinkScope&) = delete;
  KinkScope& operator=(const KinkScope&) = delete;

 private:
  KinkMonitor* prev_;
};

namespace kinks {

inline void note(double distance) {
  if (auto* m = KinkMonitor::active()) m->note(distance);
}

/// distance from v to the nearest integer
inline void note_grid(double v) {
  if (auto* m = KinkMonitor::active()) m->note(std::fabs(v - std::round(v)));
}

}  // namespace kinks

}  // namespace unihead
