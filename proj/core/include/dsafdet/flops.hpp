#pragma once

#include <cstdint>

namespace dsafdet::flops {

/// Thread-local FLOP accumulator. Every forward op reports its analytic
/// cost here while a counter is armed; the profiler arms it around a
/// single traced forward pass. Convention: 1 multiply-add = 2 FLOPs,
/// activations/pools/elementwise = 1 FLOP per output element.
struct Counter {
  bool active = false;
  int64_t total = 0;
};

inline Counter& counter() {
  static thread_local Counter c;
  return c;
}

inline void add(int64_t n) {
  Counter& c = counter();
  if (c.active) c.total += n;
}

class Scope {
 public:
  Scope() {
    counter().active = true;
    counter().total = 0;
  }
  ~Scope() { counter().active = false; }
  int64_t total() const { return counter().total; }
};

}  // namespace dsafdet::flops
