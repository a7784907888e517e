#pragma once

#include <cstddef>
#include <new>
#include <vector>

namespace aft {

// Live/peak counters of f64 elements held by tensor storage on this thread.
// Every Tensor buffer and every scratch Buffer goes through CountingAllocator,
// so these counters observe all floating point working memory of the library.
struct FloatCounters {
  std::size_t live = 0;
  std::size_t peak = 0;
};

FloatCounters& float_counters() noexcept;

template <class T>
struct CountingAllocator {
  using value_type = T;

  CountingAllocator() noexcept = default;
  template <class U>
  CountingAllocator(const CountingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    auto& c = float_counters();
    c.live += n;
    if (c.live > c.peak) c.peak = c.live;
    return static_cast<T*>(::operator new(n * sizeof(T)));
  }
  void deallocate(T* p, std::size_t n) noexcept {
    float_counters().live -= n;
    ::operator delete(p);
  }

  template <class U>
  bool operator==(const CountingAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<double, CountingAllocator<double>>;

/// Measures the peak number of f64 elements allocated on top of what was
/// live when the probe was created.
class MemoryProbe {
 public:
  MemoryProbe() noexcept;
  MemoryProbe(const MemoryProbe&) = delete;
  MemoryProbe& operator=(const MemoryProbe&) = delete;
  ~MemoryProbe();

  std::size_t peak_above_baseline() const noexcept;
  std::size_t live_above_baseline() const noexcept;

 private:
  std::size_t baseline_;
  std::size_t saved_peak_;
};

}  // namespace aft
