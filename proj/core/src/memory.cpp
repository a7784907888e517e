#include "aft/memory.hpp"

#include <algorithm>

namespace aft {

FloatCounters& float_counters() noexcept {
  thread_local FloatCounters counters;
  return counters;
}

MemoryProbe::MemoryProbe() noexcept {
  auto& c = float_counters();
  baseline_ = c.live;
  saved_peak_ = c.peak;
  c.peak = c.live;
}

MemoryProbe::~MemoryProbe() {
  auto& c = float_counters();
  c.peak = std::max(c.peak, saved_peak_);
}

std::size_t MemoryProbe::peak_above_baseline() const noexcept {
  const auto& c = float_counters();
  return c.peak > baseline_ ? c.peak - baseline_ : 0;
}

std::size_t MemoryProbe::live_above_baseline() const noexcept {
  const auto& c = float_counters();
  return c.live > baseline_ ? c.live - baseline_ : 0;
}

}  // namespace aft
