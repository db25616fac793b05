#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace didr {

/// Keep large tape buffers on the heap instead of mapping and unmapping them every step.
/// Returns false when the platform allocator does not take the hint.
inline bool tune_allocator() {
#if defined(__GLIBC__)
  constexpr int kMmapThreshold = 32 << 20;  // glibc's ceiling on 64-bit
  constexpr int kTrimThreshold = 1 << 30;
  return mallopt(M_MMAP_THRESHOLD, kMmapThreshold) == 1 && mallopt(M_TRIM_THRESHOLD, kTrimThreshold) == 1;
#else
  return false;
#endif
}

}  // namespace didr
