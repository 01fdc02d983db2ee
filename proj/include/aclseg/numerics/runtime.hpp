#pragma once

#if defined(__SSE__)
#include <xmmintrin.h>
#endif
#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace aclseg::num {

/// Flushes denormal floats to zero on this thread while alive. Tiny
/// gradients late in training otherwise fall into the slow denormal path.
class FlushDenormalsGuard {
public:
    FlushDenormalsGuard() {
#if defined(__SSE__)
        previous_ = _mm_getcsr();
        _mm_setcsr(previous_ | 0x8040u);  // FTZ | DAZ
#endif
    }
    ~FlushDenormalsGuard() {
#if defined(__SSE__)
        _mm_setcsr(previous_);
#endif
    }
    FlushDenormalsGuard(const FlushDenormalsGuard&) = delete;
    FlushDenormalsGuard& operator=(const FlushDenormalsGuard&) = delete;

private:
    unsigned previous_ = 0;
};

/// Keeps large tensor buffers on the heap instead of fresh mmap pages, so
/// repeated allocations of the same sizes stay cheap.
inline void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace aclseg::num
