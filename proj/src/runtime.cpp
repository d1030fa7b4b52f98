#include "petlab/runtime.hpp"

#include <cstdlib>  // defines __GLIBC__

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace petlab {

void runtime_init() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 64 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
  // grow the heap in large steps; FT otherwise page-faults on every step
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

}  // namespace petlab
