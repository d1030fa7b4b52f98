#pragma once

namespace petlab {

// Keeps large tensor buffers on the heap instead of fresh mmap'd pages; the
// training loop allocates and frees the same sizes every step. Idempotent.
void runtime_init();

}  // namespace petlab
