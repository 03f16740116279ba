#pragma once

namespace ehs {

// Internal parallelism cap. Resolution order: explicit set_threads() call,
// EH_NUM_THREADS env var, then the OpenMP default. Every parallel kernel
// assigns whole output elements to threads and keeps each reduction in a
// fixed serial order, so results are bitwise identical at any thread count.
int threads();
void set_threads(int n);

} // namespace ehs
