#include "ehs/parallel.hpp"

#include <cstdlib>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace ehs {

namespace {
int g_threads = 0; // 0 = not resolved yet
}

int threads() {
    if (g_threads > 0) return g_threads;
    if (const char* env = std::getenv("EH_NUM_THREADS")) {
        int n = std::atoi(env);
        if (n > 0) {
            g_threads = n;
            return g_threads;
        }
    }
#ifdef _OPENMP
    g_threads = omp_get_max_threads();
#else
    g_threads = 1;
#endif
    return g_threads;
}

void set_threads(int n) {
    if (n > 0) g_threads = n;
}

} // namespace ehs
