#include "sweepkey/threads.hpp"

#include <cstdlib>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace sweepkey::threads {

void init_from_env() {
#ifdef _OPENMP
    const char* env = std::getenv("SWEEPKEY_THREADS");
    if (!env) return;
    try {
        const int cap = std::stoi(env);
        if (cap >= 1 && cap < omp_get_max_threads()) omp_set_num_threads(cap);
    } catch (...) {
        // Malformed value: leave the default pool untouched.
    }
#endif
}

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

} // namespace sweepkey::threads
