#pragma once

namespace sweepkey::threads {

// Applies the SWEEPKEY_THREADS cap to the OpenMP pool. Call once at startup.
void init_from_env();

int max_threads();

} // namespace sweepkey::threads
