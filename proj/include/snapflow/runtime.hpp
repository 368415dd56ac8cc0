#pragma once

// Process-level runtime setup. Call once at the top of main(), before any
// BLAS call: pins OpenBLAS to one thread (snapflow parallelizes across runs,
// and single-threaded GEMM keeps results bit-reproducible) and picks a
// matching kernel set on CPUs whose CPUID vendor string is masked by the
// hypervisor, where OpenBLAS would otherwise fall back to a generic kernel.

#include <cstdlib>

namespace snapflow {

inline void init_runtime() {
    setenv("OPENBLAS_NUM_THREADS", "1", 0);
#if defined(__x86_64__) || defined(_M_X64)
    if (getenv("OPENBLAS_CORETYPE") == nullptr) {
        if (__builtin_cpu_supports("avx512f"))
            setenv("OPENBLAS_CORETYPE", "SKYLAKEX", 0);
        else if (__builtin_cpu_supports("avx2"))
            setenv("OPENBLAS_CORETYPE", "HASWELL", 0);
    }
#endif
}

}  // namespace snapflow
