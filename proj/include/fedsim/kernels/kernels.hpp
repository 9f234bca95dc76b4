#pragma once

// Dense double-precision kernels behind the autodiff engine.
//
// Every kernel has a portable scalar reference and, where the target allows,
// an AVX2+FMA (x86-64) or NEON (aarch64) variant. The variant is picked once at
// startup from CPU features; FEDSIM_KERNEL=scalar forces the reference path.
// All matrices are row-major with explicit leading dimensions.

#include <cstddef>
#include <string_view>

namespace fedsim::kernels {

enum class Backend { Scalar, Avx2, Neon };

struct KernelTable {
  // C[m,n] (+)= A[m,k] * B[k,n]
  void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                  const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);
  // C[m,n] (+)= A[m,k] * B[n,k]^T
  void (*gemm_nt)(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                  const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);
  // C[m,n] (+)= A[k,m]^T * B[k,n]
  void (*gemm_tn)(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                  const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);
  double (*dot)(std::size_t n, const double* x, const double* y);
  // y += alpha * x
  void (*axpy)(std::size_t n, double alpha, const double* x, double* y);
};

const KernelTable& scalar_table();
#if defined(__x86_64__) || defined(_M_X64)
const KernelTable& avx2_table();
#endif
#if defined(__aarch64__)
const KernelTable& neon_table();
#endif

bool backend_supported(Backend backend);

// Table used by the tensor engine. Thread-safe after first call.
const KernelTable& active();
Backend active_backend();
std::string_view backend_name(Backend backend);

// Switches the process-wide table; intended for tests and benchmarks only.
// Throws std::invalid_argument when the backend is unavailable on this CPU.
void set_backend(Backend backend);

}  // namespace fedsim::kernels
