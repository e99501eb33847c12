#pragma once

// Dense f64 inner-loop kernels.
//
// Every kernel has a scalar reference implementation; AVX2+FMA (x86-64) and
// NEON (aarch64) variants are compiled when the toolchain targets them and are
// selected at runtime. The active backend is resolved once per process from the
// CPU features and the GRAPHMOE_KERNELS environment variable
// (auto | scalar | avx2 | neon) and is immutable afterwards.

#include <cstddef>
#include <string_view>
#include <vector>

namespace graphmoe::kernels {

enum class Backend { kScalar, kAvx2, kNeon };

std::string_view backend_name(Backend b);

struct KernelTable {
  Backend backend;
  double (*dot)(const double* a, const double* b, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // out = a + b
  void (*add)(const double* a, const double* b, double* out, std::size_t n);
  // out = a * b
  void (*mul)(const double* a, const double* b, double* out, std::size_t n);
  // y += a * b
  void (*mul_acc)(const double* a, const double* b, double* y, std::size_t n);
  // out = max(x, 0)
  void (*relu)(const double* x, double* out, std::size_t n);
  // gin += (x > 0) ? gout : 0
  void (*relu_backward)(const double* x, const double* gout, double* gin, std::size_t n);
  // y *= alpha
  void (*scale)(double alpha, double* y, std::size_t n);
};

// Backends compiled into this binary and supported by the running CPU.
std::vector<Backend> available_backends();

const KernelTable& table(Backend b);

// The process-wide selection (first call resolves it).
const KernelTable& active();

// Row-major GEMM family built on the active table. C is m x n.
// When accumulate is false C is overwritten, otherwise C += product.
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c, bool accumulate, const KernelTable& kt = active());
// C = A * B^T with A m x k, B n x k.
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c, bool accumulate, const KernelTable& kt = active());
// C = A^T * B with A k x m, B k x n.
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c, bool accumulate, const KernelTable& kt = active());

namespace detail {
const KernelTable& scalar_table();
#if defined(GRAPHMOE_HAVE_AVX2)
const KernelTable& avx2_table();
#endif
#if defined(GRAPHMOE_HAVE_NEON)
const KernelTable& neon_table();
#endif
}  // namespace detail

}  // namespace graphmoe::kernels
