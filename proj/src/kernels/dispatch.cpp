#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <stdexcept>
#include <string>

#include "graphmoe/kernels.hpp"

namespace graphmoe::kernels {
namespace {

bool cpu_supports(Backend b) {
  switch (b) {
    case Backend::kScalar:
      return true;
    case Backend::kAvx2:
#if defined(GRAPHMOE_HAVE_AVX2)
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
    case Backend::kNeon:
#if defined(GRAPHMOE_HAVE_NEON)
      return true;
#else
      return false;
#endif
  }
  return false;
}

const KernelTable& resolve() {
  const char* env = std::getenv("GRAPHMOE_KERNELS");
  const std::string want = env ? env : "auto";
  if (want == "scalar") return table(Backend::kScalar);
  if (want == "avx2") return table(Backend::kAvx2);
  if (want == "neon") return table(Backend::kNeon);
  if (want != "auto") throw std::invalid_argument("GRAPHMOE_KERNELS: unknown backend '" + want + "'");
  const auto avail = available_backends();
  if (std::find(avail.begin(), avail.end(), Backend::kAvx2) != avail.end()) return table(Backend::kAvx2);
  if (std::find(avail.begin(), avail.end(), Backend::kNeon) != avail.end()) return table(Backend::kNeon);
  return table(Backend::kScalar);
}

}  // namespace

std::string_view backend_name(Backend b) {
  switch (b) {
    case Backend::kScalar: return "scalar";
    case Backend::kAvx2: return "avx2";
    case Backend::kNeon: return "neon";
  }
  return "unknown";
}

std::vector<Backend> available_backends() {
  std::vector<Backend> out;
  for (Backend b : {Backend::kScalar, Backend::kAvx2, Backend::kNeon})
    if (cpu_supports(b)) out.push_back(b);
  return out;
}

const KernelTable& table(Backend b) {
  if (!cpu_supports(b))
    throw std::invalid_argument("kernel backend '" + std::string(backend_name(b)) +
                                "' is not available on this machine");
  switch (b) {
#if defined(GRAPHMOE_HAVE_AVX2)
    case Backend::kAvx2: return detail::avx2_table();
#endif
#if defined(GRAPHMOE_HAVE_NEON)
    case Backend::kNeon: return detail::neon_table();
#endif
    default: return detail::scalar_table();
  }
}

const KernelTable& active() {
  static const KernelTable& t = resolve();
  return t;
}

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c, bool accumulate, const KernelTable& kt) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    if (!accumulate) std::memset(crow, 0, n * sizeof(double));
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) kt.axpy(arow[p], b + p * n, crow, n);
  }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c, bool accumulate, const KernelTable& kt) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = kt.dot(arow, b + j * k, k);
      crow[j] = accumulate ? crow[j] + v : v;
    }
  }
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c, bool accumulate, const KernelTable& kt) {
  if (!accumulate) std::memset(c, 0, m * n * sizeof(double));
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) kt.axpy(arow[i], brow, c + i * n, n);
  }
}

}  // namespace graphmoe::kernels
