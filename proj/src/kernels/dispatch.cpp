#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "fedsim/kernels/kernels.hpp"

namespace fedsim::kernels {
namespace {

Backend detect() {
  if (const char* forced = std::getenv("FEDSIM_KERNEL"); forced != nullptr && std::string(forced) == "scalar")
    return Backend::Scalar;
#if defined(__x86_64__) || defined(_M_X64)
  if (backend_supported(Backend::Avx2)) return Backend::Avx2;
#endif
#if defined(__aarch64__)
  return Backend::Neon;
#endif
  return Backend::Scalar;
}

const KernelTable* table_for(Backend backend) {
  switch (backend) {
#if defined(__x86_64__) || defined(_M_X64)
    case Backend::Avx2:
      return &avx2_table();
#endif
#if defined(__aarch64__)
    case Backend::Neon:
      return &neon_table();
#endif
    default:
      return &scalar_table();
  }
}

struct State {
  std::atomic<Backend> backend;
  std::atomic<const KernelTable*> table;
  State() : backend(detect()), table(table_for(backend.load())) {}
};

State& state() {
  static State s;
  return s;
}

}  // namespace

bool backend_supported(Backend backend) {
  switch (backend) {
    case Backend::Scalar:
      return true;
    case Backend::Avx2:
#if defined(__x86_64__) || defined(_M_X64)
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
    case Backend::Neon:
#if defined(__aarch64__)
      return true;
#else
      return false;
#endif
  }
  return false;
}

const KernelTable& active() { return *state().table.load(std::memory_order_acquire); }

Backend active_backend() { return state().backend.load(); }

std::string_view backend_name(Backend backend) {
  switch (backend) {
    case Backend::Scalar:
      return "scalar";
    case Backend::Avx2:
      return "avx2";
    case Backend::Neon:
      return "neon";
  }
  return "unknown";
}

void set_backend(Backend backend) {
  if (!backend_supported(backend))
    throw std::invalid_argument("kernel backend not supported on this CPU: " + std::string(backend_name(backend)));
  state().backend.store(backend);
  state().table.store(table_for(backend), std::memory_order_release);
}

}  // namespace fedsim::kernels
