#include <atomic>
#include <cstdlib>
#include <string_view>

#include "fedsense/kernels.hpp"

namespace fedsense::kernels {
namespace {

const KernelTable* pick_default() {
  if (const char* env = std::getenv("FEDSENSE_SIMD"); env && std::string_view(env) == "scalar") {
    return &scalar_table();
  }
  if (const KernelTable* t = avx2_table(); t && cpu_has_avx2()) return t;
  return &scalar_table();
}

std::atomic<const KernelTable*>& slot() {
  static std::atomic<const KernelTable*> current{pick_default()};
  return current;
}

}  // namespace

bool cpu_has_avx2() {
#if defined(__x86_64__) && (defined(__GNUC__) || defined(__clang__))
  return __builtin_cpu_supports("avx2");
#else
  return false;
#endif
}

const KernelTable& active() { return *slot().load(std::memory_order_relaxed); }

void select(const KernelTable& table) { slot().store(&table, std::memory_order_relaxed); }

}  // namespace fedsense::kernels
