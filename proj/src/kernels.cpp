#include "rconet/kernels.hpp"

#include <atomic>
#include <cstdlib>

#include "rconet/errors.hpp"

namespace rconet::kernels {

#if !defined(RCONET_BUILD_AVX2)
const Ops* avx2_ops() { return nullptr; }
#endif
#if !defined(RCONET_BUILD_NEON)
const Ops* neon_ops() { return nullptr; }
#endif

namespace {

const Ops* pick_auto() {
  if (const Ops* v = avx2_ops()) return v;
  if (const Ops* v = neon_ops()) return v;
  return &scalar_ops();
}

const Ops* pick_initial() {
  if (const char* env = std::getenv("RCONET_SIMD")) {
    const std::string want(env);
    if (want == "scalar") return &scalar_ops();
    if (want == "avx2" && avx2_ops()) return avx2_ops();
    if (want == "neon" && neon_ops()) return neon_ops();
    // Unknown or unsupported request falls back to auto rather than failing
    // the whole process at startup.
  }
  return pick_auto();
}

std::atomic<const Ops*>& slot() {
  static std::atomic<const Ops*> s{pick_initial()};
  return s;
}

}  // namespace

const Ops& active() { return *slot().load(std::memory_order_relaxed); }

void force(const std::string& name) {
  if (name == "auto") {
    slot().store(pick_auto(), std::memory_order_relaxed);
    return;
  }
  if (name == "scalar") {
    slot().store(&scalar_ops(), std::memory_order_relaxed);
    return;
  }
  if (name == "avx2") {
    if (const Ops* v = avx2_ops()) {
      slot().store(v, std::memory_order_relaxed);
      return;
    }
    throw ContractError("avx2 kernels unavailable on this cpu/build");
  }
  if (name == "neon") {
    if (const Ops* v = neon_ops()) {
      slot().store(v, std::memory_order_relaxed);
      return;
    }
    throw ContractError("neon kernels unavailable on this cpu/build");
  }
  throw ContractError("unknown kernel variant: " + name);
}

}  // namespace rconet::kernels
