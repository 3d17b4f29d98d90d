#pragma once

#include <cstddef>
#include <string>

namespace rconet::kernels {

// Flat-array arithmetic used by the tensor engine's inner loops. Every entry
// has a scalar reference implementation; wider variants (AVX2 on x86-64, NEON
// on aarch64) are selected once at startup and must agree with the reference
// (exactly for the element-local ops, to reassociation tolerance for the
// reductions). All buffers are double precision.
struct Ops {
  const char* name;
  void (*add)(const double* a, const double* b, double* out, std::size_t n);
  void (*sub)(const double* a, const double* b, double* out, std::size_t n);
  void (*mul)(const double* a, const double* b, double* out, std::size_t n);
  void (*scale)(const double* a, double s, double* out, std::size_t n);
  // y += s * x
  void (*axpy)(double s, const double* x, double* y, std::size_t n);
  // out += a ⊙ b
  void (*mla)(const double* a, const double* b, double* out, std::size_t n);
  double (*dot)(const double* a, const double* b, std::size_t n);
  double (*sum)(const double* a, std::size_t n);
  double (*max)(const double* a, std::size_t n);
};

const Ops& scalar_ops();

// Null when the build or the running CPU lacks the instruction set.
const Ops* avx2_ops();
const Ops* neon_ops();

// The active table. Chosen on first use: widest supported variant, unless the
// RCONET_SIMD environment variable ("scalar", "avx2", "neon", "auto") says
// otherwise.
const Ops& active();

// Force a variant by name; used by the equivalence tests. Throws
// ContractError for an unknown or unsupported name.
void force(const std::string& name);

}  // namespace rconet::kernels
