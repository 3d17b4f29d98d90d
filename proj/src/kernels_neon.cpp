// NEON variants, 2-wide double lanes (aarch64 only).

#include "rconet/kernels.hpp"

#if defined(RCONET_BUILD_NEON)

#include <arm_neon.h>

namespace rconet::kernels {
namespace {

void v_add(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(out + i, vaddq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void v_sub(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(out + i, vsubq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
  for (; i < n; ++i) out[i] = a[i] - b[i];
}

void v_mul(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(out + i, vmulq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void v_scale(const double* a, double s, double* out, std::size_t n) {
  const float64x2_t vs = vdupq_n_f64(s);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(out + i, vmulq_f64(vld1q_f64(a + i), vs));
  for (; i < n; ++i) out[i] = a[i] * s;
}

void v_axpy(double s, const double* x, double* y, std::size_t n) {
  const float64x2_t vs = vdupq_n_f64(s);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(y + i, vfmaq_f64(vld1q_f64(y + i), vs, vld1q_f64(x + i)));
  for (; i < n; ++i) y[i] = __builtin_fma(s, x[i], y[i]);
}

void v_mla(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2)
    vst1q_f64(out + i, vfmaq_f64(vld1q_f64(out + i), vld1q_f64(a + i), vld1q_f64(b + i)));
  for (; i < n; ++i) out[i] = __builtin_fma(a[i], b[i], out[i]);
}

double v_dot(const double* a, const double* b, std::size_t n) {
  float64x2_t acc = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) acc = vfmaq_f64(acc, vld1q_f64(a + i), vld1q_f64(b + i));
  double r = vgetq_lane_f64(acc, 0) + vgetq_lane_f64(acc, 1);
  for (; i < n; ++i) r += a[i] * b[i];
  return r;
}

double v_sum(const double* a, std::size_t n) {
  float64x2_t acc = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) acc = vaddq_f64(acc, vld1q_f64(a + i));
  double r = vgetq_lane_f64(acc, 0) + vgetq_lane_f64(acc, 1);
  for (; i < n; ++i) r += a[i];
  return r;
}

double v_max(const double* a, std::size_t n) {
  if (n < 4) {
    double m = a[0];
    for (std::size_t i = 1; i < n; ++i)
      if (a[i] > m) m = a[i];
    return m;
  }
  float64x2_t acc = vld1q_f64(a);
  std::size_t i = 2;
  for (; i + 2 <= n; i += 2) acc = vmaxq_f64(acc, vld1q_f64(a + i));
  double m = vgetq_lane_f64(acc, 0);
  if (vgetq_lane_f64(acc, 1) > m) m = vgetq_lane_f64(acc, 1);
  for (; i < n; ++i)
    if (a[i] > m) m = a[i];
  return m;
}

}  // namespace

const Ops* neon_ops() {
  static const Ops ops{"neon", v_add, v_sub, v_mul, v_scale,
                       v_axpy, v_mla, v_dot, v_sum, v_max};
  return &ops;
}

}  // namespace rconet::kernels

#endif  // RCONET_BUILD_NEON
