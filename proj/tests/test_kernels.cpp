#include <cmath>
#include <vector>

#include "doctest.h"
#include "rconet/errors.hpp"
#include "rconet/kernels.hpp"
#include "rconet/rng.hpp"

using namespace rconet;

namespace {

std::vector<double> random_vec(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-2.0, 2.0);
  return v;
}

// Sizes straddle the lane width so remainder tails get exercised.
const std::size_t kSizes[] = {1, 2, 3, 4, 5, 7, 8, 15, 16, 17, 64, 129, 1000};

void check_variant_against_scalar(const kernels::Ops& v) {
  const auto& s = kernels::scalar_ops();
  Rng rng(0xbeef);
  for (std::size_t n : kSizes) {
    auto a = random_vec(rng, n);
    auto b = random_vec(rng, n);
    std::vector<double> out_s(n), out_v(n);

    s.add(a.data(), b.data(), out_s.data(), n);
    v.add(a.data(), b.data(), out_v.data(), n);
    CHECK(out_s == out_v);

    s.sub(a.data(), b.data(), out_s.data(), n);
    v.sub(a.data(), b.data(), out_v.data(), n);
    CHECK(out_s == out_v);

    s.mul(a.data(), b.data(), out_s.data(), n);
    v.mul(a.data(), b.data(), out_v.data(), n);
    CHECK(out_s == out_v);

    s.scale(a.data(), 1.7, out_s.data(), n);
    v.scale(a.data(), 1.7, out_v.data(), n);
    CHECK(out_s == out_v);

    // axpy/mla may contract with fma; compare against the exact product-sum
    // with a tight tolerance instead of bitwise.
    std::vector<double> ys(b), yv(b);
    s.axpy(0.37, a.data(), ys.data(), n);
    v.axpy(0.37, a.data(), yv.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(ys[i] == doctest::Approx(yv[i]).epsilon(1e-15));

    std::vector<double> ms(b), mv(b);
    s.mla(a.data(), b.data(), ms.data(), n);
    v.mla(a.data(), b.data(), mv.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(ms[i] == doctest::Approx(mv[i]).epsilon(1e-15));

    // Reductions reassociate; allow accumulated rounding.
    const double tol = 1e-13 * static_cast<double>(n + 1);
    CHECK(std::abs(s.dot(a.data(), b.data(), n) - v.dot(a.data(), b.data(), n)) < tol);
    CHECK(std::abs(s.sum(a.data(), n) - v.sum(a.data(), n)) < tol);
    CHECK(s.max(a.data(), n) == v.max(a.data(), n));
  }
}

}  // namespace

TEST_CASE("scalar kernels compute the reference arithmetic") {
  const auto& s = kernels::scalar_ops();
  const double a[] = {1.0, 2.0, 3.0};
  const double b[] = {4.0, 5.0, 6.0};
  double out[3];
  s.add(a, b, out, 3);
  CHECK(out[0] == 5.0);
  CHECK(out[2] == 9.0);
  CHECK(s.dot(a, b, 3) == 32.0);
  CHECK(s.sum(b, 3) == 15.0);
  CHECK(s.max(a, 3) == 3.0);
}

TEST_CASE("simd variants agree with the scalar reference") {
  bool any = false;
  if (const auto* v = kernels::avx2_ops()) {
    check_variant_against_scalar(*v);
    any = true;
  }
  if (const auto* v = kernels::neon_ops()) {
    check_variant_against_scalar(*v);
    any = true;
  }
  if (!any) {
    MESSAGE("no simd variant available on this platform; scalar only");
  }
}

TEST_CASE("kernel dispatch honors force()") {
  kernels::force("scalar");
  CHECK(std::string(kernels::active().name) == "scalar");
  CHECK_THROWS_AS(kernels::force("nope"), ContractError);
  kernels::force("auto");
  if (kernels::avx2_ops()) CHECK(std::string(kernels::active().name) == "avx2");
}
