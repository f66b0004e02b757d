#pragma once

// Dense float64 inner loops shared by the model and the aggregation rules.
//
// Every kernel has a portable scalar reference and an AVX2 variant. The
// scalar reductions accumulate in four interleaved partial sums combined as
// (s0 + s2) + (s1 + s3), the same order the 4-lane AVX2 code produces, so
// both paths return bit-identical results. Elementwise kernels are bit-exact
// as long as the build keeps floating-point contraction off.

#include <cstddef>
#include <span>
#include <string_view>

namespace fedsense::kernels {

struct KernelTable {
  const char* name;
  double (*dot)(const double* a, const double* b, std::size_t n);
  double (*sum_squares)(const double* a, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // y = beta * y + alpha * x
  void (*axpby)(double alpha, const double* x, double beta, double* y, std::size_t n);
  // m = b1 m + (1 - b1) g;  v = b2 v + (1 - b2) g^2;  theta -= lr m / (sqrt(v) + eps)
  void (*adam_like)(double* theta, double* m, double* v, const double* g, std::size_t n,
                    double beta1, double beta2, double lr, double eps);
};

const KernelTable& scalar_table();
// nullptr when the binary was built without AVX2 support.
const KernelTable* avx2_table();

bool cpu_has_avx2();

// Table used by the wrappers below. Chosen once: AVX2 when the CPU supports
// it, unless FEDSENSE_SIMD=scalar is set in the environment.
const KernelTable& active();
// Overrides the selection; intended for tests and benchmarks.
void select(const KernelTable& table);

inline double dot(std::span<const double> a, std::span<const double> b) {
  return active().dot(a.data(), b.data(), a.size());
}
inline double sum_squares(std::span<const double> a) {
  return active().sum_squares(a.data(), a.size());
}
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  active().axpy(alpha, x.data(), y.data(), y.size());
}
inline void axpby(double alpha, std::span<const double> x, double beta, std::span<double> y) {
  active().axpby(alpha, x.data(), beta, y.data(), y.size());
}
inline void adam_like(std::span<double> theta, std::span<double> m, std::span<double> v,
                      std::span<const double> g, double beta1, double beta2, double lr,
                      double eps) {
  active().adam_like(theta.data(), m.data(), v.data(), g.data(), theta.size(), beta1, beta2, lr,
                     eps);
}

}  // namespace fedsense::kernels
