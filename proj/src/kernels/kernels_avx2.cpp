#include "fedsense/kernels.hpp"

#if defined(FEDSENSE_HAVE_AVX2)
#include <immintrin.h>

#include <cmath>

namespace fedsense::kernels {
namespace {

// Lane j of the accumulator holds s_j of the scalar reference.
double reduce4(__m256d acc) {
  const __m128d lo = _mm256_castpd256_pd128(acc);     // s0 s1
  const __m128d hi = _mm256_extractf128_pd(acc, 1);   // s2 s3
  const __m128d pair = _mm_add_pd(lo, hi);            // s0+s2 s1+s3
  const __m128d swapped = _mm_unpackhi_pd(pair, pair);
  return _mm_cvtsd_f64(_mm_add_sd(pair, swapped));
}

double dot_avx2(const double* a, const double* b, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d prod = _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i));
    acc = _mm256_add_pd(acc, prod);
  }
  double s = reduce4(acc);
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

double sum_squares_avx2(const double* a, std::size_t n) { return dot_avx2(a, a, n); }

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d prod = _mm256_mul_pd(va, _mm256_loadu_pd(x + i));
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), prod));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void axpby_avx2(double alpha, const double* x, double beta, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  const __m256d vb = _mm256_set1_pd(beta);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d by = _mm256_mul_pd(vb, _mm256_loadu_pd(y + i));
    const __m256d ax = _mm256_mul_pd(va, _mm256_loadu_pd(x + i));
    _mm256_storeu_pd(y + i, _mm256_add_pd(by, ax));
  }
  for (; i < n; ++i) y[i] = beta * y[i] + alpha * x[i];
}

void adam_like_avx2(double* theta, double* m, double* v, const double* g, std::size_t n,
                    double beta1, double beta2, double lr, double eps) {
  const double c1 = 1.0 - beta1;
  const double c2 = 1.0 - beta2;
  const __m256d vb1 = _mm256_set1_pd(beta1);
  const __m256d vb2 = _mm256_set1_pd(beta2);
  const __m256d vc1 = _mm256_set1_pd(c1);
  const __m256d vc2 = _mm256_set1_pd(c2);
  const __m256d vlr = _mm256_set1_pd(lr);
  const __m256d veps = _mm256_set1_pd(eps);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d gi = _mm256_loadu_pd(g + i);
    const __m256d mi = _mm256_add_pd(_mm256_mul_pd(vb1, _mm256_loadu_pd(m + i)),
                                     _mm256_mul_pd(vc1, gi));
    const __m256d vi = _mm256_add_pd(_mm256_mul_pd(vb2, _mm256_loadu_pd(v + i)),
                                     _mm256_mul_pd(vc2, _mm256_mul_pd(gi, gi)));
    const __m256d step =
        _mm256_div_pd(_mm256_mul_pd(vlr, mi), _mm256_add_pd(_mm256_sqrt_pd(vi), veps));
    _mm256_storeu_pd(m + i, mi);
    _mm256_storeu_pd(v + i, vi);
    _mm256_storeu_pd(theta + i, _mm256_sub_pd(_mm256_loadu_pd(theta + i), step));
  }
  for (; i < n; ++i) {
    m[i] = beta1 * m[i] + c1 * g[i];
    v[i] = beta2 * v[i] + c2 * (g[i] * g[i]);
    theta[i] -= lr * m[i] / (std::sqrt(v[i]) + eps);
  }
}

}  // namespace

const KernelTable* avx2_table() {
  static const KernelTable table{"avx2",    dot_avx2,   sum_squares_avx2,
                                 axpy_avx2, axpby_avx2, adam_like_avx2};
  return &table;
}

}  // namespace fedsense::kernels

#else

namespace fedsense::kernels {
const KernelTable* avx2_table() { return nullptr; }
}  // namespace fedsense::kernels

#endif
