// AVX2 + FMA variants. This translation unit is compiled with -mavx2 -mfma;
// nothing here runs unless dispatch confirmed the CPU supports both.

#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "mpq/kernels/kernels.hpp"

namespace mpq::kernels {
namespace {
namespace impl {

// Rows [i0, i0+R) of c over packed a (m×k) and b (k×n).
template <int R>
void gemm_rows(std::size_t i0, std::size_t n, std::size_t k, const double* a, const double* b,
               double* c, bool accumulate) {
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8) {
    __m256d acc[R][2];
    for (int r = 0; r < R; ++r) acc[r][0] = acc[r][1] = _mm256_setzero_pd();
    for (std::size_t p = 0; p < k; ++p) {
      const __m256d b0 = _mm256_loadu_pd(b + p * n + j);
      const __m256d b1 = _mm256_loadu_pd(b + p * n + j + 4);
      for (int r = 0; r < R; ++r) {
        const __m256d av = _mm256_broadcast_sd(a + (i0 + r) * k + p);
        acc[r][0] = _mm256_fmadd_pd(av, b0, acc[r][0]);
        acc[r][1] = _mm256_fmadd_pd(av, b1, acc[r][1]);
      }
    }
    for (int r = 0; r < R; ++r) {
      double* crow = c + (i0 + r) * n + j;
      if (accumulate) {
        acc[r][0] = _mm256_add_pd(acc[r][0], _mm256_loadu_pd(crow));
        acc[r][1] = _mm256_add_pd(acc[r][1], _mm256_loadu_pd(crow + 4));
      }
      _mm256_storeu_pd(crow, acc[r][0]);
      _mm256_storeu_pd(crow + 4, acc[r][1]);
    }
  }
  for (; j + 4 <= n; j += 4) {
    __m256d acc[R];
    for (int r = 0; r < R; ++r) acc[r] = _mm256_setzero_pd();
    for (std::size_t p = 0; p < k; ++p) {
      const __m256d b0 = _mm256_loadu_pd(b + p * n + j);
      for (int r = 0; r < R; ++r) {
        acc[r] = _mm256_fmadd_pd(_mm256_broadcast_sd(a + (i0 + r) * k + p), b0, acc[r]);
      }
    }
    for (int r = 0; r < R; ++r) {
      double* crow = c + (i0 + r) * n + j;
      if (accumulate) acc[r] = _mm256_add_pd(acc[r], _mm256_loadu_pd(crow));
      _mm256_storeu_pd(crow, acc[r]);
    }
  }
  for (; j < n; ++j) {
    for (int r = 0; r < R; ++r) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc = std::fma(a[(i0 + r) * k + p], b[p * n + j], acc);
      double* cv = c + (i0 + r) * n + j;
      *cv = accumulate ? *cv + acc : acc;
    }
  }
}

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate) {
  std::vector<double> a_packed;
  std::vector<double> b_packed;
  if (trans_a) {
    a_packed.resize(m * k);
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t i = 0; i < m; ++i) a_packed[i * k + p] = a[p * m + i];
    a = a_packed.data();
  }
  if (trans_b) {
    b_packed.resize(k * n);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) b_packed[p * n + j] = b[j * k + p];
    b = b_packed.data();
  }
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) gemm_rows<4>(i, n, k, a, b, c, accumulate);
  for (; i < m; ++i) gemm_rows<1>(i, n, k, a, b, c, accumulate);
}

template <class VecOp, class ScalarOp>
inline void binary(const double* a, const double* b, double* out, std::size_t n, VecOp vop,
                   ScalarOp sop) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, vop(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = sop(a[i], b[i]);
}

void add(const double* a, const double* b, double* out, std::size_t n) {
  binary(a, b, out, n, [](__m256d x, __m256d y) { return _mm256_add_pd(x, y); },
         [](double x, double y) { return x + y; });
}
void sub(const double* a, const double* b, double* out, std::size_t n) {
  binary(a, b, out, n, [](__m256d x, __m256d y) { return _mm256_sub_pd(x, y); },
         [](double x, double y) { return x - y; });
}
void mul(const double* a, const double* b, double* out, std::size_t n) {
  binary(a, b, out, n, [](__m256d x, __m256d y) { return _mm256_mul_pd(x, y); },
         [](double x, double y) { return x * y; });
}

void scale(const double* a, double s, double* out, std::size_t n) {
  const __m256d sv = _mm256_set1_pd(s);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), sv));
  for (; i < n; ++i) out[i] = a[i] * s;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d av = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d t = _mm256_mul_pd(av, _mm256_loadu_pd(x + i));
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), t));
  }
  for (; i < n; ++i) {
    const double t = alpha * x[i];
    y[i] = y[i] + t;
  }
}

void relu(const double* x, double* out, std::size_t n) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d v = _mm256_loadu_pd(x + i);
    _mm256_storeu_pd(out + i, _mm256_and_pd(v, _mm256_cmp_pd(v, zero, _CMP_GT_OQ)));
  }
  for (; i < n; ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_mask(const double* x, const double* g, double* out, std::size_t n) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d mask = _mm256_cmp_pd(_mm256_loadu_pd(x + i), zero, _CMP_GT_OQ);
    _mm256_storeu_pd(out + i, _mm256_and_pd(_mm256_loadu_pd(g + i), mask));
  }
  for (; i < n; ++i) out[i] = x[i] > 0.0 ? g[i] : 0.0;
}

// Round half away from zero, bit-identical to std::round including signed zero.
inline __m256d round_half_away(__m256d v) {
  const __m256d sign_bit = _mm256_set1_pd(-0.0);
  const __m256d t = _mm256_round_pd(v, _MM_FROUND_TO_ZERO | _MM_FROUND_NO_EXC);
  const __m256d frac = _mm256_andnot_pd(sign_bit, _mm256_sub_pd(v, t));
  const __m256d bump = _mm256_cmp_pd(frac, _mm256_set1_pd(0.5), _CMP_GE_OQ);
  const __m256d one = _mm256_or_pd(_mm256_set1_pd(1.0), _mm256_and_pd(sign_bit, v));
  return _mm256_blendv_pd(t, _mm256_add_pd(t, one), bump);
}

void quantize(const double* x, double* out, std::size_t n, double step, double qmax) {
  const __m256d sv = _mm256_set1_pd(step);
  const __m256d hi = _mm256_set1_pd(qmax);
  const __m256d lo = _mm256_set1_pd(-qmax);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d r = round_half_away(_mm256_div_pd(_mm256_loadu_pd(x + i), sv));
    r = _mm256_min_pd(_mm256_max_pd(r, lo), hi);
    _mm256_storeu_pd(out + i, _mm256_mul_pd(r, sv));
  }
  for (; i < n; ++i) {
    double r = std::round(x[i] / step);
    r = std::min(std::max(r, -qmax), qmax);
    out[i] = r * step;
  }
}

inline double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

double max_abs(const double* x, std::size_t n) {
  const __m256d sign_bit = _mm256_set1_pd(-0.0);
  __m256d m = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) m = _mm256_max_pd(m, _mm256_andnot_pd(sign_bit, _mm256_loadu_pd(x + i)));
  alignas(32) double lanes[4];
  _mm256_store_pd(lanes, m);
  double r = std::max(std::max(lanes[0], lanes[1]), std::max(lanes[2], lanes[3]));
  for (; i < n; ++i) r = std::max(r, std::fabs(x[i]));
  return r;
}

double dot(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  }
  double s = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) s = std::fma(a[i], b[i], s);
  return s;
}

double sum_squares(const double* x, std::size_t n) { return dot(x, x, n); }

}  // namespace impl
}  // namespace

const KernelTable* avx2_table() {
  static const KernelTable table{Isa::avx2, "avx2",
                                 impl::gemm,
                                 impl::add,
                                 impl::sub,
                                 impl::mul,
                                 impl::scale,
                                 impl::axpy,
                                 impl::relu,
                                 impl::relu_mask,
                                 impl::quantize,
                                 impl::max_abs,
                                 impl::sum_squares,
                                 impl::dot};
  static const bool supported = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  return supported ? &table : nullptr;
}

}  // namespace mpq::kernels
