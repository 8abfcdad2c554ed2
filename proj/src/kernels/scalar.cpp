#include <algorithm>
#include <cmath>
#include <vector>

#include "mpq/kernels/kernels.hpp"

namespace mpq::kernels {
namespace {
namespace impl {

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate) {
  // Each c(i,j) is summed over p in ascending order starting from zero.
  std::vector<double> row(n);
  for (std::size_t i = 0; i < m; ++i) {
    if (trans_b) {
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = trans_a ? a[p * m + i] : a[i * k + p];
          acc += av * b[j * k + p];
        }
        row[j] = acc;
      }
    } else {
      std::fill(row.begin(), row.end(), 0.0);
      for (std::size_t p = 0; p < k; ++p) {
        const double av = trans_a ? a[p * m + i] : a[i * k + p];
        const double* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
      }
    }
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] = accumulate ? crow[j] + row[j] : row[j];
  }
}

void add(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}
void sub(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}
void mul(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}
void scale(const double* a, double s, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * s;
}
void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const double t = alpha * x[i];
    y[i] = y[i] + t;
  }
}
void relu(const double* x, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
}
void relu_mask(const double* x, const double* g, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > 0.0 ? g[i] : 0.0;
}
void quantize(const double* x, double* out, std::size_t n, double step, double qmax) {
  for (std::size_t i = 0; i < n; ++i) {
    double r = std::round(x[i] / step);
    r = std::min(std::max(r, -qmax), qmax);
    out[i] = r * step;
  }
}
double max_abs(const double* x, std::size_t n) {
  double m = 0.0;
  for (std::size_t i = 0; i < n; ++i) m = std::max(m, std::fabs(x[i]));
  return m;
}
double sum_squares(const double* x, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i] * x[i];
  return s;
}
double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

}  // namespace impl
}  // namespace

const KernelTable& scalar_table() {
  static const KernelTable table{Isa::scalar, "scalar",
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
  return table;
}

}  // namespace mpq::kernels
