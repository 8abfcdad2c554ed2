#pragma once

// Inner-loop kernels used by the autodiff primitives.
//
// Every kernel has a scalar reference implementation. Vectorized variants are
// selected once per process from the CPU features and can be overridden with
// MPQ_KERNELS=scalar|avx2 or `select()`. Elementwise kernels are bitwise
// identical across variants; reductions (gemm, dot, sum_squares) agree to
// rounding because the summation order differs.

#include <cstddef>
#include <span>
#include <string_view>

namespace mpq::kernels {

enum class Isa { scalar, avx2 };

struct KernelTable {
  Isa isa;
  const char* name;

  // c[m×n] = op(a)·op(b) (or += when accumulate). a is m×k (k×m if trans_a),
  // b is k×n (n×k if trans_b), all row-major and densely packed.
  void (*gemm)(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
               const double* a, const double* b, double* c, bool accumulate);

  void (*add)(const double* a, const double* b, double* out, std::size_t n);
  void (*sub)(const double* a, const double* b, double* out, std::size_t n);
  void (*mul)(const double* a, const double* b, double* out, std::size_t n);
  void (*scale)(const double* a, double s, double* out, std::size_t n);
  // y += alpha * x, computed as a separate multiply and add.
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  void (*relu)(const double* x, double* out, std::size_t n);
  // out = x > 0 ? g : 0
  void (*relu_mask)(const double* x, const double* g, double* out, std::size_t n);
  // out = clamp(round_half_away(x / step), -qmax, qmax) * step
  void (*quantize)(const double* x, double* out, std::size_t n, double step, double qmax);

  double (*max_abs)(const double* x, std::size_t n);
  double (*sum_squares)(const double* x, std::size_t n);
  double (*dot)(const double* a, const double* b, std::size_t n);
};

const KernelTable& scalar_table();
// nullptr when the variant was not compiled in or the CPU lacks the features.
const KernelTable* avx2_table();

const KernelTable& active();
// Throws std::invalid_argument if the requested variant is unavailable.
void select(Isa isa);
Isa parse_isa(std::string_view name);

// Span front-ends over the active table.
void add(std::span<const double> a, std::span<const double> b, std::span<double> out);
void sub(std::span<const double> a, std::span<const double> b, std::span<double> out);
void mul(std::span<const double> a, std::span<const double> b, std::span<double> out);
void scale(std::span<const double> a, double s, std::span<double> out);
void axpy(double alpha, std::span<const double> x, std::span<double> y);
void relu(std::span<const double> x, std::span<double> out);
void relu_mask(std::span<const double> x, std::span<const double> g, std::span<double> out);
void quantize(std::span<const double> x, std::span<double> out, double step, double qmax);
double max_abs(std::span<const double> x);
double sum_squares(std::span<const double> x);
double dot(std::span<const double> a, std::span<const double> b);
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate = false);

}  // namespace mpq::kernels
