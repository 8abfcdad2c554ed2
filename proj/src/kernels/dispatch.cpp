#include <cstdlib>
#include <stdexcept>
#include <string>

#include "mpq/kernels/kernels.hpp"

namespace mpq::kernels {

#if !defined(MPQ_HAVE_AVX2)
const KernelTable* avx2_table() { return nullptr; }
#endif

namespace {

const KernelTable* initial_table() {
  if (const char* env = std::getenv("MPQ_KERNELS")) {
    const Isa isa = parse_isa(env);
    if (isa == Isa::scalar) return &scalar_table();
    if (const KernelTable* t = avx2_table()) return t;
    throw std::invalid_argument("MPQ_KERNELS=avx2 requested but not supported on this CPU");
  }
  if (const KernelTable* t = avx2_table()) return t;
  return &scalar_table();
}

const KernelTable*& current() {
  static const KernelTable* table = initial_table();
  return table;
}

}  // namespace

const KernelTable& active() { return *current(); }

void select(Isa isa) {
  if (isa == Isa::scalar) {
    current() = &scalar_table();
    return;
  }
  const KernelTable* t = avx2_table();
  if (!t) throw std::invalid_argument("avx2 kernels unavailable");
  current() = t;
}

Isa parse_isa(std::string_view name) {
  if (name == "scalar") return Isa::scalar;
  if (name == "avx2") return Isa::avx2;
  throw std::invalid_argument("unknown kernel variant '" + std::string(name) + "'");
}

void add(std::span<const double> a, std::span<const double> b, std::span<double> out) {
  active().add(a.data(), b.data(), out.data(), out.size());
}
void sub(std::span<const double> a, std::span<const double> b, std::span<double> out) {
  active().sub(a.data(), b.data(), out.data(), out.size());
}
void mul(std::span<const double> a, std::span<const double> b, std::span<double> out) {
  active().mul(a.data(), b.data(), out.data(), out.size());
}
void scale(std::span<const double> a, double s, std::span<double> out) {
  active().scale(a.data(), s, out.data(), out.size());
}
void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  active().axpy(alpha, x.data(), y.data(), y.size());
}
void relu(std::span<const double> x, std::span<double> out) {
  active().relu(x.data(), out.data(), out.size());
}
void relu_mask(std::span<const double> x, std::span<const double> g, std::span<double> out) {
  active().relu_mask(x.data(), g.data(), out.data(), out.size());
}
void quantize(std::span<const double> x, std::span<double> out, double step, double qmax) {
  active().quantize(x.data(), out.data(), out.size(), step, qmax);
}
double max_abs(std::span<const double> x) { return active().max_abs(x.data(), x.size()); }
double sum_squares(std::span<const double> x) { return active().sum_squares(x.data(), x.size()); }
double dot(std::span<const double> a, std::span<const double> b) {
  return active().dot(a.data(), b.data(), a.size());
}
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate) {
  active().gemm(trans_a, trans_b, m, n, k, a, b, c, accumulate);
}

}  // namespace mpq::kernels
