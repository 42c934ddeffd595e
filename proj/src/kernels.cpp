#include "alloyforge/kernels.hpp"

#include <algorithm>
#include <cmath>

namespace alloyforge::kernels {

namespace {
constexpr std::size_t kBlock = 4096;
}

// Partial sums per fixed block, combined in block order. The block
// partition does not depend on thread count, so the result is bitwise
// stable under any OpenMP schedule.
double dot(std::span<const double> a, std::span<const double> b) {
  const std::size_t n = a.size();
  const std::size_t nblocks = (n + kBlock - 1) / kBlock;
  std::vector<double> partial(nblocks, 0.0);
#pragma omp parallel for schedule(static)
  for (long long bi = 0; bi < static_cast<long long>(nblocks); ++bi) {
    const std::size_t lo = static_cast<std::size_t>(bi) * kBlock;
    const std::size_t hi = std::min(lo + kBlock, n);
    double s = 0.0;
    for (std::size_t i = lo; i < hi; ++i) s += a[i] * b[i];
    partial[bi] = s;
  }
  double total = 0.0;
  for (double p : partial) total += p;
  return total;
}

double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

void axpby(double ca, std::span<const double> a, double cb,
           std::span<const double> b, std::span<double> out) {
  const long long n = static_cast<long long>(a.size());
#pragma omp parallel for schedule(static)
  for (long long i = 0; i < n; ++i) out[i] = ca * a[i] + cb * b[i];
}

void matmul(const double* x, const double* w, double* y, int rows, int in,
            int cols) {
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    double* yr = y + static_cast<std::size_t>(r) * cols;
    std::fill(yr, yr + cols, 0.0);
    const double* xr = x + static_cast<std::size_t>(r) * in;
    for (int i = 0; i < in; ++i) {
      const double xv = xr[i];
      const double* wi = w + static_cast<std::size_t>(i) * cols;
      for (int c = 0; c < cols; ++c) yr[c] += xv * wi[c];
    }
  }
}

void matmul_bt(const double* g, const double* w, double* y, int rows, int in,
               int cols) {
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const double* gr = g + static_cast<std::size_t>(r) * cols;
    double* yr = y + static_cast<std::size_t>(r) * in;
    for (int i = 0; i < in; ++i) {
      const double* wi = w + static_cast<std::size_t>(i) * cols;
      double s = 0.0;
      for (int c = 0; c < cols; ++c) s += gr[c] * wi[c];
      yr[i] = s;
    }
  }
}

void matmul_at_acc(const double* x, const double* g, double* dw, int rows,
                   int in, int cols) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < in; ++i) {
    double* dwi = dw + static_cast<std::size_t>(i) * cols;
    for (int r = 0; r < rows; ++r) {
      const double xv = x[static_cast<std::size_t>(r) * in + i];
      const double* gr = g + static_cast<std::size_t>(r) * cols;
      for (int c = 0; c < cols; ++c) dwi[c] += xv * gr[c];
    }
  }
}

void softmax_row(double* row, int n) {
  double m = row[0];
  for (int i = 1; i < n; ++i) m = std::max(m, row[i]);
  double z = 0.0;
  for (int i = 0; i < n; ++i) {
    row[i] = std::exp(row[i] - m);
    z += row[i];
  }
  const double inv = 1.0 / z;
  for (int i = 0; i < n; ++i) row[i] *= inv;
}

}  // namespace alloyforge::kernels
