#pragma once

#include <cstddef>
#include <span>
#include <vector>

// OpenMP-parallel numeric kernels. All reductions use fixed-size blocks
// combined in block order, so results are bitwise identical regardless of
// thread count or schedule. Serial reference versions live in
// alloyforge::serial (serial_ref.hpp) and are compared in tests and in
// bench_kernels.
namespace alloyforge::kernels {

// Blocked deterministic dot product.
double dot(std::span<const double> a, std::span<const double> b);

double l2_norm(std::span<const double> a);

// out[i] = ca*a[i] + cb*b[i]
void axpby(double ca, std::span<const double> a, double cb,
           std::span<const double> b, std::span<double> out);

// y = x W, x: (rows, in) row-major, W: (in, cols), y: (rows, cols)
void matmul(const double* x, const double* w, double* y, int rows, int in,
            int cols);

// y = g W^T, g: (rows, cols), W: (in, cols), y: (rows, in)
void matmul_bt(const double* g, const double* w, double* y, int rows, int in,
               int cols);

// dW += x^T g, x: (rows, in), g: (rows, cols), dW: (in, cols)
void matmul_at_acc(const double* x, const double* g, double* dw, int rows,
                   int in, int cols);

// In-place numerically stable softmax of one row of length n.
void softmax_row(double* row, int n);

}  // namespace alloyforge::kernels
