#pragma once

#include <span>
#include <vector>

// Plain single-threaded loops mirroring alloyforge::kernels. Kept as the
// reference side of the kernel tests and the baseline in bench_kernels.
namespace alloyforge::serial {

double dot(std::span<const double> a, std::span<const double> b);

double l2_norm(std::span<const double> a);

void matmul(const double* x, const double* w, double* y, int rows, int in,
            int cols);

// Scalar-loop SLERP of two flattened vectors, straight from the formula.
std::vector<double> slerp(std::span<const double> w1, std::span<const double> w2,
                          double t);

}  // namespace alloyforge::serial
