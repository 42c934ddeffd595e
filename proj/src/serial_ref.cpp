#include "alloyforge/serial_ref.hpp"

#include <cmath>

namespace alloyforge::serial {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

void matmul(const double* x, const double* w, double* y, int rows, int in,
            int cols) {
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      double s = 0.0;
      for (int i = 0; i < in; ++i)
        s += x[static_cast<std::size_t>(r) * in + i] *
             w[static_cast<std::size_t>(i) * cols + c];
      y[static_cast<std::size_t>(r) * cols + c] = s;
    }
}

std::vector<double> slerp(std::span<const double> w1, std::span<const double> w2,
                          double t) {
  double n1 = 0.0, n2 = 0.0, d = 0.0;
  for (std::size_t i = 0; i < w1.size(); ++i) {
    n1 += w1[i] * w1[i];
    n2 += w2[i] * w2[i];
    d += w1[i] * w2[i];
  }
  n1 = std::sqrt(n1);
  n2 = std::sqrt(n2);
  double c = d / (n1 * n2);
  if (c > 1.0) c = 1.0;
  if (c < -1.0) c = -1.0;
  const double theta = std::acos(c);
  const double s = std::sin(theta);
  std::vector<double> out(w1.size());
  if (s < 1e-7) {
    for (std::size_t i = 0; i < w1.size(); ++i)
      out[i] = (1.0 - t) * w1[i] + t * w2[i];
  } else {
    const double c1 = std::sin((1.0 - t) * theta) / s;
    const double c2 = std::sin(t * theta) / s;
    for (std::size_t i = 0; i < w1.size(); ++i)
      out[i] = c1 * w1[i] + c2 * w2[i];
  }
  return out;
}

}  // namespace alloyforge::serial
