#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace alloyforge {

// User-facing validation failures (bad files, bad shapes, bad configs).
// The CLI maps these to exit code 2; everything else is exit 1.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

using Rng = std::mt19937_64;

// FNV-1a over raw bytes; used for run-manifest digests and reproducibility
// checks, not for security.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::vector<double>& v) {
  return fnv1a64(v.data(), v.size() * sizeof(double));
}

inline std::string hex64(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[i] = digits[h & 0xf];
    h >>= 4;
  }
  return s;
}

inline const char* kToolkitVersion = "0.1.0";

}  // namespace alloyforge
