// Shared aliases, error types and small helpers used across the library.
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace rct {

template <typename R>
using MatT = Eigen::Matrix<R, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename R>
using VecT = Eigen::Matrix<R, Eigen::Dynamic, 1>;

// Row-major so that time-major binary IO is a plain memory copy.
using Mat = MatT<double>;
using Vec = VecT<double>;

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct FormatError : Error {
  using Error::Error;
};
struct NumericalError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct ParseError : Error {
  using Error::Error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct DomainError : Error {
  using Error::Error;
};
struct StateError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};

// FNV-1a, used for content hashes and sub-seed derivation.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a64(s.data(), s.size(), h);
}

}  // namespace rct
