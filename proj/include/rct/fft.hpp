// Iterative radix-2 FFT for power-of-two sizes, with precomputed twiddles.
#pragma once

#include <rct/core.hpp>

#include <cmath>
#include <complex>
#include <vector>

namespace rct {

class RealFft {
 public:
  explicit RealFft(size_t n) : n_(n) {
    if (n == 0 || (n & (n - 1)) != 0) {
      throw ConfigError("RealFft: size must be a power of two");
    }
    levels_ = 0;
    while ((size_t{1} << levels_) < n) ++levels_;
    bitrev_.resize(n);
    for (size_t i = 0; i < n; ++i) {
      size_t r = 0;
      for (int b = 0; b < levels_; ++b) r |= ((i >> b) & 1u) << (levels_ - 1 - b);
      bitrev_[i] = r;
    }
    twiddle_.resize(n / 2);
    for (size_t k = 0; k < n / 2; ++k) {
      const double ang = -2.0 * M_PI * static_cast<double>(k) / static_cast<double>(n);
      twiddle_[k] = {std::cos(ang), std::sin(ang)};
    }
    work_.resize(n);
  }

  size_t size() const { return n_; }

  // Squared magnitudes of the first n/2+1 DFT bins of a real frame.
  void power_spectrum(const double* frame, double* out) {
    for (size_t i = 0; i < n_; ++i) work_[bitrev_[i]] = {frame[i], 0.0};
    for (size_t len = 2; len <= n_; len <<= 1) {
      const size_t half = len >> 1;
      const size_t stride = n_ / len;
      for (size_t start = 0; start < n_; start += len) {
        for (size_t k = 0; k < half; ++k) {
          const std::complex<double> w = twiddle_[k * stride];
          const std::complex<double> a = work_[start + k];
          const std::complex<double> b = work_[start + k + half] * w;
          work_[start + k] = a + b;
          work_[start + k + half] = a - b;
        }
      }
    }
    for (size_t k = 0; k <= n_ / 2; ++k) out[k] = std::norm(work_[k]);
  }

 private:
  size_t n_;
  int levels_;
  std::vector<size_t> bitrev_;
  std::vector<std::complex<double>> twiddle_;
  std::vector<std::complex<double>> work_;
};

}  // namespace rct
