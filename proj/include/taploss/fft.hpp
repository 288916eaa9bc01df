#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

#include "taploss/common.hpp"

namespace taploss::dsp {

// Iterative radix-2 FFT with precomputed twiddles and bit-reversal table.
class Fft {
 public:
  explicit Fft(std::size_t n) : n_(n), bitrev_(n), twiddle_(n / 2) {
    if (n < 2 || (n & (n - 1)) != 0) throw Error("invalid_argument", "FFT size must be a power of two");
    std::size_t bits = 0;
    while ((std::size_t{1} << bits) < n) ++bits;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t r = 0;
      for (std::size_t b = 0; b < bits; ++b)
        if (i & (std::size_t{1} << b)) r |= std::size_t{1} << (bits - 1 - b);
      bitrev_[i] = r;
    }
    for (std::size_t k = 0; k < n / 2; ++k) {
      const double a = -2.0 * kPi * static_cast<double>(k) / static_cast<double>(n);
      twiddle_[k] = Complex(std::cos(a), std::sin(a));
    }
  }

  std::size_t size() const { return n_; }

  // X[k] = sum_n x[n] e^{-2 pi i k n / N}
  void forward(std::span<Complex> data) const { transform(data, false); }

  // x[n] = sum_k X[k] e^{+2 pi i k n / N}  (no 1/N scaling)
  void inverse_unscaled(std::span<Complex> data) const { transform(data, true); }

 private:
  void transform(std::span<Complex> a, bool inverse) const {
    if (a.size() != n_) throw Error("shape_mismatch", "FFT buffer size mismatch");
    for (std::size_t i = 0; i < n_; ++i)
      if (i < bitrev_[i]) std::swap(a[i], a[bitrev_[i]]);
    for (std::size_t len = 2; len <= n_; len <<= 1) {
      const std::size_t half = len / 2;
      const std::size_t step = n_ / len;
      for (std::size_t start = 0; start < n_; start += len) {
        for (std::size_t j = 0; j < half; ++j) {
          Complex w = twiddle_[j * step];
          if (inverse) w = std::conj(w);
          const Complex u = a[start + j];
          const Complex v = a[start + j + half] * w;
          a[start + j] = u + v;
          a[start + j + half] = u - v;
        }
      }
    }
  }

  std::size_t n_;
  std::vector<std::size_t> bitrev_;
  std::vector<Complex> twiddle_;
};

inline const Fft& fft_of_size(std::size_t n) {
  if (n == kFftSize) {
    static const Fft f512(kFftSize);
    return f512;
  }
  if (n == 2 * kFftSize) {
    static const Fft f1024(2 * kFftSize);
    return f1024;
  }
  throw Error("invalid_argument", "no cached FFT for size " + std::to_string(n));
}

}  // namespace taploss::dsp
