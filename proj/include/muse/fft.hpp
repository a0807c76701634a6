#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

namespace muse {

using cplx = std::complex<double>;

// Mixed-radix decimation-in-time FFT for any length. Radix-2/3/5 butterflies
// are not special-cased; each prime factor p costs O(p) per output, which is
// fine for the small primes in 510 = 2*3*5*17.
class FftPlan {
 public:
  explicit FftPlan(std::size_t n);

  std::size_t size() const { return n_; }

  // out[k] = sum_j in[j] exp(-2*pi*i*j*k/n)
  void forward(std::span<const cplx> in, std::span<cplx> out) const;
  // out[j] = (1/n) sum_k in[k] exp(+2*pi*i*j*k/n)
  void inverse(std::span<const cplx> in, std::span<cplx> out) const;

 private:
  void recurse(const cplx* in, std::size_t in_stride, cplx* out, std::size_t len,
               std::size_t level, cplx* scratch) const;

  std::size_t n_;
  std::vector<std::size_t> factors_;
  std::vector<cplx> twiddle_;  // exp(-2*pi*i*k/n)
  std::size_t max_factor_ = 1;
};

// O(n^2) reference transform.
std::vector<cplx> naive_dft(std::span<const cplx> in, bool inverse = false);

}  // namespace muse
