#include "muse/fft.hpp"

#include <algorithm>
#include <numbers>

#include "muse/errors.hpp"

namespace muse {

FftPlan::FftPlan(std::size_t n) : n_(n) {
  if (n == 0) throw ShapeError("fft: zero length");
  std::size_t m = n;
  for (std::size_t p = 2; p * p <= m; ++p) {
    while (m % p == 0) {
      factors_.push_back(p);
      m /= p;
    }
  }
  if (m > 1) factors_.push_back(m);
  twiddle_.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double a = -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
    twiddle_[k] = {std::cos(a), std::sin(a)};
  }
  for (auto p : factors_) max_factor_ = std::max(max_factor_, p);
}

void FftPlan::recurse(const cplx* in, std::size_t in_stride, cplx* out, std::size_t len,
                      std::size_t level, cplx* t) const {
  if (len == 1) {
    out[0] = in[0];
    return;
  }
  const std::size_t p = factors_[level];
  const std::size_t m = len / p;
  for (std::size_t r = 0; r < p; ++r) {
    recurse(in + r * in_stride, in_stride * p, out + r * m, m, level + 1, t);
  }
  // W_len^e = twiddle_[(e mod len) * (n/len)]
  const std::size_t step = n_ / len;
  for (std::size_t k = 0; k < m; ++k) {
    for (std::size_t r = 0; r < p; ++r) t[r] = out[r * m + k] * twiddle_[((r * k) % len) * step];
    for (std::size_t q = 0; q < p; ++q) {
      cplx acc = 0;
      for (std::size_t r = 0; r < p; ++r) acc += t[r] * twiddle_[((r * q * m) % len) * step];
      out[q * m + k] = acc;
    }
  }
}

void FftPlan::forward(std::span<const cplx> in, std::span<cplx> out) const {
  if (in.size() != n_ || out.size() != n_) throw ShapeError("fft: buffer length mismatch");
  std::vector<cplx> scratch(max_factor_);
  recurse(in.data(), 1, out.data(), n_, 0, scratch.data());
}

void FftPlan::inverse(std::span<const cplx> in, std::span<cplx> out) const {
  if (in.size() != n_ || out.size() != n_) throw ShapeError("fft: buffer length mismatch");
  std::vector<cplx> conj_in(n_);
  for (std::size_t i = 0; i < n_; ++i) conj_in[i] = std::conj(in[i]);
  std::vector<cplx> scratch(max_factor_);
  recurse(conj_in.data(), 1, out.data(), n_, 0, scratch.data());
  const double inv = 1.0 / static_cast<double>(n_);
  for (auto& v : out) v = std::conj(v) * inv;
}

std::vector<cplx> naive_dft(std::span<const cplx> in, bool inverse) {
  const std::size_t n = in.size();
  std::vector<cplx> out(n);
  const double sign = inverse ? 1.0 : -1.0;
  for (std::size_t k = 0; k < n; ++k) {
    cplx acc = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const double a = sign * 2.0 * std::numbers::pi * static_cast<double>((j * k) % n) /
                       static_cast<double>(n);
      acc += in[j] * cplx(std::cos(a), std::sin(a));
    }
    out[k] = inverse ? acc / static_cast<double>(n) : acc;
  }
  return out;
}

}  // namespace muse
