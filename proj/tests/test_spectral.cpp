#include <doctest.h>

#include <algorithm>

#include "muse/errors.hpp"
#include "muse/fft.hpp"
#include "muse/grad_suites.hpp"
#include "muse/params.hpp"
#include "muse/spectral.hpp"
#include "oracles.hpp"

using namespace muse;

namespace {

std::vector<double> noise(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1, 1);
  return v;
}

double max_abs(const std::vector<double>& v) {
  double m = 0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

// Windowed frame t of the reflect-padded signal, built independently.
std::vector<double> frame_oracle(const std::vector<double>& x, const StftConfig& c, std::size_t t) {
  const long pad = static_cast<long>(c.n_fft / 2), L = static_cast<long>(x.size());
  std::vector<double> f(c.n_fft);
  for (std::size_t n = 0; n < c.n_fft; ++n) {
    long i = static_cast<long>(t * c.hop_length + n) - pad;
    if (i < 0) i = -i;
    if (i >= L) i = 2 * (L - 1) - i;
    const double w = 0.5 - 0.5 * std::cos(2 * std::numbers::pi * static_cast<double>(n) / static_cast<double>(c.win_length));
    f[n] = x[static_cast<std::size_t>(i)] * w;
  }
  return f;
}

}  // namespace

TEST_CASE("FFT matches a direct DFT for many lengths") {
  for (std::size_t n : {1, 2, 3, 5, 8, 12, 17, 30, 64, 97, 255, 510}) {
    Rng rng(n);
    std::vector<cplx> x(n);
    for (auto& v : x) v = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const auto ref = oracle::dft(x);
    FftPlan plan(n);
    std::vector<cplx> y(n), back(n);
    plan.forward(x, y);
    plan.inverse(y, back);
    double err = 0, inv_err = 0;
    for (std::size_t k = 0; k < n; ++k) {
      err = std::max(err, std::abs(y[k] - ref[k]));
      inv_err = std::max(inv_err, std::abs(back[k] - x[k]));
    }
    INFO("n = " << n);
    CHECK(err < 1e-10 * static_cast<double>(n));
    CHECK(inv_err < 1e-12 * static_cast<double>(n));
    const auto nd = naive_dft(x);
    for (std::size_t k = 0; k < n; ++k) CHECK(std::abs(nd[k] - ref[k]) < 1e-9);
  }
}

TEST_CASE("stft shape for a 30700-sample segment") {
  const auto s = stft(noise(30700, 1), StftConfig{});
  CHECK(s.frames == 308);
  CHECK(s.bins == 256);
  CHECK(pack_input(s).shape() == Shape{308, 256, 2});
}

TEST_CASE("stft of silence is all zero") {
  const auto s = stft(std::vector<double>(2000, 0.0), StftConfig{});
  CHECK(max_abs(s.magnitude) == 0.0);
  const auto p = pack_input(s);
  for (std::size_t i = 0; i < p.planes.size(); i += 2) CHECK(p.planes[i] == 0.0);
  CHECK(max_abs(istft(s, 2000)) == 0.0);
}

TEST_CASE("stft bins equal a direct DFT of the windowed frame") {
  const StftConfig c;
  const auto x = noise(3000, 2);
  const auto s = stft(x, c);
  for (std::size_t t : {std::size_t{0}, std::size_t{1}, std::size_t{15}, s.frames - 1}) {
    const auto f = frame_oracle(x, c, t);
    const auto X = oracle::dft(std::vector<std::complex<double>>(f.begin(), f.end()));
    for (std::size_t k = 0; k < c.bins(); ++k) {
      CHECK(s.mag(t, k) == doctest::Approx(std::abs(X[k])).epsilon(1e-9));
      if (std::abs(X[k]) > 1e-6) {
        const double dp = std::remainder(s.pha(t, k) - std::arg(X[k]), 2 * std::numbers::pi);
        CHECK(std::abs(dp) < 1e-8);
      }
    }
  }
}

TEST_CASE("1 kHz sine peaks at bin 32 in interior frames") {
  const StftConfig c;
  std::vector<double> x(16000);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::sin(2 * std::numbers::pi * 1000.0 * static_cast<double>(i) / 16000.0);
  const auto s = stft(x, c);
  for (std::size_t t = 3; t + 3 < s.frames; ++t) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < s.bins; ++k)
      if (s.mag(t, k) > s.mag(t, best)) best = k;
    CHECK(best == 32);
  }
}

TEST_CASE("Parseval holds per frame") {
  const StftConfig c;
  const auto x = noise(2500, 3);
  const auto s = stft(x, c);
  for (std::size_t t = 0; t < s.frames; ++t) {
    const auto f = frame_oracle(x, c, t);
    double et = 0, ef = 0;
    for (double v : f) et += v * v;
    for (std::size_t k = 0; k < s.bins; ++k) {
      const double w = (k == 0 || k == s.bins - 1) ? 1.0 : 2.0;
      ef += w * s.mag(t, k) * s.mag(t, k);
    }
    ef /= static_cast<double>(c.n_fft);
    CHECK(ef == doctest::Approx(et).epsilon(1e-9));
  }
}

TEST_CASE("phase lies in (-pi, pi] and magnitude is non-negative") {
  const auto s = stft(noise(4000, 4), StftConfig{});
  for (double p : s.phase) {
    CHECK(p > -std::numbers::pi);
    CHECK(p <= std::numbers::pi);
  }
  for (double m : s.magnitude) CHECK(m >= 0.0);
}

TEST_CASE("istft(stft(x)) reconstructs various lengths") {
  for (std::size_t L : {510, 511, 999, 4000, 30700}) {
    const auto x = noise(L, L);
    const auto y = istft(stft(x, StftConfig{}), L);
    REQUIRE(y.size() == L);
    double err = 0;
    for (std::size_t i = 0; i < L; ++i) err = std::max(err, std::abs(y[i] - x[i]));
    INFO("L = " << L);
    CHECK(err / max_abs(x) < 1e-9);
  }
}

TEST_CASE("istft is linear in magnitude") {
  const auto x = noise(3000, 5);
  auto s = stft(x, StftConfig{});
  const auto y = istft(s, 3000);
  for (auto& m : s.magnitude) m *= 2.5;
  const auto z = istft(s, 3000);
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(z[i] == doctest::Approx(2.5 * y[i]).epsilon(1e-9));
}

TEST_CASE("stft input and config errors") {
  const StftConfig c;
  CHECK_THROWS_AS(stft(std::vector<double>{}, c), ShapeError);
  auto x = noise(1000, 6);
  x[10] = std::nan("");
  CHECK_THROWS_AS(stft(x, c), NumericError);
  CHECK_THROWS_AS(stft(noise(100, 7), c), ShapeError);  // too short to reflect-pad
  StftConfig bad = c;
  bad.hop_length = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.win_length = 600;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.compression_exponent = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("magnitude compression") {
  const std::vector<double> m{0, 1, 4, 100};
  const auto c = compress_magnitude(m, 0.3);
  CHECK(c[0] == 0.0);
  CHECK(c[1] == 1.0);
  CHECK(c[2] == doctest::Approx(std::pow(4.0, 0.3)));
  Rng rng(9);
  std::vector<double> r(1000);
  for (auto& v : r) v = rng.uniform(0, 100);
  const auto back = decompress_magnitude(compress_magnitude(r, 0.3), 0.3);
  for (std::size_t i = 0; i < r.size(); ++i) CHECK(std::abs(back[i] - r[i]) < 1e-9);
  CHECK_THROWS_AS(compress_magnitude(std::vector<double>{-1.0}, 0.3), NumericError);
}

TEST_CASE("pack and unpack are inverse") {
  const StftConfig c;
  const auto s = stft(noise(2000, 10), c);
  const auto p = pack_input(s);
  for (std::size_t i = 0; i < s.magnitude.size(); ++i) {
    CHECK(p.planes[2 * i] == doctest::Approx(std::pow(s.magnitude[i], 0.3)));
    CHECK(p.planes[2 * i + 1] == s.phase[i]);
  }
  const auto u = unpack_input(p, c);
  for (std::size_t i = 0; i < s.magnitude.size(); ++i) {
    CHECK(u.magnitude[i] == doctest::Approx(s.magnitude[i]).epsilon(1e-12));
    CHECK(u.phase[i] == s.phase[i]);
  }
  const auto t = packed_to_tensor<double>(p);
  CHECK(t.shape() == Shape{1, 2, s.frames, s.bins});
  CHECK(t.at(0) == p.planes[0]);
  CHECK(t.at(s.frames * s.bins) == p.planes[1]);
}

TEST_CASE("istft_op forward matches istft_complex") {
  const StftConfig c;
  const auto s = stft(noise(3000, 11), c);
  std::vector<double> re(s.magnitude.size()), im(s.magnitude.size());
  for (std::size_t i = 0; i < re.size(); ++i) {
    re[i] = s.magnitude[i] * std::cos(s.phase[i]);
    im[i] = s.magnitude[i] * std::sin(s.phase[i]);
  }
  const auto ref = istft_complex(re, im, s.frames, c, 3000);
  const auto y = istft_op<double>(Tensor<double>({s.frames, s.bins}, re), Tensor<double>({s.frames, s.bins}, im), c, 3000);
  REQUIRE(y.shape() == Shape{3000});
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y.at(i) == doctest::Approx(ref[i]).epsilon(1e-12));
}

TEST_CASE("istft_op gradient is the exact adjoint") {
  for (const auto& r : run_grad_suites<double>("spectral", 3)) {
    CHECK(r.report.passed);
    CHECK(r.report.max_rel_err < 1e-6);
  }
}
