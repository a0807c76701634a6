#include "muse/spectral.hpp"

#include <cmath>
#include <numbers>

#include "muse/errors.hpp"
#include "muse/fft.hpp"

namespace muse {

namespace {

constexpr double kNormalizerFloor = 1e-11;

double wrap_phase(double p) {
  // atan2 already lands in [-pi, pi]; fold the open end.
  return p == -std::numbers::pi ? std::numbers::pi : p;
}

struct OverlapAdd {
  std::vector<double> window;
  std::vector<double> norm;  // sum of squared shifted windows over the padded buffer
  std::size_t pad = 0;

  OverlapAdd(const StftConfig& cfg, std::size_t frames, std::size_t out_len)
      : window(analysis_window(cfg)), pad(cfg.n_fft / 2) {
    const std::size_t buf = cfg.n_fft + cfg.hop_length * (frames - 1);
    norm.assign(buf, 0.0);
    for (std::size_t t = 0; t < frames; ++t)
      for (std::size_t m = 0; m < cfg.n_fft; ++m)
        norm[t * cfg.hop_length + m] += window[m] * window[m];
    for (std::size_t n = 0; n < out_len; ++n) {
      const std::size_t i = n + pad;
      if (i >= buf || norm[i] < kNormalizerFloor) {
        throw NumericError("istft: overlap-add normalizer underflows at output sample " +
                           std::to_string(n) + " (window/hop do not cover the signal)");
      }
    }
  }
};

// c_k weights of the Hermitian half-spectrum: 1 for DC and Nyquist, else 2.
double hermitian_weight(std::size_t k, std::size_t n_fft) {
  if (k == 0) return 1.0;
  if (n_fft % 2 == 0 && k == n_fft / 2) return 1.0;
  return 2.0;
}

void check_frames(std::size_t re, std::size_t im, std::size_t frames, const StftConfig& cfg) {
  if (frames == 0 || re != frames * cfg.bins() || im != re) {
    throw ShapeError("istft: planes of " + std::to_string(re) + "/" + std::to_string(im) +
                     " values do not match " + std::to_string(frames) + " frames x " +
                     std::to_string(cfg.bins()) + " bins");
  }
}

}  // namespace

void StftConfig::validate() const {
  if (n_fft < 2) throw ConfigError("n_fft must be >= 2");
  if (win_length == 0 || win_length > n_fft) throw ConfigError("win_length must be in [1, n_fft]");
  if (hop_length == 0 || hop_length >= win_length) {
    throw ConfigError("hop_length must be in [1, win_length)");
  }
  if (sample_rate == 0) throw ConfigError("sample_rate must be positive");
  if (!(compression_exponent > 0.0 && compression_exponent <= 1.0)) {
    throw ConfigError("compression_exponent must be in (0, 1]");
  }
}

std::vector<double> analysis_window(const StftConfig& cfg) {
  std::vector<double> w(cfg.n_fft, 0.0);
  const std::size_t offset = (cfg.n_fft - cfg.win_length) / 2;
  for (std::size_t i = 0; i < cfg.win_length; ++i) {
    w[offset + i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                         static_cast<double>(cfg.win_length));
  }
  return w;
}

Spectrogram stft(std::span<const double> wave, const StftConfig& cfg) {
  cfg.validate();
  if (wave.empty()) throw ShapeError("stft: empty input");
  for (std::size_t i = 0; i < wave.size(); ++i) {
    if (!std::isfinite(wave[i])) {
      throw NumericError("stft: non-finite sample at index " + std::to_string(i));
    }
  }
  const std::size_t pad = cfg.n_fft / 2;
  const std::size_t L = wave.size();
  if (L <= pad) {
    throw ShapeError("stft: reflect padding of " + std::to_string(pad) + " needs more than " +
                     std::to_string(pad) + " samples, got " + std::to_string(L));
  }
  std::vector<double> padded(L + 2 * pad);
  for (std::size_t i = 0; i < padded.size(); ++i) {
    const long j = static_cast<long>(i) - static_cast<long>(pad);
    long src = j;
    if (j < 0) src = -j;
    if (j >= static_cast<long>(L)) src = 2 * (static_cast<long>(L) - 1) - j;
    padded[i] = wave[static_cast<std::size_t>(src)];
  }

  Spectrogram spec;
  spec.config = cfg;
  spec.frames = cfg.frames(L);
  spec.bins = cfg.bins();
  spec.magnitude.resize(spec.frames * spec.bins);
  spec.phase.resize(spec.frames * spec.bins);
  const auto window = analysis_window(cfg);
  FftPlan plan(cfg.n_fft);
  std::vector<cplx> frame(cfg.n_fft), out(cfg.n_fft);
  for (std::size_t t = 0; t < spec.frames; ++t) {
    for (std::size_t m = 0; m < cfg.n_fft; ++m) frame[m] = padded[t * cfg.hop_length + m] * window[m];
    plan.forward(frame, out);
    for (std::size_t k = 0; k < spec.bins; ++k) {
      spec.magnitude[t * spec.bins + k] = std::abs(out[k]);
      spec.phase[t * spec.bins + k] = wrap_phase(std::arg(out[k]));
    }
  }
  return spec;
}

std::vector<double> istft_complex(std::span<const double> re, std::span<const double> im,
                                  std::size_t frames, const StftConfig& cfg, std::size_t out_len) {
  cfg.validate();
  check_frames(re.size(), im.size(), frames, cfg);
  const std::size_t N = cfg.n_fft, F = cfg.bins();
  OverlapAdd ola(cfg, frames, out_len);
  std::vector<double> buf(ola.norm.size(), 0.0);
  FftPlan plan(N);
  std::vector<cplx> full(N), time(N);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t k = 0; k < F; ++k) full[k] = {re[t * F + k], im[t * F + k]};
    for (std::size_t k = F; k < N; ++k) full[k] = std::conj(full[N - k]);
    // DC (and Nyquist for even N) carry no imaginary part in a real signal.
    full[0].imag(0.0);
    if (N % 2 == 0) full[N / 2].imag(0.0);
    plan.inverse(full, time);
    for (std::size_t m = 0; m < N; ++m) buf[t * cfg.hop_length + m] += time[m].real() * ola.window[m];
  }
  std::vector<double> out(out_len);
  for (std::size_t n = 0; n < out_len; ++n) out[n] = buf[n + ola.pad] / ola.norm[n + ola.pad];
  return out;
}

std::vector<double> istft(const Spectrogram& spec, std::size_t out_len) {
  std::vector<double> re(spec.magnitude.size()), im(spec.magnitude.size());
  for (std::size_t i = 0; i < re.size(); ++i) {
    re[i] = spec.magnitude[i] * std::cos(spec.phase[i]);
    im[i] = spec.magnitude[i] * std::sin(spec.phase[i]);
  }
  return istft_complex(re, im, spec.frames, spec.config, out_len);
}

std::vector<double> compress_magnitude(std::span<const double> mag, double c) {
  if (!(c > 0.0)) throw ConfigError("compress_magnitude: exponent must be positive");
  std::vector<double> out(mag.size());
  for (std::size_t i = 0; i < mag.size(); ++i) {
    if (mag[i] < 0.0) throw NumericError("compress_magnitude: negative magnitude");
    out[i] = std::pow(mag[i], c);
  }
  return out;
}

std::vector<double> decompress_magnitude(std::span<const double> mag_c, double c) {
  if (!(c > 0.0)) throw ConfigError("decompress_magnitude: exponent must be positive");
  std::vector<double> out(mag_c.size());
  for (std::size_t i = 0; i < mag_c.size(); ++i) {
    if (mag_c[i] < 0.0) throw NumericError("decompress_magnitude: negative magnitude");
    out[i] = std::pow(mag_c[i], 1.0 / c);
  }
  return out;
}

PackedInput pack_input(const Spectrogram& spec) {
  PackedInput p;
  p.frames = spec.frames;
  p.bins = spec.bins;
  p.compression_exponent = spec.config.compression_exponent;
  const auto mc = compress_magnitude(spec.magnitude, p.compression_exponent);
  p.planes.resize(mc.size() * 2);
  for (std::size_t i = 0; i < mc.size(); ++i) {
    p.planes[2 * i] = mc[i];
    p.planes[2 * i + 1] = spec.phase[i];
  }
  return p;
}

Spectrogram unpack_input(const PackedInput& packed, const StftConfig& cfg) {
  Spectrogram s;
  s.config = cfg;
  s.frames = packed.frames;
  s.bins = packed.bins;
  std::vector<double> mc(packed.frames * packed.bins);
  s.phase.resize(mc.size());
  for (std::size_t i = 0; i < mc.size(); ++i) {
    mc[i] = packed.planes[2 * i];
    s.phase[i] = packed.planes[2 * i + 1];
  }
  s.magnitude = decompress_magnitude(mc, packed.compression_exponent);
  return s;
}

template <typename T>
Tensor<T> packed_to_tensor(const PackedInput& packed) {
  const std::size_t n = packed.frames * packed.bins;
  std::vector<T> v(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    v[i] = static_cast<T>(packed.planes[2 * i]);
    v[n + i] = static_cast<T>(packed.planes[2 * i + 1]);
  }
  return Tensor<T>(Shape{1, 2, packed.frames, packed.bins}, std::move(v));
}

template <typename T>
Tensor<T> istft_op(const Tensor<T>& re, const Tensor<T>& im, const StftConfig& cfg,
                   std::size_t out_len) {
  if (re.ndim() != 2 || re.shape() != im.shape() || re.dim(1) != cfg.bins()) {
    throw ShapeError("istft_op: planes " + shape_str(re.shape()) + "/" + shape_str(im.shape()) +
                     " for " + std::to_string(cfg.bins()) + " bins");
  }
  const std::size_t frames = re.dim(0);
  std::vector<double> r(re.data().begin(), re.data().end());
  std::vector<double> i(im.data().begin(), im.data().end());
  const auto wave = istft_complex(r, i, frames, cfg, out_len);
  std::vector<T> out(wave.begin(), wave.end());
  return detail::make_result<T>(
      "istft", Shape{out_len}, std::move(out), {re.node(), im.node()},
      [cfg, frames, out_len](detail::Node<T>& self) {
        auto* g_re = detail::grad_sink(self, 0);
        auto* g_im = detail::grad_sink(self, 1);
        const std::size_t N = cfg.n_fft, F = cfg.bins();
        OverlapAdd ola(cfg, frames, out_len);
        std::vector<double> gbuf(ola.norm.size(), 0.0);
        for (std::size_t n = 0; n < out_len; ++n) {
          gbuf[n + ola.pad] = static_cast<double>(self.grad[n]) / ola.norm[n + ola.pad];
        }
        FftPlan plan(N);
        std::vector<cplx> gf(N), G(N);
        for (std::size_t t = 0; t < frames; ++t) {
          for (std::size_t m = 0; m < N; ++m) gf[m] = gbuf[t * cfg.hop_length + m] * ola.window[m];
          plan.forward(gf, G);
          for (std::size_t k = 0; k < F; ++k) {
            const double c = hermitian_weight(k, N) / static_cast<double>(N);
            if (g_re) (*g_re)[t * F + k] += static_cast<T>(c * G[k].real());
            if (g_im) (*g_im)[t * F + k] += static_cast<T>(c * G[k].imag());
          }
        }
      });
}

template Tensor<float> packed_to_tensor(const PackedInput&);
template Tensor<double> packed_to_tensor(const PackedInput&);
template Tensor<float> istft_op(const Tensor<float>&, const Tensor<float>&, const StftConfig&,
                                std::size_t);
template Tensor<double> istft_op(const Tensor<double>&, const Tensor<double>&,
                                 const StftConfig&, std::size_t);

}  // namespace muse
