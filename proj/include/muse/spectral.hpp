#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "muse/tensor.hpp"

namespace muse {

enum class WindowKind { hann };

struct StftConfig {
  std::size_t n_fft = 510;
  std::size_t win_length = 510;
  std::size_t hop_length = 100;
  std::size_t sample_rate = 16000;
  double compression_exponent = 0.3;
  WindowKind window = WindowKind::hann;

  std::size_t bins() const { return n_fft / 2 + 1; }
  std::size_t frames(std::size_t samples) const { return 1 + samples / hop_length; }
  // Throws ConfigError naming the violated constraint.
  void validate() const;
};

// Periodic Hann window of win_length, zero-padded (centered) to n_fft.
std::vector<double> analysis_window(const StftConfig& cfg);

// Row-major frames x bins planes.
struct Spectrogram {
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::vector<double> magnitude;
  std::vector<double> phase;
  StftConfig config;

  double mag(std::size_t t, std::size_t f) const { return magnitude[t * bins + f]; }
  double pha(std::size_t t, std::size_t f) const { return phase[t * bins + f]; }
};

// Centered STFT with reflect padding of n_fft/2 on both sides.
Spectrogram stft(std::span<const double> wave, const StftConfig& cfg);

// Overlap-add inverse with squared-window normalization, cropped to out_len.
std::vector<double> istft(const Spectrogram& spec, std::size_t out_len);

// Same as istft, from real/imaginary planes.
std::vector<double> istft_complex(std::span<const double> re, std::span<const double> im,
                                  std::size_t frames, const StftConfig& cfg, std::size_t out_len);

std::vector<double> compress_magnitude(std::span<const double> mag, double c);
std::vector<double> decompress_magnitude(std::span<const double> mag_c, double c);

// frames x bins x 2: plane 0 is the compressed magnitude, plane 1 the phase.
struct PackedInput {
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::vector<double> planes;
  double compression_exponent = 0.3;

  Shape shape() const { return {frames, bins, 2}; }
};

PackedInput pack_input(const Spectrogram& spec);
Spectrogram unpack_input(const PackedInput& packed, const StftConfig& cfg);

// [1, 2, frames, bins] network input from packed planes.
template <typename T>
Tensor<T> packed_to_tensor(const PackedInput& packed);

// Differentiable inverse STFT from [frames, bins] real/imaginary planes to a
// waveform of out_len samples. The backward pass is the exact adjoint of the
// forward linear map.
template <typename T>
Tensor<T> istft_op(const Tensor<T>& re, const Tensor<T>& im, const StftConfig& cfg,
                   std::size_t out_len);

}  // namespace muse
