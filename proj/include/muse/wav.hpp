#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace muse {

inline constexpr std::uint32_t kPipelineSampleRate = 16000;

struct WavClip {
  std::vector<double> samples;  // [-1, 1]
  std::uint32_t sample_rate = kPipelineSampleRate;
  std::string source_path;
};

// PCM16 mono 16 kHz only; anything else throws FormatError naming the field.
WavClip decode_wav(const std::vector<std::uint8_t>& bytes, const std::string& origin = "<memory>");
std::vector<std::uint8_t> encode_wav(const WavClip& clip);

WavClip read_wav(const std::string& path);
void write_wav(const std::string& path, const WavClip& clip);

// Sample to int16: scale by 32768, round half away from zero, clamp.
std::int16_t quantize_sample(double x);

}  // namespace muse
