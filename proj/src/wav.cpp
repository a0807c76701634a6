#include "muse/wav.hpp"

#include <cmath>
#include <fstream>
#include <iterator>

#include "muse/errors.hpp"

namespace muse {

namespace {

std::uint32_t le(const std::vector<std::uint8_t>& b, std::size_t at, int n) {
  std::uint32_t v = 0;
  for (int i = 0; i < n; ++i) v |= static_cast<std::uint32_t>(b[at + static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

void put(std::vector<std::uint8_t>& b, std::uint32_t v, int n) {
  for (int i = 0; i < n; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

bool tag(const std::vector<std::uint8_t>& b, std::size_t at, const char* t) {
  for (int i = 0; i < 4; ++i) {
    if (b[at + static_cast<std::size_t>(i)] != static_cast<std::uint8_t>(t[i])) return false;
  }
  return true;
}

}  // namespace

std::int16_t quantize_sample(double x) {
  if (!std::isfinite(x)) throw NumericError("wav: non-finite sample");
  double s = x * 32768.0;
  s = s < 0 ? -std::floor(-s + 0.5) : std::floor(s + 0.5);
  if (s > 32767) s = 32767;
  if (s < -32768) s = -32768;
  return static_cast<std::int16_t>(s);
}

WavClip decode_wav(const std::vector<std::uint8_t>& b, const std::string& origin) {
  auto fail = [&](const std::string& m) { return FormatError(origin + ": " + m); };
  if (b.size() < 12 || !tag(b, 0, "RIFF")) throw fail("bad RIFF magic");
  if (!tag(b, 8, "WAVE")) throw fail("bad WAVE format tag");
  bool have_fmt = false;
  WavClip clip;
  clip.source_path = origin;
  std::size_t pos = 12;
  while (pos + 8 <= b.size()) {
    const std::uint32_t size = le(b, pos + 4, 4);
    const std::size_t body = pos + 8;
    if (body + size > b.size()) throw fail("chunk extends past end of file");
    if (tag(b, pos, "fmt ")) {
      if (size < 16) throw fail("fmt chunk too short");
      const auto format = le(b, body, 2);
      const auto channels = le(b, body + 2, 2);
      const auto rate = le(b, body + 4, 4);
      const auto bits = le(b, body + 14, 2);
      if (format != 1) throw fail("unsupported audio format " + std::to_string(format) + " (PCM=1 required)");
      if (channels != 1) throw fail("unsupported channels " + std::to_string(channels) + " (mono required)");
      if (rate != kPipelineSampleRate) {
        throw fail("unsupported sample rate " + std::to_string(rate) + " (16000 required)");
      }
      if (bits != 16) throw fail("unsupported bits per sample " + std::to_string(bits) + " (16 required)");
      clip.sample_rate = rate;
      have_fmt = true;
    } else if (tag(b, pos, "data")) {
      if (!have_fmt) throw fail("data chunk before fmt chunk");
      if (size % 2) throw fail("data chunk size is odd");
      clip.samples.resize(size / 2);
      for (std::size_t i = 0; i < clip.samples.size(); ++i) {
        const auto v = static_cast<std::int16_t>(static_cast<std::uint16_t>(le(b, body + 2 * i, 2)));
        clip.samples[i] = static_cast<double>(v) / 32768.0;
      }
      return clip;
    }
    pos = body + size + (size & 1);
  }
  throw fail(have_fmt ? "missing data chunk" : "missing fmt chunk");
}

std::vector<std::uint8_t> encode_wav(const WavClip& clip) {
  if (clip.sample_rate != kPipelineSampleRate) {
    throw FormatError("wav: unsupported sample rate " + std::to_string(clip.sample_rate) + " (16000 required)");
  }
  const auto data_bytes = static_cast<std::uint32_t>(clip.samples.size() * 2);
  std::vector<std::uint8_t> b;
  b.reserve(44 + data_bytes);
  b.insert(b.end(), {'R', 'I', 'F', 'F'});
  put(b, 36 + data_bytes, 4);
  b.insert(b.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  put(b, 16, 4);
  put(b, 1, 2);                     // PCM
  put(b, 1, 2);                     // mono
  put(b, clip.sample_rate, 4);
  put(b, clip.sample_rate * 2, 4);  // byte rate
  put(b, 2, 2);                     // block align
  put(b, 16, 2);
  b.insert(b.end(), {'d', 'a', 't', 'a'});
  put(b, data_bytes, 4);
  for (double x : clip.samples) put(b, static_cast<std::uint16_t>(quantize_sample(x)), 2);
  return b;
}

WavClip read_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError(path + ": cannot open");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_wav(bytes, path);
}

void write_wav(const std::string& path, const WavClip& clip) {
  const auto bytes = encode_wav(clip);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error(path + ": cannot open for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  f.close();
  if (!f) throw std::runtime_error(path + ": write failed");
}

}  // namespace muse
