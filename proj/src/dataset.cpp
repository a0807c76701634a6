#include "muse/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <map>

#include "muse/wav.hpp"

namespace muse {

namespace fs = std::filesystem;

namespace {

std::map<std::string, std::string> list_wavs(const std::string& dir) {
  if (!fs::is_directory(dir)) throw std::invalid_argument("dataset: not a directory: " + dir);
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".wav") {
      out[e.path().filename().string()] = e.path().string();
    }
  }
  return out;
}

}  // namespace

DatasetIndex build_dataset_index(const std::string& clean_dir, const std::string& noisy_dir,
                                 std::size_t segment_length) {
  if (segment_length == 0) throw std::invalid_argument("dataset: segment_length must be positive");
  const auto clean = list_wavs(clean_dir);
  const auto noisy = list_wavs(noisy_dir);
  DatasetIndex idx;
  idx.segment_length = segment_length;
  // std::map iterates in byte-wise lexicographic order.
  for (const auto& [name, path] : clean) {
    const auto it = noisy.find(name);
    if (it != noisy.end()) {
      idx.pairs.push_back({name, path, it->second});
    } else {
      idx.orphans.push_back({name, path, true});
    }
  }
  for (const auto& [name, path] : noisy) {
    if (!clean.count(name)) idx.orphans.push_back({name, path, false});
  }
  std::sort(idx.orphans.begin(), idx.orphans.end(),
            [](const OrphanFile& a, const OrphanFile& b) { return a.name < b.name; });
  if (idx.pairs.empty()) {
    throw std::invalid_argument("dataset: no file names shared between " + clean_dir + " and " + noisy_dir);
  }
  return idx;
}

std::vector<SegmentSpan> plan_segments(std::size_t length, std::size_t segment_length) {
  if (segment_length == 0) throw std::invalid_argument("plan_segments: segment_length must be positive");
  std::vector<SegmentSpan> out;
  std::size_t off = 0;
  for (; off + segment_length <= length; off += segment_length) out.push_back({off, segment_length, false});
  if (off < length) out.push_back({off, length - off, true});
  return out;
}

std::vector<Segment> load_segments(const DatasetIndex& index) {
  std::vector<Segment> out;
  for (std::size_t i = 0; i < index.pairs.size(); ++i) {
    const auto& p = index.pairs[i];
    const auto clean = read_wav(p.clean_path);
    const auto noisy = read_wav(p.noisy_path);
    if (clean.samples.size() != noisy.samples.size()) {
      throw ShapeError("dataset: " + p.name + " has " + std::to_string(clean.samples.size()) +
                       " clean and " + std::to_string(noisy.samples.size()) + " noisy samples");
    }
    for (const auto& span : plan_segments(clean.samples.size(), index.segment_length)) {
      Segment s;
      s.pair = i;
      s.span = span;
      s.audio.clean.assign(index.segment_length, 0.0);
      s.audio.noisy.assign(index.segment_length, 0.0);
      const auto from = static_cast<std::ptrdiff_t>(span.offset);
      const auto to = static_cast<std::ptrdiff_t>(span.offset + span.valid);
      std::copy(clean.samples.begin() + from, clean.samples.begin() + to, s.audio.clean.begin());
      std::copy(noisy.samples.begin() + from, noisy.samples.begin() + to, s.audio.noisy.begin());
      out.push_back(std::move(s));
    }
  }
  return out;
}

}  // namespace muse
