#pragma once

#include <string>
#include <vector>

#include "muse/train.hpp"

namespace muse {

struct DatasetPair {
  std::string name;  // shared basename
  std::string clean_path;
  std::string noisy_path;
};

struct OrphanFile {
  std::string name;
  std::string path;
  bool in_clean = false;  // otherwise only present in the noisy directory
};

struct DatasetIndex {
  std::vector<DatasetPair> pairs;  // sorted by name
  std::vector<OrphanFile> orphans;
  std::size_t segment_length = 30700;
};

// Pairs *.wav files by basename. Throws when no basename is shared.
DatasetIndex build_dataset_index(const std::string& clean_dir, const std::string& noisy_dir,
                                 std::size_t segment_length = 30700);

struct SegmentSpan {
  std::size_t offset = 0;
  std::size_t valid = 0;  // samples taken from the file; the rest is zero padding
  bool padded = false;
};

// Consecutive segment_length windows; a shorter tail becomes one padded segment.
std::vector<SegmentSpan> plan_segments(std::size_t length, std::size_t segment_length);

struct Segment {
  std::size_t pair = 0;
  SegmentSpan span;
  TrainPair audio;
};

// Reads every pair (lengths must match) and cuts it into segments.
std::vector<Segment> load_segments(const DatasetIndex& index);

}  // namespace muse
