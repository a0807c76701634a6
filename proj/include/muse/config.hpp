#pragma once

#include <string>

#include "muse/model.hpp"
#include "muse/train.hpp"

namespace muse {

struct RunConfig {
  ModelConfig model;  // includes the STFT settings
  TrainConfig train;
  std::size_t segment_length = 30700;
};

// `key = value` lines; `#` starts a comment. Unknown keys, duplicates, type
// and range errors throw ConfigError naming the key and line.
RunConfig parse_config_text(const std::string& text, const std::string& origin = "<config>");
RunConfig parse_config(const std::string& path);

// Every key with its resolved value, in a form parse_config_text accepts.
std::string format_config(const RunConfig& cfg);
// STFT and model keys only.
std::string format_model_config(const ModelConfig& cfg);

}  // namespace muse
