#pragma once

#include <stdexcept>
#include <string>

namespace muse {

// Shape or dimension disagreement between operands.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// NaN/Inf produced or consumed, degenerate denominators, underflowing normalizers.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Misuse of the autodiff graph (non-scalar loss, consumed graph).
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Malformed files: WAV, checkpoint, config.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Parameter or configuration value outside its valid range.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace muse
