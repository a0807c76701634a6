#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "muse/tensor.hpp"

namespace muse {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
};

template <typename T>
using ParamList = std::vector<NamedTensor<T>>;

template <typename T>
std::size_t count_scalars(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.value.numel();
  return n;
}

// Seeded generator whose output is identical on every platform:
// mt19937_64 is fully specified, and the float mapping below avoids the
// implementation-defined std distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal() {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)); }
  std::uint64_t next() { return engine_(); }

 private:
  std::mt19937_64 engine_;
};

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double lo, double hi, Rng& rng, bool requires_grad = false) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>(std::move(shape), std::move(v), requires_grad);
}

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, Rng& rng, bool requires_grad = false) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(stddev * rng.normal());
  return Tensor<T>(std::move(shape), std::move(v), requires_grad);
}

// Trainable leaf drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename T>
Tensor<T> fan_in_param(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return uniform_tensor<T>(std::move(shape), -bound, bound, rng, true);
}

template <typename T>
Tensor<T> const_param(Shape shape, T value) {
  return Tensor<T>::full(std::move(shape), value, true);
}

}  // namespace muse
