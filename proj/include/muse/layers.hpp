#pragma once

#include <optional>
#include <string>

#include "muse/ops.hpp"
#include "muse/params.hpp"

namespace muse {

// Convolution weights plus geometry. Weight layout [O, C/groups, kh, kw].
template <typename T>
struct Conv {
  Tensor<T> weight;
  std::optional<Tensor<T>> bias;
  Conv2dOptions opt;

  static Conv make(std::size_t out, std::size_t in, std::size_t kh, std::size_t kw, Rng& rng,
                   Conv2dOptions opt = {}, bool with_bias = true) {
    Conv c;
    c.opt = opt;
    const std::size_t in_per_group = in / opt.groups;
    const std::size_t fan_in = in_per_group * kh * kw;
    c.weight = fan_in_param<T>({out, in_per_group, kh, kw}, fan_in, rng);
    if (with_bias) c.bias = fan_in_param<T>({out}, fan_in, rng);
    return c;
  }

  static Conv pointwise(std::size_t out, std::size_t in, Rng& rng) { return make(out, in, 1, 1, rng); }

  // Same-size 3x3 depthwise conv.
  static Conv depthwise3x3(std::size_t channels, Rng& rng) {
    Conv2dOptions o;
    o.padding = {1, 1};
    o.groups = channels;
    return make(channels, channels, 3, 3, rng, o);
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, opt); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", weight});
    if (bias) out.push_back({prefix + ".bias", *bias});
  }

  void zero() {
    for (auto& v : weight.mutable_data()) v = T(0);
    if (bias) {
      for (auto& v : bias->mutable_data()) v = T(0);
    }
  }
};

// Layer norm across channels at each time-frequency position.
template <typename T>
struct ChannelNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  T eps = T(1e-5);

  static ChannelNorm make(std::size_t channels) {
    return {const_param<T>({channels}, T(1)), const_param<T>({channels}, T(0)), T(1e-5)};
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return channel_layer_norm(x, gamma, beta, eps); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
};

template <typename T>
struct PRelu {
  Tensor<T> alpha;

  static PRelu make(std::size_t channels) { return {const_param<T>({channels}, T(0.25))}; }

  Tensor<T> operator()(const Tensor<T>& x) const { return prelu(x, alpha); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".alpha", alpha});
  }
};

}  // namespace muse
