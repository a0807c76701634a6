#pragma once

#include <optional>
#include <span>
#include <string>

#include "muse/layers.hpp"

namespace muse {

// Depthwise separable deformable embedding: a 3x3 conv predicts one (dt, df)
// offset pair per kernel tap, shared by all channels; a depthwise 3x3 kernel
// is applied at the displaced bilinear sample points; a pointwise conv maps
// C_in -> C_out; Hardswish follows.
template <typename T>
struct DeformEmbedParams {
  Conv<T> offset;     // C_in -> 18, zero-initialized
  Conv<T> depthwise;  // [C_in, 1, 3, 3]
  Conv<T> pointwise;  // C_in -> C_out

  static DeformEmbedParams init(std::size_t c_in, std::size_t c_out, Rng& rng);
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

// Bilinear read of a row-major H x W plane; samples outside read zero.
template <typename T>
T bilinear_sample(std::span<const T> plane, std::size_t H, std::size_t W, T y, T x);

// [B, 2*k*k, T, F]: channel 2k holds the time offset of tap k, 2k+1 the
// frequency offset (taps in row-major kernel order).
template <typename T>
Tensor<T> predict_offsets(const Tensor<T>& x, const DeformEmbedParams<T>& p);

// x[B,C,H,W], offsets[B,2*kh*kw,H,W], weight[C,1,kh,kw]; stride 1, same padding.
template <typename T>
Tensor<T> deformable_depthwise_conv(const Tensor<T>& x, const Tensor<T>& offsets,
                                    const Tensor<T>& weight, const std::optional<Tensor<T>>& bias);

template <typename T>
Tensor<T> dsdcn_embed(const Tensor<T>& x, const DeformEmbedParams<T>& p);

}  // namespace muse
