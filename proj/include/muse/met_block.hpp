#pragma once

#include <string>

#include "muse/attention.hpp"
#include "muse/layers.hpp"

namespace muse {

struct MetBlockConfig {
  std::size_t channels = 16;
  AttentionConfig attention;
  std::size_t ffn_expansion = 2;
  std::size_t spatial_kernel = 3;

  void validate() const;
};

template <typename T>
struct MetBlockParams {
  ChannelNorm<T> norm1;
  Conv<T> qkv;          // C -> 3C pointwise
  Conv<T> attn_proj;    // C -> C pointwise
  Conv<T> channel_mix;  // C -> C pointwise on pooled features
  Conv<T> spatial_pw;   // C -> C pointwise
  Conv<T> spatial_dw;   // 3x3 depthwise
  ChannelNorm<T> norm2;
  Conv<T> ffn_in;   // C -> eC
  Conv<T> ffn_out;  // eC -> C

  static MetBlockParams init(const MetBlockConfig& cfg, Rng& rng);
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

// Taylor multi-head attention over the T*F token grid: pointwise Q/K/V
// projection, per-head linear Taylor attention, pointwise output projection.
template <typename T>
Tensor<T> tmsa_branch(const Tensor<T>& x, const MetBlockParams<T>& p, const MetBlockConfig& cfg);

// Pooled channel descriptor mixed by a 1x1 conv, [B,C,1,1]. No squashing.
template <typename T>
Tensor<T> channel_branch(const Tensor<T>& x, const MetBlockParams<T>& p);

// Pointwise conv, GELU, 3x3 depthwise conv.
template <typename T>
Tensor<T> spatial_branch(const Tensor<T>& x, const MetBlockParams<T>& p);

template <typename T>
Tensor<T> ffn(const Tensor<T>& x, const MetBlockParams<T>& p);

// u = LN(x); y1 = x + tmsa(u) * channel(u) * spatial(u); y = y1 + FFN(LN(y1)).
template <typename T>
Tensor<T> met_fuse(const Tensor<T>& x, const MetBlockParams<T>& p, const MetBlockConfig& cfg);

// Splits [B,C,T,F] into heads as [B*H, T*F, C/H].
template <typename T>
Tensor<T> to_heads(const Tensor<T>& x, std::size_t heads);

// Inverse of to_heads.
template <typename T>
Tensor<T> from_heads(const Tensor<T>& x, const Shape& bctf, std::size_t heads);

}  // namespace muse
