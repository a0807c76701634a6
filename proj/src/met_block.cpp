#include "muse/met_block.hpp"

namespace muse {

void MetBlockConfig::validate() const {
  if (channels == 0) throw ConfigError("met block: channels must be positive");
  attention.validate(channels);
  if (ffn_expansion < 1) throw ConfigError("met block: ffn_expansion must be >= 1");
  if (spatial_kernel != 3) throw ConfigError("met block: spatial kernel is fixed at 3");
}

template <typename T>
MetBlockParams<T> MetBlockParams<T>::init(const MetBlockConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t C = cfg.channels;
  MetBlockParams p;
  p.norm1 = ChannelNorm<T>::make(C);
  p.qkv = Conv<T>::pointwise(3 * C, C, rng);
  p.attn_proj = Conv<T>::pointwise(C, C, rng);
  p.channel_mix = Conv<T>::pointwise(C, C, rng);
  p.spatial_pw = Conv<T>::pointwise(C, C, rng);
  p.spatial_dw = Conv<T>::depthwise3x3(C, rng);
  p.norm2 = ChannelNorm<T>::make(C);
  p.ffn_in = Conv<T>::pointwise(cfg.ffn_expansion * C, C, rng);
  p.ffn_out = Conv<T>::pointwise(C, cfg.ffn_expansion * C, rng);
  return p;
}

template <typename T>
void MetBlockParams<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  norm1.collect(prefix + ".norm1", out);
  qkv.collect(prefix + ".tmsa.qkv", out);
  attn_proj.collect(prefix + ".tmsa.proj", out);
  channel_mix.collect(prefix + ".channel.mix", out);
  spatial_pw.collect(prefix + ".spatial.pw", out);
  spatial_dw.collect(prefix + ".spatial.dw", out);
  norm2.collect(prefix + ".norm2", out);
  ffn_in.collect(prefix + ".ffn.in", out);
  ffn_out.collect(prefix + ".ffn.out", out);
}

template <typename T>
Tensor<T> to_heads(const Tensor<T>& x, std::size_t heads) {
  const std::size_t B = x.dim(0), C = x.dim(1), N = x.dim(2) * x.dim(3);
  if (C % heads != 0) throw ShapeError("to_heads: channels not divisible by heads");
  const std::size_t D = C / heads;
  auto r = reshape(x, {B, heads, D, N});
  return reshape(permute(r, {0, 1, 3, 2}), {B * heads, N, D});
}

template <typename T>
Tensor<T> from_heads(const Tensor<T>& x, const Shape& bctf, std::size_t heads) {
  const std::size_t B = bctf[0], C = bctf[1], N = bctf[2] * bctf[3];
  const std::size_t D = C / heads;
  auto r = reshape(x, {B, heads, N, D});
  return reshape(permute(r, {0, 1, 3, 2}), bctf);
}

template <typename T>
Tensor<T> tmsa_branch(const Tensor<T>& x, const MetBlockParams<T>& p, const MetBlockConfig& cfg) {
  const std::size_t C = cfg.channels;
  if (x.ndim() != 4 || x.dim(1) != C) {
    throw ShapeError("tmsa_branch: input " + shape_str(x.shape()) + " for " + std::to_string(C) +
                     " channels");
  }
  const auto qkv = p.qkv(x);
  const std::size_t H = cfg.attention.heads;
  const auto q = to_heads(slice(qkv, 1, 0, C), H);
  const auto k = to_heads(slice(qkv, 1, C, C), H);
  const auto v = to_heads(slice(qkv, 1, 2 * C, C), H);
  const auto attn = taylor_attention_linear(q, k, v, cfg.attention);
  return p.attn_proj(from_heads(attn, x.shape(), H));
}

template <typename T>
Tensor<T> channel_branch(const Tensor<T>& x, const MetBlockParams<T>& p) {
  return p.channel_mix(adaptive_avg_pool(x));
}

template <typename T>
Tensor<T> spatial_branch(const Tensor<T>& x, const MetBlockParams<T>& p) {
  return p.spatial_dw(gelu(p.spatial_pw(x)));
}

template <typename T>
Tensor<T> ffn(const Tensor<T>& x, const MetBlockParams<T>& p) {
  return p.ffn_out(gelu(p.ffn_in(x)));
}

template <typename T>
Tensor<T> met_fuse(const Tensor<T>& x, const MetBlockParams<T>& p, const MetBlockConfig& cfg) {
  const auto u = p.norm1(x);
  const auto gated = mul_channel(mul(tmsa_branch(u, p, cfg), spatial_branch(u, p)),
                                 channel_branch(u, p));
  const auto y1 = add(x, gated);
  return add(y1, ffn(p.norm2(y1), p));
}

#define MUSE_INSTANTIATE_MET(T)                                                                 \
  template struct MetBlockParams<T>;                                                            \
  template Tensor<T> to_heads(const Tensor<T>&, std::size_t);                                   \
  template Tensor<T> from_heads(const Tensor<T>&, const Shape&, std::size_t);                   \
  template Tensor<T> tmsa_branch(const Tensor<T>&, const MetBlockParams<T>&,                    \
                                 const MetBlockConfig&);                                        \
  template Tensor<T> channel_branch(const Tensor<T>&, const MetBlockParams<T>&);                \
  template Tensor<T> spatial_branch(const Tensor<T>&, const MetBlockParams<T>&);                \
  template Tensor<T> ffn(const Tensor<T>&, const MetBlockParams<T>&);                           \
  template Tensor<T> met_fuse(const Tensor<T>&, const MetBlockParams<T>&, const MetBlockConfig&);

MUSE_INSTANTIATE_MET(float)
MUSE_INSTANTIATE_MET(double)

}  // namespace muse
