#include "muse/model.hpp"

#include <cmath>
#include <map>

namespace muse {

MetBlockConfig ModelConfig::met(std::size_t stage) const {
  MetBlockConfig m;
  m.channels = width(stage);
  m.attention.heads = attention_heads;
  m.attention.eps = attention_eps;
  m.attention.normalize_qk = normalize_qk;
  m.ffn_expansion = ffn_expansion;
  return m;
}

void ModelConfig::validate() const {
  if (dense_channels == 0) throw ConfigError("dense_channels must be positive");
  for (std::size_t s = 0; s < 3; ++s) {
    if (stage_multipliers[s] == 0) throw ConfigError("stage_multipliers must be positive");
    met(s).validate();
  }
  if (!(mask_beta > 0)) throw ConfigError("mask_beta must be positive");
  stft.validate();
}

template <typename T>
DenseBlockParams<T> DenseBlockParams<T>::init(std::size_t channels, bool dilate_frequency,
                                              Rng& rng) {
  DenseBlockParams p;
  for (std::size_t i = 0; i < kDenseDilations.size(); ++i) {
    const std::size_t dil = kDenseDilations[i];
    Conv2dOptions o;
    o.dilation = {dil, dilate_frequency ? dil : 1};
    o.padding = o.dilation;
    p.layers.push_back({Conv<T>::make(channels, channels * (i + 1), 3, 3, rng, o),
                        ChannelNorm<T>::make(channels), PRelu<T>::make(channels)});
  }
  return p;
}

template <typename T>
void DenseBlockParams<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string n = prefix + "." + std::to_string(i);
    layers[i].conv.collect(n + ".conv", out);
    layers[i].norm.collect(n + ".norm", out);
    layers[i].act.collect(n + ".act", out);
  }
}

namespace {

template <typename T>
ConvTranspose<T> make_up(std::size_t in, std::size_t out, Rng& rng) {
  const std::size_t fan_in = out * 16;
  return {fan_in_param<T>({in, out, 4, 4}, fan_in, rng), fan_in_param<T>({out}, fan_in, rng)};
}

template <typename T>
void collect_stage(const std::string& prefix, const StageParams<T>& s, ParamList<T>& out) {
  if (s.down) s.down->collect(prefix + ".down", out);
  if (s.up) s.up->collect(prefix + ".up", out);
  if (s.fuse) s.fuse->collect(prefix + ".fuse", out);
  s.embed.collect(prefix + ".embed", out);
  for (std::size_t i = 0; i < s.blocks.size(); ++i) {
    s.blocks[i].collect(prefix + ".met" + std::to_string(i), out);
  }
}

template <typename T>
Tensor<T> run_stage_body(Tensor<T> x, const StageParams<T>& s, const MetBlockConfig& met) {
  x = dsdcn_embed(x, s.embed);
  for (const auto& b : s.blocks) x = met_fuse(x, b, met);
  return x;
}

}  // namespace

template <typename T>
ModelParams<T> ModelParams<T>::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const std::size_t d = cfg.dense_channels;
  ModelParams p;
  p.in_conv = Conv<T>::pointwise(d, 2, rng);
  p.in_norm = ChannelNorm<T>::make(d);
  p.in_act = PRelu<T>::make(d);
  p.in_dense = DenseBlockParams<T>::init(d, cfg.dilate_frequency, rng);
  for (std::size_t s = 0; s < 3; ++s) {
    StageParams<T> st;
    const std::size_t c = cfg.width(s);
    if (s > 0) {
      Conv2dOptions o;
      o.stride = {2, 2};
      o.padding = {1, 1};
      st.down = Conv<T>::make(c, cfg.width(s - 1), 3, 3, rng, o);
    }
    st.embed = DeformEmbedParams<T>::init(c, c, rng);
    for (std::size_t b = 0; b < cfg.blocks_per_stage; ++b) {
      st.blocks.push_back(MetBlockParams<T>::init(cfg.met(s), rng));
    }
    p.encoder.push_back(std::move(st));
  }
  for (std::size_t s : {std::size_t{1}, std::size_t{0}}) {
    StageParams<T> st;
    const std::size_t c = cfg.width(s);
    st.up = make_up<T>(cfg.width(s + 1), c, rng);
    st.fuse = Conv<T>::pointwise(c, 2 * c, rng);
    st.embed = DeformEmbedParams<T>::init(c, c, rng);
    for (std::size_t b = 0; b < cfg.blocks_per_stage; ++b) {
      st.blocks.push_back(MetBlockParams<T>::init(cfg.met(s), rng));
    }
    p.decoder.push_back(std::move(st));
  }
  p.mag_dense = DenseBlockParams<T>::init(d, cfg.dilate_frequency, rng);
  p.mag_head = Conv<T>::pointwise(1, d, rng);
  p.pha_dense = DenseBlockParams<T>::init(d, cfg.dilate_frequency, rng);
  p.pha_real = Conv<T>::pointwise(1, d, rng);
  p.pha_imag = Conv<T>::pointwise(1, d, rng);
  return p;
}

template <typename T>
ParamList<T> ModelParams<T>::parameters() const {
  ParamList<T> out;
  in_conv.collect("encoder.conv", out);
  in_norm.collect("encoder.norm", out);
  in_act.collect("encoder.act", out);
  in_dense.collect("encoder.dense", out);
  for (std::size_t s = 0; s < encoder.size(); ++s) collect_stage("enc" + std::to_string(s), encoder[s], out);
  for (std::size_t k = 0; k < decoder.size(); ++k) {
    collect_stage("dec" + std::to_string(decoder.size() - 1 - k), decoder[k], out);
  }
  mag_dense.collect("mag.dense", out);
  mag_head.collect("mag.head", out);
  pha_dense.collect("phase.dense", out);
  pha_real.collect("phase.real", out);
  pha_imag.collect("phase.imag", out);
  return out;
}

template <typename T>
Tensor<T> dilated_dense_block(const Tensor<T>& x, const DenseBlockParams<T>& p) {
  Tensor<T> skip = x;
  Tensor<T> out = x;
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const auto& l = p.layers[i];
    out = l.act(l.norm(l.conv(skip)));
    if (i + 1 < p.layers.size()) skip = concat<T>({out, skip}, 1);
  }
  return out;
}

template <typename T>
Tensor<T> input_encoder(const Tensor<T>& packed, const ModelParams<T>& p) {
  if (packed.ndim() != 4 || packed.dim(1) != 2) {
    throw ShapeError("input_encoder: expected [B,2,T,F], got " + shape_str(packed.shape()));
  }
  return dilated_dense_block(p.in_act(p.in_norm(p.in_conv(packed))), p.in_dense);
}

template <typename T>
Tensor<T> downsample(const Tensor<T>& x, const Conv<T>& conv) {
  return conv(x);
}

template <typename T>
Tensor<T> upsample(const Tensor<T>& x, const ConvTranspose<T>& up,
                   std::pair<std::size_t, std::size_t> target) {
  auto y = conv_transpose2d<T>(x, up.weight, up.bias, {2, 2}, {1, 1});
  if (y.dim(2) < target.first || y.dim(3) < target.second) {
    throw ShapeError("upsample: " + shape_str(y.shape()) + " smaller than ledger entry " +
                     std::to_string(target.first) + "x" + std::to_string(target.second));
  }
  if (y.dim(2) != target.first) y = slice(y, 2, 0, target.first);
  if (y.dim(3) != target.second) y = slice(y, 3, 0, target.second);
  return y;
}

template <typename T>
NetworkOutput<T> magnitude_decoder(const Tensor<T>& features, const ModelParams<T>& p,
                                   const Tensor<T>& mag_c_in, const ModelConfig& cfg,
                                   bool force_unit_mask) {
  NetworkOutput<T> out;
  if (force_unit_mask) {
    out.mask = Tensor<T>::ones(mag_c_in.shape());
  } else {
    out.mask = scale(sigmoid(p.mag_head(dilated_dense_block(features, p.mag_dense))),
                     static_cast<T>(cfg.mask_beta));
  }
  out.mag_c = mul(out.mask, mag_c_in);
  out.magnitude = pow_scalar(out.mag_c, static_cast<T>(1.0 / cfg.stft.compression_exponent));
  return out;
}

template <typename T>
Tensor<T> phase_decoder(const Tensor<T>& features, const ModelParams<T>& p) {
  const auto h = dilated_dense_block(features, p.pha_dense);
  return atan2(p.pha_imag(h), p.pha_real(h));
}

template <typename T>
NetworkOutput<T> network_forward(const Tensor<T>& packed, const ModelParams<T>& p,
                                 const ModelConfig& cfg, const ForwardOptions& opt) {
  ShapeLedger ledger;
  std::vector<Tensor<T>> skips;
  Tensor<T> x = input_encoder(packed, p);
  for (std::size_t s = 0; s < p.encoder.size(); ++s) {
    if (s > 0) x = downsample(x, *p.encoder[s].down);
    ledger.stages.emplace_back(x.dim(2), x.dim(3));
    x = run_stage_body(x, p.encoder[s], cfg.met(s));
    if (s + 1 < p.encoder.size()) skips.push_back(x);
  }
  for (std::size_t k = 0; k < p.decoder.size(); ++k) {
    const std::size_t s = p.decoder.size() - 1 - k;
    const auto& st = p.decoder[k];
    if (s >= ledger.stages.size()) throw ShapeError("network_forward: shape ledger missing stage");
    x = upsample(x, *st.up, ledger.stages[s]);
    Tensor<T> skip = skips[s];
    if (opt.drop_skip && *opt.drop_skip == s) skip = Tensor<T>::zeros(skip.shape());
    x = (*st.fuse)(concat<T>({x, skip}, 1));
    x = run_stage_body(x, st, cfg.met(s));
  }
  auto out = magnitude_decoder(x, p, slice(packed, 1, 0, 1), cfg, opt.force_unit_mask);
  out.phase = opt.force_input_phase ? slice(packed, 1, 1, 1) : phase_decoder(x, p);
  out.ledger = std::move(ledger);
  return out;
}

template <typename T>
EnhanceOutput<T> enhance_batch(const std::vector<std::vector<double>>& waves,
                               const ModelParams<T>& p, const ModelConfig& cfg,
                               const ForwardOptions& opt) {
  if (waves.empty()) throw ShapeError("enhance_batch: empty batch");
  const std::size_t L = waves.front().size();
  std::vector<Tensor<T>> inputs;
  for (const auto& w : waves) {
    if (w.size() != L) throw ShapeError("enhance_batch: mixed lengths in one batch");
    inputs.push_back(packed_to_tensor<T>(pack_input(stft(w, cfg.stft))));
  }
  const auto packed = inputs.size() == 1 ? inputs.front() : concat(inputs, 0);
  EnhanceOutput<T> out;
  out.net = network_forward(packed, p, cfg, opt);
  const std::size_t frames = packed.dim(2), bins = packed.dim(3);
  for (std::size_t b = 0; b < waves.size(); ++b) {
    auto mag = reshape(slice(out.net.magnitude, 0, b, 1), {frames, bins});
    auto pha = reshape(slice(out.net.phase, 0, b, 1), {frames, bins});
    out.waves.push_back(istft_op(mul(mag, cos(pha)), mul(mag, sin(pha)), cfg.stft, L));
  }
  return out;
}

template <typename T>
std::vector<double> model_forward(std::span<const double> wave, const ModelParams<T>& p,
                                  const ModelConfig& cfg, const ForwardOptions& opt) {
  NoGradGuard guard;
  const auto out = enhance_batch<T>({std::vector<double>(wave.begin(), wave.end())}, p, cfg, opt);
  const auto d = out.waves.front().data();
  return {d.begin(), d.end()};
}

template <typename T>
ParamBreakdown count_params(const ModelParams<T>& p) {
  ParamBreakdown r;
  std::vector<std::pair<std::string, std::size_t>> rows;
  for (const auto& np : p.parameters()) {
    const auto first = np.name.find('.');
    const auto second = np.name.find('.', first + 1);
    const std::string group = np.name.substr(0, second);
    if (rows.empty() || rows.back().first != group) rows.emplace_back(group, 0);
    rows.back().second += np.value.numel();
    r.total += np.value.numel();
  }
  r.modules = std::move(rows);
  return r;
}

#define MUSE_INSTANTIATE_MODEL(T)                                                               \
  template struct DenseBlockParams<T>;                                                          \
  template struct ModelParams<T>;                                                               \
  template Tensor<T> dilated_dense_block(const Tensor<T>&, const DenseBlockParams<T>&);         \
  template Tensor<T> input_encoder(const Tensor<T>&, const ModelParams<T>&);                    \
  template Tensor<T> downsample(const Tensor<T>&, const Conv<T>&);                              \
  template Tensor<T> upsample(const Tensor<T>&, const ConvTranspose<T>&,                        \
                              std::pair<std::size_t, std::size_t>);                             \
  template NetworkOutput<T> magnitude_decoder(const Tensor<T>&, const ModelParams<T>&,          \
                                              const Tensor<T>&, const ModelConfig&, bool);      \
  template Tensor<T> phase_decoder(const Tensor<T>&, const ModelParams<T>&);                    \
  template NetworkOutput<T> network_forward(const Tensor<T>&, const ModelParams<T>&,            \
                                            const ModelConfig&, const ForwardOptions&);         \
  template EnhanceOutput<T> enhance_batch(const std::vector<std::vector<double>>&,              \
                                          const ModelParams<T>&, const ModelConfig&,            \
                                          const ForwardOptions&);                               \
  template std::vector<double> model_forward(std::span<const double>, const ModelParams<T>&,    \
                                             const ModelConfig&, const ForwardOptions&);        \
  template ParamBreakdown count_params(const ModelParams<T>&);

MUSE_INSTANTIATE_MODEL(float)
MUSE_INSTANTIATE_MODEL(double)

}  // namespace muse
