#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "muse/deform_embed.hpp"
#include "muse/met_block.hpp"
#include "muse/spectral.hpp"

namespace muse {

inline constexpr std::array<std::size_t, 4> kDenseDilations{1, 2, 4, 8};

struct ModelConfig {
  std::size_t dense_channels = 16;
  std::array<std::size_t, 3> stage_multipliers{1, 2, 3};
  std::size_t blocks_per_stage = 5;
  // Dense-block dilation runs along time; set to dilate frequency as well.
  bool dilate_frequency = false;
  std::size_t attention_heads = 2;
  std::size_t ffn_expansion = 4;
  double attention_eps = 1e-6;
  bool normalize_qk = true;
  double mask_beta = 2.0;
  StftConfig stft;

  std::size_t width(std::size_t stage) const { return dense_channels * stage_multipliers[stage]; }
  MetBlockConfig met(std::size_t stage) const;
  void validate() const;
};

// Four dilated 3x3 convs with dense connectivity; each sees the block input
// concatenated with every earlier output and maps back to C channels.
template <typename T>
struct DenseBlockParams {
  struct Layer {
    Conv<T> conv;
    ChannelNorm<T> norm;
    PRelu<T> act;
  };
  std::vector<Layer> layers;

  static DenseBlockParams init(std::size_t channels, bool dilate_frequency, Rng& rng);
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

template <typename T>
struct ConvTranspose {
  Tensor<T> weight;  // [Cin, Cout, 4, 4]
  Tensor<T> bias;
  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

template <typename T>
struct StageParams {
  std::optional<Conv<T>> down;          // encoder stages 1, 2
  std::optional<ConvTranspose<T>> up;   // decoder stages
  std::optional<Conv<T>> fuse;          // decoder skip fusion, 2C -> C
  DeformEmbedParams<T> embed;
  std::vector<MetBlockParams<T>> blocks;
};

template <typename T>
struct ModelParams {
  Conv<T> in_conv;  // 2 -> d
  ChannelNorm<T> in_norm;
  PRelu<T> in_act;
  DenseBlockParams<T> in_dense;
  std::vector<StageParams<T>> encoder;  // widths d, 2d, 3d
  std::vector<StageParams<T>> decoder;  // widths 2d, d
  DenseBlockParams<T> mag_dense;
  Conv<T> mag_head;  // d -> 1
  DenseBlockParams<T> pha_dense;
  Conv<T> pha_real;  // d -> 1
  Conv<T> pha_imag;  // d -> 1

  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed);
  ParamList<T> parameters() const;
};

// Encoder-stage spatial sizes, used to crop the mirrored upsampling outputs.
struct ShapeLedger {
  std::vector<std::pair<std::size_t, std::size_t>> stages;
};

struct ForwardOptions {
  bool force_unit_mask = false;
  bool force_input_phase = false;
  // Replace the skip tensor of this encoder stage with zeros.
  std::optional<std::size_t> drop_skip;
};

template <typename T>
struct NetworkOutput {
  Tensor<T> mask;       // [B,1,T,F]
  Tensor<T> mag_c;      // compressed magnitude estimate
  Tensor<T> magnitude;  // decompressed
  Tensor<T> phase;      // (-pi, pi]
  ShapeLedger ledger;
};

template <typename T>
struct EnhanceOutput {
  NetworkOutput<T> net;
  std::vector<Tensor<T>> waves;  // one per batch item, input length
};

template <typename T>
Tensor<T> dilated_dense_block(const Tensor<T>& x, const DenseBlockParams<T>& p);

template <typename T>
Tensor<T> input_encoder(const Tensor<T>& packed, const ModelParams<T>& p);

// Strided 3x3 conv, stride 2 on both axes: [B,C,T,F] -> [B,C',ceil(T/2),ceil(F/2)].
template <typename T>
Tensor<T> downsample(const Tensor<T>& x, const Conv<T>& conv);

// Transposed 4x4 conv, stride 2, then crop to `target`.
template <typename T>
Tensor<T> upsample(const Tensor<T>& x, const ConvTranspose<T>& up,
                   std::pair<std::size_t, std::size_t> target);

// mask = beta * sigmoid(z); mag_c = mask * Y_m^c; magnitude = mag_c^(1/c).
// Fills mask, mag_c and magnitude of the result.
template <typename T>
NetworkOutput<T> magnitude_decoder(const Tensor<T>& features, const ModelParams<T>& p,
                                   const Tensor<T>& mag_c_in, const ModelConfig& cfg,
                                   bool force_unit_mask);

// atan2(imag head, real head).
template <typename T>
Tensor<T> phase_decoder(const Tensor<T>& features, const ModelParams<T>& p);

// Packed [B,2,T,F] input to magnitude/phase estimates.
template <typename T>
NetworkOutput<T> network_forward(const Tensor<T>& packed, const ModelParams<T>& p,
                                 const ModelConfig& cfg, const ForwardOptions& opt = {});

// STFT, network, recombination and ISTFT for a batch of equal-length waves.
template <typename T>
EnhanceOutput<T> enhance_batch(const std::vector<std::vector<double>>& waves,
                               const ModelParams<T>& p, const ModelConfig& cfg,
                               const ForwardOptions& opt = {});

// Single-waveform inference without graph recording.
template <typename T>
std::vector<double> model_forward(std::span<const double> wave, const ModelParams<T>& p,
                                  const ModelConfig& cfg, const ForwardOptions& opt = {});

struct ParamBreakdown {
  std::size_t total = 0;
  std::vector<std::pair<std::string, std::size_t>> modules;
};

template <typename T>
ParamBreakdown count_params(const ModelParams<T>& p);

}  // namespace muse
