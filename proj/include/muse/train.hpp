#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "muse/model.hpp"

namespace muse {

struct LossWeights {
  double mag = 0.9;
  double pha = 0.3;
  double complex = 0.1;
  double time = 0.2;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct TrainConfig {
  double lr = 5e-4;
  double lr_decay = 0.99;  // applied once per epoch
  std::size_t batch_size = 2;
  std::size_t epochs = 100;
  std::uint64_t seed = 0;
  LossWeights weights;
  AdamWConfig adamw;
  double grad_clip = 0;          // global-norm clip, 0 disables
  std::size_t checkpoint_every = 1;  // epochs between checkpoints, 0 writes only the final one
  std::size_t max_steps = 0;     // stop early after this many steps, 0 = no limit

  void validate() const;
};

// Learning rate in effect during the given (0-based) epoch.
double lr_at_epoch(const TrainConfig& cfg, std::size_t epoch);

struct LossTerms {
  double total = 0, mag = 0, pha = 0, complex = 0, time = 0;
};

// Compressed magnitude, phase and waveform of one side of the loss.
template <typename T>
struct SpectralSignal {
  Tensor<T> mag_c;
  Tensor<T> phase;
  Tensor<T> wave;
};

// mean |x - 2 pi round(x / 2 pi)| of est - ref.
template <typename T>
Tensor<T> anti_wrap_phase_loss(const Tensor<T>& est, const Tensor<T>& ref);

// Weighted sum of magnitude MSE, anti-wrapped phase, compressed complex MSE
// and waveform L1. Terms with zero weight are skipped. Unweighted term values
// are written to `terms` when given.
template <typename T>
Tensor<T> composite_loss(const SpectralSignal<T>& est, const SpectralSignal<T>& ref,
                         const LossWeights& w, LossTerms* terms = nullptr);

template <typename T>
class AdamW {
 public:
  AdamW(ParamList<T> params, AdamWConfig cfg);

  // Applies one update at learning rate `lr`. Returns false, leaving every
  // parameter untouched, when any gradient is non-finite.
  bool step(double lr, double grad_clip = 0);
  void zero_grad();

  std::size_t steps() const { return t_; }
  std::size_t skipped() const { return skipped_; }

 private:
  ParamList<T> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
  std::size_t skipped_ = 0;
};

// Segmental SNR in dB. Frames whose clean energy is below -60 dBFS are
// skipped; per-frame values are clamped to [-10, 35].
double ssnr(std::span<const double> clean, std::span<const double> estimate,
            std::size_t frame = 512, std::size_t hop = 256);

// Scale-invariant SDR in dB, capped at 60.
double si_sdr(std::span<const double> clean, std::span<const double> estimate);

struct FileMetrics {
  std::string name;
  double ssnr = 0;
  double si_sdr = 0;
};

struct MetricReport {
  std::vector<FileMetrics> files;
  double mean_ssnr = 0;
  double mean_si_sdr = 0;

  void add(FileMetrics m);
};

struct TrainPair {
  std::vector<double> clean;
  std::vector<double> noisy;
};

struct TrainLogRow {
  std::size_t epoch = 0;  // 1-based
  std::size_t step = 0;   // 1-based, global
  LossTerms loss;
  double lr = 0;
};

inline constexpr const char* kTrainLogHeader = "epoch,step,loss_total,loss_mag,loss_pha,loss_complex,loss_time,lr";
std::string format_log_row(const TrainLogRow& row);

struct TrainOutputs {
  std::string log_path;        // CSV log, empty to skip
  std::string checkpoint_dir;  // empty to skip checkpoints
  std::function<void(const TrainLogRow&)> on_step;
};

struct TrainResult {
  std::vector<TrainLogRow> log;
  std::size_t skipped_steps = 0;
  std::vector<std::string> checkpoints;
};

template <typename T>
TrainResult train_loop(ModelParams<T>& params, const ModelConfig& model_cfg,
                       const std::vector<TrainPair>& data, const TrainConfig& cfg,
                       const TrainOutputs& out = {});

}  // namespace muse
