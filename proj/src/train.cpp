#include "muse/train.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>

#include "muse/checkpoint.hpp"

namespace muse {

void TrainConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("lr must be positive");
  if (!(lr_decay > 0 && lr_decay <= 1)) throw ConfigError("lr_decay must be in (0, 1]");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (epochs == 0) throw ConfigError("epochs must be positive");
  for (double w : {weights.mag, weights.pha, weights.complex, weights.time}) {
    if (!(w >= 0)) throw ConfigError("loss weights must be non-negative");
  }
  if (!(adamw.beta1 >= 0 && adamw.beta1 < 1)) throw ConfigError("adam_beta1 must be in [0, 1)");
  if (!(adamw.beta2 >= 0 && adamw.beta2 < 1)) throw ConfigError("adam_beta2 must be in [0, 1)");
  if (!(adamw.eps > 0)) throw ConfigError("adam_eps must be positive");
  if (!(adamw.weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
  if (!(grad_clip >= 0)) throw ConfigError("grad_clip must be non-negative");
}

double lr_at_epoch(const TrainConfig& cfg, std::size_t epoch) {
  return cfg.lr * std::pow(cfg.lr_decay, static_cast<double>(epoch));
}

template <typename T>
Tensor<T> anti_wrap_phase_loss(const Tensor<T>& est, const Tensor<T>& ref) {
  constexpr T two_pi = T(2) * std::numbers::pi_v<T>;
  auto wrap = [](T x) { return x - two_pi * std::round(x / two_pi); };
  const auto aw = map_unary<T>(
      sub(est, ref), "anti_wrap", [wrap](T x) { return std::abs(wrap(x)); },
      [wrap](T x, T) {
        const T w = wrap(x);
        return w > 0 ? T(1) : (w < 0 ? T(-1) : T(0));
      });
  return mean(aw);
}

template <typename T>
Tensor<T> composite_loss(const SpectralSignal<T>& est, const SpectralSignal<T>& ref,
                         const LossWeights& w, LossTerms* terms) {
  for (const auto* t : {&est.mag_c, &est.phase, &est.wave, &ref.mag_c, &ref.phase, &ref.wave}) {
    for (auto v : t->data()) {
      if (!std::isfinite(v)) throw NumericError("composite_loss: non-finite input");
    }
  }
  LossTerms lt;
  Tensor<T> total = Tensor<T>::scalar(T(0));
  auto accumulate = [&](double weight, const Tensor<T>& term, double& slot) {
    slot = static_cast<double>(term.item());
    total = add(total, scale(term, static_cast<T>(weight)));
  };
  if (w.mag > 0) accumulate(w.mag, mse(est.mag_c, ref.mag_c), lt.mag);
  if (w.pha > 0) accumulate(w.pha, anti_wrap_phase_loss(est.phase, ref.phase), lt.pha);
  if (w.complex > 0) {
    const auto re = mse(mul(est.mag_c, cos(est.phase)), mul(ref.mag_c, cos(ref.phase)));
    const auto im = mse(mul(est.mag_c, sin(est.phase)), mul(ref.mag_c, sin(ref.phase)));
    accumulate(w.complex, scale(add(re, im), T(0.5)), lt.complex);
  }
  if (w.time > 0) accumulate(w.time, l1(est.wave, ref.wave), lt.time);
  lt.total = static_cast<double>(total.item());
  if (terms) *terms = lt;
  return total;
}

template <typename T>
AdamW<T>::AdamW(ParamList<T> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(p.value.numel(), 0.0);
    v_.emplace_back(p.value.numel(), 0.0);
  }
}

template <typename T>
bool AdamW<T>::step(double lr, double grad_clip) {
  double sq = 0;
  for (const auto& p : params_) {
    if (!p.value.has_grad()) continue;
    for (auto g : p.value.grad()) {
      if (!std::isfinite(g)) {
        ++skipped_;
        return false;
      }
      sq += static_cast<double>(g) * static_cast<double>(g);
    }
  }
  double clip = 1;
  if (grad_clip > 0) {
    const double norm = std::sqrt(sq);
    if (norm > grad_clip) clip = grad_clip / norm;
  }
  ++t_;
  const double bc1 = 1 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i].value;
    const bool has = p.has_grad();
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = has ? clip * static_cast<double>(g[k]) : 0.0;
      double wk = static_cast<double>(w[k]);
      wk -= lr * cfg_.weight_decay * wk;
      m[k] = cfg_.beta1 * m[k] + (1 - cfg_.beta1) * gk;
      v[k] = cfg_.beta2 * v[k] + (1 - cfg_.beta2) * gk * gk;
      wk -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg_.eps);
      w[k] = static_cast<T>(wk);
    }
  }
  return true;
}

template <typename T>
void AdamW<T>::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

namespace {

double energy(std::span<const double> x) {
  double e = 0;
  for (double v : x) e += v * v;
  return e;
}

void check_pair(std::span<const double> clean, std::span<const double> est, const char* what) {
  if (clean.size() != est.size()) {
    throw ShapeError(std::string(what) + ": length mismatch " + std::to_string(clean.size()) +
                     " vs " + std::to_string(est.size()));
  }
  if (clean.empty()) throw ShapeError(std::string(what) + ": empty signal");
}

}  // namespace

double ssnr(std::span<const double> clean, std::span<const double> estimate, std::size_t frame,
            std::size_t hop) {
  check_pair(clean, estimate, "ssnr");
  if (frame == 0 || hop == 0) throw std::invalid_argument("ssnr: frame and hop must be positive");
  const std::size_t n = clean.size();
  const std::size_t len = std::min(frame, n);
  // -60 dBFS mean-square floor for a frame to count.
  constexpr double silence = 1e-6;
  double acc = 0;
  std::size_t used = 0;
  for (std::size_t start = 0; start + len <= n; start += hop) {
    const auto s = clean.subspan(start, len);
    const double es = energy(s);
    if (es / static_cast<double>(len) < silence) continue;
    double ee = 0;
    for (std::size_t i = 0; i < len; ++i) {
      const double d = s[i] - estimate[start + i];
      ee += d * d;
    }
    const double db = ee > 0 ? 10 * std::log10(es / ee) : 35.0;
    acc += std::clamp(db, -10.0, 35.0);
    ++used;
  }
  if (used == 0) throw NumericError("ssnr: every frame of the reference is silent");
  return acc / static_cast<double>(used);
}

double si_sdr(std::span<const double> clean, std::span<const double> estimate) {
  check_pair(clean, estimate, "si_sdr");
  const double es = energy(clean);
  if (es == 0) throw NumericError("si_sdr: silent reference");
  const double alpha = std::inner_product(clean.begin(), clean.end(), estimate.begin(), 0.0) / es;
  double et = 0, ee = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const double t = alpha * clean[i];
    et += t * t;
    ee += (estimate[i] - t) * (estimate[i] - t);
  }
  constexpr double tiny = 1e-30;
  if (ee <= tiny * es) return 60.0;
  return std::min(60.0, 10 * std::log10((et + tiny) / ee));
}

void MetricReport::add(FileMetrics m) {
  files.push_back(std::move(m));
  double s = 0, d = 0;
  for (const auto& f : files) {
    s += f.ssnr;
    d += f.si_sdr;
  }
  mean_ssnr = s / static_cast<double>(files.size());
  mean_si_sdr = d / static_cast<double>(files.size());
}

namespace {

std::string num(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

}  // namespace

std::string format_log_row(const TrainLogRow& r) {
  return std::to_string(r.epoch) + "," + std::to_string(r.step) + "," + num(r.loss.total) + "," +
         num(r.loss.mag) + "," + num(r.loss.pha) + "," + num(r.loss.complex) + "," +
         num(r.loss.time) + "," + num(r.lr);
}

template <typename T>
TrainResult train_loop(ModelParams<T>& params, const ModelConfig& model_cfg,
                       const std::vector<TrainPair>& data, const TrainConfig& cfg,
                       const TrainOutputs& out) {
  cfg.validate();
  model_cfg.validate();
  if (data.empty()) throw std::invalid_argument("train_loop: dataset is empty");
  const std::size_t L = data.front().clean.size();
  for (const auto& p : data) {
    if (p.clean.size() != L || p.noisy.size() != L) {
      throw ShapeError("train_loop: all segments must share one length");
    }
  }

  std::ofstream log;
  if (!out.log_path.empty()) {
    log.open(out.log_path, std::ios::trunc);
    if (!log) throw std::runtime_error("train_loop: cannot open log " + out.log_path);
    log << kTrainLogHeader << "\n";
  }
  if (!out.checkpoint_dir.empty()) std::filesystem::create_directories(out.checkpoint_dir);

  // Clean targets do not change; compute their spectra once.
  std::vector<Tensor<T>> targets;
  for (const auto& p : data) targets.push_back(packed_to_tensor<T>(pack_input(stft(p.clean, model_cfg.stft))));

  TrainResult result;
  AdamW<T> opt(params.parameters(), cfg.adamw);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::size_t step = 0;
  bool done = false;

  auto save = [&](const std::string& name) {
    if (out.checkpoint_dir.empty()) return;
    const auto path = (std::filesystem::path(out.checkpoint_dir) / name).string();
    save_checkpoint(path, model_cfg, params);
    result.checkpoints.push_back(path);
  };

  for (std::size_t epoch = 0; epoch < cfg.epochs && !done; ++epoch) {
    const double lr = lr_at_epoch(cfg, epoch);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
      std::vector<std::vector<double>> noisy;
      std::vector<Tensor<T>> tgt;
      std::vector<T> clean_wave;
      for (std::size_t i = b0; i < b1; ++i) {
        noisy.push_back(data[order[i]].noisy);
        tgt.push_back(targets[order[i]]);
        for (double v : data[order[i]].clean) clean_wave.push_back(static_cast<T>(v));
      }
      const auto enh = enhance_batch(noisy, params, model_cfg);
      const auto target = tgt.size() == 1 ? tgt.front() : concat(tgt, 0);
      SpectralSignal<T> est{enh.net.mag_c, enh.net.phase,
                            enh.waves.size() == 1 ? enh.waves.front() : concat(enh.waves, 0)};
      const Shape wshape{clean_wave.size()};
      SpectralSignal<T> ref{slice(target, 1, 0, 1), slice(target, 1, 1, 1),
                            Tensor<T>(wshape, std::move(clean_wave))};

      TrainLogRow row;
      const auto loss = composite_loss(est, ref, cfg.weights, &row.loss);
      opt.zero_grad();
      loss.backward();
      opt.step(lr, cfg.grad_clip);

      row.epoch = epoch + 1;
      row.step = ++step;
      row.lr = lr;
      if (log) log << format_log_row(row) << "\n";
      if (out.on_step) out.on_step(row);
      result.log.push_back(row);
      if (cfg.max_steps && step >= cfg.max_steps) {
        done = true;
        break;
      }
    }
    if (!done && cfg.checkpoint_every && (epoch + 1) % cfg.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof(name), "epoch_%03zu.ckpt", epoch + 1);
      save(name);
    }
  }
  save("final.ckpt");
  result.skipped_steps = opt.skipped();
  if (log) {
    log.flush();
    if (!log) throw std::runtime_error("train_loop: failed writing log " + out.log_path);
  }
  return result;
}

#define MUSE_INSTANTIATE_TRAIN(T)                                                               \
  template Tensor<T> anti_wrap_phase_loss(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> composite_loss(const SpectralSignal<T>&, const SpectralSignal<T>&,         \
                                    const LossWeights&, LossTerms*);                            \
  template class AdamW<T>;                                                                      \
  template TrainResult train_loop(ModelParams<T>&, const ModelConfig&,                          \
                                  const std::vector<TrainPair>&, const TrainConfig&,            \
                                  const TrainOutputs&);

MUSE_INSTANTIATE_TRAIN(float)
MUSE_INSTANTIATE_TRAIN(double)

}  // namespace muse
