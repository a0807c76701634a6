#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "muse/attention.hpp"
#include "muse/checkpoint.hpp"
#include "muse/config.hpp"
#include "muse/dataset.hpp"
#include "muse/grad_suites.hpp"
#include "muse/train.hpp"
#include "muse/wav.hpp"

using namespace muse;

namespace {

constexpr std::size_t kParamLow = 460000, kParamHigh = 560000;

struct Common {
  std::uint64_t seed = 0;
  std::string precision;
  bool seed_given(const CLI::App& sub) const { return sub.count("--seed") > 0; }
  bool f64(const char* fallback) const { return (precision.empty() ? fallback : precision) == std::string("f64"); }
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--seed", c.seed, "Random seed");
  sub->add_option("--precision", c.precision, "Arithmetic precision")->check(CLI::IsMember({"f32", "f64"}));
}

RunConfig load_config(const std::string& path) { return path.empty() ? RunConfig{} : parse_config(path); }

// First differing line of two `key = value` blocks, or empty.
std::string first_difference(const std::string& a, const std::string& b) {
  std::istringstream sa(a), sb(b);
  std::string la, lb;
  while (std::getline(sa, la) && std::getline(sb, lb)) {
    if (la != lb) return "checkpoint has '" + la + "', config has '" + lb + "'";
  }
  return "";
}

template <typename T>
int enhance(const std::string& model, const std::string& in, const std::string& out,
            const std::string& config, const std::string& ref) {
  const auto ckpt = read_checkpoint(model);
  if (!config.empty()) {
    const auto diff = first_difference(format_model_config(ckpt.config),
                                       format_model_config(parse_config(config).model));
    if (!diff.empty()) throw ConfigError("config does not match checkpoint: " + diff);
  }
  const auto params = params_from_checkpoint<T>(ckpt);
  const auto noisy = read_wav(in);
  WavClip enhanced;
  enhanced.samples = model_forward<T>(noisy.samples, params, ckpt.config);
  write_wav(out, enhanced);
  std::printf("wrote %s (%zu samples)\n", out.c_str(), enhanced.samples.size());
  if (!ref.empty()) {
    const auto clean = read_wav(ref);
    std::printf("ssnr_noisy=%.3f ssnr_enhanced=%.3f si_sdr_noisy=%.3f si_sdr_enhanced=%.3f\n",
                ssnr(clean.samples, noisy.samples), ssnr(clean.samples, enhanced.samples),
                si_sdr(clean.samples, noisy.samples), si_sdr(clean.samples, enhanced.samples));
  }
  return 0;
}

template <typename T>
int train(const RunConfig& cfg, const std::string& clean, const std::string& noisy, const std::string& out) {
  const auto index = build_dataset_index(clean, noisy, cfg.segment_length);
  for (const auto& o : index.orphans) {
    std::fprintf(stderr, "warning: %s has no %s counterpart (%s)\n", o.name.c_str(),
                 o.in_clean ? "noisy" : "clean", o.path.c_str());
  }
  std::vector<TrainPair> data;
  for (auto& s : load_segments(index)) data.push_back(std::move(s.audio));
  std::printf("%zu pairs, %zu segments of %zu samples\n", index.pairs.size(), data.size(), cfg.segment_length);

  std::filesystem::create_directories(out);
  auto params = ModelParams<T>::init(cfg.model, cfg.train.seed);
  TrainOutputs to;
  to.log_path = (std::filesystem::path(out) / "train_log.csv").string();
  to.checkpoint_dir = out;
  to.on_step = [](const TrainLogRow& r) {
    std::printf("epoch %zu step %zu loss %.6f lr %.3g\n", r.epoch, r.step, r.loss.total, r.lr);
    std::fflush(stdout);
  };
  const auto res = train_loop(params, cfg.model, data, cfg.train, to);
  if (res.skipped_steps) std::printf("skipped %zu steps with non-finite gradients\n", res.skipped_steps);
  std::printf("log: %s\n", to.log_path.c_str());
  for (const auto& c : res.checkpoints) std::printf("checkpoint: %s\n", c.c_str());
  return 0;
}

int params_cmd(const RunConfig& cfg) {
  std::printf("%s\n", format_config(cfg).c_str());
  const auto b = count_params(ModelParams<float>::init(cfg.model, 0));
  std::printf("%-16s %10s\n", "module", "params");
  for (const auto& [name, n] : b.modules) std::printf("%-16s %10zu\n", name.c_str(), n);
  std::printf("%-16s %10zu\n", "total", b.total);
  const bool ok = b.total >= kParamLow && b.total <= kParamHigh;
  std::printf("budget [%zu, %zu]: %s\n", kParamLow, kParamHigh, ok ? "within" : "OUTSIDE");
  return ok ? 0 : 1;
}

int bench_attn(std::uint64_t t, std::uint64_t f, std::uint64_t d, bool sweep, const std::string& kind,
               std::uint64_t seed) {
  std::vector<AttentionKind> kinds;
  if (kind == "both" || kind == "msa") kinds.push_back(AttentionKind::msa);
  if (kind == "both" || kind == "tmsa") kinds.push_back(AttentionKind::tmsa);
  std::printf("kind,t,f,D,analytic,measured\n");
  const int steps = sweep ? 5 : 1;
  for (auto k : kinds) {
    for (int i = 0; i < steps; ++i) {
      const auto r = measure_flops(k, t << i, f, d, seed);
      std::printf("%s,%llu,%llu,%llu,%llu,%llu\n", to_string(k).c_str(), (unsigned long long)r.t,
                  (unsigned long long)r.f, (unsigned long long)r.D, (unsigned long long)r.analytic(),
                  (unsigned long long)r.measured);
    }
  }
  return 0;
}

template <typename T>
int gradcheck(const std::string& module, std::uint64_t seed) {
  const auto opt = std::is_same_v<T, float> ? float_grad_options() : GradCheckOptions{};
  bool all_ok = true;
  for (const auto& r : run_grad_suites<T>(module, seed, opt)) {
    all_ok = all_ok && r.report.passed;
    std::printf("%-4s %-13s %-30s max_rel_err=%.3e checked=%zu kinks=%zu\n", r.report.passed ? "ok" : "FAIL",
                r.module.c_str(), r.name.c_str(), r.report.max_rel_err, r.report.checked, r.report.kinks);
    if (!r.report.passed) {
      const auto& w = r.report.worst;
      std::printf("     worst %s[%zu]: analytic %.9g numeric %.9g\n", w.param.c_str(), w.index, w.analytic, w.numeric);
    }
  }
  return all_ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MUSE speech enhancement"};
  app.require_subcommand(1);
  Common common;

  auto* enh = app.add_subcommand("enhance", "Denoise one file");
  std::string model, in, out, config, ref;
  enh->add_option("--model", model, "Checkpoint")->required();
  enh->add_option("--in", in, "Noisy input WAV")->required();
  enh->add_option("--out", out, "Enhanced output WAV")->required();
  enh->add_option("--config", config, "Config that must match the checkpoint");
  enh->add_option("--ref", ref, "Clean reference WAV for metrics");
  add_common(enh, common);

  auto* tr = app.add_subcommand("train", "Train on paired clean/noisy directories");
  std::string clean_dir, noisy_dir, out_dir, train_config;
  tr->add_option("--config", train_config, "Run config")->required();
  tr->add_option("--clean", clean_dir, "Clean WAV directory")->required();
  tr->add_option("--noisy", noisy_dir, "Noisy WAV directory")->required();
  tr->add_option("--out", out_dir, "Output directory")->required();
  add_common(tr, common);

  auto* par = app.add_subcommand("params", "Parameter count and resolved config");
  std::string params_config;
  par->add_option("--config", params_config, "Run config");
  add_common(par, common);

  auto* bench = app.add_subcommand("bench-attn", "Attention multiply-add counts as CSV");
  std::uint64_t bt = 8, bf = 8, bd = 16;
  bool sweep = false;
  std::string kind = "both";
  bench->add_option("--t", bt, "Frames")->check(CLI::PositiveNumber);
  bench->add_option("--f", bf, "Bins")->check(CLI::PositiveNumber);
  bench->add_option("--d", bd, "Head width")->check(CLI::PositiveNumber);
  bench->add_flag("--sweep", sweep, "Double t four times");
  bench->add_option("--kind", kind, "Attention kind")->check(CLI::IsMember({"msa", "tmsa", "both"}));
  add_common(bench, common);

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suites");
  std::string module = "all";
  gc->add_option("--module", module, "Module name or all");
  add_common(gc, common);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*enh) {
      return common.f64("f32") ? enhance<double>(model, in, out, config, ref)
                               : enhance<float>(model, in, out, config, ref);
    }
    if (*tr) {
      auto cfg = parse_config(train_config);
      if (common.seed_given(*tr)) cfg.train.seed = common.seed;
      return common.f64("f32") ? train<double>(cfg, clean_dir, noisy_dir, out_dir)
                               : train<float>(cfg, clean_dir, noisy_dir, out_dir);
    }
    if (*par) return params_cmd(load_config(params_config));
    if (*bench) return bench_attn(bt, bf, bd, sweep, kind, common.seed);
    if (*gc) {
      return common.f64("f64") ? gradcheck<double>(module, common.seed) : gradcheck<float>(module, common.seed);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "muse: error: %s\n", e.what());
    return 2;
  }
  return 0;
}
