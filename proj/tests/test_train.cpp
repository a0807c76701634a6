#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <numbers>

#include "muse/ops.hpp"
#include "muse/grad_suites.hpp"
#include "muse/train.hpp"

using namespace muse;
namespace fs = std::filesystem;

namespace {

using T64 = Tensor<double>;

std::vector<double> noise(std::size_t n, std::uint64_t seed, double amp = 0.5) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-amp, amp);
  return v;
}

SpectralSignal<double> signal(std::uint64_t seed, std::size_t T = 5, std::size_t F = 6, std::size_t L = 40) {
  Rng rng(seed);
  return {uniform_tensor<double>({1, 1, T, F}, 0, 2, rng), uniform_tensor<double>({1, 1, T, F}, -3, 3, rng),
          uniform_tensor<double>({1, L}, -1, 1, rng)};
}

ModelConfig micro() {
  ModelConfig c;
  c.dense_channels = 4;
  c.blocks_per_stage = 1;
  c.ffn_expansion = 2;
  c.stft.n_fft = 30;
  c.stft.win_length = 30;
  c.stft.hop_length = 8;
  return c;
}

std::vector<TrainPair> tiny_data(std::size_t n, std::size_t L) {
  std::vector<TrainPair> d;
  for (std::size_t i = 0; i < n; ++i) {
    auto clean = noise(L, 100 + i, 0.3);
    auto noisy = clean;
    const auto e = noise(L, 200 + i, 0.1);
    for (std::size_t k = 0; k < L; ++k) noisy[k] += e[k];
    d.push_back({clean, noisy});
  }
  return d;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("muse_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("anti-wrapped phase loss") {
  const double pi = std::numbers::pi;
  const T64 p({4}, {0.1, -2.0, 3.0, -3.1});
  CHECK(anti_wrap_phase_loss(p, p).item() == 0.0);
  auto shifted = [&](double d) {
    std::vector<double> v(p.data().begin(), p.data().end());
    for (auto& x : v) x += d;
    return T64({4}, v);
  };
  CHECK(anti_wrap_phase_loss(shifted(2 * pi), p).item() < 1e-12);
  CHECK(anti_wrap_phase_loss(shifted(-6 * pi), p).item() < 1e-12);
  CHECK(anti_wrap_phase_loss(p, shifted(4 * pi)).item() < 1e-12);
  CHECK(anti_wrap_phase_loss(shifted(pi), p).item() == doctest::Approx(pi).epsilon(1e-12));
  CHECK(anti_wrap_phase_loss(shifted(0.5), p).item() == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(anti_wrap_phase_loss(shifted(2 * pi - 0.5), p).item() == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("composite loss") {
  const auto a = signal(1), b = signal(2);
  LossTerms t;
  CHECK(composite_loss(a, a, LossWeights{}, &t).item() == 0.0);
  CHECK(t.total == 0.0);

  Rng rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    LossWeights w{rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()};
    const auto x = signal(10 + rep), y = signal(50 + rep);
    CHECK(composite_loss(x, y, w).item() >= 0.0);
    CHECK(composite_loss(x, x, w).item() == 0.0);
  }

  // Term decomposition and per-term linearity.
  const LossWeights w{};
  const double total = composite_loss(a, b, w, &t).item();
  CHECK(total == doctest::Approx(0.9 * t.mag + 0.3 * t.pha + 0.1 * t.complex + 0.2 * t.time).epsilon(1e-12));
  LossWeights w2 = w;
  w2.mag *= 2;
  LossTerms t2;
  const double total2 = composite_loss(a, b, w2, &t2).item();
  CHECK(t2.mag == t.mag);
  CHECK(total2 - total == doctest::Approx(0.9 * t.mag).epsilon(1e-12));

  // Independent evaluation of each term.
  double mag = 0, pha = 0, cpx = 0, tim = 0;
  const std::size_t n = a.mag_c.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const double ma = a.mag_c.at(i), mb = b.mag_c.at(i), pa = a.phase.at(i), pb = b.phase.at(i);
    mag += (ma - mb) * (ma - mb) / double(n);
    const double d = pa - pb;
    pha += std::abs(d - 2 * std::numbers::pi * std::round(d / (2 * std::numbers::pi))) / double(n);
    const double dr = ma * std::cos(pa) - mb * std::cos(pb), di = ma * std::sin(pa) - mb * std::sin(pb);
    cpx += 0.5 * (dr * dr + di * di) / double(n);
  }
  for (std::size_t i = 0; i < a.wave.numel(); ++i) tim += std::abs(a.wave.at(i) - b.wave.at(i)) / double(a.wave.numel());
  CHECK(t.mag == doctest::Approx(mag).epsilon(1e-12));
  CHECK(t.pha == doctest::Approx(pha).epsilon(1e-12));
  CHECK(t.complex == doctest::Approx(cpx).epsilon(1e-12));
  CHECK(t.time == doctest::Approx(tim).epsilon(1e-12));

  // Zero weights skip a term entirely.
  LossWeights only_time{0, 0, 0, 1};
  CHECK(composite_loss(a, b, only_time).item() == doctest::Approx(tim).epsilon(1e-12));

  // Non-finite values are rejected as soon as they enter a tensor.
  CHECK_THROWS_AS(T64({1, 40}, std::vector<double>(40, std::nan(""))), NumericError);
}

TEST_CASE("AdamW") {
  SUBCASE("zero gradient and no decay leave parameters alone") {
    auto w = T64({3}, {1, -2, 3}, true);
    AdamW<double> opt({{"w", w}}, AdamWConfig{0.9, 0.999, 1e-8, 0.0});
    auto loss = sum(scale(w, 0.0));
    loss.backward();
    CHECK(opt.step(0.1));
    CHECK(w.at(0) == 1.0);
    CHECK(w.at(1) == -2.0);
  }

  SUBCASE("first step with unit gradient moves by lr") {
    auto w = T64({1}, {0.5}, true);
    AdamW<double> opt({{"w", w}}, AdamWConfig{0.9, 0.999, 1e-8, 0.0});
    sum(w).backward();
    opt.step(1e-3);
    CHECK(w.at(0) == doctest::Approx(0.5 - 1e-3).epsilon(1e-9));
  }

  SUBCASE("decoupled weight decay") {
    auto w = T64({1}, {2.0}, true);
    AdamW<double> opt({{"w", w}}, AdamWConfig{0.9, 0.999, 1e-8, 0.1});
    sum(scale(w, 0.0)).backward();
    opt.step(0.5);
    CHECK(w.at(0) == doctest::Approx(2.0 - 0.5 * 0.1 * 2.0).epsilon(1e-12));
  }

  SUBCASE("quadratic bowl converges") {
    auto w = T64({1}, {1.0}, true);
    AdamW<double> opt({{"w", w}}, AdamWConfig{0.9, 0.999, 1e-8, 0.0});
    for (int i = 0; i < 200; ++i) {
      opt.zero_grad();
      sum(mul(w, w)).backward();
      opt.step(0.05);
    }
    CHECK(std::abs(w.at(0)) < 1e-2);
    CHECK(opt.steps() == 200);
  }

  SUBCASE("loss descends monotonically after warm-up") {
    auto w = T64({4}, {1.0, -0.5, 2.0, 0.25}, true);
    AdamW<double> opt({{"w", w}}, AdamWConfig{0.9, 0.999, 1e-8, 0.0});
    double prev = 0;
    for (int i = 0; i < 60; ++i) {
      opt.zero_grad();
      auto f = sum(mul(w, w));
      const double fv = f.item();
      f.backward();
      if (i >= 5) CHECK(fv < prev);
      prev = fv;
      opt.step(0.005);
    }
  }

  SUBCASE("non-finite gradients skip the step") {
    auto w = T64({2}, {1, 1}, true);
    AdamW<double> opt({{"w", w}}, AdamWConfig{});
    auto bad = map_unary(w, "bad", [](double v) { return v; },
                         [](double, double) { return std::numeric_limits<double>::infinity(); });
    sum(bad).backward();
    CHECK_FALSE(opt.step(0.1));
    CHECK(opt.skipped() == 1);
    CHECK(opt.steps() == 0);
    CHECK(w.at(0) == 1.0);
    opt.zero_grad();
    sum(w).backward();
    CHECK(opt.step(0.1));
    CHECK(opt.steps() == 1);
  }

  SUBCASE("global-norm clipping") {
    // beta1 = beta2 = 0 and eps = 1 give the update lr * g / (|g| + 1).
    auto a = T64({1}, {0.0}, true), b = T64({1}, {0.0}, true);
    AdamW<double> opt({{"a", a}, {"b", b}}, AdamWConfig{0.0, 0.0, 1.0, 0.0});
    sum(add(scale(a, 3.0), scale(b, 4.0))).backward();
    opt.step(1.0, 1.0);
    CHECK(a.at(0) == doctest::Approx(-0.6 / 1.6).epsilon(1e-12));
    CHECK(b.at(0) == doctest::Approx(-0.8 / 1.8).epsilon(1e-12));
  }
}

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  CHECK(lr_at_epoch(c, 0) == 5e-4);
  CHECK(lr_at_epoch(c, 10) == doctest::Approx(5e-4 * std::pow(0.99, 10)).epsilon(1e-14));
  c.lr_decay = 1.0;
  CHECK(lr_at_epoch(c, 50) == 5e-4);
  c = TrainConfig{};
  c.lr = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.weights.pha = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("segmental SNR") {
  const auto s = noise(4000, 5);
  CHECK(ssnr(s, s) == 35.0);

  auto est = s;
  const double k = std::pow(10.0, -0.5);
  for (std::size_t i = 0; i < s.size(); ++i) est[i] = s[i] + k * s[i];
  CHECK(ssnr(s, est) == doctest::Approx(10.0).epsilon(1e-3));

  std::vector<double> neg(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) neg[i] = -s[i];
  CHECK(std::abs(ssnr(s, neg) - (-6.0206)) < 0.1);

  std::vector<double> zero(s.size(), 0.0);
  CHECK(ssnr(s, zero) == doctest::Approx(0.0).epsilon(1e-12));
  for (int rep = 0; rep < 20; ++rep) {
    const double v = ssnr(s, noise(4000, 300 + rep, 5.0));
    CHECK(v >= -10.0);
    CHECK(v <= 35.0);
  }

  // Silent frames are left out of the average.
  auto gappy = s;
  for (std::size_t i = 0; i < 2048; ++i) gappy[i] = 0;
  auto gest = gappy;
  for (std::size_t i = 2048; i < gest.size(); ++i) gest[i] += k * gappy[i];
  CHECK(ssnr(gappy, gest) == doctest::Approx(10.0).epsilon(1e-3));

  CHECK_THROWS_AS(ssnr(zero, s), NumericError);
  CHECK_THROWS_AS(ssnr(s, noise(10, 1)), ShapeError);
  // Shorter than one frame: one frame over the whole signal.
  const auto shortsig = noise(300, 6);
  CHECK(ssnr(shortsig, shortsig) == 35.0);
}

TEST_CASE("scale-invariant SDR") {
  const auto s = noise(1000, 7);
  std::vector<double> tri(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) tri[i] = 3 * s[i];
  CHECK(si_sdr(s, tri) == 60.0);

  // Remove the component along s from random noise.
  auto e = noise(1000, 8);
  double es = 0, ss = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    es += e[i] * s[i];
    ss += s[i] * s[i];
  }
  double ee = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    e[i] -= es / ss * s[i];
    ee += e[i] * e[i];
  }
  CHECK(si_sdr(s, e) <= -20.0);

  const double g = std::sqrt(ss / ee) / 10;
  std::vector<double> est(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) est[i] = s[i] + g * e[i];
  CHECK(si_sdr(s, est) == doctest::Approx(20.0).epsilon(1e-3));

  CHECK_THROWS_AS(si_sdr(std::vector<double>(10, 0.0), noise(10, 9)), NumericError);

  MetricReport r;
  r.add({"a", 10, 20});
  r.add({"b", 20, 0});
  CHECK(r.mean_ssnr == 15.0);
  CHECK(r.mean_si_sdr == 10.0);
}

TEST_CASE("log row format") {
  TrainLogRow row{3, 17, {1.5, 0.25, 0.125, 2.0, 0.0005}, 0.0005};
  CHECK(format_log_row(row) == "3,17,1.5,0.25,0.125,2,5e-04,5e-04");
  CHECK(std::string(kTrainLogHeader) == "epoch,step,loss_total,loss_mag,loss_pha,loss_complex,loss_time,lr");
}

TEST_CASE("training loop") {
  const auto cfg = micro();
  const auto data = tiny_data(3, 300);
  TrainConfig tc;
  tc.lr = 1e-3;
  tc.batch_size = 2;
  tc.epochs = 2;
  tc.seed = 4;

  const auto dir = scratch("train_loop");
  TrainOutputs out;
  out.log_path = (dir / "log.csv").string();
  out.checkpoint_dir = (dir / "ckpt").string();
  std::size_t callbacks = 0;
  out.on_step = [&](const TrainLogRow&) { ++callbacks; };
  auto params = ModelParams<double>::init(cfg, 1);
  const auto res = train_loop(params, cfg, data, tc, out);

  // Three pairs at batch 2: two steps per epoch.
  REQUIRE(res.log.size() == 4);
  CHECK(callbacks == 4);
  CHECK(res.log[0].epoch == 1);
  CHECK(res.log[1].step == 2);
  CHECK(res.log[3].epoch == 2);
  CHECK(res.log[0].lr == 1e-3);
  CHECK(res.log[3].lr == doctest::Approx(1e-3 * 0.99).epsilon(1e-14));
  CHECK(res.skipped_steps == 0);

  const auto text = slurp(out.log_path);
  std::string expected = std::string(kTrainLogHeader) + "\n";
  for (const auto& r : res.log) expected += format_log_row(r) + "\n";
  CHECK(text == expected);

  REQUIRE(res.checkpoints.size() == 3);
  CHECK(fs::path(res.checkpoints[0]).filename() == "epoch_001.ckpt");
  CHECK(fs::path(res.checkpoints[1]).filename() == "epoch_002.ckpt");
  CHECK(fs::path(res.checkpoints[2]).filename() == "final.ckpt");
  for (const auto& c : res.checkpoints) CHECK(fs::exists(c));

  SUBCASE("seeded runs are bit-identical") {
    const auto dir2 = scratch("train_loop2");
    TrainOutputs out2;
    out2.log_path = (dir2 / "log.csv").string();
    out2.checkpoint_dir = (dir2 / "ckpt").string();
    auto p2 = ModelParams<double>::init(cfg, 1);
    const auto res2 = train_loop(p2, cfg, data, tc, out2);
    CHECK(slurp(out2.log_path) == text);
    CHECK(slurp(res2.checkpoints.back()) == slurp(res.checkpoints.back()));
    const auto a = params.parameters(), b = p2.parameters();
    for (std::size_t i = 0; i < a.size(); ++i) {
      const bool same = std::equal(a[i].value.data().begin(), a[i].value.data().end(), b[i].value.data().begin());
      CHECK(same);
    }
  }

  SUBCASE("max_steps stops early") {
    TrainConfig t2 = tc;
    t2.max_steps = 3;
    auto p2 = ModelParams<double>::init(cfg, 1);
    CHECK(train_loop(p2, cfg, data, t2).log.size() == 3);
  }

  SUBCASE("bad datasets") {
    auto p2 = ModelParams<double>::init(cfg, 1);
    CHECK_THROWS_AS(train_loop(p2, cfg, {}, tc), std::invalid_argument);
    auto uneven = data;
    uneven[1].noisy.pop_back();
    CHECK_THROWS_AS(train_loop(p2, cfg, uneven, tc), ShapeError);
  }
}

TEST_CASE("short training run lowers the loss") {
  const auto cfg = micro();
  const auto data = tiny_data(1, 400);
  TrainConfig tc;
  tc.lr = 3e-3;
  tc.lr_decay = 1.0;
  tc.batch_size = 1;
  tc.epochs = 40;
  tc.seed = 1;
  auto params = ModelParams<double>::init(cfg, 1);
  const auto res = train_loop(params, cfg, data, tc);
  CHECK(res.log.back().loss.total < 0.7 * res.log.front().loss.total);
}

TEST_CASE("loss gradients") {
  for (const auto& r : run_grad_suites<double>("train-eval", 9)) {
    INFO(r.name);
    CHECK(r.report.passed);
    CHECK(r.report.max_rel_err < 1e-3);
  }
}
