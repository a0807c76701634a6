#include <doctest.h>

#include <numbers>
#include <set>

#include "muse/ops.hpp"
#include "muse/grad_suites.hpp"
#include "muse/model.hpp"
#include "oracles.hpp"

using namespace muse;

namespace {

using T64 = Tensor<double>;

std::vector<double> vec(const T64& t) { return {t.data().begin(), t.data().end()}; }

T64 rand_t(Shape s, std::uint64_t seed, double lo = -1, double hi = 1) {
  Rng rng(seed);
  return uniform_tensor<double>(std::move(s), lo, hi, rng);
}

std::vector<double> noise(std::size_t n, std::uint64_t seed, double amp = 0.5) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-amp, amp);
  return v;
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

void set_conv(Conv<double>& c, double w, double b) {
  for (auto& v : c.weight.mutable_data()) v = w;
  for (auto& v : c.bias->mutable_data()) v = b;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.width(0) == 16);
  CHECK(c.width(1) == 32);
  CHECK(c.width(2) == 48);
  c.attention_heads = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.mask_beta = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.stft.hop_length = 600;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("dilated dense block") {
  Rng rng(1);
  const auto p = DenseBlockParams<double>::init(4, false, rng);
  REQUIRE(p.layers.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(p.layers[i].conv.weight.shape() == Shape{4, 4 * (i + 1), 3, 3});
    CHECK(p.layers[i].conv.opt.dilation[0] == kDenseDilations[i]);
    CHECK(p.layers[i].conv.opt.dilation[1] == 1);
  }

  SUBCASE("shape preserved") {
    Rng r16(2);
    const auto p16 = DenseBlockParams<double>::init(16, false, r16);
    CHECK(dilated_dense_block(rand_t({1, 16, 32, 64}, 3), p16).shape() == Shape{1, 16, 32, 64});
  }

  SUBCASE("impulse response spans 31 frames and 9 bins") {
    const std::size_t T = 64, F = 21, t0 = 30, f0 = 10;
    const auto base = rand_t({1, 4, T, F}, 4);
    auto bumped = vec(base);
    for (std::size_t c = 0; c < 4; ++c) bumped[(c * T + t0) * F + f0] += 1.0;
    const auto a = dilated_dense_block(base, p);
    const auto b = dilated_dense_block(T64(base.shape(), bumped), p);
    long tmin = 1 << 20, tmax = -1, fmin = 1 << 20, fmax = -1;
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t f = 0; f < F; ++f) {
          const std::size_t i = (c * T + t) * F + f;
          if (a.at(i) != b.at(i)) {
            tmin = std::min(tmin, long(t));
            tmax = std::max(tmax, long(t));
            fmin = std::min(fmin, long(f));
            fmax = std::max(fmax, long(f));
          }
        }
    CHECK(tmax - tmin + 1 == 31);
    CHECK(tmin == long(t0) - 15);
    CHECK(fmax - fmin + 1 == 9);
  }
}

TEST_CASE("input encoder maps the packed spectrum to 16 channels") {
  const auto p = ModelParams<float>::init(ModelConfig{}, 5);
  const auto spec = stft(noise(30700, 6), StftConfig{});
  const auto x = packed_to_tensor<float>(pack_input(spec));
  CHECK(x.shape() == Shape{1, 2, 308, 256});
  NoGradGuard ng;
  const auto y = input_encoder(x, p);
  CHECK(y.shape() == Shape{1, 16, 308, 256});
  const auto z1 = input_encoder(Tensor<float>::zeros({1, 2, 8, 8}), p);
  const auto z2 = input_encoder(Tensor<float>::zeros({1, 2, 8, 8}), p);
  for (std::size_t i = 0; i < z1.numel(); ++i) {
    REQUIRE(std::isfinite(z1.at(i)));
    CHECK(z1.at(i) == z2.at(i));
  }
}

TEST_CASE("down and up sampling follow the shape ledger") {
  Rng rng(7);
  Conv2dOptions o;
  o.stride = {2, 2};
  o.padding = {1, 1};
  const auto d1 = Conv<double>::make(2, 1, 3, 3, rng, o);
  const auto x = rand_t({1, 1, 308, 256}, 8);
  const auto a = downsample(x, d1);
  CHECK(a.shape() == Shape{1, 2, 154, 128});
  const auto d2 = Conv<double>::make(3, 2, 3, 3, rng, o);
  const auto b = downsample(a, d2);
  CHECK(b.shape() == Shape{1, 3, 77, 64});

  const ConvTranspose<double> up{rand_t({3, 2, 4, 4}, 9), rand_t({2}, 10)};
  CHECK(upsample(b, up, {154, 128}).shape() == Shape{1, 2, 154, 128});

  // Odd sizes: 77 -> 39 -> 78, cropped back to 77.
  const auto odd = downsample(rand_t({1, 2, 77, 64}, 11), d2);
  CHECK(odd.shape() == Shape{1, 3, 39, 32});
  const auto back = upsample(odd, up, {77, 64});
  CHECK(back.shape() == Shape{1, 2, 77, 64});
  const auto full = conv_transpose2d<double>(odd, up.weight, up.bias, {2, 2}, {1, 1});
  CHECK(full.shape() == Shape{1, 2, 78, 64});
  for (std::size_t t = 0; t < 77; ++t) CHECK(back.at(t * 64 + 5) == full.at(t * 64 + 5));
  CHECK_THROWS_AS(upsample(odd, up, {79, 64}), ShapeError);
}

TEST_CASE("encoder ledger records every stage size") {
  const auto cfg = micro();
  const auto p = ModelParams<double>::init(cfg, 12);
  NoGradGuard ng;
  for (auto [T, F] : {std::pair<std::size_t, std::size_t>{11, 16}, {8, 8}, {13, 9}}) {
    const auto out = network_forward(rand_t({1, 2, T, F}, 13, 0, 1), p, cfg);
    REQUIRE(out.ledger.stages.size() == 3);
    CHECK(out.ledger.stages[0] == std::pair{T, F});
    CHECK(out.ledger.stages[1] == std::pair{(T + 1) / 2, (F + 1) / 2});
    CHECK(out.ledger.stages[2] == std::pair{((T + 1) / 2 + 1) / 2, ((F + 1) / 2 + 1) / 2});
    CHECK(out.magnitude.shape() == Shape{1, 1, T, F});
    CHECK(out.phase.shape() == Shape{1, 1, T, F});
  }
}

TEST_CASE("magnitude decoder") {
  const auto cfg = micro();
  auto p = ModelParams<double>::init(cfg, 14);
  const auto feats = rand_t({1, 4, 6, 5}, 15);
  const auto mag = rand_t({1, 1, 6, 5}, 16, 0, 3);
  const auto mag_c = pow_scalar(mag, 0.3);

  const auto unit = magnitude_decoder(feats, p, mag_c, cfg, true);
  CHECK(oracle::max_abs_diff(vec(unit.magnitude), vec(mag)) < 1e-12);

  const auto rnd = magnitude_decoder(feats, p, mag_c, cfg, false);
  for (double v : rnd.mask.data()) {
    CHECK(v > 0.0);
    CHECK(v < 2.0);
  }
  for (double v : rnd.magnitude.data()) CHECK(v >= 0.0);
  for (std::size_t i = 0; i < mag.numel(); ++i)
    CHECK(rnd.magnitude.at(i) == doctest::Approx(std::pow(rnd.mask.at(i) * mag_c.at(i), 1 / 0.3)).epsilon(1e-12));

  set_conv(p.mag_head, 0.0, -1000.0);
  const auto silenced = magnitude_decoder(feats, p, mag_c, cfg, false);
  for (double v : silenced.magnitude.data()) CHECK(v == 0.0);
}

TEST_CASE("phase decoder") {
  const auto cfg = micro();
  auto p = ModelParams<double>::init(cfg, 17);
  const auto feats = rand_t({1, 4, 6, 5}, 18, -3, 3);
  const double pi = std::numbers::pi;
  const std::vector<std::array<double, 3>> anchors{{1, 0, 0}, {0, 1, pi / 2}, {-1, 0, pi}, {0, -1, -pi / 2}, {0, 0, 0}};
  for (const auto& [r, i, want] : anchors) {
    for (double s : {1.0, 7.5}) {
      set_conv(p.pha_real, 0.0, s * r);
      set_conv(p.pha_imag, 0.0, s * i);
      const auto ph = phase_decoder(feats, p);
      for (double v : ph.data()) CHECK(v == doctest::Approx(want).epsilon(1e-15));
    }
  }
  const auto q = ModelParams<double>::init(cfg, 19);
  const auto ph = phase_decoder(feats, q);
  CHECK(ph.shape() == Shape{1, 1, 6, 5});
  for (double v : ph.data()) {
    CHECK(v > -pi);
    CHECK(v <= pi);
  }
}

TEST_CASE("output length matches input length") {
  const auto cfg = micro();
  const auto p = ModelParams<double>::init(cfg, 20);
  for (std::size_t L : {30, 31, 100, 257, 1000}) {
    const auto y = model_forward<double>(noise(L, L), p, cfg);
    CHECK(y.size() == L);
    for (double v : y) CHECK(std::isfinite(v));
  }
}

TEST_CASE("default model on a 30700-sample segment") {
  const auto p = ModelParams<float>::init(ModelConfig{}, 21);
  const auto x = noise(30700, 22, 0.3);
  const auto y = model_forward<float>(x, p, ModelConfig{});
  CHECK(y.size() == 30700);
  for (double v : y) REQUIRE(std::isfinite(v));
  const auto z = model_forward<float>(std::vector<double>(30700, 0.0), p, ModelConfig{});
  double m = 0;
  for (double v : z) m = std::max(m, std::abs(v));
  CHECK(m < 1e-2);
}

TEST_CASE("identity mask and input phase reproduce the STFT round trip") {
  const auto cfg = micro();
  const auto p = ModelParams<double>::init(cfg, 23);
  const auto x = noise(600, 24);
  ForwardOptions o;
  o.force_unit_mask = true;
  o.force_input_phase = true;
  const auto y = model_forward<double>(x, p, cfg, o);
  const auto ref = istft(stft(x, cfg.stft), x.size());
  CHECK(oracle::max_abs_diff(y, ref) < 1e-6);
  CHECK(oracle::max_abs_diff(y, x) < 1e-6);
}

TEST_CASE("every skip connection reaches the output") {
  const auto cfg = micro();
  const auto p = ModelParams<double>::init(cfg, 25);
  const auto x = noise(400, 26);
  const auto y = model_forward<double>(x, p, cfg);
  for (std::size_t s = 0; s < 2; ++s) {
    ForwardOptions o;
    o.drop_skip = s;
    CHECK(oracle::max_abs_diff(model_forward<double>(x, p, cfg, o), y) > 1e-9);
  }
}

TEST_CASE("forward pass is deterministic") {
  const auto cfg = micro();
  const auto x = noise(500, 27);
  const auto a = model_forward<double>(x, ModelParams<double>::init(cfg, 28), cfg);
  const auto b = model_forward<double>(x, ModelParams<double>::init(cfg, 28), cfg);
  CHECK(a == b);
  const auto c = model_forward<double>(x, ModelParams<double>::init(cfg, 29), cfg);
  CHECK(a != c);
}

TEST_CASE("batched enhancement equals per-item enhancement") {
  const auto cfg = micro();
  const auto p = ModelParams<double>::init(cfg, 30);
  const std::vector<std::vector<double>> waves{noise(300, 31), noise(300, 32)};
  const auto out = enhance_batch(waves, p, cfg);
  REQUIRE(out.waves.size() == 2);
  for (std::size_t i = 0; i < 2; ++i)
    CHECK(oracle::max_abs_diff(vec(out.waves[i]), model_forward<double>(waves[i], p, cfg)) < 1e-12);
  CHECK_THROWS_AS(enhance_batch({noise(300, 33), noise(301, 34)}, p, cfg), ShapeError);
}

TEST_CASE("parameter counts") {
  const auto p = ModelParams<float>::init(ModelConfig{}, 0);
  const auto b = count_params(p);
  CHECK(b.total == 512317);
  CHECK(b.total >= 460000);
  CHECK(b.total <= 560000);
  CHECK(b.total == count_scalars(p.parameters()));
  std::size_t sum = 0;
  for (const auto& [name, n] : b.modules) sum += n;
  CHECK(sum == b.total);
  CHECK(b.modules.front().first == "encoder.conv");

  // No deformable embedding outside the U-Net stages.
  for (const auto& np : p.parameters()) {
    if (np.name.find(".embed.") != std::string::npos) {
      CHECK((np.name.rfind("enc", 0) == 0 || np.name.rfind("dec", 0) == 0));
      CHECK(np.name.rfind("encoder.", 0) != 0);
    }
  }

  // Names are unique.
  std::set<std::string> names;
  for (const auto& np : p.parameters()) CHECK(names.insert(np.name).second);

  ModelConfig small = micro();
  small.blocks_per_stage = 2;
  CHECK(count_params(ModelParams<float>::init(small, 0)).total >
        count_params(ModelParams<float>::init(micro(), 0)).total);
}

TEST_CASE("codec and full-model gradients") {
  for (const auto& r : run_grad_suites<double>("codec-unet", 35)) {
    INFO(r.name);
    CHECK(r.report.passed);
    CHECK(r.report.max_rel_err < 1e-3);
  }
}
