#include "muse/grad_suites.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>

#include "muse/train.hpp"

namespace muse {

namespace {

template <typename T>
struct Case {
  std::string module;
  std::string name;
  ParamList<T> params;
  std::function<Tensor<T>()> loss;
};

// Random linear functional of `out`, so every output element contributes.
template <typename T>
class Projector {
 public:
  explicit Projector(Rng& rng) : rng_(rng) {}
  Tensor<T> operator()(const Tensor<T>& out) {
    auto& w = weights_[out.shape()];
    if (w.empty()) {
      w.resize(out.numel());
      for (auto& v : w) v = static_cast<T>(rng_.uniform(-1, 1));
    }
    return sum(mul(out, Tensor<T>(out.shape(), w)));
  }

 private:
  Rng& rng_;
  std::map<Shape, std::vector<T>> weights_;
};

template <typename T>
Tensor<T> leaf(Shape s, double lo, double hi, Rng& rng) {
  return uniform_tensor<T>(std::move(s), lo, hi, rng, true);
}

// Uniform magnitude in [lo, hi] with random sign.
template <typename T>
Tensor<T> signed_leaf(Shape s, double lo, double hi, Rng& rng) {
  auto t = leaf<T>(std::move(s), lo, hi, rng);
  for (auto& v : t.mutable_data()) {
    if (rng.uniform() < 0.5) v = -v;
  }
  return t;
}

StftConfig micro_stft() {
  StftConfig c;
  c.n_fft = 14;
  c.win_length = 14;
  c.hop_length = 4;
  return c;
}

ModelConfig micro_model() {
  ModelConfig c;
  c.dense_channels = 4;
  c.blocks_per_stage = 1;
  c.ffn_expansion = 2;
  c.stft = micro_stft();
  return c;
}

// Pushes offset convs away from zero so sample points are fractional.
template <typename T>
void jitter_offsets(DeformEmbedParams<T>& p, Rng& rng) {
  for (auto& v : p.offset.weight.mutable_data()) v = static_cast<T>(0.3 * rng.normal());
  for (auto& v : p.offset.bias->mutable_data()) v = static_cast<T>(rng.uniform(0.2, 0.8));
}

template <typename T>
void add_ops(std::vector<Case<T>>& cases, Rng& rng, Projector<T>& proj) {
  auto unary = [&](std::string name, Tensor<T> x, std::function<Tensor<T>(const Tensor<T>&)> f) {
    cases.push_back({"ops", std::move(name), {{"x", x}}, [=, &proj] { return proj(f(x)); }});
  };
  {
    auto a = leaf<T>({2, 3, 4}, -1, 1, rng), b = leaf<T>({2, 3, 4}, -1, 1, rng);
    cases.push_back({"ops", "add_sub_mul", {{"a", a}, {"b", b}}, [=, &proj] {
                       return proj(mul(add(a, scale(b, T(0.5))), sub(add_scalar(a, T(0.3)), b)));
                     }});
  }
  {
    auto a = leaf<T>({2, 3, 4}, -1, 1, rng), b = leaf<T>({1, 4, 5}, -1, 1, rng);
    cases.push_back({"ops", "matmul", {{"a", a}, {"b", b}}, [=, &proj] { return proj(matmul(a, b)); }});
  }
  {
    auto x = leaf<T>({2, 3, 6, 7}, -1, 1, rng);
    auto w = leaf<T>({4, 3, 3, 3}, -0.5, 0.5, rng), b = leaf<T>({4}, -0.5, 0.5, rng);
    Conv2dOptions o;
    o.stride = {2, 1};
    o.padding = {1, 2};
    o.dilation = {1, 2};
    cases.push_back({"ops", "conv2d", {{"x", x}, {"w", w}, {"b", b}},
                     [=, &proj] { return proj(conv2d<T>(x, w, b, o)); }});
  }
  {
    auto x = leaf<T>({1, 4, 5, 6}, -1, 1, rng);
    auto w = leaf<T>({4, 2, 3, 3}, -0.5, 0.5, rng);
    Conv2dOptions o;
    o.padding = {2, 1};
    o.dilation = {2, 1};
    o.groups = 2;
    cases.push_back({"ops", "conv2d_grouped", {{"x", x}, {"w", w}},
                     [=, &proj] { return proj(conv2d<T>(x, w, std::nullopt, o)); }});
  }
  {
    auto x = leaf<T>({1, 3, 4, 5}, -1, 1, rng);
    auto w = leaf<T>({3, 2, 4, 4}, -0.5, 0.5, rng), b = leaf<T>({2}, -0.5, 0.5, rng);
    cases.push_back({"ops", "conv_transpose2d", {{"x", x}, {"w", w}, {"b", b}},
                     [=, &proj] { return proj(conv_transpose2d<T>(x, w, b, {2, 2}, {1, 1})); }});
  }
  {
    auto x = leaf<T>({2, 3, 5}, -1, 1, rng);
    auto g = leaf<T>({5}, 0.5, 1.5, rng), b = leaf<T>({5}, -0.5, 0.5, rng);
    cases.push_back({"ops", "layer_norm", {{"x", x}, {"gamma", g}, {"beta", b}},
                     [=, &proj] { return proj(layer_norm(x, g, b, T(1e-5))); }});
  }
  {
    auto x = leaf<T>({2, 4, 3, 5}, -1, 1, rng);
    auto g = leaf<T>({4}, 0.5, 1.5, rng), b = leaf<T>({4}, -0.5, 0.5, rng);
    cases.push_back({"ops", "channel_layer_norm", {{"x", x}, {"gamma", g}, {"beta", b}},
                     [=, &proj] { return proj(channel_layer_norm(x, g, b, T(1e-5))); }});
  }
  unary("gelu", leaf<T>({3, 7}, -3, 3, rng), [](const Tensor<T>& x) { return gelu(x); });
  unary("hardswish", leaf<T>({3, 7}, -4.5, 4.5, rng), [](const Tensor<T>& x) { return hardswish(x); });
  unary("sigmoid", leaf<T>({3, 7}, -5, 5, rng), [](const Tensor<T>& x) { return sigmoid(x); });
  unary("cos_sin", leaf<T>({3, 7}, -4, 4, rng), [](const Tensor<T>& x) { return mul(cos(x), add_scalar(sin(x), T(2))); });
  unary("abs", signed_leaf<T>({3, 7}, 0.05, 2, rng), [](const Tensor<T>& x) { return abs(x); });
  unary("pow_scalar", leaf<T>({3, 7}, 0.1, 2, rng),
        [](const Tensor<T>& x) { return add(pow_scalar(x, T(0.3)), pow_scalar(x, T(1.0 / 0.3))); });
  {
    auto x = leaf<T>({2, 3, 2, 4}, -2, 2, rng), a = leaf<T>({3}, 0.1, 0.4, rng);
    cases.push_back({"ops", "prelu", {{"x", x}, {"alpha", a}}, [=, &proj] { return proj(prelu(x, a)); }});
  }
  {
    auto y = signed_leaf<T>({3, 7}, 0.2, 1.5, rng), x = signed_leaf<T>({3, 7}, 0.2, 1.5, rng);
    cases.push_back({"ops", "atan2", {{"y", y}, {"x", x}}, [=, &proj] { return proj(atan2(y, x)); }});
  }
  {
    auto x = leaf<T>({2, 3, 4, 5}, -1, 1, rng), g = leaf<T>({2, 3, 1, 1}, -1, 1, rng);
    cases.push_back({"ops", "pool_mul_channel", {{"x", x}, {"g", g}},
                     [=, &proj] { return proj(mul_channel(x, add(adaptive_avg_pool(x), g))); }});
  }
  {
    auto a = leaf<T>({2, 3, 4}, -1, 1, rng), b = leaf<T>({2, 2, 4}, -1, 1, rng);
    cases.push_back({"ops", "concat_slice_reshape_permute", {{"a", a}, {"b", b}}, [=, &proj] {
                       auto c = concat<T>({a, b}, 1);
                       auto s = slice(c, 1, 1, 3);
                       return proj(permute(reshape(s, {2, 3, 2, 2}), {3, 0, 2, 1}));
                     }});
  }
  {
    auto a = leaf<T>({3, 5}, -1, 1, rng), b = leaf<T>({3, 5}, -1, 1, rng);
    for (auto& v : b.mutable_data()) v = static_cast<T>(v + 0.1 * (v >= 0 ? 1 : -1));
    cases.push_back({"ops", "reductions", {{"a", a}, {"b", b}}, [=] {
                       return add(add(mse(a, b), l1(a, scale(b, T(0.5)))), mean(mul(a, a)));
                     }});
  }
}

template <typename T>
void add_spectral(std::vector<Case<T>>& cases, Rng& rng, Projector<T>& proj) {
  const auto cfg = micro_stft();
  const std::size_t L = 28, frames = cfg.frames(L), bins = cfg.bins();
  auto re = leaf<T>({frames, bins}, -1, 1, rng), im = leaf<T>({frames, bins}, -1, 1, rng);
  cases.push_back({"spectral", "istft_op", {{"re", re}, {"im", im}},
                   [=, &proj] { return proj(istft_op(re, im, cfg, L)); }});
}

template <typename T>
void add_attention(std::vector<Case<T>>& cases, Rng& rng, Projector<T>& proj) {
  {
    auto q = leaf<T>({2, 6, 4}, -1, 1, rng), k = leaf<T>({2, 6, 4}, -1, 1, rng), v = leaf<T>({2, 6, 3}, -1, 1, rng);
    AttentionConfig cfg;
    cases.push_back({"attention", "taylor_linear_normalized", {{"q", q}, {"k", k}, {"v", v}},
                     [=, &proj] { return proj(taylor_attention_linear(q, k, v, cfg)); }});
  }
  {
    auto q = leaf<T>({2, 6, 4}, -0.3, 0.3, rng), k = leaf<T>({2, 6, 4}, -0.3, 0.3, rng);
    auto v = leaf<T>({2, 6, 3}, -1, 1, rng);
    AttentionConfig cfg;
    cfg.normalize_qk = false;
    cases.push_back({"attention", "taylor_linear_raw", {{"q", q}, {"k", k}, {"v", v}},
                     [=, &proj] { return proj(taylor_attention_linear(q, k, v, cfg)); }});
  }
  {
    auto x = leaf<T>({3, 5}, -1, 1, rng);
    cases.push_back({"attention", "l2_normalize_rows", {{"x", x}}, [=, &proj] { return proj(l2_normalize_rows(x)); }});
  }
}

template <typename T>
void add_met(std::vector<Case<T>>& cases, Rng& rng, Projector<T>& proj) {
  MetBlockConfig cfg;
  cfg.channels = 4;
  const auto p = MetBlockParams<T>::init(cfg, rng);
  // Non-trivial norm affine parameters.
  for (auto* t : {&p.norm1.gamma, &p.norm2.gamma}) {
    for (auto& v : Tensor<T>(*t).mutable_data()) v = static_cast<T>(rng.uniform(0.5, 1.5));
  }
  auto x = leaf<T>({1, 4, 3, 5}, -1, 1, rng);
  auto with = [&](const std::string& prefix) {
    ParamList<T> l{{"x", x}};
    p.collect(prefix, l);
    return l;
  };
  cases.push_back({"met-block", "tmsa_branch", with("m"), [=, &proj] { return proj(tmsa_branch(x, p, cfg)); }});
  cases.push_back({"met-block", "channel_branch", with("m"), [=, &proj] { return proj(channel_branch(x, p)); }});
  cases.push_back({"met-block", "spatial_branch", with("m"), [=, &proj] { return proj(spatial_branch(x, p)); }});
  cases.push_back({"met-block", "ffn", with("m"), [=, &proj] { return proj(ffn(x, p)); }});
  cases.push_back({"met-block", "met_fuse", with("m"), [=, &proj] { return proj(met_fuse(x, p, cfg)); }});
}

template <typename T>
void add_deform(std::vector<Case<T>>& cases, Rng& rng, Projector<T>& proj) {
  {
    auto x = leaf<T>({1, 3, 4, 5}, -1, 1, rng);
    auto off = signed_leaf<T>({1, 18, 4, 5}, 0.15, 0.85, rng);
    auto w = leaf<T>({3, 1, 3, 3}, -0.5, 0.5, rng), b = leaf<T>({3}, -0.5, 0.5, rng);
    cases.push_back({"deform-embed", "deformable_depthwise_conv", {{"x", x}, {"offsets", off}, {"w", w}, {"b", b}},
                     [=, &proj] { return proj(deformable_depthwise_conv<T>(x, off, w, b)); }});
  }
  {
    auto p = DeformEmbedParams<T>::init(3, 4, rng);
    jitter_offsets(p, rng);
    auto x = leaf<T>({1, 3, 4, 5}, -1, 1, rng);
    ParamList<T> l{{"x", x}};
    p.collect("embed", l);
    cases.push_back({"deform-embed", "dsdcn_embed", l, [=, &proj] { return proj(dsdcn_embed(x, p)); }});
  }
}

template <typename T>
void add_codec(std::vector<Case<T>>& cases, Rng& rng, Projector<T>& proj) {
  auto cfg = micro_model();
  auto mp = ModelParams<T>::init(cfg, rng.next());
  for (auto& s : mp.encoder) jitter_offsets(s.embed, rng);
  for (auto& s : mp.decoder) jitter_offsets(s.embed, rng);
  {
    auto x = leaf<T>({1, 4, 5, 6}, -1, 1, rng);
    ParamList<T> l{{"x", x}};
    mp.in_dense.collect("dense", l);
    cases.push_back({"codec-unet", "dilated_dense_block", l,
                     [=, &proj] { return proj(dilated_dense_block(x, mp.in_dense)); }});
  }
  {
    auto x = leaf<T>({1, 4, 5, 7}, -1, 1, rng);
    const auto& down = *mp.encoder[1].down;
    const auto& up = *mp.decoder[1].up;
    ParamList<T> l{{"x", x}};
    down.collect("down", l);
    up.collect("up", l);
    cases.push_back({"codec-unet", "down_up", l, [=, &proj] {
                       return proj(upsample(downsample(x, down), up, {5, 7}));
                     }});
  }
  {
    auto f = leaf<T>({1, 4, 3, 4}, -1, 1, rng), magc = leaf<T>({1, 1, 3, 4}, 0.2, 1.5, rng);
    ParamList<T> l{{"features", f}, {"mag_c", magc}};
    mp.mag_dense.collect("mag.dense", l);
    mp.mag_head.collect("mag.head", l);
    cases.push_back({"codec-unet", "magnitude_decoder", l,
                     [=, &proj] { return proj(magnitude_decoder(f, mp, magc, cfg, false).magnitude); }});
  }
  {
    auto f = leaf<T>({1, 4, 3, 4}, -1, 1, rng);
    ParamList<T> l{{"features", f}};
    mp.pha_dense.collect("phase.dense", l);
    mp.pha_real.collect("phase.real", l);
    mp.pha_imag.collect("phase.imag", l);
    cases.push_back({"codec-unet", "phase_decoder", l, [=, &proj] { return proj(phase_decoder(f, mp)); }});
  }
  {
    // Full micro model (d=4, 8 frames x 8 bins) through the training loss.
    const std::size_t L = 28;
    std::vector<double> noisy(L), clean(L);
    for (std::size_t i = 0; i < L; ++i) {
      clean[i] = 0.5 * std::sin(0.7 * static_cast<double>(i));
      noisy[i] = clean[i] + 0.2 * rng.normal();
    }
    const auto target = packed_to_tensor<T>(pack_input(stft(clean, cfg.stft)));
    std::vector<T> cw(clean.begin(), clean.end());
    const SpectralSignal<T> ref{slice(target, 1, 0, 1), slice(target, 1, 1, 1), Tensor<T>({L}, cw)};
    cases.push_back({"codec-unet", "micro_model", mp.parameters(), [=] {
                       const auto out = enhance_batch<T>({noisy}, mp, cfg);
                       const SpectralSignal<T> est{out.net.mag_c, out.net.phase, out.waves.front()};
                       return composite_loss(est, ref, LossWeights{});
                     }});
  }
}

template <typename T>
void add_train(std::vector<Case<T>>& cases, Rng& rng, Projector<T>&) {
  const Shape s{1, 1, 3, 4};
  auto mag = leaf<T>(s, 0.1, 1, rng), pha = leaf<T>(s, -3, 3, rng), wave = leaf<T>({12}, -1, 1, rng);
  const SpectralSignal<T> ref{uniform_tensor<T>(s, 0.1, 1, rng), uniform_tensor<T>(s, -3, 3, rng),
                              uniform_tensor<T>({12}, -1, 1, rng)};
  cases.push_back({"train-eval", "composite_loss", {{"mag_c", mag}, {"phase", pha}, {"wave", wave}},
                   [=] { return composite_loss(SpectralSignal<T>{mag, pha, wave}, ref, LossWeights{}); }});
}

}  // namespace

const std::vector<std::string>& grad_suite_modules() {
  static const std::vector<std::string> names{"ops", "spectral", "attention", "met-block",
                                              "deform-embed", "codec-unet", "train-eval"};
  return names;
}

GradCheckOptions float_grad_options() {
  GradCheckOptions o;
  o.tol = 5e-2;
  o.abs_floor = 1e-2;
  return o;
}

namespace {

template <typename T>
std::vector<Case<T>> build_cases(const std::string& module, Rng& rng, Projector<T>& proj) {
  const auto& names = grad_suite_modules();
  if (module != "all" && std::find(names.begin(), names.end(), module) == names.end()) {
    throw std::invalid_argument("unknown gradcheck module '" + module + "'");
  }
  std::vector<Case<T>> cases;
  auto want = [&](const char* m) { return module == "all" || module == m; };
  if (want("ops")) add_ops(cases, rng, proj);
  if (want("spectral")) add_spectral(cases, rng, proj);
  if (want("attention")) add_attention(cases, rng, proj);
  if (want("met-block")) add_met(cases, rng, proj);
  if (want("deform-embed")) add_deform(cases, rng, proj);
  if (want("codec-unet")) add_codec(cases, rng, proj);
  if (want("train-eval")) add_train(cases, rng, proj);
  return cases;
}

void rescore(GradCheckReport& r, const GradCheckOptions& opt) {
  r.max_rel_err = 0;
  r.checked = 0;
  r.worst = {};
  for (auto& e : r.entries) {
    const double denom = std::max({std::abs(e.analytic), std::abs(e.numeric), opt.abs_floor});
    e.rel_err = std::abs(e.analytic - e.numeric) / denom;
    if (e.kink) continue;
    ++r.checked;
    if (e.rel_err >= r.max_rel_err) {
      r.max_rel_err = e.rel_err;
      r.worst = e;
    }
  }
  r.passed = r.checked > 0 && r.max_rel_err < opt.tol &&
             static_cast<double>(r.kinks) <= opt.max_kink_fraction * static_cast<double>(r.entries.size());
}

}  // namespace

template <>
std::vector<GradSuiteResult> run_grad_suites<double>(const std::string& module, std::uint64_t seed,
                                                     const GradCheckOptions& opt) {
  Rng rng(seed);
  Projector<double> proj(rng);
  auto cases = build_cases<double>(module, rng, proj);
  std::vector<GradSuiteResult> out;
  for (auto& c : cases) {
    GradCheckOptions o = opt;
    o.seed = seed + out.size();
    out.push_back({c.module, c.name, grad_check<double>(c.loss, c.params, o)});
  }
  return out;
}

// Float kernels are checked against float64 central differences taken at the
// same (float-rounded) point: single-precision differences are too noisy.
template <>
std::vector<GradSuiteResult> run_grad_suites<float>(const std::string& module, std::uint64_t seed,
                                                    const GradCheckOptions& opt) {
  Rng rf(seed), rd(seed);
  Projector<float> pf(rf);
  Projector<double> pd(rd);
  auto fcases = build_cases<float>(module, rf, pf);
  auto dcases = build_cases<double>(module, rd, pd);
  std::vector<GradSuiteResult> out;
  for (std::size_t i = 0; i < fcases.size(); ++i) {
    auto& fc = fcases[i];
    auto& dc = dcases[i];
    std::map<std::string, Tensor<float>> by_name;
    for (std::size_t k = 0; k < fc.params.size(); ++k) {
      auto f = fc.params[k].value;
      auto d = dc.params[k].value.mutable_data();
      for (std::size_t j = 0; j < d.size(); ++j) d[j] = static_cast<double>(f.at(j));
      f.zero_grad();
      by_name.emplace(fc.params[k].name, f);
    }
    fc.loss().backward();
    GradCheckOptions o = opt;
    o.seed = seed + out.size();
    auto report = grad_check<double>(dc.loss, dc.params, o);
    for (auto& e : report.entries) {
      const auto& f = by_name.at(e.param);
      e.analytic = f.has_grad() ? static_cast<double>(f.grad()[e.index]) : 0.0;
    }
    rescore(report, o);
    out.push_back({fc.module, fc.name, std::move(report)});
  }
  return out;
}

}  // namespace muse
