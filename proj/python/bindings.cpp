#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "muse/attention.hpp"
#include "muse/checkpoint.hpp"
#include "muse/config.hpp"
#include "muse/errors.hpp"
#include "muse/grad_suites.hpp"
#include "muse/model.hpp"
#include "muse/spectral.hpp"
#include "muse/train.hpp"
#include "muse/wav.hpp"

namespace py = pybind11;
using namespace muse;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

std::vector<double> to_vec(const Array& a) { return {a.data(), a.data() + a.size()}; }

Array to_array(const std::vector<double>& v, std::vector<py::ssize_t> shape) {
  Array out(shape);
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

Tensor<double> to_tensor(const Array& a) {
  Shape s(a.shape(), a.shape() + a.ndim());
  return Tensor<double>(s, to_vec(a));
}

Array from_tensor(const Tensor<double>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  return to_array({t.data().begin(), t.data().end()}, shape);
}

StftConfig stft_cfg(std::size_t n_fft, std::size_t hop, std::size_t win) {
  StftConfig c;
  c.n_fft = n_fft;
  c.hop_length = hop;
  c.win_length = win ? win : n_fft;
  c.validate();
  return c;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "MUSE speech enhancement core";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("dense_channels", &ModelConfig::dense_channels)
      .def_readwrite("stage_multipliers", &ModelConfig::stage_multipliers)
      .def_readwrite("blocks_per_stage", &ModelConfig::blocks_per_stage)
      .def_readwrite("attention_heads", &ModelConfig::attention_heads)
      .def_readwrite("ffn_expansion", &ModelConfig::ffn_expansion)
      .def_readwrite("normalize_qk", &ModelConfig::normalize_qk)
      .def_readwrite("mask_beta", &ModelConfig::mask_beta)
      .def("validate", &ModelConfig::validate)
      .def("__repr__", [](const ModelConfig& c) { return format_model_config(c); });

  m.def("parse_model_config", [](const std::string& text) { return parse_config_text(text, "<python>").model; },
        py::arg("text"));

  m.def(
      "param_breakdown",
      [](const ModelConfig& cfg) {
        const auto b = count_params(ModelParams<float>::init(cfg, 0));
        return py::make_tuple(b.total, b.modules);
      },
      py::arg("config") = ModelConfig{}, "Total parameter count and per-module counts.");

  m.def(
      "stft",
      [](const Array& wave, std::size_t n_fft, std::size_t hop, std::size_t win) {
        const auto s = stft(to_vec(wave), stft_cfg(n_fft, hop, win));
        const std::vector<py::ssize_t> shape{py::ssize_t(s.frames), py::ssize_t(s.bins)};
        return py::make_tuple(to_array(s.magnitude, shape), to_array(s.phase, shape));
      },
      py::arg("wave"), py::arg("n_fft") = 510, py::arg("hop") = 100, py::arg("win") = 0,
      "Magnitude and phase, each [frames, bins].");

  m.def(
      "istft",
      [](const Array& mag, const Array& phase, std::size_t length, std::size_t n_fft, std::size_t hop,
         std::size_t win) {
        if (mag.ndim() != 2 || phase.ndim() != 2) throw ShapeError("istft: expected [frames, bins] arrays");
        Spectrogram s;
        s.config = stft_cfg(n_fft, hop, win);
        s.frames = std::size_t(mag.shape(0));
        s.bins = std::size_t(mag.shape(1));
        s.magnitude = to_vec(mag);
        s.phase = to_vec(phase);
        const auto y = istft(s, length);
        return to_array(y, {py::ssize_t(y.size())});
      },
      py::arg("magnitude"), py::arg("phase"), py::arg("length"), py::arg("n_fft") = 510, py::arg("hop") = 100,
      py::arg("win") = 0);

  m.def(
      "taylor_attention",
      [](const Array& q, const Array& k, const Array& v, bool linear, bool normalize_qk) {
        AttentionConfig cfg;
        cfg.normalize_qk = normalize_qk;
        const auto Q = to_tensor(q), K = to_tensor(k), V = to_tensor(v);
        return from_tensor(linear ? taylor_attention_linear(Q, K, V, cfg) : taylor_attention_direct(Q, K, V, cfg));
      },
      py::arg("q"), py::arg("k"), py::arg("v"), py::arg("linear") = true, py::arg("normalize_qk") = true);

  m.def(
      "softmax_attention",
      [](const Array& q, const Array& k, const Array& v) {
        return from_tensor(softmax_attention(to_tensor(q), to_tensor(k), to_tensor(v)));
      },
      py::arg("q"), py::arg("k"), py::arg("v"));

  m.def(
      "complexity",
      [](std::uint64_t t, std::uint64_t f, std::uint64_t D) {
        const auto r = complexity_estimate(AttentionKind::tmsa, t, f, D);
        return py::make_tuple(r.analytic_msa, r.analytic_tmsa);
      },
      py::arg("t"), py::arg("f"), py::arg("d"), "Analytic (msa, tmsa) operation counts.");

  m.def(
      "enhance",
      [](const Array& wave, const std::string& checkpoint) {
        const auto ck = read_checkpoint(checkpoint);
        const auto p = params_from_checkpoint<float>(ck);
        const auto y = model_forward<float>(to_vec(wave), p, ck.config);
        return to_array(y, {py::ssize_t(y.size())});
      },
      py::arg("wave"), py::arg("checkpoint"));

  m.def(
      "read_wav",
      [](const std::string& path) {
        const auto c = read_wav(path);
        return to_array(c.samples, {py::ssize_t(c.samples.size())});
      },
      py::arg("path"));
  m.def(
      "write_wav",
      [](const std::string& path, const Array& samples) {
        WavClip c;
        c.samples = to_vec(samples);
        write_wav(path, c);
      },
      py::arg("path"), py::arg("samples"));

  m.def(
      "ssnr", [](const Array& clean, const Array& est) { return ssnr(to_vec(clean), to_vec(est)); },
      py::arg("clean"), py::arg("estimate"));
  m.def(
      "si_sdr", [](const Array& clean, const Array& est) { return si_sdr(to_vec(clean), to_vec(est)); },
      py::arg("clean"), py::arg("estimate"));

  m.def(
      "gradcheck",
      [](const std::string& module, std::uint64_t seed) {
        py::list out;
        for (const auto& r : run_grad_suites<double>(module, seed))
          out.append(py::make_tuple(r.module, r.name, r.report.passed, r.report.max_rel_err));
        return out;
      },
      py::arg("module") = "all", py::arg("seed") = 0, "(module, name, passed, max_rel_err) per check.");
}
