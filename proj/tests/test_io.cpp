#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "muse/checkpoint.hpp"
#include "muse/config.hpp"
#include "muse/dataset.hpp"
#include "muse/wav.hpp"

using namespace muse;
namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> read_hex(const std::string& name) {
  std::ifstream in(std::string(MUSE_GOLDEN_DIR) + "/" + name);
  REQUIRE(in);
  std::vector<std::uint8_t> out;
  std::string tok;
  while (in >> tok) out.push_back(static_cast<std::uint8_t>(std::stoul(tok, nullptr, 16)));
  return out;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("muse_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::uint8_t> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void put_u16(std::vector<std::uint8_t>& b, std::size_t at, std::uint16_t v) {
  b[at] = static_cast<std::uint8_t>(v & 0xff);
  b[at + 1] = static_cast<std::uint8_t>(v >> 8);
}

void put_u32(std::vector<std::uint8_t>& b, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b[at + std::size_t(i)] = static_cast<std::uint8_t>(v >> (8 * i));
}

std::string format_error(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_wav(bytes, "clip.wav");
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

std::string config_error(const std::string& text) {
  try {
    parse_config_text(text, "run.cfg");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

WavClip clip_of(std::size_t n, double a) {
  WavClip c;
  for (std::size_t i = 0; i < n; ++i) c.samples.push_back(a * std::sin(0.01 * double(i)));
  return c;
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

}  // namespace

TEST_CASE("wav headers match the golden dumps") {
  const auto h1000 = encode_wav(clip_of(1000, 0.5));
  const auto g1000 = read_hex("header_1000.hex");
  REQUIRE(g1000.size() == 44);
  CHECK(std::vector<std::uint8_t>(h1000.begin(), h1000.begin() + 44) == g1000);
  CHECK(h1000.size() == 44 + 2000);

  CHECK(encode_wav(WavClip{}) == read_hex("header_empty.hex"));

  WavClip ramp;
  const double q = 1.0 / 32768;
  ramp.samples = {-1.0, -0.5, 0.0, 0.5, 1.0 - q, 1.0, q, -q, 0.25 + 0.4 * q, -(0.25 + 0.5 * q)};
  CHECK(encode_wav(ramp) == read_hex("ramp10.hex"));
}

TEST_CASE("wav round trip") {
  WavClip ramp;
  for (std::size_t i = 0; i < 1000; ++i) ramp.samples.push_back(-1.0 + 2.0 * double(i) / 1000.0);
  const auto back = decode_wav(encode_wav(ramp));
  REQUIRE(back.samples.size() == 1000);
  CHECK(back.sample_rate == 16000);
  double err = 0;
  for (std::size_t i = 0; i < 1000; ++i) err = std::max(err, std::abs(back.samples[i] - ramp.samples[i]));
  CHECK(err <= 1.0 / 32768);

  const auto dir = scratch("wav");
  const auto path = (dir / "x.wav").string();
  write_wav(path, ramp);
  const auto file = read_wav(path);
  CHECK(file.samples == back.samples);
  CHECK(file.source_path == path);

  CHECK(quantize_sample(1.0) == 32767);
  CHECK(quantize_sample(-1.0) == -32768);
  CHECK(quantize_sample(-3.0) == -32768);
  CHECK(quantize_sample(0.5 / 32768) == 1);
  CHECK(quantize_sample(-0.5 / 32768) == -1);
  CHECK(quantize_sample(0.49 / 32768) == 0);
  CHECK_THROWS_AS(quantize_sample(std::nan("")), NumericError);
}

TEST_CASE("wav decoder rejects unsupported files and names the field") {
  const auto good = encode_wav(clip_of(10, 0.1));
  auto b = good;
  b[0] = 'X';
  CHECK(format_error(b).find("RIFF") != std::string::npos);
  b = good;
  b[8] = 'A';
  CHECK(format_error(b).find("WAVE") != std::string::npos);
  b = good;
  put_u16(b, 22, 2);
  CHECK(format_error(b).find("channels 2") != std::string::npos);
  b = good;
  put_u32(b, 24, 44100);
  CHECK(format_error(b).find("sample rate 44100") != std::string::npos);
  b = good;
  put_u16(b, 34, 24);
  CHECK(format_error(b).find("bits per sample 24") != std::string::npos);
  b = good;
  put_u16(b, 20, 3);
  CHECK(format_error(b).find("audio format 3") != std::string::npos);
  b = good;
  b.resize(30);
  CHECK(!format_error(b).empty());
  CHECK(format_error(b).find("clip.wav") != std::string::npos);

  // Unknown chunks between fmt and data are skipped, including the pad byte.
  std::vector<std::uint8_t> with_list(good.begin(), good.begin() + 36);
  for (char c : std::string("LIST")) with_list.push_back(std::uint8_t(c));
  for (int v : {3, 0, 0, 0, int('a'), int('b'), int('c'), 0}) with_list.push_back(std::uint8_t(v));
  with_list.insert(with_list.end(), good.begin() + 36, good.end());
  put_u32(with_list, 4, std::uint32_t(with_list.size() - 8));
  CHECK(decode_wav(with_list).samples == decode_wav(good).samples);

  WavClip wrong_rate = clip_of(4, 0.1);
  wrong_rate.sample_rate = 8000;
  CHECK_THROWS_AS(encode_wav(wrong_rate), FormatError);
  CHECK_THROWS_AS(read_wav("/nonexistent/file.wav"), FormatError);
}

TEST_CASE("segment planning") {
  auto s = plan_segments(61400, 30700);
  REQUIRE(s.size() == 2);
  CHECK(s[1].offset == 30700);
  CHECK(!s[0].padded);
  CHECK(!s[1].padded);

  s = plan_segments(40000, 30700);
  REQUIRE(s.size() == 2);
  CHECK(s[0].valid == 30700);
  CHECK(!s[0].padded);
  CHECK(s[1].offset == 30700);
  CHECK(s[1].valid == 9300);
  CHECK(s[1].padded);

  s = plan_segments(100, 30700);
  REQUIRE(s.size() == 1);
  CHECK(s[0].valid == 100);
  CHECK(s[0].padded);
  CHECK(plan_segments(30700, 30700).size() == 1);
  CHECK(plan_segments(0, 30700).empty());
}

TEST_CASE("dataset index pairs files by name") {
  const auto root = scratch("dataset");
  fs::create_directories(root / "clean");
  fs::create_directories(root / "noisy");
  for (const char* n : {"c.wav", "a.wav", "b.wav", "only_clean.wav"}) write_wav((root / "clean" / n).string(), clip_of(400, 0.2));
  for (const char* n : {"b.wav", "a.wav", "c.wav"}) write_wav((root / "noisy" / n).string(), clip_of(400, 0.3));
  std::ofstream(root / "noisy" / "notes.txt") << "ignored";

  const auto idx = build_dataset_index((root / "clean").string(), (root / "noisy").string(), 300);
  REQUIRE(idx.pairs.size() == 3);
  CHECK(idx.pairs[0].name == "a.wav");
  CHECK(idx.pairs[2].name == "c.wav");
  REQUIRE(idx.orphans.size() == 1);
  CHECK(idx.orphans[0].name == "only_clean.wav");
  CHECK(idx.orphans[0].in_clean);

  const auto segs = load_segments(idx);
  REQUIRE(segs.size() == 6);
  CHECK(segs[1].span.padded);
  CHECK(segs[1].audio.clean.size() == 300);
  CHECK(segs[1].audio.clean[150] == 0.0);
  CHECK(segs[1].audio.noisy[99] != 0.0);

  write_wav((root / "noisy" / "a.wav").string(), clip_of(399, 0.3));
  CHECK_THROWS_AS(load_segments(build_dataset_index((root / "clean").string(), (root / "noisy").string(), 300)),
                  ShapeError);

  fs::create_directories(root / "empty");
  CHECK_THROWS_AS(build_dataset_index((root / "clean").string(), (root / "empty").string()), std::invalid_argument);
  CHECK_THROWS_AS(build_dataset_index((root / "missing").string(), (root / "noisy").string()), std::invalid_argument);
}

TEST_CASE("config defaults") {
  const auto c = parse_config_text("");
  CHECK(c.model.stft.n_fft == 510);
  CHECK(c.model.stft.win_length == 510);
  CHECK(c.model.stft.hop_length == 100);
  CHECK(c.model.stft.sample_rate == 16000);
  CHECK(c.model.stft.compression_exponent == 0.3);
  CHECK(c.model.dense_channels == 16);
  CHECK(c.train.lr == 0.0005);
  CHECK(c.train.lr_decay == 0.99);
  CHECK(c.train.batch_size == 2);
  CHECK(c.train.epochs == 100);
  CHECK(c.segment_length == 30700);
}

TEST_CASE("config parsing") {
  const auto c = parse_config_text(
      "# comment\n"
      "  dense_channels = 8   # trailing\n"
      "\n"
      "stage_multipliers = 1, 2, 4\n"
      "normalize_qk=false\n"
      "lr = 1e-3\n"
      "seed = 42\n");
  CHECK(c.model.dense_channels == 8);
  CHECK(c.model.stage_multipliers == std::array<std::size_t, 3>{1, 2, 4});
  CHECK(!c.model.normalize_qk);
  CHECK(c.train.lr == 0.001);
  CHECK(c.train.seed == 42);

  const auto text = format_config(c);
  CHECK(text.find("dense_channels = 8") != std::string::npos);
  const auto again = parse_config_text(text);
  CHECK(format_config(again) == text);
  CHECK(format_config(parse_config_text("")) == format_config(RunConfig{}));
  CHECK(format_model_config(c.model).find("lr") == std::string::npos);
}

TEST_CASE("config errors name the key and line") {
  auto e = config_error("n_fft = 510\nbogus = 3\n");
  CHECK(e.find("run.cfg:2") != std::string::npos);
  CHECK(e.find("bogus") != std::string::npos);

  e = config_error("hop_length = 0\n");
  CHECK(e.find("run.cfg:1") != std::string::npos);
  CHECK(e.find("hop_length") != std::string::npos);

  e = config_error("\n\nlr = fast\n");
  CHECK(e.find("run.cfg:3") != std::string::npos);
  CHECK(e.find("lr") != std::string::npos);

  e = config_error("epochs = 3\nepochs = 4\n");
  CHECK(e.find("set twice") != std::string::npos);

  CHECK(config_error("just words\n").find("run.cfg:1") != std::string::npos);
  CHECK(config_error("lr =\n").find("missing value") != std::string::npos);
  CHECK(config_error("normalize_qk = yes\n").find("normalize_qk") != std::string::npos);
  CHECK(config_error("stage_multipliers = 1,2\n").find("stage_multipliers") != std::string::npos);
  CHECK(config_error("window = hamming\n").find("window") != std::string::npos);
  CHECK(config_error("lr_decay = 1.5\n").find("lr_decay") != std::string::npos);
  // Cross-key constraint.
  CHECK(!config_error("win_length = 100\nhop_length = 100\n").empty());
  CHECK_THROWS_AS(parse_config("/nonexistent/run.cfg"), ConfigError);
}

TEST_CASE("checkpoint round trip") {
  const auto cfg = micro();
  const auto p = ModelParams<double>::init(cfg, 3);
  const auto bytes = encode_checkpoint(cfg, p);
  CHECK(std::string(bytes.begin(), bytes.begin() + 8) == "MUSECKPT");
  CHECK(bytes[8] == 1);

  const auto ck = decode_checkpoint(bytes);
  CHECK(ck.version == 1);
  CHECK(format_model_config(ck.config) == format_model_config(cfg));
  const auto params = p.parameters();
  REQUIRE(ck.records.size() == params.size());
  CHECK(ck.records[0].name == params[0].name);
  CHECK(ck.records[0].shape == params[0].value.shape());
  CHECK(ck.records[0].data[0] == static_cast<float>(params[0].value.at(0)));

  const auto q = params_from_checkpoint<double>(ck);
  const auto qp = q.parameters();
  for (std::size_t i = 0; i < params.size(); ++i)
    for (std::size_t k = 0; k < params[i].value.numel(); ++k)
      REQUIRE(qp[i].value.at(k) == static_cast<double>(static_cast<float>(params[i].value.at(k))));
  CHECK(encode_checkpoint(cfg, q) == bytes);

  const auto dir = scratch("ckpt");
  save_checkpoint((dir / "m.ckpt").string(), cfg, p);
  CHECK(slurp(dir / "m.ckpt") == bytes);
  CHECK(read_checkpoint((dir / "m.ckpt").string()).records.size() == params.size());
}

TEST_CASE("checkpoint loader rejects damaged files") {
  const auto cfg = micro();
  const auto bytes = encode_checkpoint(cfg, ModelParams<float>::init(cfg, 4));

  auto b = bytes;
  b[8] = 2;
  try {
    decode_checkpoint(b);
    FAIL("version 2 accepted");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("version 2") != std::string::npos);
  }
  b = bytes;
  b[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(b), FormatError);
  b = bytes;
  b.pop_back();
  CHECK_THROWS_AS(decode_checkpoint(b), FormatError);
  b = bytes;
  b.push_back(0);
  CHECK_THROWS_AS(decode_checkpoint(b), FormatError);

  auto ck = decode_checkpoint(bytes);
  ck.records.pop_back();
  CHECK_THROWS_AS(params_from_checkpoint<float>(ck), FormatError);
  ck = decode_checkpoint(bytes);
  ck.records[1].shape = {ck.records[1].data.size(), 1};
  CHECK_THROWS_AS(params_from_checkpoint<float>(ck), FormatError);
  ck = decode_checkpoint(bytes);
  ck.records[1].name = ck.records[0].name;
  CHECK_THROWS_AS(params_from_checkpoint<float>(ck), FormatError);
  CHECK_THROWS_AS(read_checkpoint("/nonexistent.ckpt"), FormatError);
}
