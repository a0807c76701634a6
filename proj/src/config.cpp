#include "muse/config.hpp"

#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <sstream>

namespace muse {

namespace {

// Raised by value parsers; the caller adds key and line.
struct ValueError {
  std::string what;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

template <typename U>
U parse_number(const std::string& s, const char* type) {
  U v{};
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw ValueError{"expected " + std::string(type) + ", got '" + s + "'"};
  }
  return v;
}

std::size_t parse_count(const std::string& s, std::size_t min) {
  if (!s.empty() && s[0] == '-') throw ValueError{"must be >= " + std::to_string(min)};
  const auto v = parse_number<std::size_t>(s, "non-negative integer");
  if (v < min) throw ValueError{"must be >= " + std::to_string(min)};
  return v;
}

double parse_real(const std::string& s) {
  const double v = parse_number<double>(s, "number");
  if (!std::isfinite(v)) throw ValueError{"must be finite"};
  return v;
}

bool parse_bool(const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw ValueError{"expected true or false, got '" + s + "'"};
}

struct Key {
  std::string name;
  bool model;  // part of the model block stored in checkpoints
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

Key count_key(std::string name, bool model, std::size_t min, std::size_t& (*ref)(RunConfig&)) {
  return {std::move(name), model,
          [ref, min](RunConfig& c, const std::string& v) { ref(c) = parse_count(v, min); },
          [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); }};
}

// `lo_open`: lo excluded; `hi` inclusive when finite.
Key real_key(std::string name, bool model, double lo, bool lo_open, double hi, double& (*ref)(RunConfig&)) {
  return {std::move(name), model,
          [=](RunConfig& c, const std::string& v) {
            const double x = parse_real(v);
            if (lo_open ? !(x > lo) : !(x >= lo)) {
              throw ValueError{"must be " + std::string(lo_open ? "> " : ">= ") + fmt(lo)};
            }
            if (x > hi) throw ValueError{"must be <= " + fmt(hi)};
            ref(c) = x;
          },
          [ref](const RunConfig& c) { return fmt(ref(const_cast<RunConfig&>(c))); }};
}

Key bool_key(std::string name, bool model, bool& (*ref)(RunConfig&)) {
  return {std::move(name), model,
          [ref](RunConfig& c, const std::string& v) { ref(c) = parse_bool(v); },
          [ref](const RunConfig& c) { return std::string(ref(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

constexpr double kInf = std::numeric_limits<double>::infinity();

const std::vector<Key>& keys() {
  static const std::vector<Key> table = [] {
    std::vector<Key> k;
    k.push_back(count_key("n_fft", true, 2, [](RunConfig& c) -> std::size_t& { return c.model.stft.n_fft; }));
    k.push_back(count_key("win_length", true, 1, [](RunConfig& c) -> std::size_t& { return c.model.stft.win_length; }));
    k.push_back(count_key("hop_length", true, 1, [](RunConfig& c) -> std::size_t& { return c.model.stft.hop_length; }));
    k.push_back(count_key("sample_rate", true, 1, [](RunConfig& c) -> std::size_t& { return c.model.stft.sample_rate; }));
    k.push_back(real_key("compression_exponent", true, 0, true, 1,
                         [](RunConfig& c) -> double& { return c.model.stft.compression_exponent; }));
    k.push_back({"window", true,
                 [](RunConfig& c, const std::string& v) {
                   if (v != "hann") throw ValueError{"unsupported window '" + v + "' (hann)"};
                   c.model.stft.window = WindowKind::hann;
                 },
                 [](const RunConfig&) { return std::string("hann"); }});
    k.push_back(count_key("dense_channels", true, 1, [](RunConfig& c) -> std::size_t& { return c.model.dense_channels; }));
    k.push_back({"stage_multipliers", true,
                 [](RunConfig& c, const std::string& v) {
                   std::array<std::size_t, 3> m{};
                   std::stringstream ss(v);
                   std::string item;
                   std::size_t n = 0;
                   while (std::getline(ss, item, ',')) {
                     if (n == 3) throw ValueError{"expected three comma-separated integers"};
                     m[n++] = parse_count(trim(item), 1);
                   }
                   if (n != 3) throw ValueError{"expected three comma-separated integers"};
                   c.model.stage_multipliers = m;
                 },
                 [](const RunConfig& c) {
                   const auto& m = c.model.stage_multipliers;
                   return std::to_string(m[0]) + "," + std::to_string(m[1]) + "," + std::to_string(m[2]);
                 }});
    k.push_back(count_key("blocks_per_stage", true, 0, [](RunConfig& c) -> std::size_t& { return c.model.blocks_per_stage; }));
    k.push_back(bool_key("dilate_frequency", true, [](RunConfig& c) -> bool& { return c.model.dilate_frequency; }));
    k.push_back(count_key("attention_heads", true, 1, [](RunConfig& c) -> std::size_t& { return c.model.attention_heads; }));
    k.push_back(count_key("ffn_expansion", true, 1, [](RunConfig& c) -> std::size_t& { return c.model.ffn_expansion; }));
    k.push_back(real_key("attention_eps", true, 0, true, kInf, [](RunConfig& c) -> double& { return c.model.attention_eps; }));
    k.push_back(bool_key("normalize_qk", true, [](RunConfig& c) -> bool& { return c.model.normalize_qk; }));
    k.push_back(real_key("mask_beta", true, 0, true, kInf, [](RunConfig& c) -> double& { return c.model.mask_beta; }));

    k.push_back(real_key("lr", false, 0, true, kInf, [](RunConfig& c) -> double& { return c.train.lr; }));
    k.push_back(real_key("lr_decay", false, 0, true, 1, [](RunConfig& c) -> double& { return c.train.lr_decay; }));
    k.push_back(count_key("batch_size", false, 1, [](RunConfig& c) -> std::size_t& { return c.train.batch_size; }));
    k.push_back(count_key("epochs", false, 1, [](RunConfig& c) -> std::size_t& { return c.train.epochs; }));
    k.push_back({"seed", false,
                 [](RunConfig& c, const std::string& v) {
                   if (!v.empty() && v[0] == '-') throw ValueError{"must be >= 0"};
                   c.train.seed = parse_number<std::uint64_t>(v, "non-negative integer");
                 },
                 [](const RunConfig& c) { return std::to_string(c.train.seed); }});
    k.push_back(real_key("lambda_mag", false, 0, false, kInf, [](RunConfig& c) -> double& { return c.train.weights.mag; }));
    k.push_back(real_key("lambda_pha", false, 0, false, kInf, [](RunConfig& c) -> double& { return c.train.weights.pha; }));
    k.push_back(real_key("lambda_complex", false, 0, false, kInf, [](RunConfig& c) -> double& { return c.train.weights.complex; }));
    k.push_back(real_key("lambda_time", false, 0, false, kInf, [](RunConfig& c) -> double& { return c.train.weights.time; }));
    k.push_back(real_key("adam_beta1", false, 0, false, 0.999999, [](RunConfig& c) -> double& { return c.train.adamw.beta1; }));
    k.push_back(real_key("adam_beta2", false, 0, false, 0.999999999, [](RunConfig& c) -> double& { return c.train.adamw.beta2; }));
    k.push_back(real_key("adam_eps", false, 0, true, kInf, [](RunConfig& c) -> double& { return c.train.adamw.eps; }));
    k.push_back(real_key("weight_decay", false, 0, false, kInf, [](RunConfig& c) -> double& { return c.train.adamw.weight_decay; }));
    k.push_back(real_key("grad_clip", false, 0, false, kInf, [](RunConfig& c) -> double& { return c.train.grad_clip; }));
    k.push_back(count_key("checkpoint_every", false, 0, [](RunConfig& c) -> std::size_t& { return c.train.checkpoint_every; }));
    k.push_back(count_key("max_steps", false, 0, [](RunConfig& c) -> std::size_t& { return c.train.max_steps; }));
    k.push_back(count_key("segment_length", false, 1, [](RunConfig& c) -> std::size_t& { return c.segment_length; }));
    return k;
  }();
  return table;
}

std::string format_keys(const RunConfig& cfg, bool model_only) {
  std::string out;
  for (const auto& k : keys()) {
    if (model_only && !k.model) continue;
    out += k.name + " = " + k.get(cfg) + "\n";
  }
  return out;
}

}  // namespace

RunConfig parse_config_text(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  std::map<std::string, const Key*> by_name;
  for (const auto& k : keys()) by_name[k.name] = &k;
  std::set<std::string> seen;

  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto where = origin + ":" + std::to_string(line_no) + ": ";
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value', got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto it = by_name.find(key);
    if (it == by_name.end()) throw ConfigError(where + "unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + "key '" + key + "' set twice");
    if (value.empty()) throw ConfigError(where + "key '" + key + "': missing value");
    try {
      it->second->set(cfg, value);
    } catch (const ValueError& e) {
      throw ConfigError(where + "key '" + key + "': " + e.what);
    }
  }
  try {
    cfg.model.validate();
    cfg.train.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return cfg;
}

RunConfig parse_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str(), path);
}

std::string format_config(const RunConfig& cfg) { return format_keys(cfg, false); }

std::string format_model_config(const ModelConfig& cfg) {
  RunConfig rc;
  rc.model = cfg;
  return format_keys(rc, true);
}

}  // namespace muse
