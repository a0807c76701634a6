#include "muse/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <iterator>
#include <map>

#include "muse/config.hpp"

namespace muse {

namespace {

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(std::string_view s) { bytes.insert(bytes.end(), s.begin(), s.end()); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}
  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n) throw FormatError(std::string("checkpoint truncated while reading ") + what);
  }
  std::uint64_t uint(int bytes, const char* what) {
    need(static_cast<std::size_t>(bytes), what);
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(b_[pos_++]) << (8 * i);
    return v;
  }
  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(uint(4, what)); }
  std::uint64_t u64(const char* what) { return uint(8, what); }
  std::string raw(std::size_t n, const char* what) {
    need(n, what);
    std::string s(b_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  b_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  std::string str(const char* what) { return raw(u32(what), what); }
  bool done() const { return pos_ == b_.size(); }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

}  // namespace

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(const ModelConfig& cfg, const ModelParams<T>& params) {
  Writer w;
  w.raw(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.str(format_model_config(cfg));
  const auto list = params.parameters();
  w.u32(static_cast<std::uint32_t>(list.size()));
  for (const auto& p : list) {
    w.str(p.name);
    w.u32(static_cast<std::uint32_t>(p.value.ndim()));
    for (auto d : p.value.shape()) w.u64(d);
    for (auto v : p.value.data()) w.f32(static_cast<float>(v));
  }
  return std::move(w.bytes);
}

CheckpointFile decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.raw(kCheckpointMagic.size(), "magic") != kCheckpointMagic) {
    throw FormatError("not a checkpoint: bad magic");
  }
  CheckpointFile f;
  f.version = r.u32("version");
  if (f.version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(f.version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const auto text = r.str("config");
  RunConfig rc;
  try {
    rc = parse_config_text(text, "checkpoint config");
  } catch (const ConfigError& e) {
    throw FormatError(e.what());
  }
  f.config = rc.model;
  const std::uint32_t n = r.u32("record count");
  for (std::uint32_t i = 0; i < n; ++i) {
    CheckpointRecord rec;
    rec.name = r.str("record name");
    const std::uint32_t nd = r.u32("record rank");
    if (nd == 0 || nd > 8) throw FormatError("checkpoint record " + rec.name + ": bad rank");
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < nd; ++d) {
      const auto dim = r.u64("record shape");
      if (dim == 0 || dim > (std::uint64_t{1} << 32)) {
        throw FormatError("checkpoint record " + rec.name + ": bad dimension");
      }
      rec.shape.push_back(static_cast<std::size_t>(dim));
      numel *= static_cast<std::size_t>(dim);
    }
    r.need(numel * 4, "record data");
    rec.data.resize(numel);
    for (auto& v : rec.data) v = std::bit_cast<float>(r.u32("record data"));
    f.records.push_back(std::move(rec));
  }
  if (!r.done()) throw FormatError("checkpoint has trailing bytes");
  return f;
}

template <typename T>
void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ModelParams<T>& params) {
  const auto bytes = encode_checkpoint(cfg, params);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  f.close();
  if (!f) throw std::runtime_error("failed writing checkpoint: " + path);
}

CheckpointFile read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open checkpoint: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

template <typename T>
ModelParams<T> params_from_checkpoint(const CheckpointFile& ckpt) {
  auto params = ModelParams<T>::init(ckpt.config, 0);
  std::map<std::string, const CheckpointRecord*> by_name;
  for (const auto& r : ckpt.records) {
    if (!by_name.emplace(r.name, &r).second) throw FormatError("duplicate checkpoint record " + r.name);
  }
  const auto list = params.parameters();
  if (list.size() != ckpt.records.size()) {
    throw FormatError("checkpoint holds " + std::to_string(ckpt.records.size()) + " records, model has " +
                      std::to_string(list.size()) + " parameters");
  }
  for (auto p : list) {
    const auto it = by_name.find(p.name);
    if (it == by_name.end()) throw FormatError("checkpoint missing parameter " + p.name);
    if (it->second->shape != p.value.shape()) {
      throw FormatError("checkpoint parameter " + p.name + " has shape " + shape_str(it->second->shape) +
                        ", model expects " + shape_str(p.value.shape()));
    }
    auto dst = p.value.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second->data[i]);
  }
  return params;
}

#define MUSE_INSTANTIATE_CKPT(T)                                                                \
  template std::vector<std::uint8_t> encode_checkpoint(const ModelConfig&, const ModelParams<T>&); \
  template void save_checkpoint(const std::string&, const ModelConfig&, const ModelParams<T>&);  \
  template ModelParams<T> params_from_checkpoint(const CheckpointFile&);

MUSE_INSTANTIATE_CKPT(float)
MUSE_INSTANTIATE_CKPT(double)

}  // namespace muse
