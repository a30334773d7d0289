#include <cstring>
#include <fstream>
#include <map>

#include "microdet/detector.hpp"

namespace microdet {

namespace {

constexpr char kMagic[4] = {'T', 'D', 'W', '1'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void bytes(const char* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }
  const std::vector<char>& buffer() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(std::vector<char> data, std::string file) : data_(std::move(data)), file_(std::move(file)) {}
  void need(std::size_t n, const std::string& what) {
    if (pos_ + n > data_.size())
      throw FormatError(file_ + ": truncated payload while reading " + what + " at byte " + std::to_string(pos_));
  }
  std::uint64_t uint(int bytes, const std::string& what) {
    need(static_cast<std::size_t>(bytes), what);
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  std::string str(std::size_t n, const std::string& what) {
    need(n, what);
    std::string s(data_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }
  std::size_t pos() const { return pos_; }
  const std::string& file() const { return file_; }

 private:
  std::vector<char> data_;
  std::string file_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_tdw(const std::filesystem::path& path, const std::vector<TdwTensor>& tensors) {
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > 0xFFFF) throw FormatError("tensor name too long: " + t.name.substr(0, 64));
    w.u16(static_cast<std::uint16_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.u8(static_cast<std::uint8_t>(t.dtype));
    w.u8(static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) w.u32(static_cast<std::uint32_t>(d));
    for (double v : t.values) {
      if (t.dtype == 0) {
        const float f = static_cast<float>(v);
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        w.u32(bits);
      } else {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        w.u64(bits);
      }
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

std::vector<TdwTensor> read_tdw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open weights file '" + path.string() + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(std::move(bytes), path.string());
  if (r.str(4, "magic") != std::string(kMagic, 4)) throw FormatError(path.string() + ": bad magic (expected TDW1)");
  const auto version = r.uint(4, "version");
  if (version != kVersion)
    throw FormatError(path.string() + ": unsupported version " + std::to_string(version));
  const auto count = r.uint(4, "tensor count");
  std::vector<TdwTensor> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string idx = "tensor " + std::to_string(i);
    TdwTensor t;
    t.name = r.str(r.uint(2, idx + " name length"), idx + " name");
    t.dtype = static_cast<int>(r.uint(1, "dtype of '" + t.name + "'"));
    if (t.dtype != 0 && t.dtype != 1)
      throw FormatError(path.string() + ": unknown dtype " + std::to_string(t.dtype) + " for tensor '" + t.name + "'");
    const auto rank = r.uint(1, "rank of '" + t.name + "'");
    std::uint64_t numel = 1;
    for (std::uint64_t d = 0; d < rank; ++d) {
      const auto dim = r.uint(4, "dims of '" + t.name + "'");
      t.shape.push_back(static_cast<std::int64_t>(dim));
      numel *= dim;
    }
    const std::size_t width = t.dtype == 0 ? 4 : 8;
    r.need(numel * width, "payload of '" + t.name + "'");
    t.values.resize(numel);
    for (auto& v : t.values) {
      if (t.dtype == 0) {
        const auto bits = static_cast<std::uint32_t>(r.uint(4, t.name));
        float f;
        std::memcpy(&f, &bits, 4);
        v = f;
      } else {
        const auto bits = r.uint(8, t.name);
        std::memcpy(&v, &bits, 8);
      }
    }
    out.push_back(std::move(t));
  }
  if (!r.done()) throw FormatError(path.string() + ": trailing bytes after " + std::to_string(count) + " tensors");
  return out;
}

template <typename T>
void save_weights(Detector<T>& model, const std::filesystem::path& path) {
  std::vector<TdwTensor> ts;
  for (const auto& nt : nn::named_tensors<T>(model)) {
    TdwTensor t;
    t.name = nt.path;
    t.dtype = std::is_same_v<T, float> ? 0 : 1;
    t.shape = nt.tensor.shape();
    t.values.assign(nt.tensor.data().begin(), nt.tensor.data().end());
    ts.push_back(std::move(t));
  }
  write_tdw(path, ts);
}

template <typename T>
void load_weights_into(Detector<T>& model, const std::filesystem::path& path) {
  std::map<std::string, TdwTensor> file;
  for (auto& t : read_tdw(path)) {
    const std::string name = t.name;
    if (!file.emplace(name, std::move(t)).second)
      throw FormatError(path.string() + ": duplicate tensor '" + name + "'");
  }
  for (auto& nt : nn::named_tensors<T>(model)) {
    auto it = file.find(nt.path);
    if (it == file.end()) throw FormatError(path.string() + ": missing tensor '" + nt.path + "'");
    if (it->second.shape != nt.tensor.shape())
      throw FormatError(path.string() + ": tensor '" + nt.path + "' has shape " + shape_str(it->second.shape) +
                        ", model expects " + shape_str(nt.tensor.shape()));
    auto dst = nt.tensor.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second.values[i]);
    file.erase(it);
  }
  if (!file.empty()) throw FormatError(path.string() + ": unknown tensor '" + file.begin()->first + "'");
}

template <typename T>
Detector<T> load_weights(const std::filesystem::path& path, const ModelConfig& config) {
  Detector<T> model(config, 0);
  load_weights_into(model, path);
  return model;
}

template void save_weights(Detector<float>&, const std::filesystem::path&);
template void save_weights(Detector<double>&, const std::filesystem::path&);
template void load_weights_into(Detector<float>&, const std::filesystem::path&);
template void load_weights_into(Detector<double>&, const std::filesystem::path&);
template Detector<float> load_weights(const std::filesystem::path&, const ModelConfig&);
template Detector<double> load_weights(const std::filesystem::path&, const ModelConfig&);

}  // namespace microdet
