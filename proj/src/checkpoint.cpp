#include "fec/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <map>
#include <vector>

#include "fec/errors.hpp"

namespace fec {
namespace {

constexpr std::array<char, 4> kMagic = {'F', 'E', 'C', 'W'};

std::array<std::uint32_t, 256> make_crc_table() {
  std::array<std::uint32_t, 256> table{};
  for (std::uint32_t i = 0; i < 256; ++i) {
    std::uint32_t c = i;
    for (int bit = 0; bit < 8; ++bit)
      c = (c & 1u) ? (0xEDB88320u ^ (c >> 1)) : (c >> 1);
    table[i] = c;
  }
  return table;
}

class ByteWriter {
 public:
  void raw(const void* src, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(src);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  std::vector<unsigned char>& bytes() { return bytes_; }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
  }
  std::vector<unsigned char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<unsigned char> bytes) : bytes_(std::move(bytes)) {}

  void raw(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t size() const { return bytes_.size(); }
  std::size_t pos() const { return pos_; }
  const std::vector<unsigned char>& bytes() const { return bytes_; }

 private:
  void need(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw CheckpointError("checkpoint truncated");
  }
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::vector<unsigned char> bytes_;
  std::size_t pos_ = 0;
};

template <typename T>
constexpr std::uint8_t dtype_code() {
  return std::is_same_v<T, float> ? 0 : 1;
}

template <typename T>
void write_tensor(ByteWriter& w, const std::string& name, const Tensor<T>& t) {
  if (name.size() > 0xFFFF) throw CheckpointError("tensor name too long: " + name);
  w.u16(static_cast<std::uint16_t>(name.size()));
  w.raw(name.data(), name.size());
  w.u8(static_cast<std::uint8_t>(t.rank()));
  for (std::int64_t d : t.shape) w.u32(static_cast<std::uint32_t>(d));
  w.u8(dtype_code<T>());
  const std::uint64_t byte_len = static_cast<std::uint64_t>(t.numel()) * sizeof(T);
  w.u64(byte_len);
  w.raw(t.data.data(), static_cast<std::size_t>(byte_len));
}

template <typename T>
std::pair<std::string, Tensor<T>> read_tensor(ByteReader& r) {
  const std::string name = r.str(r.u16());
  const int rank = r.u8();
  std::vector<std::int64_t> shape(static_cast<std::size_t>(rank));
  for (auto& d : shape) d = static_cast<std::int64_t>(r.u32());
  const std::uint8_t dtype = r.u8();
  if (dtype != dtype_code<T>())
    throw CheckpointError("tensor " + name + " has dtype code " + std::to_string(int(dtype)) +
                          ", expected " + std::to_string(int(dtype_code<T>())));
  const std::uint64_t byte_len = r.u64();
  Tensor<T> t = Tensor<T>::zeros(shape);
  if (byte_len != static_cast<std::uint64_t>(t.numel()) * sizeof(T))
    throw CheckpointError("tensor " + name + " payload length disagrees with its shape");
  r.raw(t.data.data(), static_cast<std::size_t>(byte_len));
  return {name, std::move(t)};
}

}  // namespace

std::uint32_t crc32(std::span<const unsigned char> bytes) {
  static const auto table = make_crc_table();
  std::uint32_t c = 0xFFFFFFFFu;
  for (unsigned char b : bytes) c = table[(c ^ b) & 0xFF] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

template <typename T>
void save_checkpoint(Model<T>& model, const std::string& path) {
  ByteWriter w;
  w.raw(kMagic.data(), kMagic.size());
  w.u32(kCheckpointVersion);
  const std::string config = model.cfg.to_json();
  w.u32(static_cast<std::uint32_t>(config.size()));
  w.raw(config.data(), config.size());

  const auto params = model.params();
  w.u32(static_cast<std::uint32_t>(params.size() + 2));
  for (const Param<T>* p : params) write_tensor(w, p->name, p->value);
  write_tensor(w, "norm.mean", model.norm_mean);
  write_tensor(w, "norm.std", model.norm_std);
  w.u32(crc32(w.bytes()));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(w.bytes().data()),
            static_cast<std::streamsize>(w.bytes().size()));
  if (!out) throw CheckpointError("short write to " + path);
}

template <typename T>
Model<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < kMagic.size() + 12) throw CheckpointError("checkpoint truncated");

  std::uint32_t trailer = 0;
  for (int i = 0; i < 4; ++i)
    trailer |= static_cast<std::uint32_t>(bytes[bytes.size() - 4 + i]) << (8 * i);
  const std::uint32_t actual = crc32({bytes.data(), bytes.size() - 4});
  if (trailer != actual) throw CheckpointError("checksum mismatch: file is corrupt");

  ByteReader r(std::move(bytes));
  std::array<char, 4> magic{};
  r.raw(magic.data(), magic.size());
  if (magic != kMagic) throw CheckpointError("bad magic: not a weight file");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported version " + std::to_string(version));
  const std::string config = r.str(r.u32());

  Model<T> model = Model<T>::build(ModelConfig::from_json(config));

  const std::uint32_t count = r.u32();
  std::map<std::string, Tensor<T>> table;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, tensor] = read_tensor<T>(r);
    if (!table.emplace(std::move(name), std::move(tensor)).second)
      throw CheckpointError("duplicate tensor entry");
  }

  auto take = [&table](const std::string& name, Tensor<T>& dst) {
    auto it = table.find(name);
    if (it == table.end()) throw CheckpointError("missing tensor: " + name);
    if (!(it->second.shape == dst.shape))
      throw CheckpointError("tensor " + name + " has shape " + it->second.shape_str() +
                            ", model expects " + dst.shape_str());
    dst = std::move(it->second);
    table.erase(it);
  };
  for (Param<T>* p : model.params()) take(p->name, p->value);
  take("norm.mean", model.norm_mean);
  take("norm.std", model.norm_std);
  if (!table.empty()) throw CheckpointError("unexpected tensor: " + table.begin()->first);
  return model;
}

template void save_checkpoint(Model<float>&, const std::string&);
template void save_checkpoint(Model<double>&, const std::string&);
template Model<float> load_checkpoint(const std::string&);
template Model<double> load_checkpoint(const std::string&);

}  // namespace fec
