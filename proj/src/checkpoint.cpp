#include "mamt4/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace mamt4 {

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(const std::string& s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw Error(ErrorKind::CorruptCheckpoint, "truncated checkpoint");
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

void write_tensor(Writer& w, const std::string& name, const Shape& shape, const std::vector<float>& values) {
  if (name.size() > 0xffff) throw Error(ErrorKind::InvalidConfig, "tensor name too long: " + name);
  if (shape.size() > 0xff) throw Error(ErrorKind::InvalidConfig, "tensor rank too large: " + name);
  w.u16(static_cast<std::uint16_t>(name.size()));
  w.raw(name);
  w.u8(static_cast<std::uint8_t>(shape.size()));
  for (auto d : shape) w.u32(static_cast<std::uint32_t>(d));
  for (float v : values) w.f32(v);
}

}  // namespace

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t size) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, data, static_cast<uInt>(size));
  return static_cast<std::uint32_t>(crc);
}

std::vector<std::uint8_t> encode_checkpoint(const ModelState& state) {
  Writer w;
  w.raw("MT4C");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(state.params.size() + 1));
  std::vector<float> fp(8);
  for (int i = 0; i < 8; ++i) fp[i] = static_cast<float>((state.fingerprint >> (8 * i)) & 0xff);
  write_tensor(w, kFingerprintTensor, {8}, fp);
  for (const auto& p : state.params.items()) {
    const auto& src = p.tensor.data();
    std::vector<float> values(src.begin(), src.end());
    write_tensor(w, p.name, p.tensor.shape(), values);
  }
  auto& bytes = w.bytes();
  w.u32(crc32_of(bytes.data(), bytes.size()));
  return std::move(bytes);
}

CheckpointData decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 16) throw Error(ErrorKind::CorruptCheckpoint, "checkpoint too short");
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(bytes[body + i]) << (8 * i);
  if (stored != crc32_of(bytes.data(), body)) throw Error(ErrorKind::CorruptCheckpoint, "CRC mismatch");

  Reader r(bytes, body);
  if (r.raw(4) != "MT4C") throw Error(ErrorKind::CorruptCheckpoint, "bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw Error(ErrorKind::CorruptCheckpoint, "unsupported version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  CheckpointData data;
  bool have_fingerprint = false;
  for (std::uint32_t t = 0; t < count; ++t) {
    NamedTensor nt;
    nt.name = r.raw(r.u16());
    const std::uint8_t rank = r.u8();
    std::size_t n = 1;
    for (std::uint8_t i = 0; i < rank; ++i) {
      nt.shape.push_back(r.u32());
      n *= nt.shape.back();
    }
    if (n * 4 > body - r.pos()) throw Error(ErrorKind::CorruptCheckpoint, "tensor " + nt.name + " overruns file");
    nt.values.resize(n);
    for (auto& v : nt.values) v = r.f32();
    if (nt.name == kFingerprintTensor) {
      if (n != 8) throw Error(ErrorKind::CorruptCheckpoint, "malformed fingerprint tensor");
      data.fingerprint = 0;
      for (int i = 0; i < 8; ++i) {
        data.fingerprint |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(nt.values[i])) << (8 * i);
      }
      have_fingerprint = true;
    } else {
      data.tensors.push_back(std::move(nt));
    }
  }
  if (r.pos() != body) throw Error(ErrorKind::CorruptCheckpoint, "trailing bytes before CRC");
  if (!have_fingerprint) throw Error(ErrorKind::CorruptCheckpoint, "checkpoint has no fingerprint");
  return data;
}

void apply_checkpoint(const CheckpointData& data, ModelState& target) {
  if (data.fingerprint != target.fingerprint) {
    throw Error(ErrorKind::IncompatibleCheckpoint, "checkpoint fingerprint does not match the model configuration");
  }
  if (data.tensors.size() != target.params.size()) {
    throw Error(ErrorKind::IncompatibleCheckpoint, "checkpoint holds " + std::to_string(data.tensors.size()) +
                                                       " tensors, model has " +
                                                       std::to_string(target.params.size()));
  }
  for (const auto& nt : data.tensors) {
    if (!target.params.contains(nt.name)) {
      throw Error(ErrorKind::IncompatibleCheckpoint, "unexpected tensor " + nt.name);
    }
    auto& p = target.params.at(nt.name);
    if (p.tensor.shape() != nt.shape) {
      throw Error(ErrorKind::IncompatibleCheckpoint, "shape mismatch for " + nt.name);
    }
    auto dst = p.tensor.mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<double>(nt.values[i]);
  }
}

ModelState state_from_checkpoint(const CheckpointData& data) {
  ModelState state;
  state.fingerprint = data.fingerprint;
  for (const auto& nt : data.tensors) {
    std::vector<double> values(nt.values.begin(), nt.values.end());
    state.params.add(nt.name, Tensor::from(nt.shape, std::move(values)), false);
  }
  return state;
}

void save_checkpoint(const ModelState& state, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(state);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::IoError, "failed writing " + path.string());
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot read " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

void load_checkpoint(ModelState& target, const std::filesystem::path& path) {
  apply_checkpoint(read_checkpoint(path), target);
}

}  // namespace mamt4
