#include "gau/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>

#include "gau/errors.hpp"

namespace gau {

namespace {

constexpr char kMagic[4] = {'G', 'A', 'U', 'C'};

class Writer {
 public:
  void bytes(const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <class U>
  void uint(U v) {
    for (size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  std::vector<uint8_t> take() { return std::move(out_); }

 private:
  std::vector<uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const uint8_t> in) : in_(in) {}

  std::span<const uint8_t> bytes(size_t n, const char* what) {
    if (n > in_.size() - pos_) {
      throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
    }
    auto out = in_.subspan(pos_, n);
    pos_ += n;
    return out;
  }
  template <class U>
  U uint(const char* what) {
    const auto b = bytes(sizeof(U), what);
    U v = 0;
    for (size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(b[i]) << (8 * i));
    return v;
  }
  size_t remaining() const { return in_.size() - pos_; }

 private:
  std::span<const uint8_t> in_;
  size_t pos_ = 0;
};

template <class F, class U>
void write_values(Writer& w, const std::vector<F>& values) {
  for (F v : values) w.uint(std::bit_cast<U>(v));
}

template <class F, class U>
std::vector<F> read_values(Reader& r, size_t count, const std::string& name) {
  const auto raw = r.bytes(count * sizeof(U), ("data of " + name).c_str());
  std::vector<F> out(count);
  for (size_t i = 0; i < count; ++i) {
    U v = 0;
    for (size_t k = 0; k < sizeof(U); ++k) v |= static_cast<U>(static_cast<U>(raw[i * sizeof(U) + k]) << (8 * k));
    out[i] = std::bit_cast<F>(v);
  }
  return out;
}

}  // namespace

template <class T>
CheckpointTensor to_checkpoint(const std::string& name, const Tensor<T>& t) {
  CheckpointTensor e;
  e.name = name;
  e.shape = t.shape();
  e.dtype = dtype_of<T>();
  const auto d = t.data();
  if constexpr (std::is_same_v<T, float>) {
    e.f32.assign(d.begin(), d.end());
  } else {
    e.f64.assign(d.begin(), d.end());
  }
  return e;
}

template <class T>
void restore_tensor(const CheckpointTensor& entry, Tensor<T>& dst) {
  if (entry.shape != dst.shape()) {
    throw CheckpointError("checkpoint tensor '" + entry.name + "' has shape " +
                          shape_str(entry.shape) + " but the model expects " +
                          shape_str(dst.shape()));
  }
  if (entry.dtype != dtype_of<T>()) {
    throw CheckpointError("checkpoint tensor '" + entry.name + "' has dtype " +
                          std::to_string(static_cast<int>(entry.dtype)) + " but the model expects " +
                          std::to_string(static_cast<int>(dtype_of<T>())));
  }
  auto out = dst.mutable_data();
  if constexpr (std::is_same_v<T, float>) {
    std::copy(entry.f32.begin(), entry.f32.end(), out.begin());
  } else {
    std::copy(entry.f64.begin(), entry.f64.end(), out.begin());
  }
}

std::vector<uint8_t> encode_checkpoint(std::span<const CheckpointTensor> tensors) {
  if (tensors.size() > std::numeric_limits<uint32_t>::max()) {
    throw CheckpointError("checkpoint: too many tensors");
  }
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.uint<uint32_t>(kCheckpointVersion);
  w.uint<uint32_t>(static_cast<uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > std::numeric_limits<uint16_t>::max()) {
      throw CheckpointError("checkpoint: tensor name too long: " + t.name.substr(0, 64));
    }
    if (t.shape.size() > std::numeric_limits<uint8_t>::max()) {
      throw CheckpointError("checkpoint: rank too large for tensor '" + t.name + "'");
    }
    size_t count = 1;
    for (size_t e : t.shape) {
      if (e > std::numeric_limits<uint32_t>::max()) {
        throw CheckpointError("checkpoint: extent overflows u32 in tensor '" + t.name + "'");
      }
      count *= e;
    }
    if (count != t.size()) {
      throw CheckpointError("checkpoint: tensor '" + t.name + "' holds " + std::to_string(t.size()) +
                            " values for shape " + shape_str(t.shape));
    }
    w.uint<uint16_t>(static_cast<uint16_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.uint<uint8_t>(static_cast<uint8_t>(t.shape.size()));
    for (size_t e : t.shape) w.uint<uint32_t>(static_cast<uint32_t>(e));
    w.uint<uint8_t>(static_cast<uint8_t>(t.dtype));
    if (t.dtype == DType::float32) {
      write_values<float, uint32_t>(w, t.f32);
    } else {
      write_values<double, uint64_t>(w, t.f64);
    }
  }
  return w.take();
}

std::vector<CheckpointTensor> decode_checkpoint(std::span<const uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.bytes(sizeof kMagic, "magic");
  if (std::memcmp(magic.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError("not a checkpoint: bad magic bytes");
  }
  const auto version = r.uint<uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) +
                          " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const auto count = r.uint<uint32_t>("tensor count");
  std::vector<CheckpointTensor> out;
  std::set<std::string> names;
  for (uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    const auto name_len = r.uint<uint16_t>("name length");
    const auto name = r.bytes(name_len, "name");
    t.name.assign(name.begin(), name.end());
    if (!names.insert(t.name).second) throw CheckpointError("duplicate checkpoint tensor '" + t.name + "'");
    const auto rank = r.uint<uint8_t>(("rank of " + t.name).c_str());
    uint64_t numel = 1;
    for (uint8_t k = 0; k < rank; ++k) {
      const auto e = r.uint<uint32_t>(("extents of " + t.name).c_str());
      if (e == 0) throw CheckpointError("checkpoint tensor '" + t.name + "' has a zero extent");
      // Each value takes at least 4 bytes, so more values than bytes left
      // is a corrupt header, caught here before the product can overflow.
      numel *= e;
      if (numel > r.remaining()) {
        throw CheckpointError("checkpoint tensor '" + t.name + "' extents exceed the file size");
      }
      t.shape.push_back(e);
    }
    const auto tag = r.uint<uint8_t>(("dtype of " + t.name).c_str());
    if (tag > 1) {
      throw CheckpointError("checkpoint tensor '" + t.name + "' has unknown dtype tag " +
                            std::to_string(tag));
    }
    t.dtype = static_cast<DType>(tag);
    if (t.dtype == DType::float32) {
      t.f32 = read_values<float, uint32_t>(r, numel, t.name);
    } else {
      t.f64 = read_values<double, uint64_t>(r, numel, t.name);
    }
    out.push_back(std::move(t));
  }
  if (r.remaining() != 0) {
    throw CheckpointError("checkpoint has " + std::to_string(r.remaining()) + " trailing bytes");
  }
  return out;
}

void write_checkpoint(const std::filesystem::path& path, std::span<const CheckpointTensor> tensors) {
  const auto bytes = encode_checkpoint(tensors);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("error writing checkpoint " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

std::vector<CheckpointTensor> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

template CheckpointTensor to_checkpoint(const std::string&, const Tensor<float>&);
template CheckpointTensor to_checkpoint(const std::string&, const Tensor<double>&);
template void restore_tensor(const CheckpointTensor&, Tensor<float>&);
template void restore_tensor(const CheckpointTensor&, Tensor<double>&);

}  // namespace gau
