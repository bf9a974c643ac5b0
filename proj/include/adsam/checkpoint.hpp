#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "adsam/errors.hpp"
#include "adsam/module.hpp"
#include "adsam/tensor.hpp"

namespace adsam {

// On-disk layout, all integers little-endian:
//
//   "ADSM" | u32 version (=1) | u32 tensor count
//   per tensor: u16 name length | UTF-8 name | u8 rank | u32 dims[rank] | f32 values
//   trailing UTF-8 config echo up to end of file
struct ArchivedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::vector<ArchivedTensor> tensors;
  std::string config_text;

  const ArchivedTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

inline constexpr char kCheckpointMagic[4] = {'A', 'D', 'S', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename U>
void put(std::string& out, U value) {
  char bytes[sizeof(U)];
  std::memcpy(bytes, &value, sizeof(U));
  out.append(bytes, sizeof(U));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return value;
  }

  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::string rest() { return take(bytes_.size() - pos_); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw DataError("checkpoint truncated");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& checkpoint) {
  std::string out(kCheckpointMagic, 4);
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(checkpoint.tensors.size()));
  for (const auto& t : checkpoint.tensors) {
    detail::require(t.name.size() <= 0xFFFF && t.shape.size() <= 0xFF, "checkpoint: name or rank too large");
    detail::require(shape_numel(t.shape) == t.values.size(), "checkpoint: value count mismatch for " + t.name);
    detail::put<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
    out += t.name;
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    out.append(reinterpret_cast<const char*>(t.values.data()), t.values.size() * sizeof(float));
  }
  out += checkpoint.config_text;
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  detail::Reader in(bytes);
  if (in.take(4) != std::string(kCheckpointMagic, 4)) throw DataError("not an ADSM checkpoint (bad magic)");
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint checkpoint;
  const auto count = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    ArchivedTensor t;
    t.name = in.take(in.get<std::uint16_t>());
    const auto rank = in.get<std::uint8_t>();
    for (std::uint8_t r = 0; r < rank; ++r) t.shape.push_back(in.get<std::uint32_t>());
    const std::string raw = in.take(shape_numel(t.shape) * sizeof(float));
    t.values.resize(shape_numel(t.shape));
    std::memcpy(t.values.data(), raw.data(), raw.size());
    checkpoint.tensors.push_back(std::move(t));
  }
  checkpoint.config_text = in.rest();
  return checkpoint;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path);
  const auto bytes = encode_checkpoint(checkpoint);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

template <typename T>
ArchivedTensor archive_tensor(const std::string& name, const Tensor<T>& tensor) {
  ArchivedTensor t{name, tensor.shape(), {}};
  t.values.reserve(tensor.numel());
  for (auto v : tensor.data()) t.values.push_back(static_cast<float>(v));
  return t;
}

template <typename T>
Checkpoint make_checkpoint(const ParamList<T>& params, std::string config_text) {
  Checkpoint checkpoint;
  for (const auto& p : params) checkpoint.tensors.push_back(archive_tensor(p.name, p.tensor));
  checkpoint.config_text = std::move(config_text);
  return checkpoint;
}

// Copies archived values into the named parameters. Every parameter must be
// present with a matching shape.
template <typename T>
void restore_parameters(const Checkpoint& checkpoint, ParamList<T>& params) {
  for (auto& p : params) {
    const auto* t = checkpoint.find(p.name);
    if (!t) throw DataError("checkpoint is missing parameter " + p.name);
    if (t->shape != p.tensor.shape())
      throw DataError("checkpoint parameter " + p.name + " has shape " + shape_str(t->shape) + ", model expects " +
                      shape_str(p.tensor.shape()));
    auto dst = p.tensor.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(t->values[i]);
  }
}

}  // namespace adsam
