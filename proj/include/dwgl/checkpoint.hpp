#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "dwgl/error.hpp"
#include "dwgl/tensor.hpp"

// Checkpoint container layout (all integers little-endian):
//   "DWGL" | version u32 | count u32 | count x record
//   record: name_len u16 | name bytes (UTF-8) | rank u8 | rank x extent u32 | f32 payload

namespace dwgl {

inline constexpr std::uint32_t kCheckpointVersion = 1;

using TensorMap = std::map<std::string, Tensor>;

namespace detail {

template <class U>
void put_le(std::vector<unsigned char>& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<unsigned char>((value >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  explicit ByteReader(const std::vector<unsigned char>& bytes) : bytes_(bytes) {}

  template <class U>
  U get(const char* what) {
    need(sizeof(U), what);
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(static_cast<U>(bytes_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return value;
  }

  std::string get_string(std::size_t n) {
    need(n, "name");
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_), bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }

  std::size_t offset() const noexcept { return pos_; }
  bool done() const noexcept { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw Error(ErrorKind::format, std::string("checkpoint truncated reading ") + what + " at byte offset " +
                                         std::to_string(pos_));
    }
  }

  const std::vector<unsigned char>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const TensorMap& tensors) {
  std::vector<unsigned char> out = {'D', 'W', 'G', 'L'};
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > UINT16_MAX) throw Error(ErrorKind::format, "tensor name too long: " + name.substr(0, 32));
    if (t.rank() > UINT8_MAX) throw Error(ErrorKind::format, "tensor rank too large: " + name);
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(static_cast<unsigned char>(t.rank()));
    for (std::size_t extent : t.shape()) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(extent));
    for (float v : t.values()) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline TensorMap decode_checkpoint(const std::vector<unsigned char>& bytes) {
  detail::ByteReader in(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "DWGL", 4) != 0) {
    throw Error(ErrorKind::format, "checkpoint: bad magic at byte offset 0");
  }
  in.get<std::uint32_t>("magic");
  const auto version = in.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw Error(ErrorKind::format, "checkpoint: unsupported version " + std::to_string(version));
  }
  const auto count = in.get<std::uint32_t>("count");
  TensorMap tensors;
  for (std::uint32_t r = 0; r < count; ++r) {
    const auto name_len = in.get<std::uint16_t>("name length");
    std::string name = in.get_string(name_len);
    const auto rank = in.get<std::uint8_t>("rank");
    Shape shape;
    for (unsigned i = 0; i < rank; ++i) {
      const std::size_t at = in.offset();
      const auto extent = in.get<std::uint32_t>("extent");
      if (extent == 0) throw Error(ErrorKind::format, "checkpoint: zero extent at byte offset " + std::to_string(at));
      shape.push_back(extent);
    }
    std::vector<float> data(numel(shape));
    for (auto& v : data) v = std::bit_cast<float>(in.get<std::uint32_t>("payload"));
    if (!tensors.emplace(name, Tensor(std::move(shape), std::move(data))).second) {
      throw Error(ErrorKind::format, "checkpoint: duplicate tensor name " + name);
    }
  }
  if (!in.done()) {
    throw Error(ErrorKind::format, "checkpoint: trailing bytes at byte offset " + std::to_string(in.offset()));
  }
  return tensors;
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::io, "short write to " + path.string());
}

inline void save_checkpoint(const std::filesystem::path& path, const TensorMap& tensors) {
  write_file_bytes(path, encode_checkpoint(tensors));
}

inline TensorMap load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(read_file_bytes(path));
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::format) throw Error(ErrorKind::format, path.string() + ": " + e.what());
    throw;
  }
}

}  // namespace dwgl
