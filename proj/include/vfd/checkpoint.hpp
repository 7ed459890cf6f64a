#pragma once

// Binary checkpoint layout (all integers little-endian):
//
//   "VFD1"
//   u64 metadata length, metadata as UTF-8 JSON
//   u32 tensor count, then per tensor:
//     u32 name length, name bytes, u32 rank, rank x u64 extents, f32 payload

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vfd/errors.hpp"
#include "vfd/nn.hpp"
#include "vfd/tensor.hpp"

namespace vfd {

inline constexpr std::array<char, 4> kCheckpointMagic{'V', 'F', 'D', '1'};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  ParamSet<float> tensors;
};

namespace detail {

template <typename U>
void put_le(std::ostream& os, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) os.put(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(std::istream& is) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    const int c = is.get();
    if (c == EOF) throw CheckpointMismatch("truncated checkpoint");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return static_cast<U>(v);
}

}  // namespace detail

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Written beside the destination and renamed, so an interrupted write never
  // leaves a partial file under the final name.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot write checkpoint " + path.string());
    os.write(kCheckpointMagic.data(), 4);
    const std::string meta = ck.meta.dump();
    detail::put_le<std::uint64_t>(os, meta.size());
    os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(ck.tensors.size()));
    for (const auto& [name, t] : ck.tensors) {
      detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
      for (auto e : t.shape()) detail::put_le<std::uint64_t>(os, e);
      for (float v : t.data()) detail::put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(v));
    }
    if (!os) throw IoError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointMismatch("cannot open checkpoint " + path.string());
  std::array<char, 4> magic{};
  is.read(magic.data(), 4);
  if (!is || magic != kCheckpointMagic) throw CheckpointMismatch(path.string() + " is not a checkpoint");
  Checkpoint ck;
  const auto meta_len = detail::get_le<std::uint64_t>(is);
  if (meta_len > (1u << 26)) throw CheckpointMismatch("implausible metadata length");
  std::string meta(meta_len, '\0');
  is.read(meta.data(), static_cast<std::streamsize>(meta_len));
  if (!is) throw CheckpointMismatch("truncated checkpoint metadata");
  try {
    ck.meta = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointMismatch(std::string("bad checkpoint metadata: ") + e.what());
  }
  const auto count = detail::get_le<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = detail::get_le<std::uint32_t>(is);
    if (name_len > 4096) throw CheckpointMismatch("implausible tensor name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto rank = detail::get_le<std::uint32_t>(is);
    if (rank == 0 || rank > 8) throw CheckpointMismatch("bad rank for tensor " + name);
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(detail::get_le<std::uint64_t>(is));
    const std::size_t n = numel(shape);
    if (n > (1u << 28)) throw CheckpointMismatch("implausible size for tensor " + name);
    std::vector<float> data(n);
    for (auto& v : data) v = std::bit_cast<float>(detail::get_le<std::uint32_t>(is));
    try {
      ck.tensors.add(name, Tensor<float>(shape, std::move(data)));
    } catch (const Error& e) {
      throw CheckpointMismatch(e.what());
    }
  }
  if (is.peek() != EOF) throw CheckpointMismatch("trailing bytes after last tensor");
  return ck;
}

// Every tensor of `expected` must be present in `got` with the same shape,
// and `got` may not carry unknown tensors.
inline void require_same_layout(const ParamSet<float>& expected, const ParamSet<float>& got, const std::string& what) {
  for (const auto& [name, t] : expected) {
    if (!got.contains(name)) throw CheckpointMismatch(what + ": missing tensor '" + name + "'");
    if (got.at(name).shape() != t.shape())
      throw CheckpointMismatch(what + ": tensor '" + name + "' has shape " + to_string(got.at(name).shape()) +
                               ", config expects " + to_string(t.shape()));
  }
  if (got.size() != expected.size()) throw CheckpointMismatch(what + ": unexpected extra tensors");
}

}  // namespace vfd
