#pragma once

// Little-endian helpers shared by the point-cloud (PAVL), ground-truth (PAVG)
// and checkpoint files.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pavlm/errors.hpp"

namespace pavlm::io {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

inline std::uint32_t get_u32(std::string_view in, std::size_t offset) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::string_view in, std::size_t offset) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  return v;
}

inline float get_f32(std::string_view in, std::size_t offset) { return std::bit_cast<float>(get_u32(in, offset)); }

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return data;
}

inline void write_file(const std::filesystem::path& path, std::string_view data) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!f) throw IoError("write failed for " + path.string());
}

// 16-byte header: 4 magic bytes, version, count, reserved (all u32 LE).
struct ArrayHeader {
  std::array<char, 4> magic{};
  std::uint32_t version = 1;
  std::uint32_t count = 0;
  std::uint32_t reserved = 0;
};

inline constexpr std::size_t kHeaderBytes = 16;

inline std::string encode_float_array(std::string_view magic, std::uint32_t count, std::span<const float> values) {
  std::string out;
  out.reserve(kHeaderBytes + values.size() * 4);
  out.append(magic.substr(0, 4));
  put_u32(out, 1);
  put_u32(out, count);
  put_u32(out, 0);
  for (float v : values) put_f32(out, v);
  return out;
}

// Validates header and payload length; `floats_per_item` is 3 for clouds.
inline std::vector<float> decode_float_array(std::string_view data, std::string_view magic, std::size_t floats_per_item,
                                             const std::string& what) {
  if (data.size() < kHeaderBytes) throw FormatError(what + ": file shorter than the 16-byte header");
  if (data.substr(0, 4) != magic)
    throw FormatError(what + ": bad magic (expected \"" + std::string(magic) + "\")");
  const std::uint32_t version = get_u32(data, 4);
  if (version != 1) throw FormatError(what + ": unsupported version " + std::to_string(version));
  const std::uint32_t count = get_u32(data, 8);
  const std::size_t expected = kHeaderBytes + static_cast<std::size_t>(count) * floats_per_item * 4;
  if (data.size() != expected)
    throw FormatError(what + ": length error (header declares " + std::to_string(count) + " items, expected " +
                      std::to_string(expected) + " bytes, found " + std::to_string(data.size()) + ")");
  std::vector<float> values(static_cast<std::size_t>(count) * floats_per_item);
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = get_f32(data, kHeaderBytes + 4 * i);
  return values;
}

}  // namespace pavlm::io
