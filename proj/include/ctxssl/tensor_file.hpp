// Binary container shared by world files and checkpoints:
//
//   bytes 0..7   magic "CTXSSL\0\1"
//   bytes 8..15  header length H, unsigned little-endian
//   next H bytes JSON header: {"endianness": "little", "kind": ..., "meta": {...},
//                "tensors": [{"name", "shape", "dtype": "f32", "offset", "count"}]}
//   remainder    payload of little-endian IEEE-754 float32 values; tensor
//                offsets are byte offsets into the payload
#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxssl/error.hpp"

namespace ctxssl {

using json = nlohmann::json;

struct NamedTensor {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

struct TensorFile {
  std::string kind;  // "world" or "checkpoint"
  json meta = json::object();
  std::vector<NamedTensor> tensors;

  const NamedTensor& get(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw Error(ErrorKind::Io, "tensor '" + name + "' missing from " + kind + " file");
  }
};

namespace detail {

inline constexpr std::array<char, 8> kMagic = {'C', 'T', 'X', 'S', 'S', 'L', '\0', '\1'};

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64_le(const unsigned char* b) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void put_f32_le(std::string& out, float f) {
  const auto u = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
}

inline float get_f32_le(const unsigned char* b) {
  std::uint32_t u = 0;
  for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return std::bit_cast<float>(u);
}

}  // namespace detail

inline std::string encode_tensor_file(const TensorFile& f) {
  json header;
  header["endianness"] = "little";
  header["kind"] = f.kind;
  header["meta"] = f.meta;
  header["tensors"] = json::array();
  std::string payload;
  for (const auto& t : f.tensors) {
    require(static_cast<std::int64_t>(t.data.size()) == t.numel(), ErrorKind::Shape,
            "tensor '" + t.name + "' data does not match its shape");
    header["tensors"].push_back({{"name", t.name},
                                 {"shape", t.shape},
                                 {"dtype", "f32"},
                                 {"offset", payload.size()},
                                 {"count", t.data.size()}});
    payload.reserve(payload.size() + 4 * t.data.size());
    for (float v : t.data) detail::put_f32_le(payload, v);
  }
  const std::string h = header.dump();
  std::string out(detail::kMagic.begin(), detail::kMagic.end());
  detail::put_u64_le(out, h.size());
  out += h;
  out += payload;
  return out;
}

inline TensorFile decode_tensor_file(const std::string& bytes, const std::string& expected_kind) {
  require(bytes.size() >= 16 && std::memcmp(bytes.data(), detail::kMagic.data(), 8) == 0,
          ErrorKind::Io, "not a ctxssl tensor file (bad magic)");
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t hlen = detail::get_u64_le(raw + 8);
  require(hlen <= bytes.size() - 16, ErrorKind::Io, "truncated header");
  json header;
  try {
    header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Io, std::string("corrupt manifest: ") + e.what());
  }
  TensorFile f;
  try {
    require(header.at("endianness") == "little", ErrorKind::Io, "unsupported endianness");
    f.kind = header.at("kind").get<std::string>();
    require(f.kind == expected_kind, ErrorKind::Mismatch,
            "expected a " + expected_kind + " file, got " + f.kind);
    f.meta = header.at("meta");
    const std::size_t payload_at = 16 + hlen;
    const std::size_t payload_size = bytes.size() - payload_at;
    for (const auto& e : header.at("tensors")) {
      NamedTensor t;
      t.name = e.at("name").get<std::string>();
      t.shape = e.at("shape").get<std::vector<std::int64_t>>();
      require(e.at("dtype") == "f32", ErrorKind::Io, "unsupported dtype for " + t.name);
      const auto off = e.at("offset").get<std::uint64_t>();
      const auto count = e.at("count").get<std::uint64_t>();
      require(static_cast<std::int64_t>(count) == t.numel(), ErrorKind::Shape,
              "shape mismatch for tensor '" + t.name + "'");
      require(off % 4 == 0 && off + 4 * count <= payload_size, ErrorKind::Io,
              "tensor '" + t.name + "' exceeds payload");
      t.data.resize(count);
      const unsigned char* p = raw + payload_at + off;
      for (std::uint64_t i = 0; i < count; ++i) t.data[i] = detail::get_f32_le(p + 4 * i);
      f.tensors.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Io, std::string("corrupt manifest: ") + e.what());
  }
  return f;
}

inline void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(os), ErrorKind::Io, "cannot open " + path.string() + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(os), ErrorKind::Io, "write failed: " + path.string());
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorKind::Io, "cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(is), {});
}

inline void save_tensor_file(const std::filesystem::path& path, const TensorFile& f) {
  write_file_bytes(path, encode_tensor_file(f));
}

inline TensorFile load_tensor_file(const std::filesystem::path& path, const std::string& kind) {
  return decode_tensor_file(read_file_bytes(path), kind);
}

}  // namespace ctxssl
