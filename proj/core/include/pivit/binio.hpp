#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>

#include "pivit/error.hpp"

// Little-endian host assumed; all binary formats in this project are
// written and read on the same byte order.
namespace pivit::binio {

inline std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  return out;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  return in;
}

template <typename T>
void put(std::ostream& out, const T& v) {
  static_assert(std::is_trivially_copyable_v<T>);
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  static_assert(std::is_trivially_copyable_v<T>);
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw ParseError("unexpected end of binary stream");
  return v;
}

inline void put_string(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& in, std::size_t limit = 1u << 26) {
  const auto n = get<std::uint32_t>(in);
  if (n > limit) throw ParseError("string length exceeds limit");
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw ParseError("unexpected end of binary stream");
  return s;
}

/// Magic tags are fixed 8-byte fields.
inline void put_magic(std::ostream& out, const char (&magic)[9]) { out.write(magic, 8); }

inline void expect_magic(std::istream& in, const char (&magic)[9], const std::string& what) {
  char buf[8] = {};
  in.read(buf, 8);
  if (!in || std::memcmp(buf, magic, 8) != 0) throw ParseError("not a " + what + " file (bad magic)");
}

/// FNV-1a over raw bytes.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace pivit::binio
