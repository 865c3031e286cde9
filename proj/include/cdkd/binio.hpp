#pragma once

// Little-endian binary encoding shared by the dataset dump and checkpoints.

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "cdkd/errors.hpp"

namespace cdkd::binio {

inline void put_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }

inline void put_u32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

inline void put_str(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename Err = CheckpointError>
std::uint8_t get_u8(std::istream& is) {
  const int c = is.get();
  if (c == std::char_traits<char>::eof()) throw Err("unexpected end of file");
  return static_cast<std::uint8_t>(c);
}

template <typename Err = CheckpointError>
std::uint64_t get_uint(std::istream& is, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(get_u8<Err>(is)) << (8 * i);
  return v;
}

template <typename Err = CheckpointError>
std::uint32_t get_u32(std::istream& is) {
  return static_cast<std::uint32_t>(get_uint<Err>(is, 4));
}

template <typename Err = CheckpointError>
std::uint64_t get_u64(std::istream& is) {
  return get_uint<Err>(is, 8);
}

template <typename Err = CheckpointError>
double get_f64(std::istream& is) {
  return std::bit_cast<double>(get_uint<Err>(is, 8));
}

template <typename Err = CheckpointError>
std::string get_str(std::istream& is, std::size_t max_len = 1u << 24) {
  const auto n = get_u32<Err>(is);
  if (n > max_len) throw Err("string length out of range");
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (static_cast<std::size_t>(is.gcount()) != n) throw Err("unexpected end of file");
  return s;
}

}  // namespace cdkd::binio
