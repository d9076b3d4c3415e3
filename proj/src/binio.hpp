#pragma once

// Little helpers for the fixed-layout binary containers (corpus, checkpoint).

#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "avrl/errors.hpp"

namespace avrl::binio {

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError("binary file truncated");
  return v;
}

inline void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is) {
  const auto n = get<std::uint32_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw DataError("binary file truncated");
  return s;
}

template <typename T>
void put_vector(std::ostream& os, const std::vector<T>& v) {
  put<std::uint64_t>(os, v.size());
  os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
}

template <typename T>
std::vector<T> get_vector(std::istream& is) {
  const auto n = get<std::uint64_t>(is);
  if (n > (1ULL << 34) / sizeof(T)) throw DataError("binary record size implausible");
  std::vector<T> v(n);
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T)));
  if (!is) throw DataError("binary file truncated");
  return v;
}

}  // namespace avrl::binio
