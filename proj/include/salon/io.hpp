// Little-endian binary file helpers shared by the frame/store/checkpoint formats.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "salon/core.hpp"

namespace salon {

inline std::ofstream open_output(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::MalformedFile, "cannot open for writing: " + path);
  return out;
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::MalformedFile, "cannot open for reading: " + path);
  return in;
}

template <typename T>
inline void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
inline void write_array(std::ostream& out, const T* data, size_t count) {
  out.write(reinterpret_cast<const char*>(data), sizeof(T) * count);
}

template <typename T>
inline T read_pod(std::istream& in, const char* what) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw Error(ErrorCode::MalformedFile, std::string("truncated file reading ") + what);
  return v;
}

template <typename T>
inline void read_array(std::istream& in, T* data, size_t count, const char* what) {
  in.read(reinterpret_cast<char*>(data), sizeof(T) * count);
  if (!in) throw Error(ErrorCode::MalformedFile, std::string("truncated file reading ") + what);
}

inline void write_magic(std::ostream& out, const char magic[4]) { out.write(magic, 4); }

inline void expect_magic(std::istream& in, const char magic[4], const char* what) {
  char buf[4];
  in.read(buf, 4);
  if (!in || std::memcmp(buf, magic, 4) != 0)
    throw Error(ErrorCode::MalformedFile, std::string("bad magic for ") + what);
}

}  // namespace salon
