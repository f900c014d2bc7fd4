#pragma once

#include "metat2/errors.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace metat2::io {

namespace fs = std::filesystem;

// Records every file opened for reading while installed.
struct FileAudit {
  std::vector<fs::path> reads;

  bool touched(const fs::path& p) const {
    const auto canon = fs::weakly_canonical(p);
    for (const auto& r : reads)
      if (fs::weakly_canonical(r) == canon) return true;
    return false;
  }
};

inline FileAudit*& active_audit() {
  thread_local FileAudit* audit = nullptr;
  return audit;
}

class ScopedAudit {
 public:
  explicit ScopedAudit(FileAudit& audit) : previous_(active_audit()) { active_audit() = &audit; }
  ~ScopedAudit() { active_audit() = previous_; }
  ScopedAudit(const ScopedAudit&) = delete;
  ScopedAudit& operator=(const ScopedAudit&) = delete;

 private:
  FileAudit* previous_;
};

inline std::vector<char> read_bytes(const fs::path& path) {
  if (auto* audit = active_audit()) audit->reads.push_back(path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::vector<char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline std::string read_text(const fs::path& path) {
  const auto bytes = read_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

// Writes to a sibling temp file then renames over the destination.
inline void write_atomic(const fs::path& path, const void* data, std::size_t size) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!out) throw DataError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline void write_text(const fs::path& path, const std::string& text) {
  write_atomic(path, text.data(), text.size());
}

// Little-endian encoding helpers. The byte order is fixed regardless of host.
template <class T>
void put_le(std::vector<char>& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char raw[sizeof(T)];
  std::memcpy(raw, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
  out.insert(out.end(), raw, raw + sizeof(T));
}

template <class T>
T get_le(const char* src) {
  unsigned char raw[sizeof(T)];
  std::memcpy(raw, src, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
  T value;
  std::memcpy(&value, raw, sizeof(T));
  return value;
}

inline std::vector<char> encode_f32(const std::vector<float>& values) {
  std::vector<char> out;
  out.reserve(values.size() * 4);
  for (float v : values) put_le(out, v);
  return out;
}

inline std::vector<float> decode_f32(const std::vector<char>& bytes) {
  if (bytes.size() % 4 != 0) throw DataError("float32 array has a truncated tail");
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = get_le<float>(bytes.data() + 4 * i);
  return out;
}

// Binary PGM (P5), 8-bit.
inline void write_pgm(const fs::path& path, int rows, int cols, const std::vector<std::uint8_t>& pixels) {
  std::string header = "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
  std::vector<char> bytes(header.begin(), header.end());
  bytes.insert(bytes.end(), pixels.begin(), pixels.end());
  write_atomic(path, bytes.data(), bytes.size());
}

}  // namespace metat2::io
