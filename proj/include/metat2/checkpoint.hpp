#pragma once

// Versioned binary checkpoint container:
//
//   magic "METAT2CK" | u32 version | u64 meta length | meta (JSON, UTF-8)
//   u32 entry count | entries...
//   entry: u32 name length | name | u8 dtype | u32 rank | i64 dims[rank]
//          | u64 element count | little-endian payload
//
// dtype 0 = float32, 1 = float64, 2 = int64. Model weights are float32.

#include "metat2/errors.hpp"
#include "metat2/io.hpp"
#include "metat2/nn.hpp"

#include <json.hpp>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace metat2::ckpt {

inline constexpr char kMagic[8] = {'M', 'E', 'T', 'A', 'T', '2', 'C', 'K'};
inline constexpr std::uint32_t kVersion = 1;

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1, kI64 = 2 };

struct Entry {
  DType dtype = DType::kF32;
  std::vector<std::int64_t> dims;
  std::vector<float> f32;
  std::vector<double> f64;
  std::vector<std::int64_t> i64;

  std::size_t count() const {
    switch (dtype) {
      case DType::kF32: return f32.size();
      case DType::kF64: return f64.size();
      case DType::kI64: return i64.size();
    }
    return 0;
  }
};

struct Container {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, Entry> entries;

  void put_f32(const std::string& name, std::vector<float> values, std::vector<std::int64_t> dims = {}) {
    Entry e;
    e.dtype = DType::kF32;
    e.dims = dims.empty() ? std::vector<std::int64_t>{static_cast<std::int64_t>(values.size())} : std::move(dims);
    e.f32 = std::move(values);
    entries[name] = std::move(e);
  }
  void put_f64(const std::string& name, std::vector<double> values) {
    Entry e;
    e.dtype = DType::kF64;
    e.dims = {static_cast<std::int64_t>(values.size())};
    e.f64 = std::move(values);
    entries[name] = std::move(e);
  }
  void put_i64(const std::string& name, std::vector<std::int64_t> values) {
    Entry e;
    e.dtype = DType::kI64;
    e.dims = {static_cast<std::int64_t>(values.size())};
    e.i64 = std::move(values);
    entries[name] = std::move(e);
  }

  const Entry& at(const std::string& name) const {
    auto it = entries.find(name);
    if (it == entries.end()) throw DataError("checkpoint is missing entry '" + name + "'");
    return it->second;
  }
  bool has(const std::string& name) const { return entries.count(name) != 0; }
};

inline std::vector<char> encode(const Container& c) {
  std::vector<char> out(kMagic, kMagic + 8);
  io::put_le<std::uint32_t>(out, kVersion);
  const std::string meta = c.meta.dump();
  io::put_le<std::uint64_t>(out, meta.size());
  out.insert(out.end(), meta.begin(), meta.end());
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(c.entries.size()));
  for (const auto& [name, e] : c.entries) {
    io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(static_cast<char>(e.dtype));
    io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.dims.size()));
    for (auto d : e.dims) io::put_le<std::int64_t>(out, d);
    io::put_le<std::uint64_t>(out, e.count());
    switch (e.dtype) {
      case DType::kF32: for (float v : e.f32) io::put_le(out, v); break;
      case DType::kF64: for (double v : e.f64) io::put_le(out, v); break;
      case DType::kI64: for (auto v : e.i64) io::put_le(out, v); break;
    }
  }
  return out;
}

namespace detail {

struct Reader {
  const std::vector<char>& bytes;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > bytes.size()) throw DataError("checkpoint is truncated");
  }

  template <class T>
  T take() {
    need(sizeof(T));
    T v = io::get_le<T>(bytes.data() + pos);
    pos += sizeof(T);
    return v;
  }

  std::string take_string(std::size_t n) {
    need(n);
    std::string s(bytes.begin() + pos, bytes.begin() + pos + n);
    pos += n;
    return s;
  }

  template <class T>
  std::vector<T> take_array(std::size_t count) {
    need(count * sizeof(T));
    std::vector<T> out(count);
    for (auto& v : out) v = take<T>();
    return out;
  }
};

}  // namespace detail

inline Container decode(const std::vector<char>& bytes) {
  detail::Reader r{bytes};
  r.need(8);
  if (!std::equal(kMagic, kMagic + 8, bytes.begin())) throw DataError("not a checkpoint file (bad magic)");
  r.pos = 8;
  const auto version = r.take<std::uint32_t>();
  if (version != kVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  Container c;
  try {
    c.meta = nlohmann::json::parse(r.take_string(r.take<std::uint64_t>()));
  } catch (const nlohmann::json::parse_error&) {
    throw DataError("checkpoint metadata is corrupt");
  }
  const auto n = r.take<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.take_string(r.take<std::uint32_t>());
    r.need(1);
    Entry e;
    e.dtype = static_cast<DType>(bytes[r.pos++]);
    const auto rank = r.take<std::uint32_t>();
    for (std::uint32_t k = 0; k < rank; ++k) e.dims.push_back(r.take<std::int64_t>());
    const auto count = r.take<std::uint64_t>();
    switch (e.dtype) {
      case DType::kF32: e.f32 = r.take_array<float>(count); break;
      case DType::kF64: e.f64 = r.take_array<double>(count); break;
      case DType::kI64: e.i64 = r.take_array<std::int64_t>(count); break;
      default: throw DataError("checkpoint entry '" + name + "' has unknown dtype");
    }
    c.entries.emplace(std::move(name), std::move(e));
  }
  return c;
}

inline void save(const io::fs::path& path, const Container& c) {
  const auto bytes = encode(c);
  io::write_atomic(path, bytes.data(), bytes.size());
}

inline Container load(const io::fs::path& path) { return decode(io::read_bytes(path)); }

// Stores every parameter of `params` as float32 under `prefix + name`.
template <class S>
void put_params(Container& c, const std::string& prefix, const nn::ParamSet<S>& params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& v = params[i];
    const Shape s = v.shape();
    std::vector<float> values(v.value().begin(), v.value().end());
    c.put_f32(prefix + params.name(i), std::move(values), {s.n, s.c, s.h, s.w});
  }
}

template <class S>
void get_params(const Container& c, const std::string& prefix, nn::ParamSet<S>& params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = c.at(prefix + params.name(i));
    auto dst = params[i].mutable_value();
    if (e.dtype != DType::kF32 || e.f32.size() != dst.size())
      throw DataError("checkpoint entry '" + prefix + params.name(i) + "' does not match the model layout");
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<S>(e.f32[j]);
  }
}

template <class S>
void put_adam(Container& c, const std::string& prefix, const nn::Adam<S>& adam) {
  c.put_i64(prefix + "steps", {adam.steps()});
  for (std::size_t i = 0; i < adam.first_moment().size(); ++i) {
    const auto& m = adam.first_moment()[i];
    const auto& v = adam.second_moment()[i];
    c.put_f32(prefix + "m." + std::to_string(i), std::vector<float>(m.begin(), m.end()));
    c.put_f32(prefix + "v." + std::to_string(i), std::vector<float>(v.begin(), v.end()));
  }
}

template <class S>
void get_adam(const Container& c, const std::string& prefix, nn::Adam<S>& adam) {
  adam.set_steps(c.at(prefix + "steps").i64.at(0));
  for (std::size_t i = 0; i < adam.first_moment().size(); ++i) {
    const auto& m = c.at(prefix + "m." + std::to_string(i)).f32;
    const auto& v = c.at(prefix + "v." + std::to_string(i)).f32;
    auto& dm = adam.first_moment()[i];
    auto& dv = adam.second_moment()[i];
    if (m.size() != dm.size() || v.size() != dv.size()) throw DataError("optimizer state does not match the model");
    for (std::size_t j = 0; j < dm.size(); ++j) {
      dm[j] = static_cast<S>(m[j]);
      dv[j] = static_cast<S>(v[j]);
    }
  }
}

}  // namespace metat2::ckpt
