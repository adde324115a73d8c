#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "swingup/common.hpp"
#include "swingup/tensor.hpp"

namespace swingup {

/// Binary checkpoint container: magic, version, JSON metadata, then named
/// sections. Sections are float64 tensors or raw byte blobs (rng state,
/// replay buffers). Little-endian throughout.
struct Container {
  std::string meta;  // JSON text, free-form
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::vector<std::pair<std::string, std::string>> blobs;

  const Tensor& tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw LoadError("checkpoint: missing tensor '" + name + "'");
  }
  bool has_tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return true;
    return false;
  }
  const std::string* blob(const std::string& name) const {
    for (const auto& [n, b] : blobs)
      if (n == name) return &b;
    return nullptr;
  }
};

namespace detail {

constexpr char kMagic[8] = {'S', 'W', 'U', 'P', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(const std::string& s, std::size_t& pos) {
  if (pos + sizeof(T) > s.size()) throw LoadError("checkpoint: truncated file");
  T v;
  std::memcpy(&v, s.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

inline std::string take_bytes(const std::string& s, std::size_t& pos, std::size_t n) {
  if (pos + n > s.size()) throw LoadError("checkpoint: truncated file");
  std::string out = s.substr(pos, n);
  pos += n;
  return out;
}

}  // namespace detail

inline void save_container(const std::string& path, const Container& c) {
  std::string out;
  out.append(detail::kMagic, sizeof(detail::kMagic));
  detail::put<std::uint32_t>(out, detail::kVersion);
  detail::put<std::uint64_t>(out, c.meta.size());
  out += c.meta;
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(c.tensors.size() + c.blobs.size()));
  for (const auto& [name, t] : c.tensors) {
    detail::put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    detail::put<std::uint8_t>(out, 0);
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (int d = 0; d < t.rank(); ++d) detail::put<std::int64_t>(out, t.dim(d));
    out.append(reinterpret_cast<const char*>(t.data()),
               static_cast<std::size_t>(t.numel()) * sizeof(double));
  }
  for (const auto& [name, b] : c.blobs) {
    detail::put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    detail::put<std::uint8_t>(out, 1);
    detail::put<std::uint64_t>(out, b.size());
    out += b;
  }

  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw LoadError("checkpoint: cannot open '" + tmp + "' for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw LoadError("checkpoint: write failed for '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline Container load_container(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw LoadError("checkpoint: cannot open '" + path + "'");
  std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  std::size_t pos = 0;
  std::string magic = detail::take_bytes(s, pos, sizeof(detail::kMagic));
  if (std::memcmp(magic.data(), detail::kMagic, sizeof(detail::kMagic)) != 0)
    throw LoadError("checkpoint: bad magic in '" + path + "'");
  auto version = detail::take<std::uint32_t>(s, pos);
  if (version != detail::kVersion)
    throw LoadError("checkpoint: unsupported version " + std::to_string(version));

  Container c;
  auto meta_len = detail::take<std::uint64_t>(s, pos);
  c.meta = detail::take_bytes(s, pos, meta_len);
  auto n_entries = detail::take<std::uint32_t>(s, pos);
  for (std::uint32_t i = 0; i < n_entries; ++i) {
    auto name_len = detail::take<std::uint16_t>(s, pos);
    std::string name = detail::take_bytes(s, pos, name_len);
    auto kind = detail::take<std::uint8_t>(s, pos);
    if (kind == 0) {
      auto rank = detail::take<std::uint8_t>(s, pos);
      if (rank < 1 || rank > 3) throw LoadError("checkpoint: bad tensor rank");
      std::vector<std::int64_t> dims;
      for (std::uint8_t d = 0; d < rank; ++d) dims.push_back(detail::take<std::int64_t>(s, pos));
      std::int64_t numel = Tensor::numel_from(dims);
      if (numel <= 0 || numel > (1ll << 40)) throw LoadError("checkpoint: bad tensor dims");
      std::string raw = detail::take_bytes(s, pos, static_cast<std::size_t>(numel) * 8);
      std::vector<double> data(static_cast<std::size_t>(numel));
      std::memcpy(data.data(), raw.data(), raw.size());
      c.tensors.emplace_back(std::move(name), Tensor(std::move(dims), std::move(data)));
    } else if (kind == 1) {
      auto len = detail::take<std::uint64_t>(s, pos);
      c.blobs.emplace_back(std::move(name), detail::take_bytes(s, pos, len));
    } else {
      throw LoadError("checkpoint: unknown section kind");
    }
  }
  if (pos != s.size()) throw LoadError("checkpoint: trailing bytes in '" + path + "'");
  return c;
}

}  // namespace swingup
