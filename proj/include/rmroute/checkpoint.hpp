#pragma once

// Named-tensor checkpoint container. Layout, all integers little-endian:
//
//   "RMCK" | u32 version | u64 config_hash | u64 seed | str method
//   u32 n_extra | n_extra * (str key, str value)
//   u32 n_tensors | n_tensors * (str name, u32 ndims, u32 dims[], u64 offset, u64 nbytes)
//   u64 payload_size | payload (raw float32) | u64 payload_fnv1a
//
// Tensors are written in name order, so identical contents produce identical
// bytes. Loading verifies the payload hash and every index entry.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "rmroute/rng.hpp"
#include "rmroute/tensor.hpp"

namespace rmroute {

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

struct CheckpointMeta {
  uint64_t config_hash = 0;
  uint64_t seed = 0;
  std::string method;
  std::map<std::string, std::string> extra;
};

struct Checkpoint {
  CheckpointMeta meta;
  NamedTensors tensors;
};

namespace detail {

constexpr char kCkptMagic[4] = {'R', 'M', 'C', 'K'};
constexpr uint32_t kCkptVersion = 1;

inline void put_u32(std::string& out, uint32_t v) {
  out.append(reinterpret_cast<const char*>(&v), 4);
}
inline void put_u64(std::string& out, uint64_t v) {
  out.append(reinterpret_cast<const char*>(&v), 8);
}
inline void put_str(std::string& out, const std::string& s) {
  put_u32(out, static_cast<uint32_t>(s.size()));
  out.append(s);
}

struct ByteReader {
  const std::string& buf;
  size_t pos = 0;
  explicit ByteReader(const std::string& b) : buf(b) {}
  void need(size_t n) const {
    if (pos + n > buf.size()) throw std::runtime_error("checkpoint: truncated file");
  }
  uint32_t u32() {
    need(4);
    uint32_t v;
    std::memcpy(&v, buf.data() + pos, 4);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v;
    std::memcpy(&v, buf.data() + pos, 8);
    pos += 8;
    return v;
  }
  std::string str() {
    const uint32_t n = u32();
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

inline uint64_t fnv1a_bytes(const char* p, size_t n) {
  return fnv1a(std::string_view(p, n));
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::string head;
  head.append(detail::kCkptMagic, 4);
  detail::put_u32(head, detail::kCkptVersion);
  detail::put_u64(head, ck.meta.config_hash);
  detail::put_u64(head, ck.meta.seed);
  detail::put_str(head, ck.meta.method);
  detail::put_u32(head, static_cast<uint32_t>(ck.meta.extra.size()));
  for (const auto& [k, v] : ck.meta.extra) {
    detail::put_str(head, k);
    detail::put_str(head, v);
  }
  detail::put_u32(head, static_cast<uint32_t>(ck.tensors.size()));
  std::string payload;
  for (const auto& [name, t] : ck.tensors) {
    if (!t) throw std::invalid_argument("checkpoint: null tensor '" + name + "'");
    detail::put_str(head, name);
    detail::put_u32(head, static_cast<uint32_t>(t->shape.size()));
    for (int d : t->shape) detail::put_u32(head, static_cast<uint32_t>(d));
    const uint64_t nbytes = static_cast<uint64_t>(t->data.size()) * 4;
    detail::put_u64(head, payload.size());
    detail::put_u64(head, nbytes);
    payload.append(reinterpret_cast<const char*>(t->data.data()), nbytes);
  }
  detail::put_u64(head, payload.size());

  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  f.write(head.data(), static_cast<std::streamsize>(head.size()));
  f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  const uint64_t h = detail::fnv1a_bytes(payload.data(), payload.size());
  f.write(reinterpret_cast<const char*>(&h), 8);
  f.flush();
  if (!f) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  detail::ByteReader r(buf);
  r.need(4);
  if (std::memcmp(buf.data(), detail::kCkptMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
  r.pos = 4;
  const uint32_t version = r.u32();
  if (version != detail::kCkptVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version) +
                             " in '" + path + "'");
  Checkpoint ck;
  ck.meta.config_hash = r.u64();
  ck.meta.seed = r.u64();
  ck.meta.method = r.str();
  const uint32_t n_extra = r.u32();
  for (uint32_t i = 0; i < n_extra; ++i) {
    std::string k = r.str();
    ck.meta.extra[k] = r.str();
  }
  struct Entry {
    std::string name;
    std::vector<int> shape;
    uint64_t offset, nbytes;
  };
  const uint32_t n_tensors = r.u32();
  std::vector<Entry> index(n_tensors);
  for (auto& e : index) {
    e.name = r.str();
    const uint32_t nd = r.u32();
    for (uint32_t d = 0; d < nd; ++d) e.shape.push_back(static_cast<int>(r.u32()));
    e.offset = r.u64();
    e.nbytes = r.u64();
  }
  const uint64_t payload_size = r.u64();
  r.need(payload_size + 8);
  const char* payload = buf.data() + r.pos;
  uint64_t stored_hash;
  std::memcpy(&stored_hash, payload + payload_size, 8);
  if (detail::fnv1a_bytes(payload, payload_size) != stored_hash)
    throw std::runtime_error("checkpoint: payload hash mismatch in '" + path +
                             "' (corrupt or modified file)");

  for (const auto& e : index) {
    if (e.nbytes != numel(e.shape) * 4 || e.offset + e.nbytes > payload_size)
      throw std::runtime_error("checkpoint: inconsistent index entry '" + e.name + "' in '" +
                               path + "'");
    auto t = make_tensor(e.shape);
    std::memcpy(t->data.data(), payload + e.offset, e.nbytes);
    ck.tensors[e.name] = t;
  }
  return ck;
}

// Hash of the entire file, for before/after comparisons of artifacts on disk.
inline uint64_t file_hash(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("file_hash: cannot open '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return detail::fnv1a_bytes(buf.data(), buf.size());
}

}  // namespace rmroute
