// Copyright 2026 The miggrpo Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "miggrpo/errors.hpp"
#include "miggrpo/policy.hpp"

namespace miggrpo {

// Binary policy checkpoint, all integers and floats little-endian:
//
//   magic "MIGPOLCK" | u32 version | u32 |V| | u32 d | u32 L | u32 r (0: no adapter)
//   f64[L*|V|*d] W | f64[L*|V|] b | f64[L*|V|*r] A | f64[L*r*d] B
//   provenance: u64 seed | u64 step | str stage | str config_hash
//
// where str is u32 byte length followed by the bytes. Matrices are row-major
// per slot, slots in order.

inline constexpr char kCheckpointMagic[8] = {'M', 'I', 'G', 'P', 'O', 'L', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Provenance {
  std::uint64_t seed = 0;
  std::uint64_t step = 0;  // iterations or epochs completed when written
  std::string stage;
  std::string config_hash;

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct Checkpoint {
  PolicyParams params;
  Provenance provenance;
};

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  void raw(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(get(8)); }
  std::string str() {
    const auto n = u32();
    need(n);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_), bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  void expect_raw(const char* p, std::size_t n) {
    need(n);
    if (std::memcmp(bytes_.data() + pos_, p, n) != 0) throw DataError("not a policy checkpoint (bad magic)");
    pos_ += n;
  }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw DataError("truncated checkpoint");
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::vector<char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<char> encode_checkpoint(const PolicyParams& p, const Provenance& prov) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(p.dims.vocab));
  w.u32(static_cast<std::uint32_t>(p.dims.features));
  w.u32(static_cast<std::uint32_t>(p.dims.slots));
  w.u32(p.adapter ? static_cast<std::uint32_t>(p.adapter->rank) : 0U);
  for (double v : flatten(p)) w.f64(v);
  w.u64(prov.seed);
  w.u64(prov.step);
  w.str(prov.stage);
  w.str(prov.config_hash);
  return w.bytes();
}

inline Checkpoint decode_checkpoint(std::vector<char> bytes) {
  detail::ByteReader r(std::move(bytes));
  r.expect_raw(kCheckpointMagic, sizeof(kCheckpointMagic));
  const auto version = r.u32();
  if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  PolicyDims dims{static_cast<int>(r.u32()), static_cast<int>(r.u32()), static_cast<int>(r.u32())};
  const auto rank = static_cast<int>(r.u32());
  if (dims.vocab < 2 || dims.vocab > 4096 || dims.features < 1 || dims.features > 4096 || dims.slots < 1 ||
      dims.slots > 4096 || rank < 0 || (rank > 0 && rank >= std::min(dims.vocab, dims.features))) {
    throw DataError("checkpoint header has implausible dimensions");
  }
  Checkpoint ck{PolicyParams::zeros(dims), {}};
  if (rank > 0) attach_adapter(ck.params, rank, 0, 0.0);
  std::vector<double> flat(flatten(ck.params).size());
  for (double& v : flat) v = r.f64();
  unflatten(flat, ck.params);
  ck.provenance.seed = r.u64();
  ck.provenance.step = r.u64();
  ck.provenance.stage = r.str();
  ck.provenance.config_hash = r.str();
  if (!r.at_end()) throw DataError("trailing bytes after checkpoint");
  if (!all_finite(ck.params)) throw DataError("checkpoint contains non-finite weights");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const PolicyParams& p, const Provenance& prov) {
  const auto bytes = encode_checkpoint(p, prov);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to checkpoint " + tmp.string());
  }
  // Rename last so a failed write never clobbers the previous checkpoint.
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(std::move(bytes));
}

}  // namespace miggrpo
