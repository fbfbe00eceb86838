// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "polymlm/error.hpp"
#include "polymlm/model.hpp"
#include "polymlm/optim.hpp"
#include "polymlm/tensor_parallel.hpp"

namespace polymlm {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'P', 'M', 'L', 'M', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline const std::string kAdamMPrefix = "adam.m.";
inline const std::string kAdamVPrefix = "adam.v.";

struct ShardHeader {
  ShardPlan plan;
  std::size_t rank = 0;
  friend bool operator==(const ShardHeader&, const ShardHeader&) = default;
};

/// Model configuration, optional shard header, string metadata and named
/// tensors. Parameters and optimizer moments share the tensor table; the
/// moments are stored under the adam.m. and adam.v. prefixes.
struct Checkpoint {
  ModelConfig config;
  std::optional<ShardHeader> shard;
  std::map<std::string, std::string> meta;
  ParamStore tensors;

  std::uint64_t meta_u64(const std::string& key, std::uint64_t fallback = 0) const {
    auto it = meta.find(key);
    if (it == meta.end()) return fallback;
    try {
      return std::stoull(it->second);
    } catch (const std::exception&) {
      throw DataError("checkpoint metadata " + key + " is not an integer");
    }
  }
};

inline Checkpoint make_checkpoint(const ModelConfig& c, const ParamStore& params, const AdamState* adam = nullptr) {
  Checkpoint ck;
  ck.config = c;
  for (const auto& [name, t] : params.all()) ck.tensors.add(name, Tensor(t.shape(), t.storage()));
  if (adam) {
    ck.meta["adam.step"] = std::to_string(adam->step);
    for (const auto& [name, t] : params.all()) {
      auto m = adam->m.find(name);
      if (m == adam->m.end()) continue;
      ck.tensors.add(kAdamMPrefix + name, Tensor(t.shape(), m->second));
      ck.tensors.add(kAdamVPrefix + name, Tensor(t.shape(), adam->v.at(name)));
    }
  }
  return ck;
}

/// Parameters only, without optimizer moments.
inline ParamStore checkpoint_params(const Checkpoint& ck) {
  ParamStore p;
  for (const auto& [name, t] : ck.tensors.all()) {
    if (name.rfind("adam.", 0) == 0) continue;
    p.add(name, Tensor(t.shape(), t.storage()));
  }
  return p;
}

inline AdamState checkpoint_adam(const Checkpoint& ck) {
  AdamState s;
  s.step = ck.meta_u64("adam.step");
  for (const auto& [name, t] : ck.tensors.all()) {
    if (name.rfind(kAdamMPrefix, 0) == 0) s.m[name.substr(kAdamMPrefix.size())] = t.storage();
    if (name.rfind(kAdamVPrefix, 0) == 0) s.v[name.substr(kAdamVPrefix.size())] = t.storage();
  }
  return s;
}

namespace detail {

class ByteWriter {
 public:
  template <typename T>
  void pod(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    out_.append(p, sizeof(T));
  }
  void str(const std::string& s) {
    pod<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    out_.append(s);
  }
  void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class ByteReader {
 public:
  ByteReader(const std::string& data, std::string origin) : d_(data), origin_(std::move(origin)) {}
  template <typename T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, d_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    need(n);
    std::string s = d_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void raw(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, d_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == d_.size(); }
  [[noreturn]] void fail(const std::string& what) const {
    throw DataError("checkpoint " + origin_ + ": " + what + " at byte " + std::to_string(pos_));
  }

 private:
  void need(std::size_t n) const {
    if (d_.size() - pos_ < n) fail("truncated");
  }
  const std::string& d_;
  std::string origin_;
  std::size_t pos_ = 0;
};

inline void write_config(ByteWriter& w, const ModelConfig& c) {
  for (std::uint64_t v : {c.layers, c.hidden, c.heads, c.vocab, c.max_seq, c.ffn_mult}) w.pod(v);
  w.pod(c.dropout);
  w.pod<std::uint8_t>(c.pre_ln ? 1 : 0);
}

inline ModelConfig read_config(ByteReader& r) {
  ModelConfig c;
  c.layers = r.pod<std::uint64_t>();
  c.hidden = r.pod<std::uint64_t>();
  c.heads = r.pod<std::uint64_t>();
  c.vocab = r.pod<std::uint64_t>();
  c.max_seq = r.pod<std::uint64_t>();
  c.ffn_mult = r.pod<std::uint64_t>();
  c.dropout = r.pod<double>();
  c.pre_ln = r.pod<std::uint8_t>() != 0;
  return c;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, sizeof kCheckpointMagic);
  w.pod(kCheckpointVersion);
  detail::write_config(w, ck.config);
  w.pod<std::uint8_t>(ck.shard ? 1 : 0);
  if (ck.shard) {
    w.pod<std::uint64_t>(ck.shard->plan.world_size);
    w.pod<std::uint64_t>(ck.shard->rank);
  }
  w.pod<std::uint64_t>(ck.meta.size());
  for (const auto& [k, v] : ck.meta) {
    w.str(k);
    w.str(v);
  }
  w.pod<std::uint64_t>(ck.tensors.all().size());
  for (const auto& [name, t] : ck.tensors.all()) {
    w.str(name);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.pod<std::uint64_t>(d);
    w.raw(t.storage().data(), t.numel() * sizeof(double));
  }
  return w.take();
}

inline Checkpoint parse_checkpoint(const std::string& bytes, const std::string& origin) {
  detail::ByteReader r(bytes, origin);
  char magic[8];
  r.raw(magic, sizeof magic);
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) r.fail("not a checkpoint file");
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) r.fail("unsupported format version " + std::to_string(version));
  Checkpoint ck;
  ck.config = detail::read_config(r);
  try {
    ck.config.validate();
  } catch (const ConfigError& e) {
    r.fail(std::string("invalid model configuration: ") + e.what());
  }
  if (r.pod<std::uint8_t>()) {
    const auto ws = r.pod<std::uint64_t>();
    const auto rank = r.pod<std::uint64_t>();
    if (ws == 0 || rank >= ws) r.fail("invalid shard header");
    try {
      ck.shard = ShardHeader{make_shard_plan(ck.config, ws), rank};
    } catch (const PlanError& e) {
      r.fail(std::string("invalid shard header: ") + e.what());
    }
  }
  const auto nmeta = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < nmeta; ++i) {
    std::string k = r.str();
    ck.meta[k] = r.str();
  }
  const auto ntensors = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < ntensors; ++i) {
    std::string name = r.str();
    const auto rank = r.pod<std::uint32_t>();
    if (rank == 0 || rank > 8) r.fail("tensor " + name + " has invalid rank");
    Shape s(rank);
    std::size_t n = 1;
    for (auto& d : s) {
      d = r.pod<std::uint64_t>();
      if (d == 0 || d > (std::size_t{1} << 40)) r.fail("tensor " + name + " has invalid extent");
      n *= d;
    }
    std::vector<double> data(n);
    r.raw(data.data(), n * sizeof(double));
    try {
      ck.tensors.add(name, Tensor(std::move(s), std::move(data)));
    } catch (const Error& e) {
      r.fail("tensor " + name + ": " + e.what());
    }
  }
  if (!r.done()) r.fail("trailing bytes");
  return ck;
}

inline void write_file_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("short write to " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp + " to " + path + ": " + ec.message());
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  write_file_atomic(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::string& path) { return parse_checkpoint(read_file_bytes(path), path); }

/// Splits a full checkpoint into per-rank checkpoints with shard headers.
inline std::vector<Checkpoint> shard_checkpoint(const Checkpoint& full, std::size_t world_size) {
  if (full.shard) throw PlanError("checkpoint is already a shard");
  const ShardPlan plan = make_shard_plan(full.config, world_size);
  std::vector<Checkpoint> out(world_size);
  for (std::size_t r = 0; r < world_size; ++r) {
    out[r].config = full.config;
    out[r].shard = ShardHeader{plan, r};
    out[r].meta = full.meta;
    for (const auto& [name, t] : full.tensors.all()) {
      std::string base = name;
      if (base.rfind(kAdamMPrefix, 0) == 0) base = base.substr(kAdamMPrefix.size());
      if (base.rfind(kAdamVPrefix, 0) == 0) base = base.substr(kAdamVPrefix.size());
      const ShardSpec spec = shard_spec(base);
      if (holds_tensor(spec, r)) out[r].tensors.add(name, slice_for_rank(t, spec, plan, r));
    }
  }
  return out;
}

/// Reassembles the serial checkpoint from one shard per rank. Metadata is
/// taken from rank 0.
inline Checkpoint merge_checkpoints(const std::vector<Checkpoint>& shards) {
  if (shards.empty()) throw PlanError("merge: no shards given");
  const auto& first = shards[0];
  if (!first.shard) throw PlanError("merge: rank 0 file has no shard header");
  const ShardPlan& plan = first.shard->plan;
  if (shards.size() != plan.world_size) {
    throw PlanError("merge: expected " + std::to_string(plan.world_size) + " shards, got " +
                    std::to_string(shards.size()));
  }
  std::vector<const Checkpoint*> by_rank(plan.world_size, nullptr);
  for (const auto& s : shards) {
    if (!s.shard || !(s.shard->plan == plan) || !(s.config == first.config)) {
      throw PlanError("merge: shards disagree on configuration or plan");
    }
    if (by_rank[s.shard->rank]) throw PlanError("merge: duplicate rank " + std::to_string(s.shard->rank));
    by_rank[s.shard->rank] = &s;
  }
  Checkpoint out;
  out.config = first.config;
  out.meta = by_rank[0]->meta;
  for (const auto& [name, _] : by_rank[0]->tensors.all()) {
    std::string base = name;
    if (base.rfind(kAdamMPrefix, 0) == 0) base = base.substr(kAdamMPrefix.size());
    if (base.rfind(kAdamVPrefix, 0) == 0) base = base.substr(kAdamVPrefix.size());
    const ShardSpec spec = shard_spec(base);
    std::vector<const Tensor*> parts;
    for (std::size_t r = 0; r < plan.world_size; ++r) {
      const Checkpoint* src = holds_tensor(spec, r) ? by_rank[r] : by_rank[0];
      if (!src->tensors.contains(name)) throw PlanError("merge: rank " + std::to_string(r) + " lacks " + name);
      parts.push_back(&src->tensors.at(name));
    }
    out.tensors.add(name, merge_slices(parts, spec, plan));
  }
  return out;
}

}  // namespace polymlm
