// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <type_traits>
#include <vector>

#include "polymlm/error.hpp"

namespace polymlm {

enum class CollectiveKind : std::uint8_t { kAllReduceSum, kAllReduceMax, kAllGather, kBroadcast, kBarrier };

inline const char* collective_name(CollectiveKind k) {
  switch (k) {
    case CollectiveKind::kAllReduceSum: return "all_reduce_sum";
    case CollectiveKind::kAllReduceMax: return "all_reduce_max";
    case CollectiveKind::kAllGather: return "all_gather";
    case CollectiveKind::kBroadcast: return "broadcast";
    case CollectiveKind::kBarrier: return "barrier";
  }
  return "?";
}

/// Per-rank traffic counters. A collective over n doubles counts n * 8
/// bytes (the payload each rank contributes or receives, not wire traffic
/// of any particular algorithm). all_gather counts the gathered result.
struct CommCounters {
  std::uint64_t bytes = 0;
  std::uint64_t collectives = 0;
  std::uint64_t all_reduce_bytes = 0;
  std::uint64_t all_gather_bytes = 0;
  std::uint64_t broadcast_bytes = 0;
};

/// Shared rendezvous state for a group of in-process ranks.
class World {
 public:
  explicit World(std::size_t size, std::chrono::milliseconds timeout = std::chrono::seconds(20))
      : size_(size), timeout_(timeout), slots_(size) {
    if (size == 0) throw ConfigError("world size must be positive");
  }
  World(const World&) = delete;
  World& operator=(const World&) = delete;

  std::size_t size() const { return size_; }

  /// Marks the world failed; every rank blocked in or entering a
  /// collective throws ProtocolError carrying `reason`.
  void abort(const std::string& reason) {
    std::lock_guard lock(mu_);
    if (!aborted_) {
      aborted_ = true;
      abort_reason_ = reason;
    }
    cv_.notify_all();
  }
  bool aborted() const {
    std::lock_guard lock(mu_);
    return aborted_;
  }

 private:
  friend class Communicator;

  struct Slot {
    CollectiveKind kind = CollectiveKind::kBarrier;
    std::uint64_t seq = 0;
    std::size_t count = 0;
    std::size_t root = 0;
    const double* data = nullptr;
  };

  /// Blocks until every rank has arrived at this generation.
  void rendezvous(std::size_t rank, std::uint64_t seq, const char* what) {
    std::unique_lock lock(mu_);
    if (aborted_) throw ProtocolError(abort_reason_);
    const std::uint64_t gen = generation_;
    if (++arrived_ == size_) {
      arrived_ = 0;
      ++generation_;
      cv_.notify_all();
      return;
    }
    const auto deadline = std::chrono::steady_clock::now() + timeout_;
    while (generation_ == gen && !aborted_) {
      if (cv_.wait_until(lock, deadline) == std::cv_status::timeout && generation_ == gen && !aborted_) {
        aborted_ = true;
        abort_reason_ = "collective timeout: rank " + std::to_string(rank) + " waited at sequence " +
                        std::to_string(seq) + " (" + what + ") but only " + std::to_string(arrived_) +
                        " of " + std::to_string(size_) + " ranks arrived";
        cv_.notify_all();
      }
    }
    if (aborted_) throw ProtocolError(abort_reason_);
  }

  std::size_t size_;
  std::chrono::milliseconds timeout_;
  std::vector<Slot> slots_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::size_t arrived_ = 0;
  std::uint64_t generation_ = 0;
  bool aborted_ = false;
  std::string abort_reason_;
};

/// One rank's handle. Every rank must issue the same collectives in the same
/// order; each call carries a sequence number and a mismatch in kind, size
/// or sequence is reported as a ProtocolError naming the divergent rank.
/// Reductions combine contributions in ascending rank order on every rank,
/// so all ranks obtain bitwise identical results.
class Communicator {
 public:
  Communicator(World& world, std::size_t rank) : world_(&world), rank_(rank) {
    if (rank >= world.size()) throw ConfigError("rank outside world");
  }

  std::size_t rank() const { return rank_; }
  std::size_t world_size() const { return world_->size(); }
  std::uint64_t sequence() const { return seq_; }
  const CommCounters& counters() const { return counters_; }
  void reset_counters() { counters_ = {}; }

  void all_reduce_sum(std::span<double> buf) { reduce(buf, CollectiveKind::kAllReduceSum); }
  void all_reduce_max(std::span<double> buf) { reduce(buf, CollectiveKind::kAllReduceMax); }

  /// Concatenation of every rank's contribution in rank order. Ranks may
  /// contribute different lengths.
  std::vector<double> all_gather(std::span<const double> local) {
    if (world_size() == 1) return {local.begin(), local.end()};
    std::vector<double> out;
    exchange(CollectiveKind::kAllGather, local.data(), local.size(), 0, /*check_count=*/false, [&] {
      for (const auto& s : world_->slots_) out.insert(out.end(), s.data, s.data + s.count);
    });
    count(out.size(), &CommCounters::all_gather_bytes);
    return out;
  }

  void broadcast(std::span<double> buf, std::size_t root) {
    if (root >= world_size()) throw ConfigError("broadcast root outside world");
    if (world_size() == 1) return;
    std::vector<double> tmp;
    exchange(CollectiveKind::kBroadcast, buf.data(), buf.size(), root, true, [&] {
      const auto& s = world_->slots_[root];
      tmp.assign(s.data, s.data + s.count);
    });
    std::copy(tmp.begin(), tmp.end(), buf.begin());
    count(buf.size(), &CommCounters::broadcast_bytes);
  }

  void barrier() {
    if (world_size() == 1) return;
    exchange(CollectiveKind::kBarrier, nullptr, 0, 0, true, [] {});
    ++counters_.collectives;
  }

 private:
  void reduce(std::span<double> buf, CollectiveKind kind) {
    if (world_size() == 1) return;
    std::vector<double> tmp;
    exchange(kind, buf.data(), buf.size(), 0, true, [&] {
      const auto& slots = world_->slots_;
      tmp.assign(slots[0].data, slots[0].data + buf.size());
      for (std::size_t r = 1; r < slots.size(); ++r) {
        const double* d = slots[r].data;
        if (kind == CollectiveKind::kAllReduceSum) {
          for (std::size_t i = 0; i < tmp.size(); ++i) tmp[i] += d[i];
        } else {
          for (std::size_t i = 0; i < tmp.size(); ++i) tmp[i] = std::max(tmp[i], d[i]);
        }
      }
    });
    std::copy(tmp.begin(), tmp.end(), buf.begin());
    count(buf.size(), &CommCounters::all_reduce_bytes);
  }

  void count(std::size_t elements, std::uint64_t CommCounters::*field) {
    const std::uint64_t b = static_cast<std::uint64_t>(elements) * sizeof(double);
    counters_.bytes += b;
    counters_.*field += b;
    ++counters_.collectives;
  }

  /// Publishes this rank's buffer, waits for all ranks, validates that the
  /// calls match, runs `read` over the published buffers, then waits again
  /// so no rank overwrites a buffer that another is still reading.
  template <typename Read>
  void exchange(CollectiveKind kind, const double* data, std::size_t n, std::size_t root, bool check_count,
                Read&& read) {
    const std::uint64_t seq = seq_++;
    world_->slots_[rank_] = {kind, seq, n, root, data};
    world_->rendezvous(rank_, seq, collective_name(kind));
    const auto& slots = world_->slots_;
    for (std::size_t r = 0; r < slots.size(); ++r) {
      const auto& a = slots[0];
      const auto& b = slots[r];
      if (a.kind != b.kind || a.seq != b.seq || a.root != b.root || (check_count && a.count != b.count)) {
        const std::string msg = "collective mismatch: rank " + std::to_string(r) + " issued " +
                                collective_name(b.kind) + "(" + std::to_string(b.count) + ") at sequence " +
                                std::to_string(b.seq) + " while rank 0 issued " + collective_name(a.kind) +
                                "(" + std::to_string(a.count) + ") at sequence " + std::to_string(a.seq);
        world_->abort(msg);
        throw ProtocolError(msg);
      }
    }
    read();
    world_->rendezvous(rank_, seq, collective_name(kind));
  }

  World* world_;
  std::size_t rank_;
  std::uint64_t seq_ = 0;
  CommCounters counters_;
};

/// Runs fn(comm) on world_size concurrent threads and returns the per-rank
/// results in rank order. If any rank throws, the world is aborted so that
/// the others fail fast, and the first failure is rethrown.
template <typename Fn>
auto run_ranks(std::size_t world_size, Fn&& fn,
               std::chrono::milliseconds timeout = std::chrono::seconds(20)) {
  using R = std::invoke_result_t<Fn&, Communicator&>;
  using Slot = std::conditional_t<std::is_void_v<R>, bool, std::optional<R>>;
  World world(world_size, timeout);
  std::vector<std::exception_ptr> errors(world_size);
  std::vector<Slot> results(world_size);
  std::mutex first_mu;
  std::size_t first = world_size;
  std::vector<std::thread> threads;
  for (std::size_t r = 0; r < world_size; ++r) {
    threads.emplace_back([&, r] {
      try {
        Communicator comm(world, r);
        if constexpr (std::is_void_v<R>) {
          fn(comm);
        } else {
          results[r].emplace(fn(comm));
        }
      } catch (...) {
        {
          std::lock_guard lock(first_mu);
          if (first == world_size) first = r;
        }
        errors[r] = std::current_exception();
        world.abort("rank " + std::to_string(r) + " failed");
      }
    });
  }
  for (auto& t : threads) t.join();
  if (first != world_size) std::rethrow_exception(errors[first]);
  if constexpr (!std::is_void_v<R>) {
    std::vector<R> out;
    out.reserve(world_size);
    for (auto& r : results) out.push_back(std::move(*r));
    return out;
  }
}

}  // namespace polymlm
