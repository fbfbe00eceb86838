// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "polymlm/comm.hpp"
#include "polymlm/error.hpp"
#include "polymlm/model.hpp"
#include "polymlm/tensor_parallel.hpp"

namespace polymlm {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-6;
  double weight_decay = 0.01;
  /// Global gradient-norm bound; 0 disables clipping.
  double clip_norm = 1.0;

  void validate() const {
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("adam betas must lie in [0, 1)");
    }
    if (!(eps > 0.0)) throw ConfigError("adam eps must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
    if (clip_norm < 0.0) throw ConfigError("clip norm must be non-negative");
  }
};

/// Moment estimates keyed by parameter name, plus the step counter.
struct AdamState {
  std::uint64_t step = 0;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

struct StepStats {
  double grad_norm = 0.0;  // before clipping
  double clip_scale = 1.0;
};

/// LayerNorm parameters and biases are exempt from weight decay.
inline bool decays(const std::string& name) {
  return !(ends_with(name, ".bias") || ends_with(name, ".gain"));
}

/// Global L2 norm of all gradients. Under tensor parallelism each sharded
/// element is counted on the rank that owns it and replicated tensors on
/// rank 0 only, then the squared sums are all-reduced.
inline double global_grad_norm(const ParamStore& p, Communicator* comm = nullptr) {
  const bool parallel = comm && comm->world_size() > 1;
  double sq = 0.0;
  for (const auto& [name, t] : p.all()) {
    if (parallel && comm->rank() != 0 && shard_spec(name).kind == ShardKind::kReplicated) continue;
    for (double g : t.grad()) sq += g * g;
  }
  if (parallel) {
    std::vector<double> buf{sq};
    comm->all_reduce_sum(buf);
    sq = buf[0];
  }
  return std::sqrt(sq);
}

/// Scales every gradient so the global norm is at most `max_norm`.
inline StepStats clip_gradients(ParamStore& p, double max_norm, Communicator* comm = nullptr) {
  StepStats s;
  s.grad_norm = global_grad_norm(p, comm);
  if (max_norm > 0.0 && s.grad_norm > max_norm) {
    s.clip_scale = max_norm / s.grad_norm;
    for (auto& [_, t] : p.all())
      for (auto& g : t.grad()) g *= s.clip_scale;
  }
  return s;
}

/// One AdamW update: clip, then bias-corrected moments with decoupled
/// weight decay, p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
inline StepStats adam_step(ParamStore& p, AdamState& state, const AdamConfig& cfg, double lr,
                           Communicator* comm = nullptr) {
  cfg.validate();
  for (const auto& [name, t] : p.all()) {
    for (double g : t.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + name);
    }
  }
  StepStats stats = clip_gradients(p, cfg.clip_norm, comm);
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [name, param] : p.all()) {
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) {
      m.assign(param.numel(), 0.0);
      v.assign(param.numel(), 0.0);
    }
    if (m.size() != param.numel()) throw DimensionError("optimizer state does not match parameter " + name);
    const auto g = param.grad();
    auto w = param.data();
    const double wd = decays(name) ? cfg.weight_decay : 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mh = m[i] / bc1;
      const double vh = v[i] / bc2;
      w[i] -= lr * (mh / (std::sqrt(vh) + cfg.eps) + wd * w[i]);
    }
  }
  return stats;
}

/// Linear warmup to `peak` over `warmup` updates, then linear decay to zero
/// at `total`. `update` counts from 1.
inline double linear_schedule(std::uint64_t update, double peak, std::uint64_t warmup, std::uint64_t total) {
  if (update == 0 || update > total) throw ConfigError("update outside the schedule");
  if (warmup > 0 && update <= warmup) return peak * static_cast<double>(update) / static_cast<double>(warmup);
  if (total == warmup) return peak;
  return peak * static_cast<double>(total - update) / static_cast<double>(total - warmup);
}

}  // namespace polymlm
