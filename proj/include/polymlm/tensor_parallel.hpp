// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "polymlm/autodiff.hpp"
#include "polymlm/comm.hpp"
#include "polymlm/model.hpp"

namespace polymlm {

struct Range {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool contains(std::size_t i) const { return i >= begin && i < end; }
  friend bool operator==(const Range&, const Range&) = default;
};

/// Contiguous balanced split of [0, n) into `parts` ranges in rank order.
inline Range partition_range(std::size_t n, std::size_t parts, std::size_t rank) {
  return {rank * n / parts, (rank + 1) * n / parts};
}

/// How each weight is split across ranks: attention heads and the
/// feed-forward inner width evenly, vocabulary rows as evenly as possible.
struct ShardPlan {
  std::size_t world_size = 1;
  std::size_t hidden = 0;
  std::size_t heads = 0;
  std::size_t ffn = 0;
  std::size_t vocab = 0;

  std::size_t heads_per_rank() const { return heads / world_size; }
  Range hidden_cols(std::size_t r) const { return partition_range(hidden, world_size, r); }
  Range ffn_cols(std::size_t r) const { return partition_range(ffn, world_size, r); }
  Range vocab_rows(std::size_t r) const { return partition_range(vocab, world_size, r); }

  void validate(const ModelConfig& c) const {
    if (world_size == 0) throw PlanError("world size must be positive");
    if (hidden != c.hidden || heads != c.heads || ffn != c.ffn() || vocab != c.vocab) {
      throw PlanError("shard plan was built for a different model configuration");
    }
    if (heads % world_size != 0) {
      throw PlanError("A=" + std::to_string(heads) + " heads not divisible by world size " +
                      std::to_string(world_size));
    }
    if (ffn % world_size != 0) {
      throw PlanError("feed-forward width " + std::to_string(ffn) + " not divisible by world size " +
                      std::to_string(world_size));
    }
    if (vocab < world_size) throw PlanError("vocabulary smaller than world size");
  }

  friend bool operator==(const ShardPlan&, const ShardPlan&) = default;
};

inline ShardPlan make_shard_plan(const ModelConfig& c, std::size_t world_size) {
  c.validate();
  ShardPlan p{world_size, c.hidden, c.heads, c.ffn(), c.vocab};
  p.validate(c);
  return p;
}

// ---------------------------------------------------------------------------
// Parameter sharding

enum class ShardKind { kReplicated, kRank0, kRows, kColumns };
enum class ShardDim { kNone, kHidden, kFfn, kVocab };

struct ShardSpec {
  ShardKind kind = ShardKind::kReplicated;
  ShardDim dim = ShardDim::kNone;
};

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

/// Layout of a named parameter. QKV and FFN-up are split by output
/// columns, attention-out and FFN-down by input rows with their bias held
/// by rank 0, the tied embedding and output bias by vocabulary rows. All
/// other tensors are replicated.
inline ShardSpec shard_spec(const std::string& name) {
  if (name == "embed.tokens" || name == "mlm.bias") return {ShardKind::kRows, ShardDim::kVocab};
  for (const char* w : {"attn.q.", "attn.k.", "attn.v."}) {
    if (name.find(w) != std::string::npos) {
      return ends_with(name, ".weight") ? ShardSpec{ShardKind::kColumns, ShardDim::kHidden}
                                        : ShardSpec{ShardKind::kRows, ShardDim::kHidden};
    }
  }
  if (name.find("attn.out.") != std::string::npos) {
    return ends_with(name, ".weight") ? ShardSpec{ShardKind::kRows, ShardDim::kHidden}
                                      : ShardSpec{ShardKind::kRank0, ShardDim::kNone};
  }
  if (name.find("ffn.up.") != std::string::npos) {
    return ends_with(name, ".weight") ? ShardSpec{ShardKind::kColumns, ShardDim::kFfn}
                                      : ShardSpec{ShardKind::kRows, ShardDim::kFfn};
  }
  if (name.find("ffn.down.") != std::string::npos) {
    return ends_with(name, ".weight") ? ShardSpec{ShardKind::kRows, ShardDim::kFfn}
                                      : ShardSpec{ShardKind::kRank0, ShardDim::kNone};
  }
  return {};
}

inline Range shard_range(const ShardPlan& plan, ShardDim dim, std::size_t rank) {
  switch (dim) {
    case ShardDim::kHidden: return plan.hidden_cols(rank);
    case ShardDim::kFfn: return plan.ffn_cols(rank);
    case ShardDim::kVocab: return plan.vocab_rows(rank);
    case ShardDim::kNone: break;
  }
  throw PlanError("unsharded dimension");
}

inline bool holds_tensor(const ShardSpec& spec, std::size_t rank) {
  return spec.kind != ShardKind::kRank0 || rank == 0;
}

/// Rank's slice of a full tensor. Rows of a 1-D tensor are its elements.
inline Tensor slice_for_rank(const Tensor& full, const ShardSpec& spec, const ShardPlan& plan, std::size_t rank) {
  if (spec.kind == ShardKind::kReplicated || spec.kind == ShardKind::kRank0) return Tensor(full.shape(), full.storage());
  const Range r = shard_range(plan, spec.dim, rank);
  const std::size_t rows = full.dim(0);
  const std::size_t cols = full.rank() == 1 ? 1 : full.dim(1);
  if (spec.kind == ShardKind::kRows) {
    if (r.end > rows) throw PlanError("row shard outside " + shape_str(full.shape()));
    Shape s = full.shape();
    s[0] = r.size();
    std::vector<double> d(full.storage().begin() + static_cast<std::ptrdiff_t>(r.begin * cols),
                          full.storage().begin() + static_cast<std::ptrdiff_t>(r.end * cols));
    return Tensor(s, std::move(d));
  }
  if (full.rank() != 2 || r.end > cols) throw PlanError("column shard outside " + shape_str(full.shape()));
  std::vector<double> d;
  d.reserve(rows * r.size());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = r.begin; j < r.end; ++j) d.push_back(full.storage()[i * cols + j]);
  return Tensor({rows, r.size()}, std::move(d));
}

/// Inverse of slice_for_rank over all ranks. Replicated tensors come from
/// rank 0.
inline Tensor merge_slices(const std::vector<const Tensor*>& parts, const ShardSpec& spec, const ShardPlan& plan) {
  if (parts.size() != plan.world_size) throw PlanError("expected one slice per rank");
  if (spec.kind == ShardKind::kReplicated || spec.kind == ShardKind::kRank0) {
    return Tensor(parts[0]->shape(), parts[0]->storage());
  }
  std::size_t total = 0;
  for (std::size_t r = 0; r < parts.size(); ++r) {
    const Range rg = shard_range(plan, spec.dim, r);
    const std::size_t got = spec.kind == ShardKind::kRows ? parts[r]->dim(0) : parts[r]->dim(1);
    if (got != rg.size()) {
      throw PlanError("rank " + std::to_string(r) + " slice " + shape_str(parts[r]->shape()) +
                      " does not match its planned extent " + std::to_string(rg.size()));
    }
    total += got;
  }
  if (spec.kind == ShardKind::kRows) {
    Shape s = parts[0]->shape();
    s[0] = total;
    std::vector<double> d;
    for (const Tensor* p : parts) d.insert(d.end(), p->storage().begin(), p->storage().end());
    return Tensor(s, std::move(d));
  }
  const std::size_t rows = parts[0]->dim(0);
  std::vector<double> d;
  d.reserve(rows * total);
  for (std::size_t i = 0; i < rows; ++i) {
    for (const Tensor* p : parts) {
      const std::size_t w = p->dim(1);
      d.insert(d.end(), p->storage().begin() + static_cast<std::ptrdiff_t>(i * w),
               p->storage().begin() + static_cast<std::ptrdiff_t>((i + 1) * w));
    }
  }
  return Tensor({rows, total}, std::move(d));
}

inline ParamStore shard_params(const ParamStore& full, const ShardPlan& plan, std::size_t rank) {
  ParamStore out;
  for (const auto& [name, t] : full.all()) {
    const ShardSpec spec = shard_spec(name);
    if (holds_tensor(spec, rank)) out.add(name, slice_for_rank(t, spec, plan, rank));
  }
  return out;
}

/// Reassembles full tensors from per-rank stores. With `grads` set, the
/// result holds the merged gradients as values.
inline ParamStore merge_params(const std::vector<const ParamStore*>& shards, const ShardPlan& plan,
                               bool grads = false) {
  if (shards.size() != plan.world_size) throw PlanError("expected one shard per rank");
  ParamStore out;
  for (const auto& [name, _] : shards[0]->all()) {
    const ShardSpec spec = shard_spec(name);
    std::vector<Tensor> tmp;
    std::vector<const Tensor*> parts;
    tmp.reserve(shards.size());
    for (std::size_t r = 0; r < shards.size(); ++r) {
      const std::size_t src = holds_tensor(spec, r) ? r : 0;
      const Tensor& t = shards[src]->at(name);
      if (grads) {
        const auto g = t.grad();
        tmp.emplace_back(t.shape(), std::vector<double>(g.begin(), g.end()));
        parts.push_back(&tmp.back());
      } else {
        parts.push_back(&t);
      }
    }
    out.add(name, merge_slices(parts, spec, plan));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parallel operators

/// Identity forward; all-reduces the gradient on the way back. Placed where
/// a replicated activation enters a column-parallel layer.
inline Var copy_to_parallel(const Var& x, Communicator& comm) {
  if (comm.world_size() == 1) return x;
  return x.tape->record(Tensor(x.shape(), x.value().storage()), {x},
                        [x, &comm](Tape& t, std::span<const double> g) {
                          std::vector<double> buf(g.begin(), g.end());
                          comm.all_reduce_sum(buf);
                          auto gx = t.grad(x);
                          for (std::size_t i = 0; i < buf.size(); ++i) gx[i] += buf[i];
                        },
                        "copy_to_parallel");
}

/// All-reduces partial sums forward; identity on the way back.
inline Var reduce_from_parallel(const Var& x, Communicator& comm) {
  if (comm.world_size() == 1) return x;
  std::vector<double> buf = x.value().storage();
  comm.all_reduce_sum(buf);
  return x.tape->record(Tensor(x.shape(), std::move(buf)), {x},
                        [x](Tape& t, std::span<const double> g) {
                          auto gx = t.grad(x);
                          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                        },
                        "reduce_from_parallel");
}

/// x [N x K] replicated, w [K x out_shard], b [out_shard]; returns this
/// rank's output columns.
inline Var column_parallel_linear(const Var& x, const Var& w, const Var& b, Communicator& comm,
                                  std::size_t total_out) {
  const Range r = partition_range(total_out, comm.world_size(), comm.rank());
  if (w.value().rank() != 2 || w.dim(1) != r.size() || b.value().numel() != r.size()) {
    throw PlanError("column_parallel_linear: rank " + std::to_string(comm.rank()) + " holds " +
                    shape_str(w.shape()) + " but its planned output columns are [" + std::to_string(r.begin) +
                    "," + std::to_string(r.end) + ")");
  }
  return add_bias(matmul(copy_to_parallel(x, comm), w), b);
}

/// x_local [N x in_shard], w [in_shard x out]; the bias is added once, to
/// rank 0's partial product, before the all-reduce.
inline Var row_parallel_linear(const Var& x_local, const Var& w, const Var* bias, Communicator& comm,
                               std::size_t total_in) {
  const Range r = partition_range(total_in, comm.world_size(), comm.rank());
  if (w.value().rank() != 2 || w.dim(0) != r.size() || x_local.value().rank() != 2 || x_local.dim(1) != r.size()) {
    throw PlanError("row_parallel_linear: rank " + std::to_string(comm.rank()) + " holds " +
                    shape_str(w.shape()) + " with input " + shape_str(x_local.shape()) +
                    " but its planned input rows are [" + std::to_string(r.begin) + "," + std::to_string(r.end) + ")");
  }
  if ((comm.rank() == 0) != (bias != nullptr)) {
    throw PlanError("row_parallel_linear: the bias must be supplied by rank 0 only");
  }
  Var partial = matmul(x_local, w);
  if (bias) partial = add_bias(partial, *bias);
  return reduce_from_parallel(partial, comm);
}

/// Rows of this rank's vocabulary slice; ids owned by other ranks give zero
/// rows, so the all-reduced sum equals the full lookup exactly.
inline Var vocab_parallel_embedding(const Var& table, const std::vector<std::int64_t>& ids, Range rows,
                                    Communicator& comm) {
  const std::size_t h = table.dim(1);
  if (table.dim(0) != rows.size()) throw PlanError("vocab_parallel_embedding: table does not match its row range");
  Tensor out({ids.size(), h});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto id = static_cast<std::size_t>(ids[i]);
    if (!rows.contains(id)) continue;
    std::copy_n(table.value().storage().data() + (id - rows.begin) * h, h, out.storage().data() + i * h);
  }
  Var local = table.tape->record(std::move(out), {table},
                                 [table, ids, rows, h](Tape& t, std::span<const double> g) {
                                   auto gt = t.grad(table);
                                   for (std::size_t i = 0; i < ids.size(); ++i) {
                                     const auto id = static_cast<std::size_t>(ids[i]);
                                     if (!rows.contains(id)) continue;
                                     for (std::size_t j = 0; j < h; ++j) gt[(id - rows.begin) * h + j] += g[i * h + j];
                                   }
                                 },
                                 "vocab_parallel_embedding");
  return reduce_from_parallel(local, comm);
}

/// Mean cross-entropy over logits split by vocabulary columns. Exchanges
/// the row max, the row sum of exponentials and the target logit, never
/// the logits themselves.
inline Var vocab_parallel_cross_entropy(const Var& local_logits, const std::vector<std::int64_t>& targets,
                                        Range cols, Communicator& comm, std::int64_t ignore_index = kIgnoreIndex) {
  detail::require_rank(local_logits, 2, "vocab_parallel_cross_entropy");
  const std::size_t n = local_logits.dim(0), v = local_logits.dim(1);
  if (v != cols.size()) throw PlanError("vocab_parallel_cross_entropy: logits do not match the vocabulary slice");
  if (targets.size() != n) throw DimensionError("vocab_parallel_cross_entropy: target count mismatch");
  const auto& lv = local_logits.value().storage();

  std::vector<double> mx(n, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < v; ++j) mx[i] = std::max(mx[i], lv[i * v + j]);
  comm.all_reduce_max(mx);

  auto probs = std::make_shared<std::vector<double>>(n * v);
  std::vector<double> sums(n, 0.0), tgt(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < v; ++j) {
      const double e = std::exp(lv[i * v + j] - mx[i]);
      (*probs)[i * v + j] = e;
      sums[i] += e;
    }
    const auto t = targets[i];
    if (t != ignore_index && t >= 0 && cols.contains(static_cast<std::size_t>(t))) {
      tgt[i] = lv[i * v + (static_cast<std::size_t>(t) - cols.begin)];
    }
  }
  comm.all_reduce_sum(sums);
  comm.all_reduce_sum(tgt);

  std::size_t active = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < v; ++j) (*probs)[i * v + j] /= sums[i];
    if (targets[i] == ignore_index) continue;
    if (targets[i] < 0) throw IndexError("vocab_parallel_cross_entropy: negative target");
    total += row_nll(sums[i], mx[i], tgt[i]);
    ++active;
  }
  if (active == 0) throw NumericError("cross_entropy: every position is ignored; loss undefined");
  const double inv = 1.0 / static_cast<double>(active);
  return local_logits.tape->record(
      Tensor::scalar(total * inv), {local_logits},
      [local_logits, targets, ignore_index, probs, n, v, inv, cols](Tape& t, std::span<const double> g) {
        auto gl = t.grad(local_logits);
        const double s = g[0] * inv;
        for (std::size_t i = 0; i < n; ++i) {
          if (targets[i] == ignore_index) continue;
          for (std::size_t j = 0; j < v; ++j) gl[i * v + j] += s * (*probs)[i * v + j];
          const auto tg = static_cast<std::size_t>(targets[i]);
          if (cols.contains(tg)) gl[i * v + (tg - cols.begin)] -= s;
        }
      },
      "vocab_parallel_cross_entropy");
}

// ---------------------------------------------------------------------------
// Parallel encoder

/// Same computation as encode(), with each rank holding its shard. The
/// returned hidden states are replicated on every rank.
inline EncoderOutput parallel_encode(Tape& t, const ModelConfig& c, const ShardPlan& plan, Communicator& comm,
                                     ParamStore& p, const std::vector<std::int64_t>& ids, std::size_t batch,
                                     std::size_t seq, const ForwardOptions& opt = {}) {
  c.validate();
  plan.validate(c);
  if (plan.world_size != comm.world_size()) throw PlanError("shard plan world size differs from communicator");
  check_input(c, ids, batch, seq);
  const std::size_t rank = comm.rank();
  const double rate = opt.train ? c.dropout : 0.0;
  EncoderOutput out;
  out.batch = batch;
  out.seq = seq;
  Var x = add(vocab_parallel_embedding(t.param(p.at("embed.tokens")), ids, plan.vocab_rows(rank), comm),
              embedding(t.param(p.at("embed.positions")), position_ids(batch, seq)));
  out.embedded = x;
  x = dropout(x, rate, dropout_seed(opt.dropout_seed, 0, kDropEmbed));
  auto col = [&](const std::string& name, const Var& in, std::size_t total) {
    return column_parallel_linear(in, t.param(p.at(name + ".weight")), t.param(p.at(name + ".bias")), comm, total);
  };
  auto row = [&](const std::string& name, const Var& in, std::size_t total) {
    if (rank == 0) {
      Var b = t.param(p.at(name + ".bias"));
      return row_parallel_linear(in, t.param(p.at(name + ".weight")), &b, comm, total);
    }
    return row_parallel_linear(in, t.param(p.at(name + ".weight")), nullptr, comm, total);
  };
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string pre = layer_prefix(l);
    AttentionOptions ao{batch, seq, plan.heads_per_rank(), opt.key_valid, rate,
                        attention_dropout_seed(opt.dropout_seed, rank, l), opt.probe};
    Var h = c.pre_ln ? norm(t, p, pre + "ln1", x) : x;
    // One entry point for q, k and v so the backward all-reduce happens once.
    Var hp = copy_to_parallel(h, comm);
    auto qkv = [&](const char* w) {
      return add_bias(matmul(hp, t.param(p.at(pre + "attn." + w + ".weight"))),
                      t.param(p.at(pre + "attn." + w + ".bias")));
    };
    if (p.at(pre + "attn.q.weight").dim(1) != plan.hidden_cols(rank).size()) {
      throw PlanError("rank " + std::to_string(rank) + " attention shard does not match the plan");
    }
    Var a = multi_head_attention(qkv("q"), qkv("k"), qkv("v"), ao);
    Var o = dropout(row(pre + "attn.out", a, c.hidden), rate, dropout_seed(opt.dropout_seed, l, kDropAttnOut));
    x = add(x, o);
    if (!c.pre_ln) x = norm(t, p, pre + "ln1", x);
    h = c.pre_ln ? norm(t, p, pre + "ln2", x) : x;
    Var f = row(pre + "ffn.down", gelu(col(pre + "ffn.up", h, c.ffn())), c.ffn());
    f = dropout(f, rate, dropout_seed(opt.dropout_seed, l, kDropFfnOut));
    x = add(x, f);
    if (!c.pre_ln) x = norm(t, p, pre + "ln2", x);
  }
  out.stream = x;
  out.hidden = c.pre_ln ? norm(t, p, "final_ln", x) : x;
  return out;
}

struct ParallelMlmOutput {
  Var local_logits;  // [P x V_rank], predicted positions only
  Var loss;
};

inline ParallelMlmOutput parallel_mlm_loss(Tape& t, const ModelConfig& c, const ShardPlan& plan,
                                           Communicator& comm, ParamStore& p, const MlmBatch& b,
                                           const ForwardOptions& opt = {}) {
  const auto rows = target_rows(b.target_ids);
  if (rows.empty()) throw NumericError("mlm_loss: batch has no prediction targets");
  EncoderOutput enc = parallel_encode(t, c, plan, comm, p, b.input_ids, b.batch, b.seq, opt);
  std::vector<std::int64_t> tgt;
  tgt.reserve(rows.size());
  for (auto r : rows) tgt.push_back(b.target_ids[r]);
  Var hs = copy_to_parallel(select_rows(enc.hidden, rows), comm);
  Var logits = mlm_logits(hs, t.param(p.at("embed.tokens")), t.param(p.at("mlm.bias")));
  Var loss = vocab_parallel_cross_entropy(logits, tgt, plan.vocab_rows(comm.rank()), comm);
  return {logits, loss};
}

/// Result of one sharded forward/backward pass over a full parameter set.
struct ParallelStepResult {
  std::vector<double> rank_losses;
  ParamStore grads;  // merged to full shapes, values hold gradients
  std::vector<CommCounters> counters;
};

/// Shards `full`, runs forward and backward on world_size ranks and merges
/// the gradients back to full shapes.
inline ParallelStepResult run_parallel_step(const ModelConfig& c, const ParamStore& full, const MlmBatch& b,
                                            std::size_t world_size, const ForwardOptions& opt = {}) {
  const ShardPlan plan = make_shard_plan(c, world_size);
  std::vector<ParamStore> shards;
  for (std::size_t r = 0; r < world_size; ++r) shards.push_back(shard_params(full, plan, r));
  struct RankOut {
    double loss;
    CommCounters counters;
  };
  auto outs = run_ranks(world_size, [&](Communicator& comm) {
    ParamStore& p = shards[comm.rank()];
    p.zero_grad();
    Tape t;
    auto out = parallel_mlm_loss(t, c, plan, comm, p, b, opt);
    t.backward(out.loss);
    return RankOut{out.loss.value().item(), comm.counters()};
  });
  ParallelStepResult res;
  for (const auto& o : outs) {
    res.rank_losses.push_back(o.loss);
    res.counters.push_back(o.counters);
  }
  std::vector<const ParamStore*> ptrs;
  for (const auto& s : shards) ptrs.push_back(&s);
  res.grads = merge_params(ptrs, plan, true);
  return res;
}

struct GradientDiff {
  double max_rel = 0.0;
  std::string worst;
};

/// Element-wise relative difference between merged parallel gradients (held
/// as values) and serial gradients (held in grad slots). Denominators are
/// floored at `floor_fraction` times the largest serial gradient so that
/// entries which are analytically zero, and hence pure rounding noise on
/// both sides, do not dominate.
inline GradientDiff compare_gradients(const ParamStore& merged, const ParamStore& serial,
                                      double floor_fraction = 1e-6) {
  double gmax = 0.0;
  for (const auto& [_, t] : serial.all())
    for (double g : t.grad()) gmax = std::max(gmax, std::fabs(g));
  const double floor = std::max(floor_fraction * gmax, std::numeric_limits<double>::min());
  GradientDiff d;
  for (const auto& [name, got] : merged.all()) {
    const auto want = serial.at(name).grad();
    if (want.size() != got.numel()) throw DimensionError("compare_gradients: shape mismatch for " + name);
    for (std::size_t i = 0; i < want.size(); ++i) {
      const double rel = std::fabs(got[i] - want[i]) / std::max({std::fabs(got[i]), std::fabs(want[i]), floor});
      if (rel > d.max_rel) {
        d.max_rel = rel;
        d.worst = name;
      }
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Communication accounting

/// Bytes moved by collectives in one forward/backward pass, per rank,
/// counted as in CommCounters.
struct CommVolume {
  std::uint64_t layer_bytes = 0;      // attention-out and FFN-down forward, QKV and FFN-up backward
  std::uint64_t embedding_bytes = 0;  // vocab-parallel embedding forward
  std::uint64_t head_bytes = 0;       // MLM head input gradient
  std::uint64_t loss_bytes = 0;       // row max, exp-sum and target logit
  std::uint64_t optimizer_bytes = 0;  // global gradient norm
  std::uint64_t collectives = 0;
  std::uint64_t total_bytes() const {
    return layer_bytes + embedding_bytes + head_bytes + loss_bytes + optimizer_bytes;
  }
};

/// `predicted` is the number of positions with an MLM target (all B*T'
/// when zero is passed). `clip_norm` adds the gradient-norm reduction.
inline CommVolume comm_volume_report(const ModelConfig& c, const ShardPlan& plan, std::size_t batch,
                                     std::size_t seq, std::size_t predicted = 0, bool clip_norm = false) {
  plan.validate(c);
  CommVolume v;
  if (plan.world_size == 1) return v;
  const std::uint64_t w = sizeof(double);
  const std::uint64_t N = static_cast<std::uint64_t>(batch) * seq;
  const std::uint64_t P = predicted == 0 ? N : predicted;
  const std::uint64_t H = c.hidden;
  v.layer_bytes = c.layers * 4 * N * H * w;
  v.embedding_bytes = N * H * w;
  v.head_bytes = P * H * w;
  v.loss_bytes = 3 * P * w;
  v.optimizer_bytes = clip_norm ? w : 0;
  v.collectives = 4 * c.layers + 1 + 1 + 3 + (clip_norm ? 1 : 0);
  return v;
}

}  // namespace polymlm
