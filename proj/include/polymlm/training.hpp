// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <limits>
#include <memory>
#include <mutex>
#include <numeric>
#include <string>
#include <vector>

#include "polymlm/budget.hpp"
#include "polymlm/checkpoint.hpp"
#include "polymlm/comm.hpp"
#include "polymlm/model.hpp"
#include "polymlm/optim.hpp"
#include "polymlm/sampling.hpp"
#include "polymlm/tensor_parallel.hpp"
#include "polymlm/tokenizer.hpp"

namespace polymlm {

struct TrainConfig {
  std::size_t batch_size = 16;
  std::uint64_t total_updates = 500;
  std::size_t seq_len = 64;
  double peak_lr = 2e-3;
  std::uint64_t warmup_updates = 50;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-6;
  double grad_clip_norm = 1.0;
  std::uint64_t seed = 1;
  std::uint64_t checkpoint_every = 0;  // 0: only at the end
  std::size_t world_size = 1;
  double alpha = 0.3;
  MaskingConfig masking;

  AdamConfig adam() const { return {beta1, beta2, adam_eps, weight_decay, grad_clip_norm}; }

  void validate(const ModelConfig& c) const {
    if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
    if (total_updates == 0) throw ConfigError("total_updates must be at least 1");
    if (warmup_updates > total_updates) throw ConfigError("warmup_updates exceeds total_updates");
    if (seq_len < 2 || seq_len > c.max_seq) {
      throw ConfigError("seq_len must lie in [2, T=" + std::to_string(c.max_seq) + "]");
    }
    if (!(peak_lr > 0.0)) throw ConfigError("peak_lr must be positive");
    adam().validate();
    if (world_size == 0) throw ConfigError("world_size must be positive");
  }
};

struct LossRecord {
  std::uint64_t update = 0;
  double loss = 0.0;
  std::uint64_t tokens_seen = 0;
  double lr = 0.0;
  friend bool operator==(const LossRecord&, const LossRecord&) = default;
};

inline std::string format_loss_line(const LossRecord& r) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%llu\t%.17g\t%llu\t%.17g", static_cast<unsigned long long>(r.update), r.loss,
                static_cast<unsigned long long>(r.tokens_seen), r.lr);
  return buf;
}

inline LossRecord parse_loss_line(const std::string& line) {
  LossRecord r;
  unsigned long long u = 0, t = 0;
  if (std::sscanf(line.c_str(), "%llu\t%lf\t%llu\t%lf", &u, &r.loss, &t, &r.lr) != 4) {
    throw DataError("malformed loss log line: " + line);
  }
  r.update = u;
  r.tokens_seen = t;
  return r;
}

/// Masking and dropout randomness for an update depend only on (seed,
/// update), so a resumed run sees exactly the same batches.
inline std::uint64_t update_seed(std::uint64_t seed, std::uint64_t update, std::uint64_t stream) {
  return hash_seed({seed, update, stream});
}

inline MlmBatch next_pretrain_batch(MultilingualStream& stream, const UnigramVocab& vocab, const TrainConfig& tc,
                                    std::uint64_t update) {
  std::vector<std::vector<std::int32_t>> rows;
  std::vector<std::string> tags;
  rows.reserve(tc.batch_size);
  for (std::size_t i = 0; i < tc.batch_size; ++i) {
    auto s = stream.next();
    rows.push_back(std::move(s.ids));
    tags.push_back(std::move(s.code));
  }
  Rng rng(update_seed(tc.seed, update, 1));
  return apply_mlm_mask(rows, vocab, tc.masking, rng, std::move(tags));
}

struct PretrainOptions {
  /// Directory for checkpoints and loss.log; empty disables file output.
  std::string out_dir;
  /// Checkpoint to resume from. A shard file named *.rank0.bin resumes
  /// every rank from its matching file; a full checkpoint is re-sharded.
  std::string resume_from;
  /// Stop after this update (0: run to total_updates).
  std::uint64_t stop_after = 0;
  /// Initial parameters; defaults to init_params(model, seed).
  const ParamStore* init = nullptr;
  std::function<void(const LossRecord&)> on_update;
};

struct PretrainResult {
  std::vector<LossRecord> log;
  Checkpoint final;  // merged to full shapes
  std::vector<std::string> checkpoints;
};

inline std::string checkpoint_path(const std::string& dir, std::uint64_t update, std::size_t world_size,
                                   std::size_t rank) {
  std::string name = "checkpoint_" + std::to_string(update);
  if (world_size > 1) name += ".rank" + std::to_string(rank);
  return (std::filesystem::path(dir) / (name + ".bin")).string();
}

inline std::string rank_file(const std::string& rank0_path, std::size_t rank) {
  const std::string tag = ".rank0.bin";
  if (!ends_with(rank0_path, tag)) throw ConfigError("shard checkpoint name must end in " + tag);
  return rank0_path.substr(0, rank0_path.size() - tag.size()) + ".rank" + std::to_string(rank) + ".bin";
}

/// Masked-LM pretraining. With world_size > 1 every rank runs this loop on
/// its shard, exchanging activations through collectives; the loss log is
/// written by rank 0 and each rank writes its own checkpoint file.
inline PretrainResult pretrain(const ModelConfig& mc, const TrainConfig& tc, const CorpusCatalog& catalog,
                               std::shared_ptr<const UnigramVocab> vocab, const PretrainOptions& opt = {}) {
  mc.validate();
  tc.validate(mc);
  if (vocab->size() != mc.vocab) {
    throw ConfigError("vocabulary has " + std::to_string(vocab->size()) + " pieces but the model expects V=" +
                      std::to_string(mc.vocab));
  }
  const std::size_t ws = tc.world_size;
  const ShardPlan plan = make_shard_plan(mc, ws);
  if (!opt.out_dir.empty()) std::filesystem::create_directories(opt.out_dir);

  // Starting state, full shapes, before sharding.
  Checkpoint start;
  std::vector<Checkpoint> start_shards;
  std::uint64_t first_update = 1;
  if (!opt.resume_from.empty()) {
    Checkpoint ck = load_checkpoint(opt.resume_from);
    if (!(ck.config == mc)) throw ConfigError("resume checkpoint was written for a different model configuration");
    if (ck.shard) {
      if (ck.shard->plan.world_size != ws) throw ConfigError("resume shards were written for another world size");
      start_shards.resize(ws);
      for (std::size_t r = 0; r < ws; ++r) start_shards[r] = r == 0 ? ck : load_checkpoint(rank_file(opt.resume_from, r));
      start = merge_checkpoints(start_shards);
    } else {
      start = std::move(ck);
    }
    first_update = start.meta_u64("update") + 1;
  } else {
    start = make_checkpoint(mc, opt.init ? *opt.init : init_params(mc, tc.seed));
  }
  if (start_shards.empty()) {
    start_shards = ws == 1 ? std::vector<Checkpoint>{start} : shard_checkpoint(start, ws);
  }

  const std::uint64_t last = opt.stop_after ? std::min(opt.stop_after, tc.total_updates) : tc.total_updates;
  std::vector<LossRecord> log;
  std::vector<std::string> written;
  std::mutex log_mu;
  std::vector<Checkpoint> final_shards(ws);

  run_ranks(ws, [&](Communicator& comm) {
    const std::size_t rank = comm.rank();
    ParamStore p = checkpoint_params(start_shards[rank]);
    AdamState adam = checkpoint_adam(start_shards[rank]);
    MultilingualStream stream(catalog, {tc.alpha, tc.seed}, vocab, tc.seq_len);
    for (std::uint64_t u = 1; u < first_update; ++u)
      for (std::size_t i = 0; i < tc.batch_size; ++i) (void)stream.next();
    std::ofstream loss_log;
    if (rank == 0 && !opt.out_dir.empty()) {
      loss_log.open(std::filesystem::path(opt.out_dir) / "loss.log", first_update == 1 ? std::ios::trunc : std::ios::app);
      if (!loss_log) throw IoError("cannot write loss log in " + opt.out_dir);
    }
    std::string last_good = opt.resume_from.empty() ? "none" : opt.resume_from;
    auto save = [&](std::uint64_t u) {
      Checkpoint ck = make_checkpoint(mc, p, &adam);
      if (ws > 1) ck.shard = ShardHeader{plan, rank};
      ck.meta["update"] = std::to_string(u);
      ck.meta["tokens_seen"] = std::to_string(tokens_seen(tc.batch_size, tc.seq_len, u));
      ck.meta["seed"] = std::to_string(tc.seed);
      if (!opt.out_dir.empty()) {
        const std::string path = checkpoint_path(opt.out_dir, u, ws, rank);
        save_checkpoint(path, ck);
        last_good = checkpoint_path(opt.out_dir, u, ws, 0);
        if (rank == 0) {
          std::lock_guard lock(log_mu);
          written.push_back(path);
        }
      }
      return ck;
    };
    for (std::uint64_t u = first_update; u <= last; ++u) {
      const MlmBatch batch = next_pretrain_batch(stream, *vocab, tc, u);
      if (batch.no_targets) throw DataError("update " + std::to_string(u) + " drew a batch with no maskable tokens");
      const double lr = linear_schedule(u, tc.peak_lr, tc.warmup_updates, tc.total_updates);
      ForwardOptions fo{mc.dropout > 0.0, update_seed(tc.seed, u, 2), nullptr, nullptr};
      double loss = 0.0;
      try {
        p.zero_grad();
        Tape tape;
        Var l = ws == 1 ? mlm_loss(tape, mc, p, batch, fo) : parallel_mlm_loss(tape, mc, plan, comm, p, batch, fo).loss;
        loss = l.value().item();
        tape.backward(l);
        adam_step(p, adam, tc.adam(), lr, &comm);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " at update " + std::to_string(u) +
                           "; last good checkpoint: " + last_good);
      }
      const LossRecord rec{u, loss, tokens_seen(tc.batch_size, tc.seq_len, u), lr};
      if (rank == 0) {
        if (loss_log.is_open()) loss_log << format_loss_line(rec) << '\n' << std::flush;
        std::lock_guard lock(log_mu);
        log.push_back(rec);
        if (opt.on_update) opt.on_update(rec);
      }
      const bool scheduled = tc.checkpoint_every > 0 && u % tc.checkpoint_every == 0;
      if (scheduled && u != last) save(u);
    }
    final_shards[rank] = save(last);
  });

  PretrainResult res;
  res.log = std::move(log);
  res.checkpoints = std::move(written);
  res.final = ws == 1 ? std::move(final_shards[0]) : merge_checkpoints(final_shards);
  return res;
}

// ---------------------------------------------------------------------------
// Fine-tuning

/// One task example. `ids` include the sentence boundary tokens; span
/// targets index into `ids`.
struct TaskExample {
  std::vector<std::int64_t> ids;
  std::int64_t label = -1;
  std::int64_t start = -1;
  std::int64_t end = -1;
  /// First position a predicted span may start at (after the question).
  std::int64_t context_begin = 0;
};

struct TaskBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int64_t> ids;
  std::vector<std::uint8_t> valid;
};

/// Pads to the longest example (at most max_seq tokens, longer examples
/// are truncated).
inline TaskBatch make_task_batch(const std::vector<TaskExample>& data, const std::vector<std::size_t>& idx,
                                 std::size_t max_seq, std::int64_t pad_id = SpecialIds{}.pad) {
  TaskBatch b;
  b.batch = idx.size();
  for (auto i : idx) b.seq = std::max(b.seq, std::min(data.at(i).ids.size(), max_seq));
  if (b.seq == 0) throw DataError("task batch contains only empty examples");
  b.ids.assign(b.batch * b.seq, pad_id);
  b.valid.assign(b.batch * b.seq, 0);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const auto& ids = data[idx[r]].ids;
    const std::size_t n = std::min(ids.size(), b.seq);
    for (std::size_t j = 0; j < n; ++j) {
      b.ids[r * b.seq + j] = ids[j];
      b.valid[r * b.seq + j] = 1;
    }
  }
  return b;
}

inline constexpr double kMaskedLogit = -1e9;

/// Training loss of a task head on one batch.
inline Var task_loss(Tape& t, const ModelConfig& mc, ParamStore& p, const TaskHead& head,
                     const std::vector<TaskExample>& data, const std::vector<std::size_t>& idx,
                     const ForwardOptions& base) {
  const TaskBatch b = make_task_batch(data, idx, mc.max_seq);
  ForwardOptions fo = base;
  fo.key_valid = &b.valid;
  EncoderOutput enc = encode(t, mc, p, b.ids, b.batch, b.seq, fo);
  Var out = task_forward(t, p, head, enc);
  if (head.kind == HeadKind::kClassification) {
    std::vector<std::int64_t> labels;
    for (auto i : idx) {
      const auto l = data[i].label;
      if (l < 0 || static_cast<std::size_t>(l) >= head.num_labels) throw DataError("label outside the head's range");
      labels.push_back(l);
    }
    return cross_entropy(out, labels);
  }
  if (head.kind == HeadKind::kSpan) {
    std::vector<std::uint8_t> pad(b.valid.size());
    for (std::size_t i = 0; i < pad.size(); ++i) pad[i] = b.valid[i] ? 0 : 1;
    auto [s, e] = span_logits(out, b.batch, b.seq);
    s = masked_fill(s, pad, kMaskedLogit);
    e = masked_fill(e, pad, kMaskedLogit);
    std::vector<std::int64_t> st, en;
    for (auto i : idx) {
      const auto& ex = data[i];
      const bool inside = ex.start >= 0 && ex.end >= ex.start && static_cast<std::size_t>(ex.end) < b.seq;
      st.push_back(inside ? ex.start : kIgnoreIndex);
      en.push_back(inside ? ex.end : kIgnoreIndex);
    }
    return scale(add(cross_entropy(s, st), cross_entropy(e, en)), 0.5);
  }
  throw ConfigError("fine-tuning needs a classification or span head");
}

inline std::vector<std::int64_t> predict_labels(const ModelConfig& mc, ParamStore& p, const TaskHead& head,
                                                const std::vector<TaskExample>& data, std::size_t batch_size = 32) {
  std::vector<std::int64_t> out;
  for (std::size_t b0 = 0; b0 < data.size(); b0 += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = b0; i < std::min(data.size(), b0 + batch_size); ++i) idx.push_back(i);
    const TaskBatch b = make_task_batch(data, idx, mc.max_seq);
    Tape t;
    ForwardOptions fo;
    fo.key_valid = &b.valid;
    const Tensor logits = task_forward(t, p, head, encode(t, mc, p, b.ids, b.batch, b.seq, fo)).value();
    for (std::size_t r = 0; r < b.batch; ++r) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < head.num_labels; ++j)
        if (logits.at(r, j) > logits.at(r, best)) best = j;
      out.push_back(static_cast<std::int64_t>(best));
    }
  }
  return out;
}

/// Highest-scoring span with start <= end < start + max_len over valid
/// positions; ties resolve to the earliest start, then the earliest end.
inline std::vector<std::pair<std::int64_t, std::int64_t>> predict_spans(const ModelConfig& mc, ParamStore& p,
                                                                        const std::vector<TaskExample>& data,
                                                                        std::size_t max_len = 30,
                                                                        std::size_t batch_size = 32) {
  std::vector<std::pair<std::int64_t, std::int64_t>> out;
  const TaskHead head{HeadKind::kSpan, 0};
  for (std::size_t b0 = 0; b0 < data.size(); b0 += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = b0; i < std::min(data.size(), b0 + batch_size); ++i) idx.push_back(i);
    const TaskBatch b = make_task_batch(data, idx, mc.max_seq);
    Tape t;
    ForwardOptions fo;
    fo.key_valid = &b.valid;
    const Tensor so = task_forward(t, p, head, encode(t, mc, p, b.ids, b.batch, b.seq, fo)).value();
    for (std::size_t r = 0; r < b.batch; ++r) {
      double best = -std::numeric_limits<double>::infinity();
      std::pair<std::int64_t, std::int64_t> arg{-1, -1};
      const auto lo = static_cast<std::size_t>(std::max<std::int64_t>(0, data[idx[r]].context_begin));
      for (std::size_t s = lo; s < b.seq; ++s) {
        if (!b.valid[r * b.seq + s]) continue;
        for (std::size_t e = s; e < std::min(b.seq, s + max_len); ++e) {
          if (!b.valid[r * b.seq + e]) continue;
          const double v = so.at(r * b.seq + s, 0) + so.at(r * b.seq + e, 1);
          if (v > best) {
            best = v;
            arg = {static_cast<std::int64_t>(s), static_cast<std::int64_t>(e)};
          }
        }
      }
      out.push_back(arg);
    }
  }
  return out;
}

struct FinetuneConfig {
  std::size_t batch_size = 32;
  std::size_t epochs = 10;
  double lr = 1e-3;
  double warmup_fraction = 0.1;
  double weight_decay = 0.01;
  double grad_clip_norm = 1.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (epochs == 0) throw ConfigError("epochs must be at least 1");
    if (batch_size == 0) throw ConfigError("fine-tune batch_size must be at least 1");
    if (!(lr > 0.0)) throw ConfigError("fine-tune lr must be positive");
    if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) throw ConfigError("warmup_fraction must lie in [0, 1]");
  }
};

/// Validation metric for one language after an epoch (higher is better).
using LanguageMetric =
    std::function<double(const std::string& lang, const std::vector<TaskExample>& valid, ParamStore& params,
                         std::size_t epoch)>;

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  std::map<std::string, double> per_language;
  double average = 0.0;
  double train_loss = 0.0;
};

struct FinetuneResult {
  std::vector<EpochMetrics> epochs;
  std::size_t best_epoch = 0;
  double best_average = 0.0;
  ParamStore best_params;
};

/// Unweighted mean over languages.
inline double language_average(const std::map<std::string, double>& per_language) {
  if (per_language.empty()) throw ConfigError("no languages to average");
  double s = 0.0;
  for (const auto& [_, v] : per_language) s += v;
  return s / static_cast<double>(per_language.size());
}

/// Index of the first maximum; the earliest epoch wins ties.
inline std::size_t select_best_epoch(const std::vector<EpochMetrics>& epochs) {
  if (epochs.empty()) throw ConfigError("no epochs to select from");
  std::size_t best = 0;
  for (std::size_t i = 1; i < epochs.size(); ++i)
    if (epochs[i].average > epochs[best].average) best = i;
  return best;
}

inline double classification_accuracy(const ModelConfig& mc, ParamStore& p, const TaskHead& head,
                                      const std::vector<TaskExample>& data) {
  const auto pred = predict_labels(mc, p, head, data);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < data.size(); ++i) ok += pred[i] == data[i].label ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(data.size());
}

/// Fine-tunes `params` (a pretrained encoder; the head is attached here)
/// and keeps the epoch whose unweighted average validation metric across
/// languages is highest. Without `metric`, classification uses accuracy
/// and span extraction the exact start/end match rate.
inline FinetuneResult finetune(const ModelConfig& mc, ParamStore params, const TaskHead& head,
                               const std::vector<TaskExample>& train,
                               const std::map<std::string, std::vector<TaskExample>>& valid, const FinetuneConfig& fc,
                               LanguageMetric metric = nullptr) {
  fc.validate();
  if (train.empty()) throw ConfigError("fine-tuning set is empty");
  if (valid.empty()) throw ConfigError("no validation languages given");
  for (const auto& [lang, v] : valid) {
    if (v.empty()) throw ConfigError("validation set for language " + lang + " is empty");
  }
  if (!metric) {
    metric = [&](const std::string&, const std::vector<TaskExample>& v, ParamStore& p, std::size_t) {
      if (head.kind == HeadKind::kClassification) return classification_accuracy(mc, p, head, v);
      const auto spans = predict_spans(mc, p, v);
      std::size_t ok = 0;
      for (std::size_t i = 0; i < v.size(); ++i) ok += spans[i] == std::make_pair(v[i].start, v[i].end) ? 1 : 0;
      return static_cast<double>(ok) / static_cast<double>(v.size());
    };
  }
  attach_head(params, mc, head, hash_seed({fc.seed, 0x68656164}));
  const std::size_t steps_per_epoch = (train.size() + fc.batch_size - 1) / fc.batch_size;
  const std::uint64_t total = steps_per_epoch * fc.epochs;
  const auto warmup = static_cast<std::uint64_t>(std::floor(fc.warmup_fraction * static_cast<double>(total)));
  const AdamConfig ac{0.9, 0.98, 1e-6, fc.weight_decay, fc.grad_clip_norm};
  AdamState adam;
  FinetuneResult res;
  std::uint64_t step = 0;
  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = 1; epoch <= fc.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle(hash_seed({fc.seed, epoch, 0x73687566}));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
    double loss_sum = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += fc.batch_size) {
      ++step;
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(b0),
                                   order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b0 + fc.batch_size)));
      params.zero_grad();
      Tape t;
      ForwardOptions fo{mc.dropout > 0.0, hash_seed({fc.seed, step, 0x64726f70}), nullptr, nullptr};
      Var l = task_loss(t, mc, params, head, train, idx, fo);
      loss_sum += l.value().item();
      t.backward(l);
      adam_step(params, adam, ac, linear_schedule(step, fc.lr, warmup, total));
    }
    EpochMetrics em;
    em.epoch = epoch;
    em.train_loss = loss_sum / static_cast<double>(steps_per_epoch);
    for (const auto& [lang, v] : valid) em.per_language[lang] = metric(lang, v, params, epoch);
    em.average = language_average(em.per_language);
    res.epochs.push_back(em);
    if (res.epochs.size() == 1 || em.average > res.best_average) {
      res.best_average = em.average;
      res.best_epoch = epoch;
      res.best_params = ParamStore();
      for (const auto& [name, t] : params.all()) res.best_params.add(name, Tensor(t.shape(), t.storage()));
    }
  }
  return res;
}

}  // namespace polymlm
