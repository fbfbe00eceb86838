// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "polymlm/autodiff.hpp"
#include "polymlm/error.hpp"
#include "polymlm/rng.hpp"
#include "polymlm/sampling.hpp"
#include "polymlm/tokenizer.hpp"

namespace polymlm {

struct ModelConfig {
  std::size_t layers = 2;     // L
  std::size_t hidden = 64;    // H
  std::size_t heads = 4;      // A
  std::size_t vocab = 2000;   // V
  std::size_t max_seq = 64;   // T
  std::size_t ffn_mult = 4;
  double dropout = 0.1;
  bool pre_ln = true;

  std::size_t ffn() const { return ffn_mult * hidden; }
  std::size_t head_dim() const { return hidden / heads; }

  void validate() const {
    if (layers == 0 || hidden == 0 || heads == 0 || ffn_mult == 0) {
      throw ConfigError("model: L, H, A and ffn_mult must be positive");
    }
    if (hidden % heads != 0) {
      throw ConfigError("model: H=" + std::to_string(hidden) + " is not divisible by A=" +
                        std::to_string(heads));
    }
    if (vocab < kNumSpecials) throw ConfigError("model: V smaller than the special-token count");
    if (max_seq < 2) throw ConfigError("model: T must be at least 2");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model: dropout must lie in [0, 1)");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline ModelConfig xl_config() { return {36, 2560, 32, 250000, 512, 4, 0.1, true}; }
inline ModelConfig xxl_config() { return {48, 4096, 32, 250000, 512, 4, 0.1, true}; }

/// Encoder plus MLM head parameter count, computed analytically.
inline std::uint64_t parameter_count(const ModelConfig& c) {
  c.validate();
  const std::uint64_t V = c.vocab, H = c.hidden, T = c.max_seq, F = c.ffn(), L = c.layers;
  const std::uint64_t attn = 4 * H * H + 4 * H;
  const std::uint64_t ffn = 2 * H * F + F + H;
  const std::uint64_t norms = 4 * H;
  const std::uint64_t final_norm = c.pre_ln ? 2 * H : 0;
  return V * H + T * H + L * (attn + ffn + norms) + final_norm + V;
}

/// Named parameter tensors. std::map keeps addresses stable and gives a
/// fixed iteration order for checkpoints and optimizers.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t) {
    auto [it, inserted] = tensors_.emplace(name, std::move(t));
    if (!inserted) throw ConfigError("parameter " + name + " already exists");
    return it->second;
  }
  Tensor& at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ConfigError("missing parameter " + name);
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ConfigError("missing parameter " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  void erase_prefix(const std::string& prefix) {
    for (auto it = tensors_.begin(); it != tensors_.end();) {
      it = it->first.rfind(prefix, 0) == 0 ? tensors_.erase(it) : std::next(it);
    }
  }
  std::map<std::string, Tensor>& all() { return tensors_; }
  const std::map<std::string, Tensor>& all() const { return tensors_; }
  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors_) n += t.numel();
    return n;
  }
  void zero_grad() {
    for (auto& [_, t] : tensors_) {
      t.ensure_grad();
      t.zero_grad();
    }
  }
  friend bool operator==(const ParamStore& a, const ParamStore& b) { return a.tensors_ == b.tensors_; }

 private:
  std::map<std::string, Tensor> tensors_;
};

inline std::string layer_prefix(std::size_t i) { return "layer" + std::to_string(i) + "."; }

/// Per-tensor seeded so a tensor's values do not depend on which other
/// tensors exist or their creation order.
inline Tensor init_normal(const std::string& name, Shape shape, double stddev, std::uint64_t seed) {
  Tensor t(std::move(shape));
  Rng rng(hash_seed({seed, fnv1a(name)}));
  for (auto& v : t.data()) v = rng.truncated_normal(stddev);
  return t;
}

struct InitOptions {
  double stddev = 0.02;
  /// Zero the attention and feed-forward output projections.
  bool zero_output_projections = false;
};

inline ParamStore init_params(const ModelConfig& c, std::uint64_t seed, const InitOptions& opt = {}) {
  c.validate();
  const std::size_t H = c.hidden, F = c.ffn();
  const double out_std = opt.stddev / std::sqrt(2.0 * static_cast<double>(c.layers));
  ParamStore p;
  auto normal = [&](const std::string& name, Shape s, double sd) { p.add(name, init_normal(name, std::move(s), sd, seed)); };
  auto filled = [&](const std::string& name, Shape s, double v) { p.add(name, Tensor(std::move(s), v)); };
  normal("embed.tokens", {c.vocab, H}, opt.stddev);
  normal("embed.positions", {c.max_seq, H}, opt.stddev);
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string pre = layer_prefix(l);
    filled(pre + "ln1.gain", {H}, 1.0);
    filled(pre + "ln1.bias", {H}, 0.0);
    for (const char* w : {"q", "k", "v"}) {
      normal(pre + "attn." + w + ".weight", {H, H}, opt.stddev);
      filled(pre + "attn." + w + ".bias", {H}, 0.0);
    }
    if (opt.zero_output_projections) {
      filled(pre + "attn.out.weight", {H, H}, 0.0);
    } else {
      normal(pre + "attn.out.weight", {H, H}, out_std);
    }
    filled(pre + "attn.out.bias", {H}, 0.0);
    filled(pre + "ln2.gain", {H}, 1.0);
    filled(pre + "ln2.bias", {H}, 0.0);
    normal(pre + "ffn.up.weight", {H, F}, opt.stddev);
    filled(pre + "ffn.up.bias", {F}, 0.0);
    if (opt.zero_output_projections) {
      filled(pre + "ffn.down.weight", {F, H}, 0.0);
    } else {
      normal(pre + "ffn.down.weight", {F, H}, out_std);
    }
    filled(pre + "ffn.down.bias", {H}, 0.0);
  }
  if (c.pre_ln) {
    filled("final_ln.gain", {H}, 1.0);
    filled("final_ln.bias", {H}, 0.0);
  }
  filled("mlm.bias", {c.vocab}, 0.0);
  return p;
}

// ---------------------------------------------------------------------------
// Forward

enum DropoutSite : std::uint64_t { kDropEmbed = 1, kDropAttnProbs = 2, kDropAttnOut = 3, kDropFfnOut = 4 };

/// Seeds for dropout in regions every tensor-parallel rank holds in full.
inline std::uint64_t dropout_seed(std::uint64_t base, std::size_t layer, DropoutSite site) {
  return hash_seed({base, layer, site});
}

/// Attention probabilities are split by head across ranks, so each rank
/// draws its own mask. The serial model is rank 0 of a world of one.
inline std::uint64_t attention_dropout_seed(std::uint64_t base, std::size_t rank, std::size_t layer) {
  return hash_seed({base, rank, layer, kDropAttnProbs});
}

struct ForwardOptions {
  /// Dropout is applied only when true.
  bool train = false;
  std::uint64_t dropout_seed = 0;
  /// Optional [B*T'] key validity flags (0 = padding).
  const std::vector<std::uint8_t>* key_valid = nullptr;
  AttentionProbe* probe = nullptr;
};

struct EncoderOutput {
  Var hidden;  // [B*T' x H], after the final LayerNorm in the pre-LN setting
  Var stream;  // [B*T' x H], residual stream before the final LayerNorm
  Var embedded;  // token + position embeddings
  std::size_t batch = 0;
  std::size_t seq = 0;
};

inline Var linear(Tape& t, ParamStore& p, const std::string& name, const Var& x) {
  return add_bias(matmul(x, t.param(p.at(name + ".weight"))), t.param(p.at(name + ".bias")));
}

inline Var norm(Tape& t, ParamStore& p, const std::string& name, const Var& x) {
  return layer_norm(x, t.param(p.at(name + ".gain")), t.param(p.at(name + ".bias")));
}

inline void check_input(const ModelConfig& c, const std::vector<std::int64_t>& ids, std::size_t batch,
                        std::size_t seq) {
  if (batch == 0 || seq == 0 || ids.size() != batch * seq) {
    throw DimensionError("model input: " + std::to_string(ids.size()) + " ids for batch " +
                         std::to_string(batch) + " x seq " + std::to_string(seq));
  }
  if (seq > c.max_seq) {
    throw DimensionError("model input: sequence length " + std::to_string(seq) + " exceeds T=" +
                         std::to_string(c.max_seq));
  }
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= c.vocab) {
      throw IndexError("model input: token id " + std::to_string(id) + " outside [0," +
                       std::to_string(c.vocab) + ")");
    }
  }
}

inline std::vector<std::int64_t> position_ids(std::size_t batch, std::size_t seq) {
  std::vector<std::int64_t> pos(batch * seq);
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<std::int64_t>(i % seq);
  return pos;
}

/// Token ids only: there is no language input anywhere in the encoder.
inline EncoderOutput encode(Tape& t, const ModelConfig& c, ParamStore& p,
                            const std::vector<std::int64_t>& ids, std::size_t batch,
                            std::size_t seq, const ForwardOptions& opt = {}) {
  c.validate();
  check_input(c, ids, batch, seq);
  const double rate = opt.train ? c.dropout : 0.0;
  EncoderOutput out;
  out.batch = batch;
  out.seq = seq;
  Var x = add(embedding(t.param(p.at("embed.tokens")), ids),
              embedding(t.param(p.at("embed.positions")), position_ids(batch, seq)));
  out.embedded = x;
  x = dropout(x, rate, dropout_seed(opt.dropout_seed, 0, kDropEmbed));
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string pre = layer_prefix(l);
    AttentionOptions ao{batch, seq, c.heads, opt.key_valid, rate,
                        attention_dropout_seed(opt.dropout_seed, 0, l), opt.probe};
    Var h = c.pre_ln ? norm(t, p, pre + "ln1", x) : x;
    Var a = multi_head_attention(linear(t, p, pre + "attn.q", h), linear(t, p, pre + "attn.k", h),
                                 linear(t, p, pre + "attn.v", h), ao);
    Var o = dropout(linear(t, p, pre + "attn.out", a), rate, dropout_seed(opt.dropout_seed, l, kDropAttnOut));
    x = add(x, o);
    if (!c.pre_ln) x = norm(t, p, pre + "ln1", x);
    h = c.pre_ln ? norm(t, p, pre + "ln2", x) : x;
    Var f = linear(t, p, pre + "ffn.down", gelu(linear(t, p, pre + "ffn.up", h)));
    f = dropout(f, rate, dropout_seed(opt.dropout_seed, l, kDropFfnOut));
    x = add(x, f);
    if (!c.pre_ln) x = norm(t, p, pre + "ln2", x);
  }
  out.stream = x;
  out.hidden = c.pre_ln ? norm(t, p, "final_ln", x) : x;
  return out;
}

/// Full-vocabulary logits through the transposed input embedding.
inline Var mlm_logits(const Var& hidden, const Var& tied_embedding, const Var& bias) {
  return add_bias(matmul_nt(hidden, tied_embedding), bias);
}

inline Var mlm_logits(Tape& t, ParamStore& p, const Var& hidden) {
  return mlm_logits(hidden, t.param(p.at("embed.tokens")), t.param(p.at("mlm.bias")));
}

/// Rows with a prediction target, in position order.
inline std::vector<std::size_t> target_rows(const std::vector<std::int64_t>& targets) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < targets.size(); ++i)
    if (targets[i] != kIgnoreIndex) rows.push_back(i);
  return rows;
}

/// Mean cross-entropy over the selected positions. Logits are formed only
/// for those rows, which is equivalent to the full logits with ignored rows.
inline Var mlm_loss(Tape& t, const ModelConfig& c, ParamStore& p, const MlmBatch& b,
                    const ForwardOptions& opt = {}) {
  const auto rows = target_rows(b.target_ids);
  if (rows.empty()) throw NumericError("mlm_loss: batch has no prediction targets");
  EncoderOutput enc = encode(t, c, p, b.input_ids, b.batch, b.seq, opt);
  std::vector<std::int64_t> tgt;
  tgt.reserve(rows.size());
  for (auto r : rows) tgt.push_back(b.target_ids[r]);
  return cross_entropy(mlm_logits(t, p, select_rows(enc.hidden, rows)), tgt, kIgnoreIndex);
}

// ---------------------------------------------------------------------------
// Task heads

enum class HeadKind { kMlm, kClassification, kSpan };

struct TaskHead {
  HeadKind kind = HeadKind::kMlm;
  std::size_t num_labels = 0;
};

inline const char* head_kind_name(HeadKind k) {
  switch (k) {
    case HeadKind::kMlm: return "mlm";
    case HeadKind::kClassification: return "classification";
    case HeadKind::kSpan: return "span";
  }
  return "?";
}

/// Attaches a fresh task head. Any previously attached head is removed.
inline void attach_head(ParamStore& p, const ModelConfig& c, const TaskHead& head, std::uint64_t seed) {
  p.erase_prefix("head.");
  const std::size_t H = c.hidden;
  switch (head.kind) {
    case HeadKind::kMlm:
      return;
    case HeadKind::kClassification:
      if (head.num_labels < 2) throw ConfigError("classification head needs at least 2 labels");
      p.add("head.pool.weight", init_normal("head.pool.weight", {H, H}, 0.02, seed));
      p.add("head.pool.bias", Tensor({H}, 0.0));
      p.add("head.cls.weight", init_normal("head.cls.weight", {H, head.num_labels}, 0.02, seed));
      p.add("head.cls.bias", Tensor({head.num_labels}, 0.0));
      return;
    case HeadKind::kSpan:
      p.add("head.span.weight", init_normal("head.span.weight", {H, 2}, 0.02, seed));
      p.add("head.span.bias", Tensor({2}, 0.0));
      return;
  }
}

/// Classification: [B x num_labels] from the first position through a tanh
/// pooling projection. Span: [B*T' x 2] start/end logits.
inline Var task_forward(Tape& t, ParamStore& p, const TaskHead& head, const EncoderOutput& enc) {
  switch (head.kind) {
    case HeadKind::kMlm:
      return mlm_logits(t, p, enc.hidden);
    case HeadKind::kClassification: {
      std::vector<std::size_t> first(enc.batch);
      for (std::size_t b = 0; b < enc.batch; ++b) first[b] = b * enc.seq;
      Var pooled = tanh(linear(t, p, "head.pool", select_rows(enc.hidden, first)));
      return linear(t, p, "head.cls", pooled);
    }
    case HeadKind::kSpan:
      if (enc.seq < 2) {
        throw DimensionError("span head needs sequences of at least 2 tokens, got " + std::to_string(enc.seq));
      }
      return linear(t, p, "head.span", enc.hidden);
  }
  throw ConfigError("unknown head kind");
}

/// Start and end logits, each [B x T'], split out of a [B*T' x 2] span output.
inline std::pair<Var, Var> span_logits(const Var& span_out, std::size_t batch, std::size_t seq) {
  Var tr = transpose(span_out);  // [2 x B*T']
  Var flat = reshape(tr, {2 * batch, seq});
  std::vector<std::size_t> starts(batch), ends(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    starts[b] = b;
    ends[b] = batch + b;
  }
  return {select_rows(flat, starts), select_rows(flat, ends)};
}

}  // namespace polymlm
