// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "polymlm/error.hpp"
#include "polymlm/model.hpp"
#include "polymlm/training.hpp"

namespace polymlm {

inline constexpr int kConfigVersion = 1;

/// Everything a pipeline run needs that is not a file path.
struct RunConfig {
  std::string preset = "tiny";
  ModelConfig model;
  TrainConfig train;
  FinetuneConfig finetune;
};

inline RunConfig preset_config(const std::string& name) {
  RunConfig c;
  c.preset = name;
  if (name == "tiny") {
    c.model = ModelConfig{2, 64, 4, 2000, 64, 4, 0.1, true};
    c.train.batch_size = 16;
    c.train.total_updates = 500;
    c.train.seq_len = 64;
    c.train.peak_lr = 5e-3;
    c.train.warmup_updates = 50;
  } else if (name == "small") {
    c.model = ModelConfig{4, 128, 4, 8000, 128, 4, 0.1, true};
    c.train.batch_size = 16;
    c.train.total_updates = 2000;
    c.train.seq_len = 128;
    c.train.peak_lr = 2e-3;
    c.train.warmup_updates = 200;
  } else {
    throw ConfigError("unknown preset '" + name + "' (tiny, small)");
  }
  return c;
}

namespace detail {

inline std::string format_value(double v) {
  char buf[40];
  double back = 0.0;
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::sscanf(buf, "%lf", &back) == 1 && back == v) break;
  }
  return buf;
}

inline double parse_double(const std::string& key, const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::logic_error&) {
    throw ConfigError("config key " + key + ": '" + s + "' is not a number");
  }
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& s) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError("config key " + key + ": '" + s + "' is not a non-negative integer");
  }
  try {
    return std::stoull(s);
  } catch (const std::out_of_range&) {
    throw ConfigError("config key " + key + ": '" + s + "' is out of range");
  }
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("config key " + key + ": '" + s + "' is not true or false");
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

struct ConfigKey {
  std::string name;
  std::string help;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline const std::vector<ConfigKey>& config_keys() {
  using detail::format_value;
  using detail::parse_bool;
  using detail::parse_double;
  using detail::parse_uint;
#define POLYMLM_UINT_KEY(NAME, FIELD, HELP)                                                   \
  ConfigKey{NAME, HELP, [](const RunConfig& c) { return std::to_string(c.FIELD); },         \
            [](RunConfig& c, const std::string& v) { c.FIELD = parse_uint(NAME, v); }}
#define POLYMLM_REAL_KEY(NAME, FIELD, HELP)                                                  \
  ConfigKey{NAME, HELP, [](const RunConfig& c) { return format_value(c.FIELD); },           \
            [](RunConfig& c, const std::string& v) { c.FIELD = parse_double(NAME, v); }}
  static const std::vector<ConfigKey> keys = {
      POLYMLM_UINT_KEY("layers", model.layers, "transformer layers L"),
      POLYMLM_UINT_KEY("hidden", model.hidden, "hidden size H"),
      POLYMLM_UINT_KEY("heads", model.heads, "attention heads A"),
      POLYMLM_UINT_KEY("vocab_size", model.vocab, "vocabulary size V (tokenizer target)"),
      POLYMLM_UINT_KEY("max_seq", model.max_seq, "maximum sequence length T"),
      POLYMLM_UINT_KEY("ffn_mult", model.ffn_mult, "feed-forward width as a multiple of H"),
      POLYMLM_REAL_KEY("dropout", model.dropout, "dropout rate"),
      ConfigKey{"pre_ln", "layer norm before each sublayer",
                [](const RunConfig& c) { return std::string(c.model.pre_ln ? "true" : "false"); },
                [](RunConfig& c, const std::string& v) { c.model.pre_ln = parse_bool("pre_ln", v); }},
      POLYMLM_UINT_KEY("batch_size", train.batch_size, "pretraining sequences per update"),
      POLYMLM_UINT_KEY("updates", train.total_updates, "pretraining updates"),
      POLYMLM_UINT_KEY("seq_len", train.seq_len, "pretraining sequence length"),
      POLYMLM_REAL_KEY("lr", train.peak_lr, "peak learning rate"),
      POLYMLM_UINT_KEY("warmup", train.warmup_updates, "linear warmup updates"),
      POLYMLM_REAL_KEY("weight_decay", train.weight_decay, "decoupled weight decay"),
      POLYMLM_REAL_KEY("beta1", train.beta1, "Adam first-moment decay"),
      POLYMLM_REAL_KEY("beta2", train.beta2, "Adam second-moment decay"),
      POLYMLM_REAL_KEY("adam_eps", train.adam_eps, "Adam epsilon"),
      POLYMLM_REAL_KEY("clip", train.grad_clip_norm, "global gradient-norm bound (0 disables)"),
      POLYMLM_UINT_KEY("seed", train.seed, "random seed"),
      POLYMLM_UINT_KEY("checkpoint_every", train.checkpoint_every, "updates between checkpoints (0: end only)"),
      POLYMLM_UINT_KEY("world_size", train.world_size, "tensor-parallel ranks"),
      POLYMLM_REAL_KEY("alpha", train.alpha, "language sampling exponent"),
      POLYMLM_REAL_KEY("mask_rate", train.masking.mask_rate, "fraction of tokens selected for prediction"),
      POLYMLM_REAL_KEY("mask_token_rate", train.masking.replace_with_mask, "selected tokens replaced by <mask>"),
      POLYMLM_REAL_KEY("random_token_rate", train.masking.replace_with_random, "selected tokens replaced at random"),
      POLYMLM_UINT_KEY("ft_batch_size", finetune.batch_size, "fine-tuning batch size"),
      POLYMLM_UINT_KEY("ft_epochs", finetune.epochs, "fine-tuning epochs"),
      POLYMLM_REAL_KEY("ft_lr", finetune.lr, "fine-tuning peak learning rate"),
      POLYMLM_REAL_KEY("ft_warmup", finetune.warmup_fraction, "fine-tuning warmup fraction"),
      POLYMLM_REAL_KEY("ft_weight_decay", finetune.weight_decay, "fine-tuning weight decay"),
      POLYMLM_UINT_KEY("ft_seed", finetune.seed, "fine-tuning seed"),
  };
#undef POLYMLM_UINT_KEY
#undef POLYMLM_REAL_KEY
  return keys;
}

inline const ConfigKey& find_config_key(const std::string& name) {
  for (const auto& k : config_keys())
    if (k.name == name) return k;
  throw ConfigError("unknown config key '" + name + "'");
}

inline std::string check_masking(const MaskingConfig& m) {
  if (!(m.mask_rate > 0.0 && m.mask_rate < 1.0)) return "mask_rate must lie in (0, 1)";
  if (m.replace_with_mask < 0.0 || m.replace_with_random < 0.0 || m.replace_with_mask + m.replace_with_random > 1.0) {
    return "mask_token_rate and random_token_rate must be non-negative with a sum at most 1";
  }
  return "";
}

inline void validate_run_config(const RunConfig& c) {
  c.model.validate();
  c.train.validate(c.model);
  c.finetune.validate();
  if (auto msg = check_masking(c.train.masking); !msg.empty()) throw ConfigError(msg);
  if (!(c.train.alpha >= 0.0 && c.train.alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
}

/// Overrides as (key, value) pairs in application order.
using ConfigOverrides = std::vector<std::pair<std::string, std::string>>;

/// Parses `key = value` lines. The first non-comment line must be
/// `version = 1`; a `preset` line, wherever it appears, is applied before
/// the other keys.
inline ConfigOverrides parse_config_text(const std::string& text, const std::string& origin) {
  ConfigOverrides out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  bool versioned = false;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    if (!versioned) {
      if (key != "version") throw ConfigError(origin + ": the first setting must be version = " + std::to_string(kConfigVersion));
      if (value != std::to_string(kConfigVersion)) {
        throw ConfigError(origin + ": unsupported config version " + value + " (expected " + std::to_string(kConfigVersion) + ")");
      }
      versioned = true;
      continue;
    }
    if (key != "preset") (void)find_config_key(key);
    out.emplace_back(key, value);
  }
  if (!versioned) throw ConfigError(origin + ": missing version line");
  return out;
}

/// Preset, then file settings, then flag settings; later entries win.
inline RunConfig resolve_config(const ConfigOverrides& file, const ConfigOverrides& flags,
                                const std::string& default_preset = "tiny") {
  std::string preset = default_preset;
  for (const auto* src : {&file, &flags})
    for (const auto& [k, v] : *src)
      if (k == "preset") preset = v;
  RunConfig c = preset_config(preset);
  for (const auto* src : {&file, &flags})
    for (const auto& [k, v] : *src)
      if (k != "preset") find_config_key(k).set(c, v);
  validate_run_config(c);
  return c;
}

inline std::string serialize_config(const RunConfig& c) {
  std::string out = "version = " + std::to_string(kConfigVersion) + "\npreset = " + c.preset + "\n";
  for (const auto& k : config_keys()) out += k.name + " = " + k.get(c) + "\n";
  return out;
}

inline ConfigOverrides load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str(), path);
}

}  // namespace polymlm
