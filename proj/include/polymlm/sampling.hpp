// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "polymlm/error.hpp"
#include "polymlm/rng.hpp"
#include "polymlm/tokenizer.hpp"

namespace polymlm {

namespace fs = std::filesystem;

struct LanguageEntry {
  std::string code;
  std::uint64_t token_count = 0;
  /// Directory of shard files (sorted by name) or a single shard file.
  std::string path;
};

/// Per-language token counts and shard locations.
struct CorpusCatalog {
  std::vector<LanguageEntry> languages;

  void validate() const {
    std::set<std::string> seen;
    bool any = false;
    for (const auto& l : languages) {
      if (l.code.empty()) throw ConfigError("catalog: empty language code");
      if (!seen.insert(l.code).second) throw ConfigError("catalog: duplicate language " + l.code);
      any = any || l.token_count > 0;
    }
    if (!any) throw ConfigError("catalog: every language has zero tokens");
  }

  std::size_t index_of(const std::string& code) const {
    for (std::size_t i = 0; i < languages.size(); ++i)
      if (languages[i].code == code) return i;
    throw ConfigError("catalog: unknown language " + code);
  }

  /// Shard files for a language, in consumption order.
  std::vector<std::string> shards(std::size_t lang) const {
    const fs::path p(languages.at(lang).path);
    std::error_code ec;
    if (fs::is_directory(p, ec)) {
      std::vector<std::string> files;
      for (const auto& e : fs::directory_iterator(p)) {
        if (e.is_regular_file()) files.push_back(e.path().string());
      }
      std::sort(files.begin(), files.end());
      return files;
    }
    return {p.string()};
  }
};

inline constexpr std::string_view kCatalogMagic = "#polymlm-catalog";
inline constexpr int kCatalogFormatVersion = 1;

inline std::string serialize_catalog(const CorpusCatalog& c) {
  std::ostringstream os;
  os << kCatalogMagic << '\t' << kCatalogFormatVersion << '\n';
  for (const auto& l : c.languages) os << l.code << '\t' << l.token_count << '\t' << l.path << '\n';
  return os.str();
}

/// Relative shard paths are resolved against `base_dir`.
inline CorpusCatalog parse_catalog(const std::string& text, const std::string& base_dir,
                                   const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw DataError("catalog " + origin + " is empty");
  {
    std::istringstream h(line);
    std::string magic;
    int version = 0;
    if (!(h >> magic >> version) || magic != kCatalogMagic || version != kCatalogFormatVersion) {
      throw DataError("catalog " + origin + " has a missing or unsupported header");
    }
  }
  CorpusCatalog c;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) throw DataError("catalog " + origin + ": malformed row '" + line + "'");
    LanguageEntry e;
    e.code = line.substr(0, t1);
    try {
      e.token_count = std::stoull(line.substr(t1 + 1, t2 - t1 - 1));
    } catch (const std::exception&) {
      throw DataError("catalog " + origin + ": bad token count in row '" + line + "'");
    }
    fs::path p(line.substr(t2 + 1));
    if (p.is_relative() && !base_dir.empty()) p = fs::path(base_dir) / p;
    e.path = p.string();
    c.languages.push_back(std::move(e));
  }
  c.validate();
  return c;
}

inline CorpusCatalog load_catalog(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read catalog " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_catalog(ss.str(), fs::path(path).parent_path().string(), path);
}

struct SamplingConfig {
  double alpha = 0.3;
  std::uint64_t seed = 0;
};

/// q_i = p_i^alpha / sum_j p_j^alpha with p_i = n_i / sum_j n_j. Computed as
/// n_i^alpha / sum_j n_j^alpha, the same quantity, which keeps alpha = 1
/// exactly equal to p and alpha = 0 exactly uniform.
inline std::vector<double> language_distribution(const CorpusCatalog& catalog,
                                                 const SamplingConfig& config) {
  if (!(config.alpha >= 0.0 && config.alpha <= 1.0)) {
    throw ConfigError("sampling alpha must lie in [0, 1]");
  }
  catalog.validate();
  std::vector<double> q(catalog.languages.size(), 0.0);
  double z = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    const auto n = catalog.languages[i].token_count;
    if (n == 0) continue;
    q[i] = std::pow(static_cast<double>(n), config.alpha);
    z += q[i];
  }
  for (auto& v : q) v /= z;
  return q;
}

/// Inverse-CDF draw from a probability vector.
inline std::size_t draw_index(const std::vector<double>& q, Rng& rng) {
  const double u = rng.uniform();
  double c = 0.0;
  std::size_t last = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (q[i] <= 0.0) continue;
    c += q[i];
    last = i;
    if (u < c) return i;
  }
  return last;
}

struct StreamSample {
  std::size_t language = 0;
  std::string code;
  std::vector<std::int32_t> ids;
};

/// Draws languages i.i.d. from the smoothed distribution; within a language
/// documents are read in shard order, each followed by an end-of-document
/// token, and the concatenated stream is cut into windows of exactly
/// `seq_len` tokens. A language's stream wraps around at the end of its
/// shards, carrying partial windows across the boundary.
class MultilingualStream {
 public:
  MultilingualStream(CorpusCatalog catalog, SamplingConfig config,
                     std::shared_ptr<const UnigramVocab> vocab, std::size_t seq_len)
      : catalog_(std::move(catalog)),
        q_(language_distribution(catalog_, config)),
        rng_(hash_seed({config.seed, 0x5354524541ULL})),
        vocab_(std::move(vocab)),
        seq_len_(seq_len),
        streams_(catalog_.languages.size()) {
    if (seq_len_ < 2) throw ConfigError("sequence length must be at least 2");
  }

  const std::vector<double>& distribution() const { return q_; }
  const CorpusCatalog& catalog() const { return catalog_; }

  StreamSample next() {
    const std::size_t lang = draw_index(q_, rng_);
    return next_from(lang);
  }

  /// Next window from a given language, bypassing the language draw.
  StreamSample next_from(std::size_t lang) {
    LangStream& s = load(lang);
    StreamSample out{lang, catalog_.languages[lang].code, {}};
    out.ids.reserve(seq_len_);
    while (out.ids.size() < seq_len_) {
      const std::size_t take = std::min(seq_len_ - out.ids.size(), s.tokens.size() - s.cursor);
      out.ids.insert(out.ids.end(), s.tokens.begin() + static_cast<std::ptrdiff_t>(s.cursor),
                     s.tokens.begin() + static_cast<std::ptrdiff_t>(s.cursor + take));
      s.cursor += take;
      if (s.cursor == s.tokens.size()) {
        s.cursor = 0;
        ++s.epochs;
      }
    }
    return out;
  }

  /// The full token stream of one epoch over a language's shards.
  const std::vector<std::int32_t>& epoch_tokens(std::size_t lang) { return load(lang).tokens; }

 private:
  struct LangStream {
    bool loaded = false;
    std::vector<std::int32_t> tokens;
    std::size_t cursor = 0;
    std::size_t epochs = 0;
  };

  LangStream& load(std::size_t lang) {
    LangStream& s = streams_.at(lang);
    if (s.loaded) return s;
    for (const auto& shard : catalog_.shards(lang)) {
      std::ifstream f(shard);
      if (!f) throw DataError("cannot read shard " + shard);
      std::string line;
      while (std::getline(f, line)) {
        if (line.empty()) continue;
        auto seq = viterbi_encode(*vocab_, line);
        s.tokens.insert(s.tokens.end(), seq.ids.begin(), seq.ids.end());
        s.tokens.push_back(vocab_->specials().eos);
      }
    }
    if (s.tokens.empty()) {
      throw DataError("language " + catalog_.languages[lang].code + " has no documents under " +
                      catalog_.languages[lang].path);
    }
    s.loaded = true;
    return s;
  }

  CorpusCatalog catalog_;
  std::vector<double> q_;
  Rng rng_;
  std::shared_ptr<const UnigramVocab> vocab_;
  std::size_t seq_len_;
  std::vector<LangStream> streams_;
};

inline std::vector<StreamSample> sample_stream(const CorpusCatalog& catalog,
                                               const SamplingConfig& config,
                                               std::shared_ptr<const UnigramVocab> vocab,
                                               std::size_t seq_len, std::size_t count) {
  MultilingualStream s(catalog, config, std::move(vocab), seq_len);
  std::vector<StreamSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(s.next());
  return out;
}

// ---------------------------------------------------------------------------
// Masked-token targets

inline constexpr std::int64_t kIgnoreIndex = -100;

struct MaskingConfig {
  double mask_rate = 0.15;
  double replace_with_mask = 0.8;
  double replace_with_random = 0.1;
};

/// One masked-LM batch. Language tags are bookkeeping only; the model input
/// is token ids and nothing else.
struct MlmBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int64_t> input_ids;   // [batch * seq]
  std::vector<std::int64_t> target_ids;  // kIgnoreIndex where not selected
  std::vector<std::string> language_tags;
  bool no_targets = false;

  std::size_t selected = 0;
  std::size_t masked = 0;
  std::size_t randomized = 0;
  std::size_t unchanged = 0;
};

/// Selects each non-special position with probability mask_rate; selected
/// positions become targets and are replaced by the mask token, a random
/// ordinary piece, or left as is, in the configured proportions.
inline MlmBatch apply_mlm_mask(const std::vector<std::vector<std::int32_t>>& rows,
                               const UnigramVocab& vocab, const MaskingConfig& cfg, Rng& rng,
                               std::vector<std::string> language_tags = {}) {
  if (!(cfg.mask_rate > 0.0 && cfg.mask_rate < 1.0)) {
    throw ConfigError("mask_rate must lie in (0, 1)");
  }
  if (cfg.replace_with_mask < 0.0 || cfg.replace_with_random < 0.0 ||
      cfg.replace_with_mask + cfg.replace_with_random > 1.0) {
    throw ConfigError("mask/random replacement proportions must be non-negative and sum to <= 1");
  }
  if (rows.empty()) throw ConfigError("empty batch");
  MlmBatch b;
  b.batch = rows.size();
  b.seq = rows.front().size();
  b.input_ids.reserve(b.batch * b.seq);
  b.target_ids.assign(b.batch * b.seq, kIgnoreIndex);
  b.language_tags = std::move(language_tags);
  const std::uint64_t ordinary = vocab.size() - kNumSpecials;
  for (const auto& r : rows) {
    if (r.size() != b.seq) throw DimensionError("batch rows must share one length");
    for (auto id : r) b.input_ids.push_back(id);
  }
  for (std::size_t i = 0; i < b.input_ids.size(); ++i) {
    const auto id = static_cast<std::int32_t>(b.input_ids[i]);
    if (vocab.is_special(id)) continue;
    if (rng.uniform() >= cfg.mask_rate) continue;
    b.target_ids[i] = id;
    ++b.selected;
    const double u = rng.uniform();
    if (u < cfg.replace_with_mask) {
      b.input_ids[i] = vocab.specials().mask;
      ++b.masked;
    } else if (u < cfg.replace_with_mask + cfg.replace_with_random && ordinary > 0) {
      b.input_ids[i] = static_cast<std::int64_t>(kNumSpecials + rng.below(ordinary));
      ++b.randomized;
    } else {
      ++b.unchanged;
    }
  }
  b.no_targets = b.selected == 0;
  return b;
}

}  // namespace polymlm
