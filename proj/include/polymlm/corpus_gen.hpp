// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "polymlm/error.hpp"
#include "polymlm/rng.hpp"
#include "polymlm/sampling.hpp"

namespace polymlm {

struct LanguageSpec {
  std::string code;
  std::size_t zipf_size = 400;  // distinct words in the language's own lexicon
  std::size_t docs = 100;
};

struct CorpusGenConfig {
  std::vector<LanguageSpec> languages;
  std::uint64_t seed = 1;
  std::size_t min_words = 8;
  std::size_t max_words = 24;
  double zipf_exponent = 1.1;
  /// Words spelled identically in every language.
  std::size_t shared_core = 24;
  /// Probability that a word is followed by its fixed successor.
  double successor_prob = 0.5;
  std::size_t docs_per_shard = 500;

  void validate() const {
    if (languages.empty()) throw ConfigError("corpus needs at least one language");
    std::set<std::string> seen;
    for (const auto& l : languages) {
      if (l.code.empty() || l.code.find_first_of("\t\n/\\ ") != std::string::npos) {
        throw ConfigError("invalid language code '" + l.code + "'");
      }
      if (!seen.insert(l.code).second) throw ConfigError("duplicate language code " + l.code);
      if (l.docs == 0) throw ConfigError("language " + l.code + " has a zero document count");
      if (l.zipf_size == 0) throw ConfigError("language " + l.code + " has an empty lexicon");
    }
    if (min_words == 0 || max_words < min_words) throw ConfigError("document length range is empty");
    if (!(zipf_exponent > 0.0)) throw ConfigError("zipf exponent must be positive");
    if (!(successor_prob >= 0.0 && successor_prob <= 1.0)) throw ConfigError("successor_prob must lie in [0, 1]");
    if (docs_per_shard == 0) throw ConfigError("docs_per_shard must be positive");
  }
};

/// Parses "en:400:100,fr:400:100" (code:zipf_size:docs).
inline std::vector<LanguageSpec> parse_language_specs(const std::string& text) {
  std::vector<LanguageSpec> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    LanguageSpec l;
    const auto a = item.find(':');
    const auto b = a == std::string::npos ? a : item.find(':', a + 1);
    if (b == std::string::npos) throw ConfigError("language spec '" + item + "' is not code:zipf_size:docs");
    l.code = item.substr(0, a);
    try {
      std::size_t used = 0;
      const std::string zs = item.substr(a + 1, b - a - 1), ds = item.substr(b + 1);
      l.zipf_size = std::stoull(zs, &used);
      if (used != zs.size()) throw std::invalid_argument(zs);
      l.docs = std::stoull(ds, &used);
      if (used != ds.size()) throw std::invalid_argument(ds);
    } catch (const std::logic_error&) {
      throw ConfigError("language spec '" + item + "' has a non-numeric field");
    }
    out.push_back(l);
  }
  if (out.empty()) throw ConfigError("no languages given");
  return out;
}

namespace detail {

inline constexpr std::string_view kConsonants = "bcdfghjklmnprstvwz";
inline constexpr std::string_view kVowels = "aeiou";

/// Consonant inventory of language i: ten letters starting at 4i, so
/// neighbouring languages share some letters and differ in others.
inline std::string consonants_for(std::size_t lang) {
  std::string s;
  for (std::size_t k = 0; k < 10; ++k) s.push_back(kConsonants[(4 * lang + k) % kConsonants.size()]);
  return s;
}

inline std::string make_word(Rng& rng, const std::string& cons, std::size_t max_syll) {
  const std::size_t n = 1 + rng.below(max_syll);
  std::string w;
  for (std::size_t i = 0; i < n; ++i) {
    w.push_back(cons[rng.below(cons.size())]);
    w.push_back(kVowels[rng.below(kVowels.size())]);
  }
  if (rng.uniform() < 0.3) w.push_back(cons[rng.below(cons.size())]);
  return w;
}

inline std::vector<std::string> make_lexicon(Rng& rng, const std::string& cons, std::size_t n,
                                             std::set<std::string>& taken) {
  std::vector<std::string> out;
  std::size_t attempts = 0;
  while (out.size() < n) {
    if (++attempts > 1000 * n + 1000) throw ConfigError("cannot build a lexicon of " + std::to_string(n) + " words");
    std::string w = make_word(rng, cons, 4);
    if (taken.insert(w).second) out.push_back(std::move(w));
  }
  return out;
}

}  // namespace detail

/// Generated languages: lexicon[r] in every language is the translation of
/// lexicon[r] in every other, and the core words are shared verbatim.
struct SyntheticLanguages {
  std::vector<std::string> codes;
  std::vector<std::string> core;
  std::vector<std::vector<std::string>> lexicons;
  /// Zipf cumulative weights over ranks of core followed by lexicon.
  std::vector<std::vector<double>> cdf;
  std::vector<std::vector<std::size_t>> successor;

  std::size_t size(std::size_t lang) const { return core.size() + lexicons[lang].size(); }
  const std::string& word(std::size_t lang, std::size_t id) const {
    return id < core.size() ? core[id] : lexicons[lang][id - core.size()];
  }
};

inline SyntheticLanguages make_languages(const CorpusGenConfig& cfg) {
  cfg.validate();
  SyntheticLanguages out;
  std::set<std::string> taken;
  Rng core_rng(hash_seed({cfg.seed, 0x636f7265}));
  out.core = detail::make_lexicon(core_rng, std::string(detail::kConsonants.substr(0, 6)), cfg.shared_core, taken);
  for (std::size_t i = 0; i < cfg.languages.size(); ++i) {
    const auto& spec = cfg.languages[i];
    out.codes.push_back(spec.code);
    Rng rng(hash_seed({cfg.seed, fnv1a(spec.code), 0x6c6578}));
    out.lexicons.push_back(detail::make_lexicon(rng, detail::consonants_for(i), spec.zipf_size, taken));
    const std::size_t n = out.size(i);
    std::vector<double> cdf(n);
    double acc = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      acc += 1.0 / std::pow(static_cast<double>(r + 1), cfg.zipf_exponent);
      cdf[r] = acc;
    }
    for (auto& c : cdf) c /= acc;
    out.cdf.push_back(std::move(cdf));
    // successor map shared across languages where ranks exist, so word order
    // statistics transfer between languages
    Rng srng(hash_seed({cfg.seed, 0x73756363}));
    std::vector<std::size_t> succ(n);
    for (std::size_t r = 0; r < n; ++r) succ[r] = srng.below(std::min<std::size_t>(n, 64));
    out.successor.push_back(std::move(succ));
  }
  return out;
}

inline std::size_t draw_word(const SyntheticLanguages& L, std::size_t lang, Rng& rng) {
  const auto& cdf = L.cdf[lang];
  const double u = rng.uniform();
  const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  return std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), cdf.size() - 1);
}

inline std::vector<std::size_t> draw_sentence(const SyntheticLanguages& L, std::size_t lang, std::size_t words,
                                              double successor_prob, Rng& rng) {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < words; ++k) {
    if (k > 0 && rng.uniform() < successor_prob) {
      out.push_back(L.successor[lang][out.back()]);
    } else {
      out.push_back(draw_word(L, lang, rng));
    }
  }
  return out;
}

inline std::string render(const SyntheticLanguages& L, std::size_t lang, const std::vector<std::size_t>& ids) {
  std::string s;
  for (auto id : ids) {
    if (!s.empty()) s.push_back(' ');
    s += L.word(lang, id);
  }
  return s;
}

/// Document lines for one language.
inline std::vector<std::string> generate_documents(const CorpusGenConfig& cfg, const SyntheticLanguages& L,
                                                   std::size_t lang) {
  Rng rng(hash_seed({cfg.seed, fnv1a(cfg.languages[lang].code), 0x646f6373}));
  std::vector<std::string> docs;
  for (std::size_t d = 0; d < cfg.languages[lang].docs; ++d) {
    const std::size_t n = cfg.min_words + rng.below(cfg.max_words - cfg.min_words + 1);
    docs.push_back(render(L, lang, draw_sentence(L, lang, n, cfg.successor_prob, rng)));
  }
  return docs;
}

inline std::uint64_t count_whitespace_tokens(const std::string& text) {
  std::uint64_t n = 0;
  bool in = false;
  for (char c : text) {
    const bool space = c == ' ' || c == '\t' || c == '\n' || c == '\r';
    if (!space && !in) ++n;
    in = !space;
  }
  return n;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::error_code ec;
  std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f || !(f << text) || !f.flush()) throw IoError("cannot write " + path.string());
}

/// Writes <out>/<code>/shard_NNN.txt for each language plus
/// <out>/catalog.tsv whose counts are whitespace tokens. Returns the catalog.
inline CorpusCatalog generate_corpus(const CorpusGenConfig& cfg, const std::string& out_dir) {
  const SyntheticLanguages L = make_languages(cfg);
  const std::filesystem::path root(out_dir);
  std::error_code ec;
  std::filesystem::create_directories(root, ec);
  if (ec) throw IoError("cannot create corpus directory " + out_dir + ": " + ec.message());
  CorpusCatalog cat;
  for (std::size_t i = 0; i < cfg.languages.size(); ++i) {
    const auto& code = cfg.languages[i].code;
    std::filesystem::remove_all(root / code, ec);
    const auto docs = generate_documents(cfg, L, i);
    std::uint64_t count = 0;
    for (std::size_t s = 0; s * cfg.docs_per_shard < docs.size(); ++s) {
      std::string text;
      for (std::size_t d = s * cfg.docs_per_shard; d < std::min(docs.size(), (s + 1) * cfg.docs_per_shard); ++d) {
        text += docs[d];
        text.push_back('\n');
      }
      count += count_whitespace_tokens(text);
      char name[32];
      std::snprintf(name, sizeof name, "shard_%03zu.txt", s);
      write_text_file(root / code / name, text);
    }
    cat.languages.push_back({code, count, code});
  }
  write_text_file(root / "catalog.tsv", serialize_catalog(cat));
  return load_catalog((root / "catalog.tsv").string());
}

/// All document lines of a catalog, language by language.
inline std::vector<std::string> read_catalog_lines(const CorpusCatalog& cat) {
  std::vector<std::string> lines;
  for (std::size_t i = 0; i < cat.languages.size(); ++i) {
    for (const auto& shard : cat.shards(i)) {
      std::ifstream f(shard);
      if (!f) throw DataError("cannot read shard " + shard);
      std::string line;
      while (std::getline(f, line))
        if (!line.empty()) lines.push_back(line);
    }
  }
  return lines;
}

// ---------------------------------------------------------------------------
// Classification task with a planted cross-lingual feature

struct TaskGenConfig {
  std::size_t train = 400;
  std::size_t dev = 100;
  std::size_t test = 200;
  std::size_t min_words = 6;
  std::size_t max_words = 12;
  std::uint64_t seed = 7;
  /// Language whose training set is the original; others get translations.
  std::string pivot;
};

struct TaskRow {
  std::string text;
  std::int64_t label = 0;
};

/// Binary task: the label is 1 when the sentence contains a word from the
/// first half of the first eight core words and 0 when it contains one
/// from the second half. Core words are spelled identically everywhere, so
/// a classifier trained in one language applies to the others.
inline std::vector<std::pair<TaskRow, std::vector<std::size_t>>> make_task_rows(const SyntheticLanguages& L,
                                                                                std::size_t lang, std::size_t n,
                                                                                const TaskGenConfig& tg,
                                                                                std::uint64_t stream) {
  if (L.core.size() < 8) throw ConfigError("the task generator needs at least 8 shared core words");
  Rng rng(hash_seed({tg.seed, fnv1a(L.codes[lang]), stream}));
  std::vector<std::pair<TaskRow, std::vector<std::size_t>>> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t words = tg.min_words + rng.below(tg.max_words - tg.min_words + 1);
    std::vector<std::size_t> ids;
    while (ids.size() < words) {
      const std::size_t w = draw_word(L, lang, rng);
      if (w >= 8) ids.push_back(w);
    }
    const std::int64_t label = static_cast<std::int64_t>(rng.below(2));
    ids[rng.below(ids.size())] = (label == 1 ? 0 : 4) + rng.below(4);
    out.push_back({TaskRow{"", label}, ids});
  }
  return out;
}

/// Writes <out>/<code>/{train,dev,test}.tsv as `text<TAB>label`. For every
/// non-pivot language it also writes test.translated.tsv and
/// dev.translated.tsv (the language's sets rendered in the pivot) and
/// train.translated.tsv (the pivot training set rendered in the language).
inline void generate_task(const CorpusGenConfig& cfg, const TaskGenConfig& tg, const std::string& out_dir) {
  const SyntheticLanguages L = make_languages(cfg);
  std::size_t pivot = 0;
  if (!tg.pivot.empty()) {
    const auto it = std::find(L.codes.begin(), L.codes.end(), tg.pivot);
    if (it == L.codes.end()) throw ConfigError("pivot language " + tg.pivot + " is not in the corpus spec");
    pivot = static_cast<std::size_t>(it - L.codes.begin());
  }
  if (tg.min_words == 0 || tg.max_words < tg.min_words) throw ConfigError("task sentence length range is empty");
  const std::filesystem::path root(out_dir);
  auto write_rows = [&](const std::filesystem::path& p, std::size_t lang,
                        const std::vector<std::pair<TaskRow, std::vector<std::size_t>>>& rows) {
    std::string text;
    for (const auto& [row, ids] : rows) {
      std::vector<std::size_t> mapped;
      for (auto id : ids) mapped.push_back(std::min(id, L.size(lang) - 1));
      text += render(L, lang, mapped) + "\t" + std::to_string(row.label) + "\n";
    }
    write_text_file(p, text);
  };
  const std::pair<const char*, std::size_t> splits[] = {{"train", tg.train}, {"dev", tg.dev}, {"test", tg.test}};
  std::vector<std::vector<std::vector<std::pair<TaskRow, std::vector<std::size_t>>>>> all(L.codes.size());
  for (std::size_t lang = 0; lang < L.codes.size(); ++lang) {
    for (std::size_t s = 0; s < 3; ++s) {
      all[lang].push_back(make_task_rows(L, lang, splits[s].second, tg, s + 1));
      write_rows(root / L.codes[lang] / (std::string(splits[s].first) + ".tsv"), lang, all[lang].back());
    }
  }
  for (std::size_t lang = 0; lang < L.codes.size(); ++lang) {
    if (lang == pivot) continue;
    write_rows(root / L.codes[lang] / "train.translated.tsv", lang, all[pivot][0]);
    write_rows(root / L.codes[lang] / "dev.translated.tsv", pivot, all[lang][1]);
    write_rows(root / L.codes[lang] / "test.translated.tsv", pivot, all[lang][2]);
  }
}

}  // namespace polymlm
