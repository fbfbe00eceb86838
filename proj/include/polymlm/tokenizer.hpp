// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "polymlm/error.hpp"

namespace polymlm {

/// Visible stand-in for the space character inside pieces (U+2581).
inline constexpr std::string_view kSpaceMarker = "\xE2\x96\x81";

struct SpecialIds {
  std::int32_t pad = 0;
  std::int32_t unk = 1;
  std::int32_t bos = 2;
  std::int32_t eos = 3;
  std::int32_t mask = 4;
};

inline constexpr std::size_t kNumSpecials = 5;
inline constexpr std::string_view kSpecialPieces[kNumSpecials] = {"<pad>", "<unk>", "<s>",
                                                                  "</s>", "<mask>"};

struct Piece {
  std::string text;
  double log_prob = 0.0;
};

namespace utf8 {

/// Byte length of the character starting at s[i]. Malformed sequences are
/// consumed one byte at a time.
inline std::size_t char_len(std::string_view s, std::size_t i) {
  const auto c = static_cast<unsigned char>(s[i]);
  std::size_t n = 1;
  if (c >= 0xF0 && c < 0xF8) n = 4;
  else if (c >= 0xE0) n = c < 0xF0 ? 3 : 1;
  else if (c >= 0xC0) n = 2;
  if (i + n > s.size()) return 1;
  for (std::size_t k = 1; k < n; ++k) {
    if ((static_cast<unsigned char>(s[i + k]) & 0xC0) != 0x80) return 1;
  }
  return n;
}

inline std::size_t count_chars(std::string_view s) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < s.size(); i += char_len(s, i)) ++n;
  return n;
}

}  // namespace utf8

/// Text with spaces replaced by the marker, indexed by character.
struct NormalizedText {
  std::string text;
  std::vector<std::size_t> norm_begin;  // size chars + 1
  std::vector<std::size_t> src_begin;   // size chars + 1

  std::size_t chars() const { return norm_begin.size() - 1; }
  std::string_view span(std::size_t i, std::size_t j) const {
    return std::string_view(text).substr(norm_begin[i], norm_begin[j] - norm_begin[i]);
  }
};

inline NormalizedText normalize(std::string_view src) {
  NormalizedText n;
  n.text.reserve(src.size() + src.size() / 2);
  for (std::size_t i = 0; i < src.size();) {
    const std::size_t len = utf8::char_len(src, i);
    n.norm_begin.push_back(n.text.size());
    n.src_begin.push_back(i);
    if (len == 1 && src[i] == ' ') n.text.append(kSpaceMarker);
    else n.text.append(src.substr(i, len));
    i += len;
  }
  n.norm_begin.push_back(n.text.size());
  n.src_begin.push_back(src.size());
  return n;
}

struct TokenSequence {
  std::vector<std::int32_t> ids;
  /// Byte span [first, second) of each token in the source text.
  std::vector<std::pair<std::size_t, std::size_t>> offsets;
};

/// Subword pieces with unigram log-probabilities. Special tokens occupy the
/// first ids and never match text.
class UnigramVocab {
 public:
  UnigramVocab() : UnigramVocab(std::vector<Piece>{}) {}

  /// `pieces` are the non-special pieces; specials are prepended.
  explicit UnigramVocab(std::vector<Piece> pieces) {
    pieces_.reserve(pieces.size() + kNumSpecials);
    for (auto s : kSpecialPieces) pieces_.push_back(Piece{std::string(s), 0.0});
    for (auto& p : pieces) pieces_.push_back(std::move(p));
    index_.reserve(pieces_.size());
    for (std::size_t i = kNumSpecials; i < pieces_.size(); ++i) {
      const auto& t = pieces_[i].text;
      if (t.empty()) throw ConfigError("vocabulary piece must be non-empty");
      if (!std::isfinite(pieces_[i].log_prob)) {
        throw ConfigError("vocabulary piece '" + t + "' has non-finite log-probability");
      }
      for (auto s : kSpecialPieces) {
        if (t == s) throw ConfigError("vocabulary piece collides with special token " + t);
      }
      if (!index_.emplace(t, static_cast<std::int32_t>(i)).second) {
        throw ConfigError("duplicate vocabulary piece '" + t + "'");
      }
      max_chars_ = std::max(max_chars_, utf8::count_chars(t));
      min_log_prob_ = std::min(min_log_prob_, pieces_[i].log_prob);
    }
    if (pieces_.size() == kNumSpecials) min_log_prob_ = 0.0;
  }

  std::size_t size() const { return pieces_.size(); }
  const Piece& piece(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= pieces_.size()) {
      throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(pieces_.size()));
    }
    return pieces_[static_cast<std::size_t>(id)];
  }
  const std::vector<Piece>& pieces() const { return pieces_; }
  const SpecialIds& specials() const { return specials_; }
  bool is_special(std::int32_t id) const { return id >= 0 && id < static_cast<std::int32_t>(kNumSpecials); }
  std::size_t max_piece_chars() const { return max_chars_; }

  std::optional<std::int32_t> find(std::string_view piece) const {
    auto it = index_.find(piece);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  /// Score charged for an out-of-vocabulary character.
  double unk_log_prob() const { return min_log_prob_ - 10.0; }

  /// Sum of piece probabilities, specials excluded.
  double total_probability() const {
    double s = 0.0;
    for (std::size_t i = kNumSpecials; i < pieces_.size(); ++i) s += std::exp(pieces_[i].log_prob);
    return s;
  }

  friend bool operator==(const UnigramVocab& a, const UnigramVocab& b) {
    if (a.pieces_.size() != b.pieces_.size()) return false;
    for (std::size_t i = 0; i < a.pieces_.size(); ++i) {
      if (a.pieces_[i].text != b.pieces_[i].text || a.pieces_[i].log_prob != b.pieces_[i].log_prob) {
        return false;
      }
    }
    return true;
  }

 private:
  struct StringHash {
    using is_transparent = void;
    std::size_t operator()(std::string_view s) const { return std::hash<std::string_view>{}(s); }
  };

  std::vector<Piece> pieces_;
  std::unordered_map<std::string, std::int32_t, StringHash, std::equal_to<>> index_;
  SpecialIds specials_;
  std::size_t max_chars_ = 1;
  double min_log_prob_ = 0.0;
};

// ---------------------------------------------------------------------------
// Viterbi segmentation

namespace detail {

/// Scores closer than this (relative) are ties; the same pieces summed in a
/// different order can differ in the last bits.
inline constexpr double kTieTolerance = 1e-12;

inline bool improves(double s, std::size_t tok, double best, std::size_t best_tok) {
  if (!std::isfinite(best)) return std::isfinite(s);
  if (std::fabs(s - best) <= kTieTolerance * std::max(1.0, std::fabs(s))) return tok < best_tok;
  return s > best;
}

struct SegmentChoice {
  double score = -std::numeric_limits<double>::infinity();
  std::size_t tokens = 0;
  std::size_t next = 0;
  std::int32_t id = -1;
};

/// Best segmentation of every suffix. Among equal scores, fewer tokens win,
/// then a longer first piece. `skip` excludes one piece id.
inline std::vector<SegmentChoice> viterbi_suffixes(const UnigramVocab& vocab,
                                                   const NormalizedText& nt,
                                                   std::int32_t skip = -1) {
  const std::size_t n = nt.chars();
  std::vector<SegmentChoice> best(n + 1);
  best[n].score = 0.0;
  const std::size_t maxlen = vocab.max_piece_chars();
  for (std::size_t i = n; i-- > 0;) {
    SegmentChoice& b = best[i];
    bool single_covered = false;
    for (std::size_t len = std::min(maxlen, n - i); len >= 1; --len) {
      const std::size_t j = i + len;
      auto id = vocab.find(nt.span(i, j));
      if (!id) continue;
      if (len == 1) single_covered = true;
      if (*id == skip || !std::isfinite(best[j].score)) continue;
      const double s = vocab.piece(*id).log_prob + best[j].score;
      const std::size_t tok = best[j].tokens + 1;
      // longer candidates are visited first, so strict comparisons keep
      // leftmost-longest among full ties
      if (improves(s, tok, b.score, b.tokens)) {
        b = SegmentChoice{s, tok, j, *id};
      }
    }
    if (!single_covered && std::isfinite(best[i + 1].score)) {
      const double s = vocab.unk_log_prob() + best[i + 1].score;
      const std::size_t tok = best[i + 1].tokens + 1;
      if (improves(s, tok, b.score, b.tokens)) {
        b = SegmentChoice{s, tok, i + 1, vocab.specials().unk};
      }
    }
  }
  return best;
}

}  // namespace detail

/// Maximum-likelihood segmentation of raw text. Characters absent from the
/// vocabulary become unk tokens that keep their source offsets.
inline TokenSequence viterbi_encode(const UnigramVocab& vocab, std::string_view text) {
  TokenSequence out;
  if (text.empty()) return out;
  const NormalizedText nt = normalize(text);
  const auto best = detail::viterbi_suffixes(vocab, nt);
  for (std::size_t i = 0; i < nt.chars();) {
    const auto& c = best[i];
    out.ids.push_back(c.id);
    out.offsets.emplace_back(nt.src_begin[i], nt.src_begin[c.next]);
    i = c.next;
  }
  return out;
}

/// Total log-probability of a segmentation.
inline double segmentation_score(const UnigramVocab& vocab, std::span<const std::int32_t> ids) {
  double s = 0.0;
  for (std::size_t k = ids.size(); k-- > 0;) {
    s = (ids[k] == vocab.specials().unk ? vocab.unk_log_prob() : vocab.piece(ids[k]).log_prob) + s;
  }
  return s;
}

/// Concatenates pieces, restoring spaces; special tokens render as nothing.
inline std::string decode(const UnigramVocab& vocab, std::span<const std::int32_t> ids) {
  std::string out;
  for (auto id : ids) {
    const auto& p = vocab.piece(id);
    if (vocab.is_special(id)) continue;
    std::string_view t = p.text;
    for (std::size_t pos = 0; pos < t.size();) {
      if (t.substr(pos, kSpaceMarker.size()) == kSpaceMarker) {
        out.push_back(' ');
        pos += kSpaceMarker.size();
      } else {
        out.push_back(t[pos++]);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct UnigramTrainerOptions {
  /// Final vocabulary size, special tokens included.
  std::size_t target_size = 8000;
  std::size_t seed_multiplier = 10;
  double prune_fraction = 0.25;
  std::size_t em_iterations = 4;
  std::size_t max_piece_chars = 16;
};

namespace detail {

inline double log_add(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

/// Splits normalized text before every space marker so pieces can only
/// carry a marker as their first character.
inline std::vector<std::string> split_words(std::string_view line) {
  std::vector<std::string> words;
  const NormalizedText nt = normalize(line);
  std::size_t start = 0;
  for (std::size_t i = 1; i <= nt.chars(); ++i) {
    if (i == nt.chars() || nt.span(i, i + 1) == kSpaceMarker) {
      words.emplace_back(nt.span(start, i));
      start = i;
    }
  }
  return words;
}

struct TrainerState {
  std::vector<std::string> pieces;
  std::vector<double> log_probs;
  std::vector<bool> is_char;
};

inline UnigramVocab to_vocab(const TrainerState& st) {
  std::vector<Piece> ps;
  ps.reserve(st.pieces.size());
  for (std::size_t i = 0; i < st.pieces.size(); ++i) ps.push_back({st.pieces[i], st.log_probs[i]});
  return UnigramVocab(std::move(ps));
}

/// One EM round: expected piece counts under the current model via
/// forward-backward over each distinct word, then renormalization.
inline void em_step(TrainerState& st, const std::vector<std::pair<std::string, double>>& words) {
  const UnigramVocab vocab = to_vocab(st);
  const double ninf = -std::numeric_limits<double>::infinity();
  std::vector<double> counts(st.pieces.size(), 0.0);
  const std::size_t maxlen = vocab.max_piece_chars();
  for (const auto& [word, freq] : words) {
    const NormalizedText nt = normalize(word);
    const std::size_t n = nt.chars();
    std::vector<double> alpha(n + 1, ninf), beta(n + 1, ninf);
    alpha[0] = 0.0;
    for (std::size_t j = 1; j <= n; ++j) {
      for (std::size_t len = 1; len <= std::min(maxlen, j); ++len) {
        auto id = vocab.find(nt.span(j - len, j));
        if (id) alpha[j] = log_add(alpha[j], alpha[j - len] + vocab.piece(*id).log_prob);
      }
    }
    beta[n] = 0.0;
    for (std::size_t i = n; i-- > 0;) {
      for (std::size_t len = 1; len <= std::min(maxlen, n - i); ++len) {
        auto id = vocab.find(nt.span(i, i + len));
        if (id) beta[i] = log_add(beta[i], beta[i + len] + vocab.piece(*id).log_prob);
      }
    }
    const double z = alpha[n];
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t len = 1; len <= std::min(maxlen, n - i); ++len) {
        auto id = vocab.find(nt.span(i, i + len));
        if (!id) continue;
        const double lp = alpha[i] + vocab.piece(*id).log_prob + beta[i + len] - z;
        counts[static_cast<std::size_t>(*id) - kNumSpecials] += freq * std::exp(lp);
      }
    }
  }
  // single characters keep a small floor so coverage never lapses
  constexpr double kCharFloor = 1e-3;
  constexpr double kPieceFloor = 1e-12;
  double total = 0.0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    counts[i] = std::max(counts[i], st.is_char[i] ? kCharFloor : kPieceFloor);
    total += counts[i];
  }
  for (std::size_t i = 0; i < counts.size(); ++i) st.log_probs[i] = std::log(counts[i] / total);
}

/// Drops the multi-character pieces whose removal costs the least corpus
/// likelihood, keeping at least `keep` pieces.
inline void prune(TrainerState& st, const std::vector<std::pair<std::string, double>>& words,
                  std::size_t keep) {
  const UnigramVocab vocab = to_vocab(st);
  std::vector<double> freq(st.pieces.size(), 0.0);
  for (const auto& [word, f] : words) {
    const NormalizedText nt = normalize(word);
    const auto best = viterbi_suffixes(vocab, nt);
    for (std::size_t i = 0; i < nt.chars(); i = best[i].next) {
      freq[static_cast<std::size_t>(best[i].id) - kNumSpecials] += f;
    }
  }
  std::vector<std::pair<double, std::size_t>> loss;
  for (std::size_t i = 0; i < st.pieces.size(); ++i) {
    if (st.is_char[i]) continue;
    double delta = 0.0;
    if (freq[i] > 0.0) {
      const NormalizedText nt = normalize(st.pieces[i]);
      const auto alt = viterbi_suffixes(vocab, nt, static_cast<std::int32_t>(i + kNumSpecials));
      delta = freq[i] * (st.log_probs[i] - alt[0].score);
    }
    loss.emplace_back(delta, i);
  }
  std::sort(loss.begin(), loss.end(), [&](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    return st.pieces[a.second] < st.pieces[b.second];
  });
  const std::size_t removable = st.pieces.size() > keep ? st.pieces.size() - keep : 0;
  std::vector<bool> drop(st.pieces.size(), false);
  for (std::size_t k = 0; k < std::min(removable, loss.size()); ++k) drop[loss[k].second] = true;
  TrainerState next;
  for (std::size_t i = 0; i < st.pieces.size(); ++i) {
    if (drop[i]) continue;
    next.pieces.push_back(st.pieces[i]);
    next.log_probs.push_back(st.log_probs[i]);
    next.is_char.push_back(st.is_char[i]);
  }
  st = std::move(next);
}

}  // namespace detail

/// Trains a unigram language-model vocabulary on raw text lines: frequent
/// substrings seed the candidate set, EM re-estimates piece probabilities,
/// and the least useful pieces are pruned until the target size is met.
/// Every character seen in the corpus stays in the vocabulary.
inline UnigramVocab train_unigram(std::span<const std::string> lines,
                                  const UnigramTrainerOptions& opt) {
  if (opt.prune_fraction <= 0.0 || opt.prune_fraction >= 1.0) {
    throw ConfigError("prune_fraction must lie in (0, 1)");
  }
  if (opt.em_iterations == 0 || opt.max_piece_chars == 0 || opt.seed_multiplier == 0) {
    throw ConfigError("em_iterations, max_piece_chars and seed_multiplier must be positive");
  }
  std::map<std::string, double> word_freq;
  for (const auto& line : lines) {
    for (auto& w : detail::split_words(line)) word_freq[std::move(w)] += 1.0;
  }
  if (word_freq.empty()) throw ConfigError("tokenizer corpus is empty");
  std::vector<std::pair<std::string, double>> words(word_freq.begin(), word_freq.end());

  std::map<std::string, double> chars;
  std::map<std::string, double> substrings;
  for (const auto& [w, f] : words) {
    const NormalizedText nt = normalize(w);
    for (std::size_t i = 0; i < nt.chars(); ++i) {
      chars[std::string(nt.span(i, i + 1))] += f;
      for (std::size_t len = 2; len <= std::min(opt.max_piece_chars, nt.chars() - i); ++len) {
        substrings[std::string(nt.span(i, i + len))] += f;
      }
    }
  }
  if (opt.target_size < chars.size() + kNumSpecials) {
    throw ConfigError("target vocabulary size " + std::to_string(opt.target_size) +
                      " is smaller than the alphabet (" + std::to_string(chars.size()) +
                      ") plus " + std::to_string(kNumSpecials) + " special tokens");
  }
  const std::size_t target = opt.target_size - kNumSpecials;

  std::vector<std::pair<std::string, double>> cands;
  for (auto& [s, f] : substrings) {
    if (f >= 2.0) cands.emplace_back(s, f);
  }
  std::sort(cands.begin(), cands.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  const std::size_t seed_cap = opt.seed_multiplier * opt.target_size;
  if (cands.size() > seed_cap) cands.resize(seed_cap);

  detail::TrainerState st;
  double total = 0.0;
  for (const auto& [c, f] : chars) total += f;
  for (const auto& [s, f] : cands) total += f;
  for (const auto& [c, f] : chars) {
    st.pieces.push_back(c);
    st.log_probs.push_back(std::log(f / total));
    st.is_char.push_back(true);
  }
  for (const auto& [s, f] : cands) {
    st.pieces.push_back(s);
    st.log_probs.push_back(std::log(f / total));
    st.is_char.push_back(false);
  }

  for (;;) {
    for (std::size_t it = 0; it < opt.em_iterations; ++it) detail::em_step(st, words);
    if (st.pieces.size() <= target) break;
    const auto shrunk = static_cast<std::size_t>(
        std::ceil(static_cast<double>(st.pieces.size()) * (1.0 - opt.prune_fraction)));
    detail::prune(st, words, std::max(target, std::min(shrunk, st.pieces.size() - 1)));
  }

  // order: descending probability, then text, for a stable file layout
  std::vector<std::size_t> order(st.pieces.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (st.log_probs[a] != st.log_probs[b]) return st.log_probs[a] > st.log_probs[b];
    return st.pieces[a] < st.pieces[b];
  });
  std::vector<Piece> out;
  out.reserve(order.size());
  for (auto i : order) out.push_back({st.pieces[i], st.log_probs[i]});
  return UnigramVocab(std::move(out));
}

// ---------------------------------------------------------------------------
// Vocabulary file: header line, then one `piece<TAB>log_prob` per line with
// the specials first. Backslash, tab, CR and LF inside pieces are escaped.

inline constexpr std::string_view kVocabMagic = "#polymlm-unigram-vocab";
inline constexpr int kVocabFormatVersion = 1;

namespace detail {

inline std::string escape_piece(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\t': out += "\\t"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

inline std::string unescape_piece(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\' || i + 1 == s.size()) {
      out.push_back(s[i]);
      continue;
    }
    const char n = s[++i];
    out.push_back(n == 't' ? '\t' : n == 'n' ? '\n' : n == 'r' ? '\r' : n);
  }
  return out;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline std::string serialize_vocab(const UnigramVocab& vocab) {
  std::string out;
  out += std::string(kVocabMagic) + "\t" + std::to_string(kVocabFormatVersion) + "\t" +
         std::to_string(vocab.size()) + "\n";
  for (const auto& p : vocab.pieces()) {
    out += detail::escape_piece(p.text) + "\t" + detail::format_double(p.log_prob) + "\n";
  }
  return out;
}

inline UnigramVocab parse_vocab(std::string_view text, const std::string& origin = "<memory>") {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line)) throw DataError("vocab file " + origin + " is empty");
  std::size_t declared = 0;
  {
    std::istringstream h(line);
    std::string magic;
    int version = 0;
    if (!(h >> magic >> version >> declared) || magic != kVocabMagic) {
      throw DataError("vocab file " + origin + " has a malformed header");
    }
    if (version != kVocabFormatVersion) {
      throw DataError("vocab file " + origin + " has unsupported version " + std::to_string(version));
    }
  }
  std::vector<Piece> pieces;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos) throw DataError("vocab file " + origin + ": line without tab");
    std::string piece = detail::unescape_piece(std::string_view(line).substr(0, tab));
    char* end = nullptr;
    const std::string num = line.substr(tab + 1);
    const double lp = std::strtod(num.c_str(), &end);
    if (end == num.c_str()) throw DataError("vocab file " + origin + ": bad log-probability");
    if (row < kNumSpecials) {
      if (piece != kSpecialPieces[row]) {
        throw DataError("vocab file " + origin + ": expected special token " +
                        std::string(kSpecialPieces[row]) + " at row " + std::to_string(row));
      }
    } else {
      pieces.push_back({std::move(piece), lp});
    }
    ++row;
  }
  if (row != declared) {
    throw DataError("vocab file " + origin + " declares " + std::to_string(declared) +
                    " pieces but holds " + std::to_string(row));
  }
  return UnigramVocab(std::move(pieces));
}

inline void save_vocab(const UnigramVocab& vocab, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write vocab file " + path);
  const std::string s = serialize_vocab(vocab);
  f.write(s.data(), static_cast<std::streamsize>(s.size()));
  if (!f) throw IoError("failed writing vocab file " + path);
}

inline UnigramVocab load_vocab(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read vocab file " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_vocab(ss.str(), path);
}

}  // namespace polymlm
