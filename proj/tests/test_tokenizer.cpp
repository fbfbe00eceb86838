// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "polymlm/rng.hpp"
#include "polymlm/tokenizer.hpp"

using namespace polymlm;

namespace {

const std::string kMark(kSpaceMarker);

std::vector<std::string> piece_texts(const UnigramVocab& v, const TokenSequence& s) {
  std::vector<std::string> out;
  for (auto id : s.ids) out.push_back(v.piece(id).text);
  return out;
}

/// Exhaustive oracle: best score over every split of `text` into vocab pieces.
double brute_force_best(const UnigramVocab& v, const std::string& text,
                        std::vector<std::string>* best_pieces = nullptr) {
  const std::size_t n = text.size();
  double best = -std::numeric_limits<double>::infinity();
  for (std::uint32_t cuts = 0; cuts < (1u << (n - 1)); ++cuts) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    for (std::size_t i = 0; i + 1 < n; ++i) {
      if (cuts & (1u << i)) {
        parts.push_back(text.substr(start, i + 1 - start));
        start = i + 1;
      }
    }
    parts.push_back(text.substr(start));
    double s = 0.0;
    bool ok = true;
    for (const auto& p : parts) {
      auto id = v.find(p);
      if (!id) {
        ok = false;
        break;
      }
      s += v.piece(*id).log_prob;
    }
    if (!ok) continue;
    // ties: fewer tokens, then the longer piece at the first difference
    bool better = s > best + 1e-12;
    if (!better && std::fabs(s - best) <= 1e-12 && best_pieces) {
      const auto& cur = *best_pieces;
      if (parts.size() != cur.size()) {
        better = parts.size() < cur.size();
      } else {
        for (std::size_t k = 0; k < parts.size(); ++k) {
          if (parts[k].size() != cur[k].size()) {
            better = parts[k].size() > cur[k].size();
            break;
          }
        }
      }
    }
    if (better) {
      best = std::max(best, s);
      if (best_pieces) *best_pieces = parts;
    }
  }
  return best;
}

}  // namespace

TEST(Viterbi, PrefersWholePieceOverSplit) {
  UnigramVocab v({{"ab", std::log(0.5)}, {"a", std::log(0.25)}, {"b", std::log(0.25)}});
  auto seq = viterbi_encode(v, "ab");
  EXPECT_EQ(piece_texts(v, seq), std::vector<std::string>{"ab"});
  EXPECT_DOUBLE_EQ(segmentation_score(v, seq.ids), std::log(0.5));
}

TEST(Viterbi, SinglePieceTextEncodesToItself) {
  UnigramVocab v({{"hello", -1.0}, {"h", -3.0}, {"e", -3.0}, {"l", -3.0}, {"o", -3.0}});
  auto seq = viterbi_encode(v, "hello");
  ASSERT_EQ(seq.ids.size(), 1u);
  EXPECT_EQ(v.piece(seq.ids[0]).text, "hello");
}

TEST(Viterbi, EmptyTextGivesEmptySequence) {
  UnigramVocab v({{"a", 0.0}});
  EXPECT_TRUE(viterbi_encode(v, "").ids.empty());
}

TEST(Viterbi, TiesPreferFewerTokensThenLeftmostLongest) {
  const double q = std::log(0.25);
  UnigramVocab fewer({{"a", q}, {"b", q}, {"ab", 2 * q}});
  EXPECT_EQ(piece_texts(fewer, viterbi_encode(fewer, "ab")), std::vector<std::string>{"ab"});

  UnigramVocab longest({{"a", q}, {"bc", q}, {"ab", q}, {"c", q}, {"b", q}});
  EXPECT_EQ(piece_texts(longest, viterbi_encode(longest, "abc")),
            (std::vector<std::string>{"ab", "c"}));
}

TEST(Viterbi, MatchesExhaustiveEnumeration) {
  Rng rng(2024);
  const std::vector<std::string> extra{"ab", "ba", "aab", "bb", "cab", "ca", "abc", "cc", "bca"};
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<Piece> ps{{"a", 0}, {"b", 0}, {"c", 0}};
    for (const auto& e : extra) {
      if (rng.uniform() < 0.5) ps.push_back({e, 0});
    }
    for (auto& p : ps) p.log_prob = -0.1 - 5.0 * rng.uniform();
    UnigramVocab v(ps);
    std::string s;
    for (std::size_t i = 0, n = 1 + rng.below(12); i < n; ++i) s.push_back("abc"[rng.below(3)]);
    std::vector<std::string> oracle_pieces;
    const double oracle = brute_force_best(v, s, &oracle_pieces);
    auto seq = viterbi_encode(v, s);
    EXPECT_NEAR(segmentation_score(v, seq.ids), oracle, 1e-12) << s;
    EXPECT_EQ(piece_texts(v, seq), oracle_pieces) << s;
  }
}

TEST(Viterbi, UnknownCharactersBecomeUnkWithOffsets) {
  UnigramVocab v({{"a", -1.0}, {"b", -1.0}});
  auto seq = viterbi_encode(v, "a\xC3\xA9" "b");  // a é b
  ASSERT_EQ(seq.ids.size(), 3u);
  EXPECT_EQ(seq.ids[1], v.specials().unk);
  EXPECT_EQ(seq.offsets[1], (std::pair<std::size_t, std::size_t>{1, 3}));
  EXPECT_EQ(decode(v, seq.ids), "ab");
}

TEST(Viterbi, OffsetsCoverSourceExactly) {
  UnigramVocab v({{"he", -1.0}, {"h", -2.0}, {"e", -2.0}, {kMark + "w", -1.5}, {kMark, -3.0},
                  {"w", -2.0}, {"\xC3\xBC", -2.0}});
  const std::string text = "he w\xC3\xBC  hew";
  auto seq = viterbi_encode(v, text);
  std::size_t pos = 0;
  for (auto [b, e] : seq.offsets) {
    EXPECT_EQ(b, pos);
    EXPECT_GT(e, b);
    pos = e;
  }
  EXPECT_EQ(pos, text.size());
  EXPECT_EQ(decode(v, seq.ids), text);
}

TEST(Decode, EdgeCases) {
  UnigramVocab v({{"a", -1.0}});
  EXPECT_EQ(decode(v, std::vector<std::int32_t>{}), "");
  const std::int32_t a = *v.find("a");
  EXPECT_EQ(decode(v, std::vector<std::int32_t>{v.specials().pad, a, v.specials().eos, a}), "aa");
  EXPECT_THROW(decode(v, std::vector<std::int32_t>{99}), IndexError);
}

TEST(Vocab, RejectsDuplicatesAndEmptyPieces) {
  EXPECT_THROW(UnigramVocab({{"a", -1.0}, {"a", -2.0}}), ConfigError);
  EXPECT_THROW(UnigramVocab({{"", -1.0}}), ConfigError);
  EXPECT_THROW(UnigramVocab({{"<mask>", -1.0}}), ConfigError);
}

TEST(TrainUnigram, RepeatedSymbolKeepsLongPieceAfterPruning) {
  const std::vector<std::string> corpus{"aaaa aaaa"};
  // values from an mpmath brute-force replay of the same EM/prune schedule
  auto v = train_unigram(corpus, {.target_size = 8});
  ASSERT_EQ(v.size(), 8u);
  ASSERT_TRUE(v.find("a") && v.find("aaaa") && v.find(kMark));
  EXPECT_NEAR(v.piece(*v.find("a")).log_prob, -8.0067008454403547854, 1e-9);
  EXPECT_NEAR(v.piece(*v.find(kMark)).log_prob, -1.0989455664582177334, 1e-9);
  EXPECT_NEAR(v.piece(*v.find("aaaa")).log_prob, -0.40579838589829092395, 1e-9);
  EXPECT_GT(v.piece(*v.find("aaaa")).log_prob, v.piece(*v.find("a")).log_prob);
}

TEST(TrainUnigram, TargetBelowAlphabetIsConfigError) {
  const std::vector<std::string> corpus{"aaaa aaaa"};
  EXPECT_THROW(train_unigram(corpus, {.target_size = 6}), ConfigError);
  EXPECT_THROW(train_unigram(std::vector<std::string>{}, {.target_size = 100}), ConfigError);
}

TEST(TrainUnigram, UniqueCharactersGiveUniformAlphabet) {
  const std::vector<std::string> corpus{"abcdef"};
  auto v = train_unigram(corpus, {.target_size = 50});
  ASSERT_EQ(v.size(), 6 + kNumSpecials);
  for (std::size_t i = kNumSpecials; i < v.size(); ++i) {
    EXPECT_NEAR(v.pieces()[i].log_prob, std::log(1.0 / 6.0), 1e-12);
  }
}

namespace {

std::vector<std::string> random_corpus(std::uint64_t seed, std::size_t lines) {
  Rng rng(seed);
  const std::vector<std::string> syll{"ka", "to", "ri", "mu", "se", "na", "\xC3\xA9l", "qu"};
  std::vector<std::string> out;
  for (std::size_t l = 0; l < lines; ++l) {
    std::string line;
    const std::size_t words = 3 + rng.below(6);
    for (std::size_t w = 0; w < words; ++w) {
      if (w) line.push_back(' ');
      const std::size_t parts = 1 + rng.below(3);
      for (std::size_t p = 0; p < parts; ++p) line += syll[rng.below(std::min<std::uint64_t>(syll.size(), 2 + w))];
    }
    out.push_back(line);
  }
  return out;
}

}  // namespace

TEST(TrainUnigram, ProbabilitiesNormalizedAndAlphabetCovered) {
  const auto corpus = random_corpus(5, 300);
  auto v = train_unigram(corpus, {.target_size = 60});
  EXPECT_LE(v.size(), 60u);
  EXPECT_NEAR(v.total_probability(), 1.0, 1e-6);
  for (const auto& line : corpus) {
    auto seq = viterbi_encode(v, line);
    for (auto id : seq.ids) EXPECT_NE(id, v.specials().unk);
    EXPECT_EQ(decode(v, seq.ids), line);
    // every piece carries the marker only at its front
    for (auto id : seq.ids) {
      const auto& t = v.piece(id).text;
      EXPECT_EQ(t.find(kMark, 1), std::string::npos) << t;
    }
  }
}

TEST(TrainUnigram, DeterministicFileBytes) {
  const auto corpus = random_corpus(9, 200);
  auto a = serialize_vocab(train_unigram(corpus, {.target_size = 40}));
  auto b = serialize_vocab(train_unigram(corpus, {.target_size = 40}));
  EXPECT_EQ(a, b);
}

TEST(VocabFile, RoundTripsBitExactly) {
  UnigramVocab v({{"tab\there", -0.1}, {"back\\slash", -1e-300}, {kMark + "x", -0.3333333333333333},
                  {"nl\nx", -123.456789012345678}});
  const std::string bytes = serialize_vocab(v);
  auto back = parse_vocab(bytes);
  EXPECT_EQ(back, v);
  EXPECT_EQ(serialize_vocab(back), bytes);
}

TEST(VocabFile, RejectsMalformedInput) {
  EXPECT_THROW(parse_vocab(""), DataError);
  EXPECT_THROW(parse_vocab("#polymlm-unigram-vocab\t2\t5\n"), DataError);
  UnigramVocab v({{"a", -1.0}});
  std::string s = serialize_vocab(v);
  s.replace(s.find("\t6\n"), 3, "\t7\n");
  EXPECT_THROW(parse_vocab(s), DataError);
}

TEST(Viterbi, AddingAPieceNeverLowersTheOptimum) {
  Rng rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Piece> ps{{"a", -1.0 - rng.uniform()}, {"b", -1.0 - rng.uniform()},
                          {"ab", -2.0 - rng.uniform()}};
    UnigramVocab small(ps);
    ps.push_back({"bab", -3.0 * rng.uniform()});
    UnigramVocab big(ps);
    std::string s;
    for (int i = 0; i < 12; ++i) s.push_back("ab"[rng.below(2)]);
    const double before = segmentation_score(small, viterbi_encode(small, s).ids);
    const double after = segmentation_score(big, viterbi_encode(big, s).ids);
    EXPECT_GE(after, before - 1e-12);
  }
}
