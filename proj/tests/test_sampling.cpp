// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>

#include "polymlm/sampling.hpp"

using namespace polymlm;
namespace fs = std::filesystem;

namespace {

CorpusCatalog counts_catalog(std::vector<std::uint64_t> counts) {
  CorpusCatalog c;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    c.languages.push_back({"l" + std::to_string(i), counts[i], ""});
  }
  return c;
}

std::shared_ptr<const UnigramVocab> small_vocab() {
  std::vector<Piece> pieces;
  for (const char* p : {"\xe2\x96\x81", "a", "b", "c", "d", "e", "\xe2\x96\x81" "ab", "cd"}) {
    pieces.push_back({p, -2.0});
  }
  return std::make_shared<const UnigramVocab>(pieces);
}

struct TempCorpus {
  fs::path root;
  explicit TempCorpus(const std::string& name) {
    root = fs::temp_directory_path() / ("polymlm_sampling_" + name);
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~TempCorpus() { fs::remove_all(root); }
  void write(const std::string& rel, const std::string& text) {
    fs::create_directories((root / rel).parent_path());
    std::ofstream(root / rel) << text;
  }
};

}  // namespace

TEST(LanguageDistribution, SmoothedTwoLanguageValue) {
  const auto q = language_distribution(counts_catalog({100, 1}), {0.3, 0});
  EXPECT_NEAR(q[0], 0.7992399910868982532373769, 1e-12);
  EXPECT_NEAR(q[1], 0.2007600089131017467626231, 1e-12);
}

TEST(LanguageDistribution, AlphaOneIsIdentity) {
  const auto q = language_distribution(counts_catalog({7, 3, 0, 10}), {1.0, 0});
  EXPECT_EQ(q[0], 7.0 / 20.0);
  EXPECT_EQ(q[1], 3.0 / 20.0);
  EXPECT_EQ(q[2], 0.0);
  EXPECT_EQ(q[3], 10.0 / 20.0);
}

TEST(LanguageDistribution, AlphaZeroIsUniformOverNonEmpty) {
  const auto q = language_distribution(counts_catalog({5, 0, 1000000, 1}), {0.0, 0});
  EXPECT_EQ(q[0], 1.0 / 3.0);
  EXPECT_EQ(q[1], 0.0);
  EXPECT_EQ(q[2], 1.0 / 3.0);
  EXPECT_EQ(q[3], 1.0 / 3.0);
}

TEST(LanguageDistribution, Errors) {
  EXPECT_THROW(language_distribution(counts_catalog({0, 0}), {0.3, 0}), ConfigError);
  EXPECT_THROW(language_distribution(counts_catalog({1}), {1.5, 0}), ConfigError);
  EXPECT_THROW(language_distribution(counts_catalog({1}), {-0.1, 0}), ConfigError);
  CorpusCatalog dup = counts_catalog({1, 2});
  dup.languages[1].code = dup.languages[0].code;
  EXPECT_THROW(language_distribution(dup, {0.3, 0}), ConfigError);
}

TEST(LanguageDistribution, Properties) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 2 + rng.below(8);
    std::vector<std::uint64_t> n(k);
    for (auto& v : n) v = 1 + rng.below(1000000);
    const double alpha = rng.uniform();
    const auto q = language_distribution(counts_catalog(n), {alpha, 0});
    EXPECT_NEAR(std::accumulate(q.begin(), q.end(), 0.0), 1.0, 1e-12);

    const std::uint64_t c = 1 + rng.below(1000);
    auto scaled = n;
    for (auto& v : scaled) v *= c;
    const auto qs = language_distribution(counts_catalog(scaled), {alpha, 0});
    for (std::size_t i = 0; i < k; ++i) EXPECT_NEAR(q[i], qs[i], 1e-12);

    const double total = std::accumulate(n.begin(), n.end(), 0.0);
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        if (n[i] <= n[j]) continue;
        EXPECT_GT(q[i], q[j]);
        EXPECT_LT(q[i] / q[j], (n[i] / total) / (n[j] / total));
      }
    }
  }
}

TEST(SampleStream, LanguageFrequenciesMatchDistribution) {
  TempCorpus corpus("freq");
  corpus.write("en/0.txt", "ab cd\n");
  corpus.write("fr/0.txt", "cd ab e\n");
  CorpusCatalog cat;
  cat.languages.push_back({"en", 4, (corpus.root / "en").string()});
  cat.languages.push_back({"fr", 1, (corpus.root / "fr").string()});
  // alpha = 1 turns the counts into q = [0.8, 0.2].
  MultilingualStream s(cat, {1.0, 42}, small_vocab(), 4);
  const int n = 100000;
  int en = 0;
  for (int i = 0; i < n; ++i) en += s.next().language == 0 ? 1 : 0;
  const double sigma = std::sqrt(n * 0.8 * 0.2);
  EXPECT_LT(std::fabs(en - 0.8 * n), 3.0 * sigma);
}

TEST(SampleStream, SingleLanguageAndDeterminism) {
  TempCorpus corpus("single");
  corpus.write("en/0.txt", "ab cd e\nabc\n");
  CorpusCatalog cat;
  cat.languages.push_back({"en", 4, (corpus.root / "en").string()});
  const auto a = sample_stream(cat, {0.3, 9}, small_vocab(), 5, 50);
  const auto b = sample_stream(cat, {0.3, 9}, small_vocab(), 5, 50);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].code, "en");
    EXPECT_EQ(a[i].ids.size(), 5u);
    EXPECT_EQ(a[i].ids, b[i].ids);
  }
}

TEST(SampleStream, SameSeedSameLanguageSequence) {
  TempCorpus corpus("seed");
  corpus.write("en/0.txt", "ab\n");
  corpus.write("fr/0.txt", "cd\n");
  CorpusCatalog cat;
  cat.languages.push_back({"en", 10, (corpus.root / "en").string()});
  cat.languages.push_back({"fr", 3, (corpus.root / "fr").string()});
  const auto a = sample_stream(cat, {0.3, 5}, small_vocab(), 3, 500);
  const auto b = sample_stream(cat, {0.3, 5}, small_vocab(), 3, 500);
  const auto c = sample_stream(cat, {0.3, 6}, small_vocab(), 3, 500);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].language, b[i].language);
    EXPECT_EQ(a[i].ids, b[i].ids);
    differs = differs || a[i].language != c[i].language;
  }
  EXPECT_TRUE(differs);
}

TEST(SampleStream, ChunkerConservesTokensAcrossShards) {
  TempCorpus corpus("conserve");
  corpus.write("en/0.txt", "ab cd e\n\nabcde dd\n");
  corpus.write("en/1.txt", "e e e\nab\n");
  CorpusCatalog cat;
  cat.languages.push_back({"en", 9, (corpus.root / "en").string()});
  auto vocab = small_vocab();
  MultilingualStream s(cat, {0.3, 1}, vocab, 7);

  std::vector<std::int32_t> expected;
  for (const char* doc : {"ab cd e", "abcde dd", "e e e", "ab"}) {
    const auto ids = viterbi_encode(*vocab, doc).ids;
    expected.insert(expected.end(), ids.begin(), ids.end());
    expected.push_back(vocab->specials().eos);
  }
  EXPECT_EQ(s.epoch_tokens(0), expected);

  // Emit whole epochs' worth of windows; the concatenation must replay the
  // epoch stream exactly, with the wrap carried across window boundaries.
  const std::size_t windows = expected.size();  // 7 windows of T=7 = 7 epochs
  std::vector<std::int32_t> emitted;
  for (std::size_t i = 0; i < windows; ++i) {
    const auto w = s.next().ids;
    ASSERT_EQ(w.size(), 7u);
    emitted.insert(emitted.end(), w.begin(), w.end());
  }
  ASSERT_EQ(emitted.size(), expected.size() * 7);
  for (std::size_t i = 0; i < emitted.size(); ++i) {
    EXPECT_EQ(emitted[i], expected[i % expected.size()]) << "position " << i;
  }
}

TEST(SampleStream, Errors) {
  CorpusCatalog cat;
  cat.languages.push_back({"xx", 5, "/nonexistent/polymlm/shard.txt"});
  MultilingualStream s(cat, {0.3, 0}, small_vocab(), 4);
  try {
    s.next();
    FAIL() << "expected a data error";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/polymlm/shard.txt"), std::string::npos);
  }
  EXPECT_THROW(MultilingualStream(cat, {0.3, 0}, small_vocab(), 1), ConfigError);
}

TEST(Catalog, RoundTripAndRelativePaths) {
  TempCorpus corpus("catalog");
  corpus.write("catalog.tsv", "#polymlm-catalog\t1\nen\t12\ten\nsw\t0\t/abs/sw\n");
  const auto cat = load_catalog((corpus.root / "catalog.tsv").string());
  ASSERT_EQ(cat.languages.size(), 2u);
  EXPECT_EQ(cat.languages[0].code, "en");
  EXPECT_EQ(cat.languages[0].token_count, 12u);
  EXPECT_EQ(fs::path(cat.languages[0].path), corpus.root / "en");
  EXPECT_EQ(cat.languages[1].path, "/abs/sw");
  const auto again = parse_catalog(serialize_catalog(cat), "", "mem");
  EXPECT_EQ(again.languages[0].path, cat.languages[0].path);

  EXPECT_THROW(parse_catalog("en\t1\tx\n", "", "mem"), DataError);
  EXPECT_THROW(parse_catalog("#polymlm-catalog\t2\n", "", "mem"), DataError);
  EXPECT_THROW(parse_catalog("#polymlm-catalog\t1\nen\tmany\tx\n", "", "mem"), DataError);
  EXPECT_THROW(parse_catalog("#polymlm-catalog\t1\nen\t0\tx\n", "", "mem"), ConfigError);
}

TEST(MlmMask, SelectionAndCorruptionStatistics) {
  auto vocab = small_vocab();
  Rng data(3);
  std::vector<std::vector<std::int32_t>> rows(1000, std::vector<std::int32_t>(1000));
  for (auto& r : rows)
    for (auto& v : r) v = static_cast<std::int32_t>(kNumSpecials + data.below(vocab->size() - kNumSpecials));
  Rng rng(17);
  const auto b = apply_mlm_mask(rows, *vocab, {}, rng);
  const double n = 1e6;
  const double frac = b.selected / n;
  EXPECT_GE(frac, 0.149);
  EXPECT_LE(frac, 0.151);
  const double s = static_cast<double>(b.selected);
  auto within3 = [s](double count, double p) {
    return std::fabs(count - p * s) < 3.0 * std::sqrt(s * p * (1 - p));
  };
  EXPECT_TRUE(within3(static_cast<double>(b.masked), 0.8)) << b.masked;
  EXPECT_TRUE(within3(static_cast<double>(b.randomized), 0.1)) << b.randomized;
  EXPECT_TRUE(within3(static_cast<double>(b.unchanged), 0.1)) << b.unchanged;
}

TEST(MlmMask, TargetsPartitionPositions) {
  auto vocab = small_vocab();
  Rng data(4);
  std::vector<std::vector<std::int32_t>> rows(20, std::vector<std::int32_t>(50));
  for (auto& r : rows)
    for (auto& v : r) v = static_cast<std::int32_t>(data.below(vocab->size()));
  Rng rng(8);
  const auto b = apply_mlm_mask(rows, *vocab, {0.3, 0.8, 0.1}, rng, std::vector<std::string>(20, "en"));
  std::size_t targets = 0;
  for (std::size_t i = 0; i < b.input_ids.size(); ++i) {
    const auto orig = rows[i / 50][i % 50];
    if (b.target_ids[i] == kIgnoreIndex) {
      EXPECT_EQ(b.input_ids[i], orig);
      continue;
    }
    ++targets;
    EXPECT_FALSE(vocab->is_special(orig));
    EXPECT_EQ(b.target_ids[i], orig);
    const auto in = b.input_ids[i];
    EXPECT_TRUE(in == vocab->specials().mask || !vocab->is_special(static_cast<std::int32_t>(in)));
  }
  EXPECT_EQ(targets, b.selected);
  EXPECT_EQ(b.masked + b.randomized + b.unchanged, b.selected);
}

TEST(MlmMask, MaskOnlyAndSpecialOnly) {
  auto vocab = small_vocab();
  std::vector<std::vector<std::int32_t>> rows(4, std::vector<std::int32_t>(100, 6));
  Rng rng(2);
  const auto b = apply_mlm_mask(rows, *vocab, {0.5, 1.0, 0.0}, rng);
  for (std::size_t i = 0; i < b.input_ids.size(); ++i) {
    if (b.target_ids[i] != kIgnoreIndex) {
      EXPECT_EQ(b.input_ids[i], vocab->specials().mask);
      EXPECT_EQ(b.target_ids[i], 6);
    }
  }
  std::vector<std::vector<std::int32_t>> specials(2, std::vector<std::int32_t>(10, vocab->specials().eos));
  const auto e = apply_mlm_mask(specials, *vocab, {}, rng);
  EXPECT_TRUE(e.no_targets);
  EXPECT_EQ(e.selected, 0u);
  EXPECT_THROW(apply_mlm_mask(rows, *vocab, {1.0, 0.8, 0.1}, rng), ConfigError);
  EXPECT_THROW(apply_mlm_mask(rows, *vocab, {0.0, 0.8, 0.1}, rng), ConfigError);
}
