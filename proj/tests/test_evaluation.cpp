// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "polymlm/corpus_gen.hpp"
#include "polymlm/evaluation.hpp"
#include "squad_golden.hpp"

using namespace polymlm;
namespace fs = std::filesystem;

using polymlm::fixtures::squad_golden;

TEST(Metrics, SquadGoldenFixture) {
  ASSERT_EQ(squad_golden().size(), 20u);
  for (const auto& c : squad_golden()) {
    const SpanScore s = squad_f1_em(c.prediction, c.golds);
    EXPECT_DOUBLE_EQ(s.f1, c.f1) << c.prediction;
    EXPECT_EQ(s.em, c.em) << c.prediction;
  }
}

TEST(Metrics, AccuracyCounts) {
  const std::vector<std::int64_t> pred{1, 0, 1, 1, 0, 1, 1, 0, 1, 1};
  const std::vector<std::int64_t> gold{1, 1, 1, 1, 0, 0, 1, 0, 1, 0};
  EXPECT_EQ(accuracy(pred, gold), 0.7);
  EXPECT_EQ(accuracy(gold, gold), 1.0);
  const std::vector<std::int64_t> flipped{0, 0, 0, 0, 1, 1, 0, 1, 0, 1};
  EXPECT_EQ(accuracy(flipped, gold), 0.0);
  EXPECT_THROW(accuracy(std::vector<std::int64_t>{1}, gold), DimensionError);
  EXPECT_THROW(accuracy(std::vector<std::int64_t>{}, std::vector<std::int64_t>{}), DimensionError);
}

TEST(Metrics, SquadRequiresGold) { EXPECT_THROW(squad_f1_em("x", {}), DataError); }

TEST(Metrics, ArticlesArePerLanguage) {
  const ArticleTable table{{"en", english_articles()}, {"de", {"der", "die", "das"}}};
  EXPECT_EQ(squad_f1_em("der Hund", {"Hund"}, articles_for(table, "de")).em, 1);
  EXPECT_EQ(squad_f1_em("the dog", {"dog"}, articles_for(table, "xx")).em, 0);
  EXPECT_EQ(normalize_answer("  The  quick, brown fox. "), "quick brown fox");
}

TEST(Metrics, F1OneIffMultisetsEqual) {
  const std::vector<std::string> alphabet{"cat", "Dog", "sun", "the", "a", "x1", "moon", "an"};
  const std::vector<std::string> punct{"", "", ",", ".", "!", "?"};
  Rng rng(5);
  int equal_cases = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    auto make = [&](std::size_t n) {
      std::vector<std::string> toks;
      for (std::size_t i = 0; i < n; ++i) toks.push_back(alphabet[rng.below(alphabet.size())]);
      return toks;
    };
    std::vector<std::string> a = make(rng.below(5));
    std::vector<std::string> b = rng.below(3) == 0 ? a : make(rng.below(5));
    for (std::size_t i = b.size(); i > 1; --i) std::swap(b[i - 1], b[rng.below(i)]);
    auto render = [&](const std::vector<std::string>& toks) {
      std::string s;
      for (const auto& t : toks) {
        s += std::string(1 + rng.below(2), ' ');
        std::string w = t;
        if (rng.below(2)) std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return std::toupper(c); });
        s += w + punct[rng.below(punct.size())];
      }
      return s;
    };
    const std::string sa = render(a), sb = render(b);
    auto na = normalized_tokens(sa, english_articles()), nb = normalized_tokens(sb, english_articles());
    std::sort(na.begin(), na.end());
    std::sort(nb.begin(), nb.end());
    const SpanScore ab = squad_f1_em(sa, {sb}), ba = squad_f1_em(sb, {sa});
    EXPECT_EQ(ab.f1 == 1.0, na == nb) << sa << " | " << sb;
    EXPECT_EQ(ab.f1, ba.f1);
    if (ab.em == 1) {
      EXPECT_EQ(ab.f1, 1.0);
    }
    EXPECT_GE(ab.f1, 0.0);
    EXPECT_LE(ab.f1, 1.0);
    equal_cases += na == nb ? 1 : 0;
  }
  EXPECT_GT(equal_cases, 100);
}

TEST(Metrics, AveragesIgnoreOrder) {
  EXPECT_DOUBLE_EQ(language_average({{"a", 0.6}, {"b", 0.8}, {"c", 1.0}}), 0.8);
  EXPECT_EQ(language_average({{"c", 1.0}, {"a", 0.6}, {"b", 0.8}}), language_average({{"a", 0.6}, {"b", 0.8}, {"c", 1.0}}));
}

TEST(TaskData, ParsesClassificationTsv) {
  const auto rows = parse_classification_tsv("a b\tc d\tentailment\nx\t1\n\n", "mem");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].second, "c d");
  EXPECT_EQ(rows[1].label, "1");
  EXPECT_THROW(parse_classification_tsv("only one field\n", "mem"), DataError);
  EXPECT_THROW(parse_classification_tsv("a\tb\tc\td\n", "mem"), DataError);
}

TEST(TaskData, LabelInventoryOrder) {
  std::vector<ClassificationRow> rows{{"", "", "10"}, {"", "", "2"}, {"", "", "0"}};
  EXPECT_EQ(label_inventory(rows), (std::vector<std::string>{"0", "2", "10"}));
  rows.push_back({"", "", "neutral"});
  EXPECT_EQ(label_inventory(rows), (std::vector<std::string>{"0", "10", "2", "neutral"}));
}

TEST(TaskData, ParsesSquadJson) {
  const std::string text = R"({"version": "1.1", "data": [{"title": "t", "paragraphs": [
      {"context": "the cat sat on the mat", "qas": [
        {"id": "q1", "question": "who sat", "answers": [{"text": "cat", "answer_start": 4}, {"text": "the cat", "answer_start": 0}]}]}]}]})";
  const auto items = parse_squad_json(text, "mem");
  ASSERT_EQ(items.size(), 1u);
  EXPECT_EQ(items[0].answers.size(), 2u);
  EXPECT_EQ(items[0].answer_start, 4u);
  EXPECT_THROW(parse_squad_json("{\"data\": 3}", "mem"), DataError);
  EXPECT_THROW(parse_squad_json(R"({"data": [{"paragraphs": [{"context": "abc", "qas": [
      {"id": "q", "question": "?", "answers": [{"text": "zz", "answer_start": 0}]}]}]}]})", "mem"), DataError);
}

namespace {

struct ProtocolFixture {
  fs::path root;
  CorpusGenConfig corpus;
  std::shared_ptr<UnigramVocab> vocab;
  Checkpoint ck;
  EvalSettings settings;

  explicit ProtocolFixture(const std::string& name) {
    root = fs::temp_directory_path() / ("polymlm_eval_" + name);
    fs::remove_all(root);
    corpus.languages = {{"aa", 80, 40}, {"bb", 80, 40}, {"cc", 80, 40}};
    const CorpusCatalog cat = generate_corpus(corpus, (root / "corpus").string());
    UnigramTrainerOptions o;
    o.target_size = 300;
    vocab = std::make_shared<UnigramVocab>(train_unigram(read_catalog_lines(cat), o));
    TaskGenConfig tg;
    tg.train = 48;
    tg.dev = 24;
    tg.test = 40;
    tg.pivot = "aa";
    generate_task(corpus, tg, (root / "task").string());
    const ModelConfig mc{1, 16, 2, vocab->size(), 16, 2, 0.0, true};
    ck = make_checkpoint(mc, init_params(mc, 4));
    settings.finetune.epochs = 3;
    settings.finetune.batch_size = 8;
    settings.finetune.lr = 1e-2;
  }
  ~ProtocolFixture() { fs::remove_all(root); }
  std::string task() const { return (root / "task").string(); }
};

}  // namespace

TEST(Protocol, MissingLanguageFileNamesPath) {
  ProtocolFixture f("missing");
  fs::remove(f.root / "task" / "bb" / "test.tsv");
  try {
    run_protocol({ProtocolKind::kZeroShot, {"aa"}, {"aa", "bb"}}, f.ck, *f.vocab, f.task(), f.settings);
    FAIL() << "expected a data error";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("bb"), std::string::npos);
    EXPECT_NE(msg.find((f.root / "task" / "bb" / "test.tsv").string()), std::string::npos) << msg;
  }
}

TEST(Protocol, ZeroShotOnTrainLanguageEqualsMonolingual) {
  ProtocolFixture f("degenerate");
  const EvalReport z = run_protocol({ProtocolKind::kZeroShot, {"bb"}, {"bb"}}, f.ck, *f.vocab, f.task(), f.settings);
  const EvalReport m = run_protocol({ProtocolKind::kMonolingual, {}, {"bb"}}, f.ck, *f.vocab, f.task(), f.settings);
  EXPECT_EQ(z.languages.at("bb").test, m.languages.at("bb").test);
  EXPECT_EQ(z.languages.at("bb").best_epoch, m.languages.at("bb").best_epoch);
  EXPECT_EQ(z.average, m.average);
}

TEST(Protocol, ReportIsDeterministicAndComplete) {
  ProtocolFixture f("report");
  const EvalProtocol p{ProtocolKind::kZeroShot, {"aa"}, {"aa", "bb", "cc"}};
  const EvalReport a = run_protocol(p, f.ck, *f.vocab, f.task(), f.settings);
  const EvalReport b = run_protocol(p, f.ck, *f.vocab, f.task(), f.settings);
  EXPECT_EQ(report_json(a), report_json(b));
  const auto j = nlohmann::json::parse(report_json(a));
  EXPECT_EQ(j["protocol"], "zero_shot");
  EXPECT_EQ(j["checkpoint_id"], checkpoint_id(f.ck));
  EXPECT_EQ(j["languages"].size(), 3u);
  double sum = 0.0;
  for (const auto& lang : p.eval_languages) sum += a.languages.at(lang).test.at("accuracy");
  EXPECT_DOUBLE_EQ(a.average.at("accuracy"), sum / 3.0);
  EvalSettings other = f.settings;
  other.finetune.seed = 2;
  EXPECT_NE(eval_config_hash(p, other), a.config_hash);
}

TEST(Protocol, PlantedFeatureTransfersAcrossLanguages) {
  ProtocolFixture f("transfer");
  f.settings.finetune.epochs = 6;
  const EvalReport r =
      run_protocol({ProtocolKind::kZeroShot, {"aa"}, {"aa", "bb", "cc"}}, f.ck, *f.vocab, f.task(), f.settings);
  for (const auto& lang : {"bb", "cc"}) {
    const auto rows = parse_classification_tsv(read_task_file(lang, f.root / "task" / lang / "test.tsv"), lang);
    std::size_t ones = 0;
    for (const auto& row : rows) ones += row.label == "1" ? 1 : 0;
    const double majority = static_cast<double>(std::max(ones, rows.size() - ones)) / static_cast<double>(rows.size());
    EXPECT_GT(r.languages.at(lang).test.at("accuracy"), majority) << lang;
  }
}

TEST(Protocol, TranslateProtocolsReadTranslatedFiles) {
  ProtocolFixture f("translate");
  const EvalReport tt =
      run_protocol({ProtocolKind::kTranslateTest, {"aa"}, {"aa", "bb"}}, f.ck, *f.vocab, f.task(), f.settings);
  const EvalReport ta =
      run_protocol({ProtocolKind::kTranslateTrainAll, {"aa"}, {"aa", "bb"}}, f.ck, *f.vocab, f.task(), f.settings);
  for (const auto* r : {&tt, &ta}) {
    for (const auto& [lang, lr] : r->languages) {
      EXPECT_GE(lr.test.at("accuracy"), 0.0);
      EXPECT_LE(lr.test.at("accuracy"), 1.0);
    }
  }
  fs::remove(f.root / "task" / "bb" / "train.translated.tsv");
  EXPECT_THROW(
      run_protocol({ProtocolKind::kTranslateTrainAll, {"aa"}, {"aa", "bb"}}, f.ck, *f.vocab, f.task(), f.settings),
      DataError);
  EXPECT_THROW(run_protocol({ProtocolKind::kZeroShot, {"aa", "bb"}, {"aa"}}, f.ck, *f.vocab, f.task(), f.settings),
               ConfigError);
}

TEST(Protocol, QaProtocolScoresSpans) {
  ProtocolFixture f("qa");
  const std::string squad = R"({"data": [{"paragraphs": [
      {"context": "ba ka da ma", "qas": [{"id": "1", "question": "ka", "answers": [{"text": "ka", "answer_start": 3}]}]},
      {"context": "da ma ba ka", "qas": [{"id": "2", "question": "ka", "answers": [{"text": "ka", "answer_start": 9}]}]},
      {"context": "ka ba ma da", "qas": [{"id": "3", "question": "ka", "answers": [{"text": "ka", "answer_start": 0}]}]}]}]})";
  for (const auto* split : {"train", "dev", "test"}) {
    std::ofstream(f.root / "task" / "aa" / (std::string(split) + ".json")) << squad;
  }
  f.settings.format = TaskFormat::kQa;
  const EvalReport r = run_protocol({ProtocolKind::kMonolingual, {}, {"aa"}}, f.ck, *f.vocab, f.task(), f.settings);
  const auto& t = r.languages.at("aa").test;
  ASSERT_TRUE(t.count("f1") && t.count("em"));
  EXPECT_GE(t.at("f1"), t.at("em"));
  EXPECT_LE(t.at("f1"), 1.0);
}

TEST(QaEncoding, SpanTargetsCoverAnswer) {
  std::vector<Piece> pieces;
  for (const char* p : {"\xe2\x96\x81", "a", "b", "c", "\xe2\x96\x81" "ab", "\xe2\x96\x81" "c"}) pieces.push_back({p, -2.0});
  const UnigramVocab v(pieces);
  QaItem item{"q", "ab", "ab c ab", {"c ab"}, 3};
  const QaEncoded enc = encode_qa(v, {item}, 32);
  const auto& ex = enc.examples[0];
  ASSERT_GE(ex.start, ex.context_begin);
  const auto& offs = enc.offsets[0];
  const std::size_t b = offs[static_cast<std::size_t>(ex.start)].first;
  const std::size_t e = offs[static_cast<std::size_t>(ex.end)].second;
  EXPECT_EQ(normalize_answer(item.context.substr(b, e - b)), "c ab");
}
