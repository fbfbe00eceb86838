// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "polymlm/checkpoint.hpp"
#include "polymlm/error.hpp"
#include "polymlm/tokenizer.hpp"
#include "polymlm/training.hpp"

namespace polymlm {

// ---------------------------------------------------------------------------
// Metrics

inline double accuracy(std::span<const std::int64_t> predictions, std::span<const std::int64_t> labels) {
  if (predictions.size() != labels.size()) {
    throw DimensionError("accuracy: " + std::to_string(predictions.size()) + " predictions for " +
                         std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw DimensionError("accuracy: no examples");
  std::size_t ok = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) ok += predictions[i] == labels[i] ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(labels.size());
}

inline const std::vector<std::string>& english_articles() {
  static const std::vector<std::string> a{"a", "an", "the"};
  return a;
}

/// Article lists by language code; languages without an entry keep all
/// tokens.
using ArticleTable = std::map<std::string, std::vector<std::string>>;

inline ArticleTable default_article_table() { return {{"en", english_articles()}}; }

inline const std::vector<std::string>& articles_for(const ArticleTable& table, const std::string& lang) {
  static const std::vector<std::string> none;
  auto it = table.find(lang);
  return it == table.end() ? none : it->second;
}

/// Lowercase, drop ASCII punctuation, drop articles, split on whitespace.
inline std::vector<std::string> normalized_tokens(std::string_view text, const std::vector<std::string>& articles) {
  std::string s;
  s.reserve(text.size());
  for (unsigned char c : text) {
    if (c < 0x80 && std::ispunct(c)) continue;
    s.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c));
  }
  std::vector<std::string> out;
  std::istringstream ss(s);
  std::string tok;
  while (ss >> tok) {
    if (std::find(articles.begin(), articles.end(), tok) == articles.end()) out.push_back(tok);
  }
  return out;
}

inline std::string normalize_answer(std::string_view text, const std::vector<std::string>& articles = english_articles()) {
  std::string out;
  for (const auto& t : normalized_tokens(text, articles)) {
    if (!out.empty()) out.push_back(' ');
    out += t;
  }
  return out;
}

struct SpanScore {
  double f1 = 0.0;
  int em = 0;
  friend bool operator==(const SpanScore&, const SpanScore&) = default;
};

inline double token_f1(const std::vector<std::string>& pred, const std::vector<std::string>& gold) {
  if (pred.empty() || gold.empty()) return pred.empty() && gold.empty() ? 1.0 : 0.0;
  std::map<std::string, long> counts;
  for (const auto& t : gold) ++counts[t];
  long same = 0;
  for (const auto& t : pred) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++same;
    }
  }
  if (same == 0) return 0.0;
  const double p = static_cast<double>(same) / static_cast<double>(pred.size());
  const double r = static_cast<double>(same) / static_cast<double>(gold.size());
  return 2.0 * p * r / (p + r);
}

/// Token-bag F1 and exact match against the best gold answer.
inline SpanScore squad_f1_em(std::string_view prediction, const std::vector<std::string>& golds,
                             const std::vector<std::string>& articles = english_articles()) {
  if (golds.empty()) throw DataError("squad_f1_em: no gold answers");
  const auto pred = normalized_tokens(prediction, articles);
  SpanScore best;
  for (const auto& g : golds) {
    const auto gold = normalized_tokens(g, articles);
    best.f1 = std::max(best.f1, token_f1(pred, gold));
    best.em = std::max(best.em, pred == gold ? 1 : 0);
  }
  return best;
}

// ---------------------------------------------------------------------------
// Task data

enum class TaskFormat { kClassification, kQa };

inline const char* task_format_name(TaskFormat f) { return f == TaskFormat::kQa ? "qa" : "classification"; }

struct ClassificationRow {
  std::string first;
  std::string second;  // empty for single-sentence rows
  std::string label;
};

/// `premise<TAB>hypothesis<TAB>label` or `text<TAB>label`.
inline std::vector<ClassificationRow> parse_classification_tsv(const std::string& text, const std::string& origin) {
  std::vector<ClassificationRow> rows;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t pos = 0;
    for (;;) {
      const auto tab = line.find('\t', pos);
      f.push_back(line.substr(pos, tab - pos));
      if (tab == std::string::npos) break;
      pos = tab + 1;
    }
    if (f.size() == 2) {
      rows.push_back({f[0], "", f[1]});
    } else if (f.size() == 3) {
      rows.push_back({f[0], f[1], f[2]});
    } else {
      throw DataError(origin + ":" + std::to_string(lineno) + ": expected 2 or 3 tab-separated fields, got " +
                      std::to_string(f.size()));
    }
    if (rows.back().label.empty()) throw DataError(origin + ":" + std::to_string(lineno) + ": empty label");
  }
  return rows;
}

struct QaItem {
  std::string id;
  std::string question;
  std::string context;
  std::vector<std::string> answers;
  std::size_t answer_start = 0;  // byte offset of the first answer
};

/// SQuAD v1 layout: data[] -> paragraphs[] -> {context, qas[] -> {id,
/// question, answers[] -> {text, answer_start}}}.
inline std::vector<QaItem> parse_squad_json(const std::string& text, const std::string& origin) {
  std::vector<QaItem> out;
  try {
    const auto doc = nlohmann::json::parse(text);
    for (const auto& article : doc.at("data")) {
      for (const auto& para : article.at("paragraphs")) {
        const std::string context = para.at("context").get<std::string>();
        for (const auto& qa : para.at("qas")) {
          QaItem item;
          item.id = qa.at("id").get<std::string>();
          item.question = qa.at("question").get<std::string>();
          item.context = context;
          for (const auto& a : qa.at("answers")) item.answers.push_back(a.at("text").get<std::string>());
          if (item.answers.empty()) throw DataError(origin + ": question " + item.id + " has no answers");
          item.answer_start = qa.at("answers").at(0).at("answer_start").get<std::size_t>();
          if (item.answer_start + item.answers[0].size() > context.size() ||
              context.compare(item.answer_start, item.answers[0].size(), item.answers[0]) != 0) {
            throw DataError(origin + ": answer of question " + item.id + " does not occur at its start offset");
          }
          out.push_back(std::move(item));
        }
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(origin + ": malformed SQuAD json: " + e.what());
  }
  return out;
}

inline std::string read_task_file(const std::string& lang, const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("missing data file for language " + lang + ": " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

/// Label names in a stable order: numerically when every label is an
/// integer, lexicographically otherwise.
inline std::vector<std::string> label_inventory(const std::vector<ClassificationRow>& rows) {
  std::set<std::string> names;
  for (const auto& r : rows) names.insert(r.label);
  std::vector<std::string> out(names.begin(), names.end());
  const bool numeric = std::all_of(out.begin(), out.end(), [](const std::string& s) {
    return !s.empty() && s.size() < 18 && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
  });
  if (numeric) {
    std::sort(out.begin(), out.end(), [](const std::string& a, const std::string& b) { return std::stoll(a) < std::stoll(b); });
  }
  return out;
}

inline std::vector<std::int64_t> encode_text(const UnigramVocab& vocab, const std::string& text) {
  const auto ids = viterbi_encode(vocab, text).ids;
  return {ids.begin(), ids.end()};
}

inline std::vector<TaskExample> encode_classification(const UnigramVocab& vocab, const std::vector<ClassificationRow>& rows,
                                                      const std::vector<std::string>& labels, std::size_t max_seq,
                                                      const std::string& origin) {
  const SpecialIds sp;
  std::vector<TaskExample> out;
  for (const auto& r : rows) {
    TaskExample ex;
    ex.ids.push_back(sp.bos);
    for (auto id : encode_text(vocab, r.first)) ex.ids.push_back(id);
    ex.ids.push_back(sp.eos);
    if (!r.second.empty()) {
      for (auto id : encode_text(vocab, r.second)) ex.ids.push_back(id);
      ex.ids.push_back(sp.eos);
    }
    if (ex.ids.size() > max_seq) ex.ids.resize(max_seq);
    const auto it = std::find(labels.begin(), labels.end(), r.label);
    if (it == labels.end()) throw DataError(origin + ": label '" + r.label + "' does not occur in the training data");
    ex.label = it - labels.begin();
    out.push_back(std::move(ex));
  }
  return out;
}

/// Tokens of the question then the context; `offsets` maps each context
/// position back to bytes of the context.
struct QaEncoded {
  std::vector<TaskExample> examples;
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> offsets;
};

inline QaEncoded encode_qa(const UnigramVocab& vocab, const std::vector<QaItem>& items, std::size_t max_seq) {
  const SpecialIds sp;
  QaEncoded out;
  for (const auto& item : items) {
    TaskExample ex;
    ex.ids.push_back(sp.bos);
    for (auto id : encode_text(vocab, item.question)) ex.ids.push_back(id);
    ex.ids.push_back(sp.eos);
    if (ex.ids.size() + 1 >= max_seq) ex.ids.resize(max_seq / 2);
    ex.context_begin = static_cast<std::int64_t>(ex.ids.size());
    const TokenSequence ctx = viterbi_encode(vocab, item.context);
    std::vector<std::pair<std::size_t, std::size_t>> offs(ex.ids.size(), {0, 0});
    const std::size_t a0 = item.answer_start, a1 = a0 + item.answers[0].size();
    for (std::size_t k = 0; k < ctx.ids.size() && ex.ids.size() < max_seq; ++k) {
      const auto [b, e] = ctx.offsets[k];
      if (ex.start < 0 && e > a0) ex.start = static_cast<std::int64_t>(ex.ids.size());
      if (b < a1) ex.end = static_cast<std::int64_t>(ex.ids.size());
      ex.ids.push_back(ctx.ids[k]);
      offs.push_back({b, e});
    }
    // answers cut off by truncation carry no span target
    if (ex.start < 0 || ex.end < ex.start || offs[static_cast<std::size_t>(ex.end)].second < a1) ex.start = ex.end = -1;
    out.examples.push_back(std::move(ex));
    out.offsets.push_back(std::move(offs));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Protocols

enum class ProtocolKind { kZeroShot, kTranslateTest, kTranslateTrainAll, kMonolingual };

inline const char* protocol_name(ProtocolKind k) {
  switch (k) {
    case ProtocolKind::kZeroShot: return "zero_shot";
    case ProtocolKind::kTranslateTest: return "translate_test";
    case ProtocolKind::kTranslateTrainAll: return "translate_train_all";
    case ProtocolKind::kMonolingual: return "monolingual";
  }
  return "?";
}

inline ProtocolKind parse_protocol(const std::string& s) {
  for (auto k : {ProtocolKind::kZeroShot, ProtocolKind::kTranslateTest, ProtocolKind::kTranslateTrainAll,
                 ProtocolKind::kMonolingual}) {
    if (s == protocol_name(k)) return k;
  }
  throw ConfigError("unknown protocol '" + s + "' (zero_shot, translate_test, translate_train_all, monolingual)");
}

struct EvalProtocol {
  ProtocolKind kind = ProtocolKind::kZeroShot;
  std::vector<std::string> train_languages;
  std::vector<std::string> eval_languages;

  void validate() const {
    if (eval_languages.empty()) throw ConfigError("protocol needs at least one evaluation language");
    std::set<std::string> uniq(eval_languages.begin(), eval_languages.end());
    if (uniq.size() != eval_languages.size()) throw ConfigError("duplicate evaluation language");
    if (kind != ProtocolKind::kMonolingual && train_languages.size() != 1) {
      throw ConfigError(std::string(protocol_name(kind)) + " trains on exactly one language, got " +
                        std::to_string(train_languages.size()));
    }
  }
};

/// Data layout: <root>/<lang>/{train,dev,test}.{tsv,json} and, for the
/// translate protocols, <lang>/{train,dev,test}.translated.{tsv,json}.
inline std::filesystem::path task_path(const std::string& root, const std::string& lang, const std::string& split,
                                       TaskFormat fmt, bool translated = false) {
  return std::filesystem::path(root) / lang /
         (split + (translated ? ".translated" : "") + (fmt == TaskFormat::kQa ? ".json" : ".tsv"));
}

struct EvalSettings {
  FinetuneConfig finetune;
  TaskFormat format = TaskFormat::kClassification;
  ArticleTable articles = default_article_table();
  std::size_t max_answer_tokens = 30;
};

struct LanguageReport {
  std::map<std::string, double> test;  // metric name -> value
  std::map<std::string, double> dev;
  std::size_t best_epoch = 0;
  std::size_t test_examples = 0;
};

struct EvalReport {
  EvalProtocol protocol;
  TaskFormat format = TaskFormat::kClassification;
  std::map<std::string, LanguageReport> languages;
  std::map<std::string, double> average;  // unweighted over languages
  std::string config_hash;
  std::string checkpoint_id;
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

namespace detail {

/// One split of one language, loaded and encoded.
struct SplitData {
  std::vector<TaskExample> examples;
  std::vector<QaItem> qa;
  QaEncoded qa_encoded;
  std::vector<ClassificationRow> rows;
};

class ProtocolRunner {
 public:
  ProtocolRunner(const Checkpoint& ck, const UnigramVocab& vocab, std::string root, const EvalSettings& s)
      : ck_(ck), vocab_(vocab), root_(std::move(root)), s_(s) {}

  SplitData load(const std::string& lang, const std::string& split, bool translated) {
    const auto path = task_path(root_, lang, split, s_.format, translated);
    const std::string text = read_task_file(lang, path);
    SplitData d;
    if (s_.format == TaskFormat::kQa) {
      d.qa = parse_squad_json(text, path.string());
      if (d.qa.empty()) throw DataError("no questions for language " + lang + " in " + path.string());
    } else {
      d.rows = parse_classification_tsv(text, path.string());
      if (d.rows.empty()) throw DataError("no examples for language " + lang + " in " + path.string());
    }
    return d;
  }

  void encode(SplitData& d, const std::string& origin) {
    if (s_.format == TaskFormat::kQa) {
      d.qa_encoded = encode_qa(vocab_, d.qa, ck_.config.max_seq);
      d.examples = d.qa_encoded.examples;
    } else {
      d.examples = encode_classification(vocab_, d.rows, labels_, ck_.config.max_seq, origin);
    }
  }

  void set_labels(const std::vector<ClassificationRow>& train_rows) {
    labels_ = label_inventory(train_rows);
    if (s_.format == TaskFormat::kClassification && labels_.size() < 2) {
      throw DataError("classification training data needs at least two distinct labels");
    }
  }

  TaskHead head() const {
    return s_.format == TaskFormat::kQa ? TaskHead{HeadKind::kSpan, 0} : TaskHead{HeadKind::kClassification, labels_.size()};
  }

  /// Metric scores on one split; `lang` picks the article list.
  std::map<std::string, double> score(const SplitData& d, const std::string& lang, ParamStore& p) {
    const ModelConfig& mc = ck_.config;
    if (s_.format == TaskFormat::kClassification) {
      const auto pred = predict_labels(mc, p, head(), d.examples);
      std::vector<std::int64_t> gold;
      for (const auto& e : d.examples) gold.push_back(e.label);
      return {{"accuracy", accuracy(pred, gold)}};
    }
    const auto spans = predict_spans(mc, p, d.examples, s_.max_answer_tokens);
    double f1 = 0.0, em = 0.0;
    for (std::size_t i = 0; i < d.qa.size(); ++i) {
      std::string text;
      if (spans[i].first >= 0) {
        const auto& offs = d.qa_encoded.offsets[i];
        const std::size_t b = offs[static_cast<std::size_t>(spans[i].first)].first;
        const std::size_t e = offs[static_cast<std::size_t>(spans[i].second)].second;
        text = d.qa[i].context.substr(b, e - b);
      }
      const SpanScore sc = squad_f1_em(text, d.qa[i].answers, articles_for(s_.articles, text_language(lang)));
      f1 += sc.f1;
      em += sc.em;
    }
    const double n = static_cast<double>(d.qa.size());
    return {{"f1", f1 / n}, {"em", em / n}};
  }

  /// Translated evaluation sets are written in the training language.
  void set_text_language(const std::string& lang, const std::string& written_in) { text_lang_[lang] = written_in; }
  const std::string& text_language(const std::string& lang) const {
    auto it = text_lang_.find(lang);
    return it == text_lang_.end() ? lang : it->second;
  }

  std::string headline() const { return s_.format == TaskFormat::kQa ? "f1" : "accuracy"; }

  /// Fine-tunes on `train` with early stopping on the average headline
  /// metric over `dev` (keyed by language).
  FinetuneResult train(const std::vector<TaskExample>& train, std::map<std::string, SplitData>& dev) {
    std::map<std::string, std::vector<TaskExample>> valid;
    for (auto& [lang, d] : dev) valid[lang] = d.examples;
    auto metric = [&](const std::string& lang, const std::vector<TaskExample>&, ParamStore& p, std::size_t) {
      return score(dev.at(lang), lang, p).at(headline());
    };
    return finetune(ck_.config, checkpoint_params(ck_), head(), train, valid, s_.finetune, metric);
  }

 private:
  const Checkpoint& ck_;
  const UnigramVocab& vocab_;
  std::string root_;
  const EvalSettings& s_;
  std::vector<std::string> labels_;
  std::map<std::string, std::string> text_lang_;
};

}  // namespace detail

inline std::string eval_config_hash(const EvalProtocol& p, const EvalSettings& s) {
  std::ostringstream os;
  os.precision(17);
  os << protocol_name(p.kind) << '|' << task_format_name(s.format) << '|';
  for (const auto& l : p.train_languages) os << l << ',';
  os << '|';
  for (const auto& l : p.eval_languages) os << l << ',';
  const auto& f = s.finetune;
  os << '|' << f.batch_size << ',' << f.epochs << ',' << f.lr << ',' << f.warmup_fraction << ',' << f.weight_decay << ','
     << f.grad_clip_norm << ',' << f.seed << '|' << s.max_answer_tokens;
  for (const auto& [lang, arts] : s.articles) {
    os << '|' << lang << ':';
    for (const auto& a : arts) os << a << ',';
  }
  return hex64(fnv1a(os.str()));
}

inline std::string checkpoint_id(const Checkpoint& ck) { return hex64(fnv1a(serialize_checkpoint(ck))); }

/// Fine-tunes the checkpoint as the protocol prescribes and evaluates every
/// evaluation language's test set.
inline EvalReport run_protocol(const EvalProtocol& protocol, const Checkpoint& ck, const UnigramVocab& vocab,
                               const std::string& data_root, const EvalSettings& settings) {
  protocol.validate();
  settings.finetune.validate();
  if (vocab.size() != ck.config.vocab) throw ConfigError("vocabulary size does not match the checkpoint");
  EvalReport report;
  report.protocol = protocol;
  report.format = settings.format;
  report.config_hash = eval_config_hash(protocol, settings);
  report.checkpoint_id = checkpoint_id(ck);
  detail::ProtocolRunner run(ck, vocab, data_root, settings);
  const bool translate_test = protocol.kind == ProtocolKind::kTranslateTest;

  auto finish_language = [&](const std::string& lang, detail::SplitData& test, ParamStore& p, const FinetuneResult& fr,
                             const std::string& dev_lang) {
    LanguageReport lr;
    lr.test = run.score(test, lang, p);
    lr.best_epoch = fr.best_epoch;
    lr.test_examples = test.examples.size();
    const auto& best = fr.epochs.at(fr.best_epoch - 1).per_language;
    if (auto it = best.find(dev_lang); it != best.end()) lr.dev[run.headline()] = it->second;
    report.languages[lang] = lr;
  };

  if (protocol.kind == ProtocolKind::kMonolingual) {
    for (const auto& lang : protocol.eval_languages) {
      auto train = run.load(lang, "train", false);
      run.set_labels(train.rows);
      run.encode(train, lang);
      std::map<std::string, detail::SplitData> dev;
      dev[lang] = run.load(lang, "dev", false);
      run.encode(dev[lang], lang);
      auto test = run.load(lang, "test", false);
      run.encode(test, lang);
      const FinetuneResult fr = run.train(train.examples, dev);
      ParamStore best = fr.best_params;
      finish_language(lang, test, best, fr, lang);
    }
  } else {
    const std::string& src = protocol.train_languages[0];
    auto train = run.load(src, "train", false);
    std::vector<detail::SplitData> extra;
    if (protocol.kind == ProtocolKind::kTranslateTrainAll) {
      for (const auto& lang : protocol.eval_languages) {
        if (lang != src) extra.push_back(run.load(lang, "train", true));
      }
    }
    std::vector<ClassificationRow> all_rows = train.rows;
    for (const auto& e : extra) all_rows.insert(all_rows.end(), e.rows.begin(), e.rows.end());
    run.set_labels(all_rows);
    run.encode(train, src);
    std::vector<TaskExample> examples = train.examples;
    for (auto& e : extra) {
      run.encode(e, "translated train");
      examples.insert(examples.end(), e.examples.begin(), e.examples.end());
    }
    std::map<std::string, detail::SplitData> dev, test;
    for (const auto& lang : protocol.eval_languages) {
      const bool tr = translate_test && lang != src;
      if (tr) run.set_text_language(lang, src);
      dev[lang] = run.load(lang, "dev", tr);
      run.encode(dev[lang], lang);
      test[lang] = run.load(lang, "test", tr);
      run.encode(test[lang], lang);
    }
    const FinetuneResult fr = run.train(examples, dev);
    ParamStore best = fr.best_params;
    for (const auto& lang : protocol.eval_languages) finish_language(lang, test[lang], best, fr, lang);
  }

  std::map<std::string, std::map<std::string, double>> per_metric;
  for (const auto& [lang, lr] : report.languages)
    for (const auto& [m, v] : lr.test) per_metric[m][lang] = v;
  for (const auto& [m, values] : per_metric) report.average[m] = language_average(values);
  return report;
}

struct TaskFinetuneResult {
  FinetuneResult result;
  TaskHead head;
  std::vector<std::string> labels;  // classification label names by id
};

/// Fine-tunes on <root>/<train_lang>/train with early stopping on the
/// unweighted average dev metric of `valid_langs`.
inline TaskFinetuneResult finetune_task(const Checkpoint& ck, const UnigramVocab& vocab, const std::string& data_root,
                                        const std::string& train_lang, const std::vector<std::string>& valid_langs,
                                        const EvalSettings& settings) {
  settings.finetune.validate();
  if (valid_langs.empty()) throw ConfigError("no validation languages given");
  if (vocab.size() != ck.config.vocab) throw ConfigError("vocabulary size does not match the checkpoint");
  detail::ProtocolRunner run(ck, vocab, data_root, settings);
  auto train = run.load(train_lang, "train", false);
  run.set_labels(train.rows);
  run.encode(train, train_lang);
  std::map<std::string, detail::SplitData> dev;
  for (const auto& lang : valid_langs) {
    dev[lang] = run.load(lang, "dev", false);
    run.encode(dev[lang], lang);
  }
  TaskFinetuneResult out;
  out.result = run.train(train.examples, dev);
  out.head = run.head();
  out.labels = label_inventory(train.rows);
  return out;
}

/// Deterministic JSON rendering of a report.
inline std::string report_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["format"] = "polymlm-eval-report";
  j["version"] = 1;
  j["protocol"] = protocol_name(r.protocol.kind);
  j["task"] = task_format_name(r.format);
  j["train_languages"] = r.protocol.train_languages;
  j["eval_languages"] = r.protocol.eval_languages;
  j["config_hash"] = r.config_hash;
  j["checkpoint_id"] = r.checkpoint_id;
  nlohmann::ordered_json langs = nlohmann::ordered_json::object();
  for (const auto& lang : r.protocol.eval_languages) {
    const auto& lr = r.languages.at(lang);
    langs[lang] = {{"test", lr.test}, {"dev", lr.dev}, {"best_epoch", lr.best_epoch}, {"examples", lr.test_examples}};
  }
  j["languages"] = langs;
  j["average"] = r.average;
  return j.dump(2) + "\n";
}

}  // namespace polymlm
