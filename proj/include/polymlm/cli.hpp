// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "polymlm/budget.hpp"
#include "polymlm/checkpoint.hpp"
#include "polymlm/config.hpp"
#include "polymlm/corpus_gen.hpp"
#include "polymlm/error.hpp"
#include "polymlm/evaluation.hpp"
#include "polymlm/sampling.hpp"
#include "polymlm/tokenizer.hpp"
#include "polymlm/training.hpp"

namespace polymlm::cli {

inline constexpr const char* kToolVersion = "1.0.0";
inline constexpr const char* kOutDirEnv = "POLYMLM_OUT_DIR";

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitConfig = 2,
  kExitData = 3,
  kExitNumeric = 4,
  kExitProtocol = 5,
  kExitIo = 6,
  kExitInternal = 70,
};

inline int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::kConfig:
    case ErrorKind::kPlan:
    case ErrorKind::kDimension: return kExitConfig;
    case ErrorKind::kData:
    case ErrorKind::kIndex: return kExitData;
    case ErrorKind::kNumeric: return kExitNumeric;
    case ErrorKind::kProtocol: return kExitProtocol;
    case ErrorKind::kIo: return kExitIo;
  }
  return kExitInternal;
}

inline std::string file_hash(const std::string& path) { return hex64(fnv1a(read_file_bytes(path))); }

inline std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// One manifest per run, written next to the run's artifacts.
struct Manifest {
  std::string command;
  std::vector<std::string> argv;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<std::string> artifacts;
  std::string started_at = utc_now();

  std::string write(const std::string& out_dir, int exit_code, const std::string& error) const {
    nlohmann::ordered_json j;
    j["format"] = "polymlm-run-manifest";
    j["version"] = 1;
    j["tool_version"] = kToolVersion;
    j["command"] = command;
    j["argv"] = argv;
    j["config_hash"] = config_hash;
    j["seed"] = seed;
    nlohmann::ordered_json arts = nlohmann::ordered_json::array();
    for (const auto& a : artifacts) {
      arts.push_back({{"path", a}, {"fnv1a64", std::filesystem::exists(a) ? file_hash(a) : ""}});
    }
    j["artifacts"] = arts;
    j["started_at"] = started_at;
    j["finished_at"] = utc_now();
    j["exit_code"] = exit_code;
    if (!error.empty()) j["error"] = error;
    const auto path = (std::filesystem::path(out_dir) / (command + ".manifest.json")).string();
    std::filesystem::create_directories(out_dir);
    write_file_atomic(path, j.dump(2) + "\n");
    return path;
  }
};

inline std::string key_flag(const std::string& key) {
  std::string f = "--";
  for (char c : key) f.push_back(c == '_' ? '-' : c);
  return f;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

inline std::string config_help_footer() {
  const RunConfig tiny = preset_config("tiny");
  std::string s = "Config keys (config file `key = value`, or flag --key-name; flags win). Defaults are the tiny preset:\n";
  for (const auto& k : config_keys()) {
    std::string name = "  " + k.name;
    name.resize(std::max<std::size_t>(name.size() + 1, 22), ' ');
    s += name + k.help + " (default: " + k.get(tiny) + ")\n";
  }
  s += "Exit codes: 0 ok, 1 usage, 2 config, 3 data, 4 numeric, 5 protocol, 6 io.\n";
  s += std::string("Environment: ") + kOutDirEnv + " sets the output directory when --out is not given.\n";
  return s;
}

/// Flags shared by commands that read a run configuration.
struct ConfigFlags {
  std::string config_file;
  std::string preset;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "versioned key = value config file");
    app->add_option("--preset", preset, "preset: tiny or small (default: tiny)");
    const RunConfig tiny = preset_config("tiny");
    for (const auto& k : config_keys()) {
      options[k.name] = app->add_option(key_flag(k.name), values[k.name], k.help + " (default: " + k.get(tiny) + ")");
    }
  }

  RunConfig resolve() const {
    ConfigOverrides file, flags;
    if (!config_file.empty()) file = load_config_file(config_file);
    if (!preset.empty()) flags.emplace_back("preset", preset);
    for (const auto& k : config_keys()) {
      if (options.at(k.name)->count() > 0) flags.emplace_back(k.name, values.at(k.name));
    }
    return resolve_config(file, flags);
  }
};

struct Context {
  std::ostream& out;
  std::ostream& err;
  std::vector<std::string> argv;
};

inline std::string resolve_out_dir(const std::string& flag, const std::string& fallback) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv(kOutDirEnv); env && *env) return env;
  return fallback;
}

inline std::shared_ptr<const UnigramVocab> load_vocab_ptr(const std::string& path) {
  return std::make_shared<const UnigramVocab>(load_vocab(path));
}

/// Runs the CLI; returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Context ctx{out, err, std::vector<std::string>(argv, argv + argc)};
  CLI::App app{"polymlm: multilingual masked-language-model pretraining, tensor parallelism and evaluation"};
  app.name("polymlm");
  app.require_subcommand(1);
  app.footer(config_help_footer());
  app.set_version_flag("--version", kToolVersion);

  Manifest manifest;
  std::string out_dir;
  std::function<void()> action;

  // gen-corpus
  auto* gen = app.add_subcommand("gen-corpus", "write a synthetic multilingual corpus and catalog");
  std::string gen_langs, gen_out, task_out, pivot;
  CorpusGenConfig gcfg;
  TaskGenConfig tcfg;
  gen->add_option("--languages", gen_langs, "code:zipf_size:docs[,...]")->required();
  gen->add_option("--seed", gcfg.seed, "generator seed (default: 1)");
  gen->add_option("--min-words", gcfg.min_words, "shortest document in words (default: 8)");
  gen->add_option("--max-words", gcfg.max_words, "longest document in words (default: 24)");
  gen->add_option("--zipf-exponent", gcfg.zipf_exponent, "word frequency exponent (default: 1.1)");
  gen->add_option("--shared-core", gcfg.shared_core, "words shared verbatim by all languages (default: 24)");
  gen->add_option("--successor-prob", gcfg.successor_prob, "probability of a word's fixed successor (default: 0.5)");
  gen->add_option("--docs-per-shard", gcfg.docs_per_shard, "documents per shard file (default: 500)");
  gen->add_option("--out", gen_out, "output directory");
  gen->add_option("--task-out", task_out, "also write a classification task to this directory");
  gen->add_option("--pivot", pivot, "language of the original task training set (default: first)");
  gen->add_option("--task-train", tcfg.train, "task training examples per language (default: 400)");
  gen->add_option("--task-dev", tcfg.dev, "task dev examples per language (default: 100)");
  gen->add_option("--task-test", tcfg.test, "task test examples per language (default: 200)");
  gen->add_option("--task-seed", tcfg.seed, "task seed (default: 7)");
  gen->callback([&] {
    action = [&] {
      out_dir = resolve_out_dir(gen_out, "corpus");
      manifest.seed = gcfg.seed;
      gcfg.languages = parse_language_specs(gen_langs);
      const CorpusCatalog cat = generate_corpus(gcfg, out_dir);
      manifest.artifacts.push_back((std::filesystem::path(out_dir) / "catalog.tsv").string());
      for (std::size_t i = 0; i < cat.languages.size(); ++i) {
        for (const auto& s : cat.shards(i)) manifest.artifacts.push_back(s);
        ctx.out << cat.languages[i].code << "\t" << cat.languages[i].token_count << " tokens\n";
      }
      if (!task_out.empty()) {
        tcfg.pivot = pivot;
        generate_task(gcfg, tcfg, task_out);
        for (const auto& e : std::filesystem::recursive_directory_iterator(task_out))
          if (e.is_regular_file()) manifest.artifacts.push_back(e.path().string());
      }
      manifest.config_hash = hex64(fnv1a(gen_langs + "|" + std::to_string(gcfg.seed)));
      std::sort(manifest.artifacts.begin(), manifest.artifacts.end());
    };
  });

  // train-tokenizer
  auto* tok = app.add_subcommand("train-tokenizer", "train a unigram tokenizer on a corpus catalog");
  std::string tok_catalog, tok_out;
  std::size_t tok_size = preset_config("tiny").model.vocab;
  UnigramTrainerOptions topt;
  tok->add_option("--catalog", tok_catalog, "corpus catalog file")->required();
  tok->add_option("--vocab-size", tok_size, "pieces including special tokens (default: 2000)");
  tok->add_option("--em-iterations", topt.em_iterations, "EM iterations per pruning round (default: 4)");
  tok->add_option("--prune-fraction", topt.prune_fraction, "fraction pruned per round (default: 0.25)");
  tok->add_option("--max-piece-chars", topt.max_piece_chars, "longest piece in characters (default: 16)");
  tok->add_option("--out", tok_out, "output directory");
  tok->callback([&] {
    action = [&] {
      out_dir = resolve_out_dir(tok_out, "tokenizer");
      topt.target_size = tok_size;
      const CorpusCatalog cat = load_catalog(tok_catalog);
      const UnigramVocab v = train_unigram(read_catalog_lines(cat), topt);
      std::filesystem::create_directories(out_dir);
      const auto path = (std::filesystem::path(out_dir) / "vocab.txt").string();
      save_vocab(v, path);
      manifest.artifacts.push_back(path);
      manifest.config_hash = hex64(fnv1a(file_hash(tok_catalog) + "|" + std::to_string(tok_size)));
      ctx.out << "vocabulary: " << v.size() << " pieces -> " << path << "\n";
      if (v.size() != tok_size) ctx.err << "note: corpus supports only " << v.size() << " pieces\n";
    };
  });

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "masked-LM pretraining (serial or tensor-parallel)");
  ConfigFlags pre_cfg;
  std::string pre_catalog, pre_vocab, pre_out, pre_resume;
  std::uint64_t stop_after = 0;
  pre_cfg.attach(pre);
  pre->add_option("--catalog", pre_catalog, "corpus catalog file")->required();
  pre->add_option("--vocab", pre_vocab, "tokenizer vocabulary file")->required();
  pre->add_option("--out", pre_out, "output directory");
  pre->add_option("--resume", pre_resume, "checkpoint to resume from (rank-0 file for shards)");
  pre->add_option("--stop-after", stop_after, "stop after this update (default: run to the end)");
  pre->callback([&] {
    action = [&] {
      out_dir = resolve_out_dir(pre_out, "pretrain");
      RunConfig rc = pre_cfg.resolve();
      auto vocab = load_vocab_ptr(pre_vocab);
      if (vocab->size() != rc.model.vocab) {
        ctx.err << "note: using the tokenizer's " << vocab->size() << " pieces as V (config asked for "
                << rc.model.vocab << ")\n";
        rc.model.vocab = vocab->size();
      }
      manifest.seed = rc.train.seed;
      const std::string cfg_text = serialize_config(rc);
      manifest.config_hash = hex64(fnv1a(cfg_text));
      std::filesystem::create_directories(out_dir);
      const auto cfg_path = (std::filesystem::path(out_dir) / "config.txt").string();
      write_file_atomic(cfg_path, cfg_text);
      PretrainOptions opt;
      opt.out_dir = out_dir;
      opt.resume_from = pre_resume;
      opt.stop_after = stop_after;
      opt.on_update = [&](const LossRecord& r) {
        if (r.update == 1 || r.update % 50 == 0) ctx.out << format_loss_line(r) << "\n";
      };
      const PretrainResult res = pretrain(rc.model, rc.train, load_catalog(pre_catalog), vocab, opt);
      manifest.artifacts = {cfg_path, (std::filesystem::path(out_dir) / "loss.log").string()};
      for (const auto& c : res.checkpoints) {
        if (rc.train.world_size == 1) {
          manifest.artifacts.push_back(c);
        } else {
          for (std::size_t r = 0; r < rc.train.world_size; ++r) manifest.artifacts.push_back(rank_file(c, r));
        }
      }
      if (!res.log.empty()) {
        ctx.out << "final loss " << res.log.back().loss << " after " << group_thousands(res.log.back().tokens_seen)
                << " tokens\n";
      }
    };
  });

  // finetune
  auto* ft = app.add_subcommand("finetune", "fine-tune a checkpoint with early stopping on averaged dev metrics");
  ConfigFlags ft_cfg;
  std::string ft_ck, ft_vocab, ft_data, ft_train_lang, ft_valid, ft_out, ft_task = "classification";
  ft_cfg.attach(ft);
  ft->add_option("--checkpoint", ft_ck, "pretrained checkpoint")->required();
  ft->add_option("--vocab", ft_vocab, "tokenizer vocabulary file")->required();
  ft->add_option("--data", ft_data, "task data root (<root>/<lang>/{train,dev}.tsv)")->required();
  ft->add_option("--train-lang", ft_train_lang, "training language")->required();
  ft->add_option("--valid-langs", ft_valid, "comma-separated validation languages (default: training language)");
  ft->add_option("--task", ft_task, "classification or qa (default: classification)");
  ft->add_option("--out", ft_out, "output directory");

  // eval
  auto* ev = app.add_subcommand("eval", "run a cross-lingual evaluation protocol and write a report");
  ConfigFlags ev_cfg;
  std::string ev_ck, ev_vocab, ev_data, ev_protocol = "zero_shot", ev_train, ev_langs, ev_out, ev_task = "classification";
  ev_cfg.attach(ev);
  ev->add_option("--checkpoint", ev_ck, "pretrained checkpoint")->required();
  ev->add_option("--vocab", ev_vocab, "tokenizer vocabulary file")->required();
  ev->add_option("--data", ev_data, "task data root")->required();
  ev->add_option("--protocol", ev_protocol,
                 "zero_shot, translate_test, translate_train_all or monolingual (default: zero_shot)");
  ev->add_option("--train-lang", ev_train, "training language (not used by monolingual)");
  ev->add_option("--langs", ev_langs, "comma-separated evaluation languages")->required();
  ev->add_option("--task", ev_task, "classification or qa (default: classification)");
  ev->add_option("--out", ev_out, "output directory");

  auto parse_task = [](const std::string& s) {
    if (s == "classification") return TaskFormat::kClassification;
    if (s == "qa") return TaskFormat::kQa;
    throw ConfigError("unknown task '" + s + "' (classification, qa)");
  };

  auto eval_settings = [&](const RunConfig& rc, const std::string& task) {
    EvalSettings s;
    s.finetune = rc.finetune;
    s.format = parse_task(task);
    return s;
  };

  ft->callback([&] {
    action = [&] {
      out_dir = resolve_out_dir(ft_out, "finetune");
      const RunConfig rc = ft_cfg.resolve();
      const Checkpoint ck = load_checkpoint(ft_ck);
      if (ck.shard) throw ConfigError("merge shard checkpoints before fine-tuning (polymlm merge)");
      auto vocab = load_vocab_ptr(ft_vocab);
      const EvalSettings s = eval_settings(rc, ft_task);
      const std::vector<std::string> valid = ft_valid.empty() ? std::vector<std::string>{ft_train_lang} : split_list(ft_valid);
      const TaskFinetuneResult tr = finetune_task(ck, *vocab, ft_data, ft_train_lang, valid, s);
      manifest.seed = rc.finetune.seed;
      EvalProtocol p{ProtocolKind::kZeroShot, {ft_train_lang}, valid};
      manifest.config_hash = eval_config_hash(p, s);
      std::filesystem::create_directories(out_dir);
      Checkpoint best = make_checkpoint(ck.config, tr.result.best_params);
      best.meta["head"] = head_kind_name(tr.head.kind);
      best.meta["num_labels"] = std::to_string(tr.head.num_labels);
      best.meta["best_epoch"] = std::to_string(tr.result.best_epoch);
      for (std::size_t i = 0; i < tr.labels.size() && tr.head.kind == HeadKind::kClassification; ++i) {
        best.meta["label." + std::to_string(i)] = tr.labels[i];
      }
      best.meta["base_checkpoint"] = checkpoint_id(ck);
      const auto ck_path = (std::filesystem::path(out_dir) / "best.bin").string();
      save_checkpoint(ck_path, best);
      nlohmann::ordered_json j;
      j["format"] = "polymlm-finetune-metrics";
      j["version"] = 1;
      j["train_language"] = ft_train_lang;
      j["valid_languages"] = valid;
      j["best_epoch"] = tr.result.best_epoch;
      j["best_average"] = tr.result.best_average;
      nlohmann::ordered_json epochs = nlohmann::ordered_json::array();
      for (const auto& e : tr.result.epochs) {
        epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"per_language", e.per_language},
                          {"average", e.average}});
        ctx.out << "epoch " << e.epoch << "\ttrain_loss " << e.train_loss << "\tdev_average " << e.average << "\n";
      }
      j["epochs"] = epochs;
      const auto metrics_path = (std::filesystem::path(out_dir) / "finetune_metrics.json").string();
      write_file_atomic(metrics_path, j.dump(2) + "\n");
      manifest.artifacts = {ck_path, metrics_path};
      ctx.out << "best epoch " << tr.result.best_epoch << " -> " << ck_path << "\n";
    };
  });

  ev->callback([&] {
    action = [&] {
      out_dir = resolve_out_dir(ev_out, "eval");
      const RunConfig rc = ev_cfg.resolve();
      const Checkpoint ck = load_checkpoint(ev_ck);
      if (ck.shard) throw ConfigError("merge shard checkpoints before evaluation (polymlm merge)");
      auto vocab = load_vocab_ptr(ev_vocab);
      EvalProtocol p;
      p.kind = parse_protocol(ev_protocol);
      if (!ev_train.empty()) p.train_languages = {ev_train};
      p.eval_languages = split_list(ev_langs);
      const EvalReport rep = run_protocol(p, ck, *vocab, ev_data, eval_settings(rc, ev_task));
      manifest.seed = rc.finetune.seed;
      manifest.config_hash = rep.config_hash;
      std::filesystem::create_directories(out_dir);
      const auto path = (std::filesystem::path(out_dir) / "report.json").string();
      write_file_atomic(path, report_json(rep));
      manifest.artifacts.push_back(path);
      for (const auto& lang : p.eval_languages) {
        ctx.out << lang;
        for (const auto& [m, v] : rep.languages.at(lang).test) ctx.out << "\t" << m << " " << v;
        ctx.out << "\n";
      }
      for (const auto& [m, v] : rep.average) ctx.out << "average\t" << m << " " << v << "\n";
    };
  });

  // budget
  auto* bud = app.add_subcommand("budget", "tokens seen by a pretraining run");
  std::uint64_t b_batch = 0, b_seq = 0, b_updates = 0;
  double b_data = 0.0, b_ref = 0.0;
  std::string bud_out;
  bud->add_option("--batch", b_batch, "sequences per update")->required();
  bud->add_option("--seq", b_seq, "tokens per sequence")->required();
  bud->add_option("--updates", b_updates, "number of updates")->required();
  bud->add_option("--dataset-tokens", b_data, "dataset size in tokens, for a size ratio");
  bud->add_option("--reference-tokens", b_ref, "reference dataset size in tokens");
  bud->add_option("--out", bud_out, "directory for the run manifest");
  bud->callback([&] {
    action = [&] {
      out_dir = resolve_out_dir(bud_out, ".");
      const std::uint64_t t = tokens_seen(b_batch, b_seq, b_updates);
      ctx.out << "tokens_seen: " << group_thousands(t) << "\n";
      if (b_data > 0.0 || b_ref > 0.0) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.1f", dataset_ratio(b_data, b_ref));
        ctx.out << "dataset_ratio: " << buf << "\n";
      }
      manifest.config_hash = hex64(fnv1a(std::to_string(b_batch) + "|" + std::to_string(b_seq) + "|" +
                                         std::to_string(b_updates)));
    };
  });

  // merge
  auto* mg = app.add_subcommand("merge", "merge tensor-parallel shard checkpoints into one file");
  std::string mg_shard, mg_out;
  mg->add_option("--shard", mg_shard, "rank-0 shard file (*.rank0.bin)")->required();
  mg->add_option("--out", mg_out, "merged checkpoint path")->required();
  mg->callback([&] {
    action = [&] {
      const Checkpoint first = load_checkpoint(mg_shard);
      if (!first.shard) throw ConfigError(mg_shard + " is not a shard checkpoint");
      std::vector<Checkpoint> shards{first};
      for (std::size_t r = 1; r < first.shard->plan.world_size; ++r) shards.push_back(load_checkpoint(rank_file(mg_shard, r)));
      save_checkpoint(mg_out, merge_checkpoints(shards));
      out_dir = std::filesystem::path(mg_out).parent_path().string();
      if (out_dir.empty()) out_dir = ".";
      manifest.artifacts.push_back(mg_out);
      manifest.config_hash = hex64(fnv1a(file_hash(mg_shard)));
      ctx.out << "merged " << shards.size() << " shards -> " << mg_out << "\n";
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  } catch (const Error& e) {
    err << "error (" << error_kind_name(e.kind()) << "): " << e.what() << "\n";
    return exit_code_for(e.kind());
  }
  manifest.command = app.get_subcommands().front()->get_name();
  manifest.argv = ctx.argv;
  int code = kExitOk;
  std::string message;
  try {
    action();
  } catch (const Error& e) {
    code = exit_code_for(e.kind());
    message = std::string(error_kind_name(e.kind())) + ": " + e.what();
  } catch (const std::exception& e) {
    code = kExitInternal;
    message = e.what();
  }
  if (!message.empty()) err << "error (" << message << ")\n";
  if (!out_dir.empty()) {
    try {
      manifest.write(out_dir, code, message);
    } catch (const std::exception& e) {
      err << "error: cannot write manifest: " << e.what() << "\n";
      if (code == kExitOk) code = kExitIo;
    }
  }
  return code;
}

}  // namespace polymlm::cli
