// nlpl: every pipeline stage as a subcommand.
//
// Options come from flags, optionally preloaded from a TOML file given
// with --config (flags win). Each run writes manifest.json and config.toml
// to its --out directory; `nlpl <command> --config <out>/config.toml`
// repeats it.

#include <algorithm>
#include <atomic>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "nlpl/corpus.hpp"
#include "nlpl/generation.hpp"
#include "nlpl/ngram.hpp"
#include "nlpl/pretrainer.hpp"
#include "nlpl/probing.hpp"
#include "nlpl/search.hpp"
#include "nlpl/tokenizer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace nlpl;

namespace {

enum Exit : int {
  exit_ok = 0,
  exit_internal = 1,
  exit_unknown_flag = 2,
  exit_missing_file = 3,
  exit_io = 4,
  exit_format = 5,
  exit_hash_mismatch = 6,
  exit_numeric = 7,
  exit_insufficient_data = 8,
  exit_invalid_argument = 9,
  exit_usage = 10,
};

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::invalid_argument: return exit_invalid_argument;
    case ErrorKind::io: return exit_io;
    case ErrorKind::format: return exit_format;
    case ErrorKind::hash_mismatch: return exit_hash_mismatch;
    case ErrorKind::numeric: return exit_numeric;
    case ErrorKind::insufficient_data: return exit_insufficient_data;
  }
  return exit_internal;
}

int fail(const std::string& kind, int code, const std::string& message) {
  std::cerr << json{{"error", kind}, {"exit", code}, {"message", message}}.dump() << std::endl;
  return code;
}

struct MissingFile : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// run context

struct Global {
  std::uint64_t seed = 1;
  int workers = 0;  // 0: all cores for pure stages
  std::string log_level = "info";
};

struct InputFlag {
  std::string flag;
  std::string* path;
};

struct Command {
  CLI::App* app = nullptr;
  std::string out;
  std::vector<InputFlag> inputs;
  std::vector<std::string> outputs;
  std::vector<CLI::Option*> required;  // checked after parsing so unknown flags report first
  bool training = false;
  std::function<void(Command&)> run;
};

Global global;
std::vector<std::string> argv_copy;
CLI::App* root = nullptr;

int workers_for(const Command& c) {
  if (c.training) {
    if (global.workers > 1) spdlog::warn("training runs single-threaded; ignoring --workers");
    return 1;
  }
  if (global.workers > 0) return global.workers;
  return std::max(1u, std::thread::hardware_concurrency());
}

template <typename F>
void parallel_for(std::size_t n, int workers, F&& f) {
  const auto threads = std::min<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (std::size_t i; (i = next.fetch_add(1)) < n;) {
          try {
            f(i);
          } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!error) error = std::current_exception();
            next = n;
          }
        }
      });
  }
  if (error) std::rethrow_exception(error);
}

std::string out_path(Command& c, const std::string& name) {
  c.outputs.push_back(name);
  return (fs::path(c.out) / name).string();
}

void write_json(Command& c, const std::string& name, const json& j) {
  write_file(out_path(c, name), j.dump(2) + "\n");
}

void write_lines(Command& c, const std::string& name, const std::vector<json>& rows) {
  std::string text;
  for (const auto& r : rows) text += r.dump() + "\n";
  write_file(out_path(c, name), text);
}

json hash_input(const std::string& path) {
  if (!fs::is_directory(path)) return hex64(hash_file(path));
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(path))
    if (e.is_regular_file() && e.path().filename() != "manifest.json" &&
        e.path().filename() != "config.toml")
      files.push_back(e.path());
  std::sort(files.begin(), files.end());
  json j = json::object();
  for (const auto& f : files) j[f.filename().string()] = hex64(hash_file(f.string()));
  return j;
}

/// Globals plus the options of the command that ran, without unset ones.
std::string resolved_config(const Command& c) {
  std::istringstream in(root->config_to_str(true, false));
  std::string out;
  const std::string prefix = c.app->get_name() + ".";
  for (std::string line; std::getline(in, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos || line.ends_with("=\"\"")) continue;
    const auto key = line.substr(0, eq);
    if (key.find('.') == std::string::npos || key.starts_with(prefix)) out += line + "\n";
  }
  return out;
}

void write_manifest(Command& c) {
  const std::string config = resolved_config(c);
  write_file((fs::path(c.out) / "config.toml").string(), config);
  json inputs = json::object();
  for (const auto& in : c.inputs)
    if (!in.path->empty()) inputs[in.flag] = {{"path", *in.path}, {"fnv1a", hash_input(*in.path)}};
  std::sort(c.outputs.begin(), c.outputs.end());
  c.outputs.erase(std::unique(c.outputs.begin(), c.outputs.end()), c.outputs.end());
  json m{{"command", c.app->get_name()},
         {"argv", argv_copy},
         {"seed", global.seed},
         {"workers", workers_for(c)},
         {"config", config},
         {"inputs", inputs},
         {"outputs", c.outputs}};
  write_file((fs::path(c.out) / "manifest.json").string(), m.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// option helpers

CLI::Option* input(Command& c, const std::string& flag, std::string& var, const std::string& help,
                   bool required = true) {
  c.inputs.push_back({flag.substr(2), &var});
  auto* o = c.app->add_option(flag, var, help);
  if (required) c.required.push_back(o);
  return o;
}

void out_flag(Command& c) {
  c.required.push_back(c.app->add_option("--out", c.out, "Output directory"));
}

struct DataFlags {
  std::string bimodal;
  std::string split;
  std::string partition = "train";
};

void data_flags(Command& c, DataFlags& d, const std::string& partition) {
  d.partition = partition;
  input(c, "--bimodal", d.bimodal, "Bimodal pairs (JSONL from ingest)");
  input(c, "--split", d.split, "Split manifest; all pairs when omitted", false);
  c.app->add_option("--partition", d.partition, "train, dev or test")
      ->check(CLI::IsMember({"train", "dev", "test"}))
      ->capture_default_str();
}

std::vector<BimodalPair> load_pairs(const DataFlags& d, const std::string& partition) {
  auto pairs = load_bimodal(d.bimodal);
  if (d.split.empty()) return pairs;
  auto s = split_from_json(read_file(d.split));
  const auto& ids = partition == "train" ? s.train : partition == "dev" ? s.dev : s.test;
  return select(pairs, ids);
}

std::vector<BimodalPair> head(std::vector<BimodalPair> v, std::size_t n) {
  if (n && v.size() > n) v.resize(n);
  return v;
}

void model_flags(CLI::App* app, ModelConfig& m) {
  m = ModelConfig::desk();
  app->add_option("--layers", m.layers, "Encoder layers")->capture_default_str();
  app->add_option("--hidden", m.hidden, "Hidden width")->capture_default_str();
  app->add_option("--heads", m.heads, "Attention heads")->capture_default_str();
  app->add_option("--ffn", m.ffn, "Feed-forward width")->capture_default_str();
  app->add_option("--max-positions", m.max_positions, "Position embeddings")->capture_default_str();
  app->add_option("--dropout", m.dropout, "Dropout rate")->capture_default_str();
  app->add_option("--tie-mlm-head", m.tie_mlm_head, "Share the MLM output matrix with the embeddings")
      ->capture_default_str();
}

void finetune_flags(CLI::App* app, FinetuneHyperparams& h) {
  app->add_option("--batch-size", h.batch_size)->capture_default_str();
  app->add_option("--lr", h.learning_rate)->capture_default_str();
  app->add_option("--warmup", h.warmup_steps)->capture_default_str();
  app->add_option("--epochs", h.epochs)->capture_default_str();
  app->add_option("--max-len", h.max_len, "Input length")->capture_default_str();
}

json to_json(const EpochLog& e) {
  return {{"epoch", e.epoch},
          {"step", e.step},
          {"train_loss", e.train_loss},
          {"dev_metric", e.dev_metric},
          {"best", e.best}};
}

/// Encoder weights from --init, or a fresh seeded encoder shaped by the
/// model flags.
struct Init {
  std::string path;
  ModelConfig model;
};

void init_flags(Command& c, Init& init) {
  input(c, "--init", init.path, "Pre-trained checkpoint; fresh weights when omitted", false);
  model_flags(c.app, init.model);
}

EncoderParams<Real> load_init(const Init& init, const Vocabulary& vocab, ModelConfig* cfg) {
  if (!init.path.empty()) return load_encoder(Checkpoint::load(init.path, vocab.fingerprint()), cfg);
  *cfg = init.model;
  cfg->vocab_size = static_cast<int>(vocab.size());
  cfg->seed = global.seed;
  cfg->validate();
  Rng rng = make_rng(global.seed, 77);
  return EncoderParams<Real>::init(*cfg, rng);
}

GeneratorPair load_generators(const std::string& dir) {
  return GeneratorPair::load((fs::path(dir) / "generator_nl.json").string(),
                             (fs::path(dir) / "generator_pl.json").string());
}

void print(const std::string& text) { std::cout << text << (text.ends_with('\n') ? "" : "\n"); }

// ---------------------------------------------------------------------------
// subcommands

void add_ingest(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  auto& c = *cmds.emplace_back(std::make_unique<Command>());
  c.app = app.add_subcommand("ingest", "Filter a raw corpus into bimodal pairs and unimodal code");
  auto path = std::make_shared<std::string>();
  auto langs = std::make_shared<std::vector<std::string>>();
  input(c, "--input", *path, "Raw corpus, one JSON record per line");
  c.app->add_option("--languages", *langs, "Accepted language tags (default: all known)");
  out_flag(c);
  c.run = [path, langs](Command& c) {
    std::ifstream in(*path);
    if (!in) throw Error(ErrorKind::io, "cannot read " + *path);
    auto r = langs->empty()
                 ? ingest(in)
                 : ingest(in, LanguageSet(std::set<std::string>(langs->begin(), langs->end())));
    save_bimodal(out_path(c, "bimodal.jsonl"), r.bimodal);
    save_unimodal(out_path(c, "unimodal.jsonl"), r.unimodal);
    std::vector<json> rej;
    std::map<std::string, std::size_t> reasons;
    for (const auto& x : r.rejected) {
      rej.push_back(json::parse(to_jsonl(x)));
      ++reasons[x.reason];
    }
    write_lines(c, "rejected.jsonl", rej);
    json s{{"input", r.input_count},
           {"bimodal", r.bimodal.size()},
           {"unimodal", r.unimodal.size()},
           {"rejected", r.rejected.size()},
           {"reasons", reasons}};
    write_json(c, "summary.json", s);
    print(s.dump());
  };
}

void add_split(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  auto& c = *cmds.emplace_back(std::make_unique<Command>());
  c.app = app.add_subcommand("split", "Seeded train/dev/test split of pair ids");
  auto path = std::make_shared<std::string>();
  auto ratios = std::make_shared<std::vector<double>>(std::vector<double>{0.8, 0.1, 0.1});
  input(c, "--bimodal", *path, "Bimodal pairs");
  c.app->add_option("--ratios", *ratios, "train dev test fractions")->expected(3)->capture_default_str();
  out_flag(c);
  c.run = [path, ratios](Command& c) {
    std::vector<std::string> ids;
    for (const auto& p : load_bimodal(*path)) ids.push_back(p.id);
    auto s = split(ids, {(*ratios)[0], (*ratios)[1], (*ratios)[2]}, global.seed);
    write_file(out_path(c, "split.json"), to_json(s));
    print(json{{"train", s.train.size()}, {"dev", s.dev.size()}, {"test", s.test.size()}}.dump());
  };
}

void add_train_vocab(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  auto& c = *cmds.emplace_back(std::make_unique<Command>());
  c.app = app.add_subcommand("train-vocab", "Learn the shared subword vocabulary");
  struct O {
    DataFlags data;
    std::string unimodal;
    std::size_t size = 8000;
    std::size_t min_pair_count = 2;
  };
  auto o = std::make_shared<O>();
  data_flags(c, o->data, "train");
  input(c, "--unimodal", o->unimodal, "Unimodal code (JSONL from ingest)", false);
  c.app->add_option("--size", o->size, "Target vocabulary size")->capture_default_str();
  c.app->add_option("--min-pair-count", o->min_pair_count)->capture_default_str();
  out_flag(c);
  c.run = [o](Command& c) {
    std::vector<SideText> texts;
    for (const auto& p : load_pairs(o->data, o->data.partition)) {
      texts.push_back({p.doc, Side::nl});
      texts.push_back({p.code, Side::pl});
    }
    if (!o->unimodal.empty())
      for (const auto& u : load_unimodal(o->unimodal)) texts.push_back({u.code, Side::pl});
    auto v = train_subword_vocab(texts, o->size, o->min_pair_count);
    v.save(out_path(c, "vocab.jsonl"));
    print(json{{"size", v.size()}, {"fingerprint", hex64(v.fingerprint())}}.dump());
  };
}

void add_train_generators(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  auto& c = *cmds.emplace_back(std::make_unique<Command>());
  c.app = app.add_subcommand("train-generators", "Fit the NL and PL n-gram generators");
  struct O {
    DataFlags data;
    std::string unimodal, vocab;
    int order = 3;
    double k = 0.01;
  };
  auto o = std::make_shared<O>();
  data_flags(c, o->data, "train");
  input(c, "--unimodal", o->unimodal, "Unimodal code; PL falls back to bimodal code", false);
  input(c, "--vocab", o->vocab, "Vocabulary");
  c.app->add_option("--order", o->order, "n-gram order")->capture_default_str();
  c.app->add_option("--smoothing", o->k, "Add-k constant")->capture_default_str();
  out_flag(c);
  c.run = [o](Command& c) {
    auto vocab = Vocabulary::load(o->vocab);
    auto pairs = load_pairs(o->data, o->data.partition);
    std::vector<UnimodalCode> uni;
    if (!o->unimodal.empty()) uni = load_unimodal(o->unimodal);
    std::string warning;
    auto g = prepare_generators(pairs, uni, vocab, o->order, o->k, &warning);
    if (!warning.empty()) spdlog::warn(warning);
    g.save(out_path(c, "generator_nl.json"), out_path(c, "generator_pl.json"));
    write_json(c, "summary.json",
               {{"nl_provenance", to_string(g.nl.provenance())},
                {"pl_provenance", to_string(g.pl.provenance())},
                {"support", g.nl.support_size()},
                {"warning", warning}});
  };
}

struct PretrainFlags {
  DataFlags data;
  std::string vocab, generators;
  PretrainHyperparams hp;
  std::size_t max_len = 0;
};

void pretrain_data_flags(Command& c, PretrainFlags& o) {
  data_flags(c, o.data, "train");
  input(c, "--vocab", o.vocab, "Vocabulary");
  input(c, "--generators", o.generators, "Directory written by train-generators");
  c.app->add_option("--max-len", o.max_len, "Input length (default: max positions)");
}

void pretrain_hp_flags(CLI::App* app, PretrainHyperparams& hp) {
  app->add_option("--batch-size", hp.batch_size)->capture_default_str();
  app->add_option("--lr", hp.learning_rate)->capture_default_str();
  app->add_option("--warmup", hp.warmup_steps)->capture_default_str();
  app->add_option("--mask-rate", hp.mask_rate)->capture_default_str();
}

void run_pretraining(Command& c, TrainState& state, const PretrainFlags& o, const ModelConfig& cfg,
                     const PretrainHyperparams& hp, const Vocabulary& vocab) {
  workers_for(c);
  auto gens = load_generators(o.generators);
  const std::size_t max_len = o.max_len ? o.max_len : static_cast<std::size_t>(cfg.max_positions);
  auto data = encode_pairs(load_pairs(o.data, o.data.partition), vocab, max_len);
  PretrainOptions opt;
  opt.vocab_fingerprint = vocab.fingerprint();
  opt.checkpoint_dir = c.out;
  opt.loss_log = out_path(c, "loss.jsonl");
  fs::remove(opt.loss_log);
  opt.on_step = [&](const StepLog& l) {
    if (l.step % 100 == 0)
      spdlog::info("step {}: mlm {:.4f} rtd {:.4f} (running {:.4f} / {:.4f})", l.step, l.mlm_loss,
                   l.rtd_loss, state.running_mlm, state.running_rtd);
  };
  for (const auto& p : pretrain(state, data, gens, cfg, hp, opt))
    c.outputs.push_back(fs::path(p).filename().string());
  to_checkpoint(state, cfg, hp, vocab.fingerprint()).save(out_path(c, "final.ckpt"));
  json s{{"step", state.step},
         {"running_mlm", state.running_mlm},
         {"running_rtd", state.running_rtd},
         {"examples", data.size()}};
  write_json(c, "summary.json", s);
  print(s.dump());
}

void add_pretrain(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  auto& c = *cmds.emplace_back(std::make_unique<Command>());
  c.app = app.add_subcommand("pretrain", "Pre-train the encoder on the hybrid objective");
  c.training = true;
  struct O : PretrainFlags {
    ModelConfig model;
  };
  auto o = std::make_shared<O>();
  pretrain_data_flags(c, *o);
  model_flags(c.app, o->model);
  pretrain_hp_flags(c.app, o->hp);
  c.app->add_option("--steps", o->hp.max_steps)->capture_default_str();
  c.app->add_option("--checkpoint-interval", o->hp.checkpoint_interval)->capture_default_str();
  out_flag(c);
  c.run = [o](Command& c) {
    auto vocab = Vocabulary::load(o->vocab);
    auto cfg = o->model;
    cfg.vocab_size = static_cast<int>(vocab.size());
    cfg.seed = global.seed;
    auto hp = o->hp;
    hp.seed = global.seed;
    cfg.validate();
    hp.validate();
    auto state = TrainState::fresh(cfg, hp);
    run_pretraining(c, state, *o, cfg, hp, vocab);
  };
}

void add_resume(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  auto& c = *cmds.emplace_back(std::make_unique<Command>());
  c.app = app.add_subcommand("resume", "Continue pre-training from a checkpoint");
  c.training = true;
  struct O : PretrainFlags {
    std::string checkpoint;
    std::optional<int> steps, interval;
  };
  auto o = std::make_shared<O>();
  input(c, "--checkpoint", o->checkpoint, "Pre-training checkpoint");
  pretrain_data_flags(c, *o);
  c.required.push_back(c.app->add_option("--steps", o->steps, "New total step count"));
  c.app->add_option("--checkpoint-interval", o->interval);
  out_flag(c);
  c.run = [o](Command& c) {
    auto vocab = Vocabulary::load(o->vocab);
    auto ckpt = Checkpoint::load(o->checkpoint, vocab.fingerprint());
    auto cfg = ModelConfig::from_json(ckpt.config.dump());
    if (!ckpt.meta.contains("hyperparams"))
      throw Error(ErrorKind::format, o->checkpoint + " is not a pre-training checkpoint");
    auto hp = PretrainHyperparams::from_json(ckpt.meta.at("hyperparams"));
    hp.max_steps = *o->steps;
    if (o->interval) hp.checkpoint_interval = *o->interval;
    auto state = state_from_checkpoint(ckpt, cfg, hp);
    run_pretraining(c, state, *o, cfg, hp, vocab);
  };
}

struct SearchFlags {
  DataFlags data;
  std::string vocab;
  Init init;
  FinetuneHyperparams hp;
  std::size_t train_pairs = 0, dev_pairs = 0;
};

void search_flags(Command& c, SearchFlags& o) {
  data_flags(c, o.data, "train");
  input(c, "--vocab", o.vocab, "Vocabulary");
  init_flags(c, o.init);
  finetune_flags(c.app, o.hp);
  c.app->add_option("--train-pairs", o.train_pairs, "Use the first N train pairs (0: all)");
  c.app->add_option("--dev-pairs", o.dev_pairs, "Use the first N dev pairs (0: all)");
}

struct ClassifierResult {
  ClassifierRun run;
  ModelConfig cfg;
};

ClassifierResult train_classifier(const SearchFlags& o, const Vocabulary& vocab,
                                  const std::string& init_path, const std::string& checkpoint_dir) {
  Init init = o.init;
  init.path = init_path;
  ClassifierResult r;
  auto params = load_init(init, vocab, &r.cfg);
  auto train = head(load_pairs(o.data, "train"), o.train_pairs);
  auto dev = o.data.split.empty() ? std::vector<BimodalPair>{} : head(load_pairs(o.data, "dev"), o.dev_pairs);
  Rng rng = make_rng(global.seed, 5);
  auto train_ex = build_balanced_dataset(train, rng);
  auto dev_ex = dev.size() >= 2 ? build_balanced_dataset(dev, rng) : std::vector<SearchExample>{};
  auto hp = o.hp;
  hp.seed = global.seed;
  FinetuneOptions fo;
  fo.vocab_fingerprint = vocab.fingerprint();
  fo.checkpoint_dir = checkpoint_dir;
  fo.on_epoch = [](const EpochLog& e) {
    spdlog::info("epoch {}: loss {:.4f}, dev accuracy {:.4f}", e.epoch, e.train_loss, e.dev_metric);
  };
  r.run = finetune_classifier(params, r.cfg, vocab, train_ex, dev_ex, hp, fo);
  return r;
}

void add_finetune_search(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  auto& c = *cmds.emplace_back(std::make_unique<Command>());
  c.app = app.add_subcommand("finetune-search", "Fine-tune the relevance classifier");
  c.training = true;
  auto o = std::make_shared<SearchFlags>();
  search_flags(c, *o);
  out_flag(c);
  c.run = [o](Command& c) {
    workers_for(c);
    auto vocab = Vocabulary::load(o->vocab);
    auto r = train_classifier(*o, vocab, o->init.path, (fs::path(c.out) / "epochs").string());
    to_checkpoint(r.run.model, r.cfg, vocab.fingerprint(), r.run.epochs.empty() ? 0 : r.run.epochs.back().step,
                  {{"best_epoch", r.run.best_epoch}})
        .save(out_path(c, "best.ckpt"));
    std::vector<json> rows;
    for (const auto& e : r.run.epochs) rows.push_back(to_json(e));
    write_lines(c, "epochs.jsonl", rows);
    c.outputs.push_back("epochs");
    print(json{{"best_epoch", r.run.best_epoch}}.dump());
  };
}

/// Scores every (query, candidate) pair evaluate_mrr will ask for, spread
/// over workers, then replays the evaluation from the table.
MRRReport parallel_mrr(const std::vector<BimodalPair>& test, const PairScorer& scorer, int k,
                       int workers) {
  std::vector<std::pair<std::size_t, std::size_t>> wanted;
  const auto level = spdlog::get_level();
  spdlog::set_level(spdlog::level::err);
  evaluate_mrr(test, [&](std::size_t q, std::size_t d) {
    wanted.emplace_back(q, d);
    return 0.0;
  }, k, global.seed);
  spdlog::set_level(level);
  std::vector<double> values(wanted.size());
  parallel_for(wanted.size(), workers, [&](std::size_t i) { values[i] = scorer(wanted[i].first, wanted[i].second); });
  std::map<std::pair<std::size_t, std::size_t>, double> table;
  for (std::size_t i = 0; i < wanted.size(); ++i) table[wanted[i]] = values[i];
  return evaluate_mrr(test, [&](std::size_t q, std::size_t d) { return table.at({q, d}); }, k,
                      global.seed);
}

PairScorer random_scorer(std::size_t n) {
  return [n](std::size_t q, std::size_t d) {
    Rng rng = make_rng(global.seed, 99, q * n + d);
    return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  };
}

struct EvalFlags {
  std::optional<int> distractors;
  std::size_t max_queries = 0;
  std::size_t max_len = 128;
};

void eval_flags(CLI::App* app, EvalFlags& e) {
  app->add_option("--distractors", e.distractors, "K (default: 999 capped at the pool)");
  app->add_option("--max-queries", e.max_queries, "Use the first N test pairs (0: all)");
}

int distractors_for(const EvalFlags& e, const std::vector<BimodalPair>& test) {
  std::string warning;
  const int k = resolve_distractors(e.distractors, test, &warning);
  if (!warning.empty()) spdlog::warn(warning);
  return k;
}

void add_eval_mrr(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  auto& c = *cmds.emplace_back(std::make_unique<Command>());
  c.app = app.add_subcommand("eval-mrr", "Rank each true code among K distractors");
  struct O {
    DataFlags data;
    std::string vocab, model, scorer = "auto";
    EvalFlags eval;
  };
  auto o = std::make_shared<O>();
  data_flags(c, o->data, "test");
  input(c, "--vocab", o->vocab, "Vocabulary", false);
  input(c, "--model", o->model, "Classifier or encoder checkpoint", false);
  c.app->add_option("--scorer", o->scorer, "auto, classifier, latefusion or random")
      ->check(CLI::IsMember({"auto", "classifier", "latefusion", "random"}))
      ->capture_default_str();
  eval_flags(c.app, o->eval);
  c.app->add_option("--max-len", o->eval.max_len, "Input length")->capture_default_str();
  out_flag(c);
  c.run = [o](Command& c) {
    auto test = head(load_pairs(o->data, o->data.partition), o->eval.max_queries);
    const int k = distractors_for(o->eval, test);
    std::string kind = o->scorer;
    MRRReport rep;
    if (kind == "random") {
      rep = evaluate_mrr(test, random_scorer(test.size()), k, global.seed);
    } else {
      if (o->model.empty() || o->vocab.empty())
        throw Error(ErrorKind::invalid_argument, "--model and --vocab are required for model scorers");
      auto vocab = Vocabulary::load(o->vocab);
      auto ckpt = Checkpoint::load(o->model, vocab.fingerprint());
      if (kind == "auto") kind = ckpt.kind == "search-classifier" ? "classifier" : "latefusion";
      if (kind == "classifier") {
        ModelConfig cfg;
        auto m = classifier_from_checkpoint(ckpt, &cfg);
        rep = parallel_mrr(test, classifier_scorer(m, cfg, vocab, test, o->eval.max_len), k,
                           workers_for(c));
      } else {
        ModelConfig cfg;
        auto p = load_encoder(ckpt, &cfg);
        rep = evaluate_mrr(test, latefusion_scorer(p, cfg, vocab, test, o->eval.max_len), k,
                           global.seed);
      }
    }
    auto j = rep.to_json();
    j["scorer"] = kind;
    j["random_expectation"] = random_scorer_mrr(k);
    write_json(c, "mrr.json", j);
    print(rep.to_table());
  };
}

void add_learning_curve(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  auto& c = *cmds.emplace_back(std::make_unique<Command>());
  c.app = app.add_subcommand("learning-curve",
                             "Fine-tune and evaluate every checkpoint of a pre-training run");
  c.training = true;
  struct O : SearchFlags {
    std::string checkpoints;
    EvalFlags eval;
    bool scratch = false;
  };
  auto o = std::make_shared<O>();
  input(c, "--checkpoints", o->checkpoints, "Directory of step-*.ckpt files");
  search_flags(c, *o);
  eval_flags(c.app, o->eval);
  c.app->add_flag("--include-scratch", o->scratch, "Also evaluate a fresh encoder as step 0");
  out_flag(c);
  c.run = [o](Command& c) {
    auto vocab = Vocabulary::load(o->vocab);
    std::vector<std::pair<std::int64_t, std::string>> series;
    for (const auto& e : fs::directory_iterator(o->checkpoints)) {
      const auto name = e.path().filename().string();
      if (name.starts_with("step-") && name.ends_with(".ckpt"))
        series.emplace_back(Checkpoint::load(e.path().string()).step, e.path().string());
    }
    std::sort(series.begin(), series.end());
    if (o->scratch) series.insert(series.begin(), {0, ""});
    if (series.empty()) throw Error(ErrorKind::insufficient_data, "no step-*.ckpt files in " + o->checkpoints);
    auto test = head(load_pairs(o->data, "test"), o->eval.max_queries);
    const int k = distractors_for(o->eval, test);
    std::vector<json> rows;
    std::ostringstream table;
    table << "step\tMRR\tdev accuracy\n";
    for (const auto& [step, path] : series) {
      spdlog::info("learning curve: step {}", step);
      auto r = train_classifier(*o, vocab, path, "");
      auto rep = parallel_mrr(test, classifier_scorer(r.run.model, r.cfg, vocab, test, o->hp.max_len), k, 1);
      double dev = 0.0;
      for (const auto& e : r.run.epochs)
        if (e.epoch == r.run.best_epoch) dev = e.dev_metric;
      rows.push_back({{"step", step}, {"mrr", rep.macro_average}, {"dev_accuracy", dev},
                      {"checkpoint", path}});
      table << step << '\t' << rep.macro_average << '\t' << dev << '\n';
    }
    write_lines(c, "curve.jsonl", rows);
    print(table.str());
  };
}

void add_finetune_latefusion(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  auto& c = *cmds.emplace_back(std::make_unique<Command>());
  c.app = app.add_subcommand("finetune-latefusion", "Fine-tune a shared encoder with in-batch negatives");
  c.training = true;
  auto o = std::make_shared<SearchFlags>();
  search_flags(c, *o);
  out_flag(c);
  c.run = [o](Command& c) {
    workers_for(c);
    auto vocab = Vocabulary::load(o->vocab);
    ModelConfig cfg;
    auto params = load_init(o->init, vocab, &cfg);
    auto train = head(load_pairs(o->data, "train"), o->train_pairs);
    auto dev = o->data.split.empty() ? std::vector<BimodalPair>{} : head(load_pairs(o->data, "dev"), o->dev_pairs);
    auto hp = o->hp;
    hp.seed = global.seed;
    FinetuneOptions fo;
    fo.vocab_fingerprint = vocab.fingerprint();
    fo.checkpoint_dir = (fs::path(c.out) / "epochs").string();
    fo.on_epoch = [](const EpochLog& e) {
      spdlog::info("epoch {}: loss {:.4f}, dev loss {:.4f}", e.epoch, e.train_loss, e.dev_metric);
    };
    auto run = finetune_latefusion(params, cfg, vocab, train, dev, hp, fo);
    Checkpoint ck;
    ck.kind = "latefusion-encoder";
    ck.config = json::parse(cfg.to_json());
    ck.vocab_fingerprint = vocab.fingerprint();
    ck.step = run.epochs.empty() ? 0 : run.epochs.back().step;
    ck.meta = {{"best_epoch", run.best_epoch}, {"hyperparams", hp.to_json()}};
    ck.put("param", run.model);
    ck.save(out_path(c, "best.ckpt"));
    std::vector<json> rows;
    for (const auto& e : run.epochs) rows.push_back(to_json(e));
    write_lines(c, "epochs.jsonl", rows);
    c.outputs.push_back("epochs");
    print(json{{"best_epoch", run.best_epoch}}.dump());
  };
}

void add_build_index(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  auto& c = *cmds.emplace_back(std::make_unique<Command>());
  c.app = app.add_subcommand("build-index", "Encode code snippets into a retrieval index");
  struct O {
    DataFlags data;
    std::string vocab, model;
    std::size_t max_len = 128;
  };
  auto o = std::make_shared<O>();
  data_flags(c, o->data, "test");
  input(c, "--vocab", o->vocab, "Vocabulary");
  input(c, "--model", o->model, "Encoder checkpoint");
  c.app->add_option("--max-len", o->max_len)->capture_default_str();
  out_flag(c);
  c.run = [o](Command& c) {
    auto vocab = Vocabulary::load(o->vocab);
    ModelConfig cfg;
    auto params = load_encoder(Checkpoint::load(o->model, vocab.fingerprint()), &cfg);
    std::vector<std::pair<std::string, std::vector<std::string>>> codes;
    for (const auto& p : load_pairs(o->data, o->data.partition)) codes.emplace_back(p.id, p.pl_tokens);
    auto index = build_index(codes, params, cfg, vocab, o->max_len);
    index.save(out_path(c, "index.bin"));
    print(json{{"entries", index.size()}, {"encoder", hex64(index.encoder_hash)}}.dump());
  };
}

void add_query(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  auto& c = *cmds.emplace_back(std::make_unique<Command>());
  c.app = app.add_subcommand("query", "Top-k code for natural-language queries");
  struct O {
    std::string index, vocab, model, queries;
    std::vector<std::string> text;
    std::size_t k = 10, max_len = 128;
  };
  auto o = std::make_shared<O>();
  input(c, "--index", o->index, "Index from build-index");
  input(c, "--vocab", o->vocab, "Vocabulary");
  input(c, "--model", o->model, "The encoder the index was built with");
  input(c, "--queries", o->queries, "File with one query per line", false);
  c.app->add_option("--text", o->text, "Query text (repeatable)");
  c.app->add_option("--k", o->k)->capture_default_str();
  c.app->add_option("--max-len", o->max_len)->capture_default_str();
  out_flag(c);
  c.run = [o](Command& c) {
    auto vocab = Vocabulary::load(o->vocab);
    ModelConfig cfg;
    auto params = load_encoder(Checkpoint::load(o->model, vocab.fingerprint()), &cfg);
    auto index = RetrievalIndex::load(o->index);
    auto texts = o->text;
    if (!o->queries.empty()) {
      std::istringstream in(read_file(o->queries));
      for (std::string line; std::getline(in, line);)
        if (!split_whitespace(line).empty()) texts.push_back(line);
    }
    if (texts.empty()) throw Error(ErrorKind::invalid_argument, "no queries given");
    std::vector<json> rows;
    for (const auto& t : texts) {
      auto hits = query(index, params, cfg, vocab, pretokenize(t, Side::nl), o->k, o->max_len);
      for (std::size_t r = 0; r < hits.size(); ++r) {
        rows.push_back({{"query", t}, {"rank", r + 1}, {"id", hits[r].id}, {"score", hits[r].score}});
        print(rows.back().dump());
      }
    }
    write_lines(c, "hits.jsonl", rows);
  };
}

void add_probe_build(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  auto& c = *cmds.emplace_back(std::make_unique<Command>());
  c.app = app.add_subcommand("probe-build", "Build cloze probing instances");
  struct O {
    DataFlags data;
    std::string vocab;
    std::size_t max_len = 256;
    std::vector<std::string> sides{"NL4", "PL2", "PL2-preceding"};
  };
  auto o = std::make_shared<O>();
  data_flags(c, o->data, "test");
  input(c, "--vocab", o->vocab, "Vocabulary");
  c.app->add_option("--max-len", o->max_len)->capture_default_str();
  c.app->add_option("--sides", o->sides)
      ->check(CLI::IsMember({"NL4", "PL2", "PL2-preceding"}))
      ->capture_default_str();
  out_flag(c);
  c.run = [o](Command& c) {
    auto vocab = Vocabulary::load(o->vocab);
    auto pairs = load_pairs(o->data, o->data.partition);
    ProbeBuildLog log;
    std::vector<ProbeInstance> all;
    for (const auto& s : o->sides) {
      const auto side = probe_side_from_string(s);
      auto part = side == ProbeSide::nl4
                      ? build_nl_probes(pairs, vocab, o->max_len, &log)
                      : build_pl_probes(pairs, vocab, o->max_len, side == ProbeSide::pl2_preceding, &log);
      all.insert(all.end(), part.begin(), part.end());
    }
    write_file(out_path(c, "probes.jsonl"), serialize_probes(all));
    json s{{"instances", all.size()},
           {"skipped_ambiguous", log.skipped_ambiguous},
           {"skipped_truncated", log.skipped_truncated}};
    write_json(c, "summary.json", s);
    print(s.dump());
  };
}

void add_probe_eval(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  auto& c = *cmds.emplace_back(std::make_unique<Command>());
  c.app = app.add_subcommand("probe-eval", "Zero-shot probing accuracy of an encoder");
  struct O {
    std::string probes, model;
  };
  auto o = std::make_shared<O>();
  input(c, "--probes", o->probes, "Instances from probe-build");
  input(c, "--model", o->model, "Encoder checkpoint with its MLM head");
  out_flag(c);
  c.run = [o](Command& c) {
    auto instances = deserialize_probes(read_file(o->probes));
    if (instances.empty()) throw Error(ErrorKind::insufficient_data, "no probing instances");
    ModelConfig cfg;
    auto params = load_encoder(Checkpoint::load(o->model), &cfg);
    std::vector<ProbeScore> scores(instances.size());
    parallel_for(instances.size(), workers_for(c),
                 [&](std::size_t i) { scores[i] = zero_shot_score(params, cfg, instances[i]); });
    std::vector<std::size_t> chosen;
    std::vector<json> rows;
    for (std::size_t i = 0; i < instances.size(); ++i) {
      chosen.push_back(scores[i].chosen);
      rows.push_back({{"id", instances[i].id},
                      {"chosen", scores[i].chosen},
                      {"gold", instances[i].gold},
                      {"tie", scores[i].tie},
                      {"scores", scores[i].candidate_scores}});
    }
    auto rep = tally(instances, chosen);
    write_json(c, "report.json", rep.to_json());
    write_lines(c, "scores.jsonl", rows);
    print(rep.to_table());
  };
}

void add_finetune_gen(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  auto& c = *cmds.emplace_back(std::make_unique<Command>());
  c.app = app.add_subcommand("finetune-gen", "Fine-tune an encoder-decoder for documentation generation");
  c.training = true;
  struct O : SearchFlags {
    DecoderConfig dec;
    std::optional<int> dec_layers, dec_heads, dec_ffn;
  };
  auto o = std::make_shared<O>();
  search_flags(c, *o);
  c.app->add_option("--decoder-layers", o->dec_layers, "Default 2");
  c.app->add_option("--decoder-heads", o->dec_heads, "Default: encoder heads");
  c.app->add_option("--decoder-ffn", o->dec_ffn, "Default: encoder ffn");
  c.app->add_option("--max-target-len", o->dec.max_target_len)->capture_default_str();
  c.app->add_option("--decoder-dropout", o->dec.dropout)->capture_default_str();
  out_flag(c);
  c.run = [o](Command& c) {
    workers_for(c);
    auto vocab = Vocabulary::load(o->vocab);
    ModelConfig cfg;
    auto params = load_init(o->init, vocab, &cfg);
    auto dec = DecoderConfig::matching(cfg);
    if (o->dec_layers) dec.layers = *o->dec_layers;
    if (o->dec_heads) dec.heads = *o->dec_heads;
    if (o->dec_ffn) dec.ffn = *o->dec_ffn;
    dec.max_target_len = o->dec.max_target_len;
    dec.dropout = o->dec.dropout;
    dec.validate(cfg);
    auto train = head(load_pairs(o->data, "train"), o->train_pairs);
    auto dev = o->data.split.empty() ? std::vector<BimodalPair>{} : head(load_pairs(o->data, "dev"), o->dev_pairs);
    auto hp = o->hp;
    hp.seed = global.seed;
    FinetuneOptions fo;
    fo.vocab_fingerprint = vocab.fingerprint();
    fo.checkpoint_dir = (fs::path(c.out) / "epochs").string();
    auto run = finetune_seq2seq(params, cfg, dec, vocab, train, dev, hp, fo);
    to_checkpoint(run.model, cfg, dec, vocab.fingerprint(), run.epochs.empty() ? 0 : run.epochs.back().step,
                  {{"best_epoch", run.best_epoch}, {"hyperparams", hp.to_json()}})
        .save(out_path(c, "best.ckpt"));
    std::vector<json> rows;
    for (const auto& e : run.epochs) rows.push_back(to_json(e));
    write_lines(c, "epochs.jsonl", rows);
    c.outputs.push_back("epochs");
    print(json{{"best_epoch", run.best_epoch}}.dump());
  };
}

void add_generate(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  auto& c = *cmds.emplace_back(std::make_unique<Command>());
  c.app = app.add_subcommand("generate", "Generate documentation for code");
  struct O {
    DataFlags data;
    std::string vocab, model;
    int beam = 1;
    std::size_t max_len = 128;
  };
  auto o = std::make_shared<O>();
  data_flags(c, o->data, "test");
  input(c, "--vocab", o->vocab, "Vocabulary");
  input(c, "--model", o->model, "Checkpoint from finetune-gen");
  c.app->add_option("--beam", o->beam, "Beam width; 1 is greedy")->check(CLI::PositiveNumber)->capture_default_str();
  c.app->add_option("--max-len", o->max_len, "Source length")->capture_default_str();
  out_flag(c);
  c.run = [o](Command& c) {
    auto vocab = Vocabulary::load(o->vocab);
    ModelConfig cfg;
    DecoderConfig dec;
    auto model = seq2seq_from_checkpoint(Checkpoint::load(o->model, vocab.fingerprint()), &cfg, &dec);
    auto pairs = load_pairs(o->data, o->data.partition);
    std::vector<std::string> out(pairs.size());
    parallel_for(pairs.size(), workers_for(c), [&](std::size_t i) {
      auto ids = generate(model, cfg, dec, source_input(pairs[i].pl_tokens, vocab, o->max_len),
                          Decoding{o->beam});
      std::string s;
      for (const auto& w : output_words(ids, vocab)) s += (s.empty() ? "" : " ") + w;
      out[i] = s;
    });
    std::vector<json> rows;
    for (std::size_t i = 0; i < pairs.size(); ++i)
      rows.push_back({{"id", pairs[i].id}, {"candidate", out[i]}});
    write_lines(c, "generations.jsonl", rows);
    print(json{{"generated", rows.size()}}.dump());
  };
}

void add_eval_bleu(CLI::App& app, std::vector<std::unique_ptr<Command>>& cmds) {
  auto& c = *cmds.emplace_back(std::make_unique<Command>());
  c.app = app.add_subcommand("eval-bleu", "Smoothed BLEU-4 of generated documentation");
  struct O {
    std::string generations, bimodal;
    bool per_example = false;
  };
  auto o = std::make_shared<O>();
  input(c, "--generations", o->generations, "JSONL with id and candidate");
  input(c, "--bimodal", o->bimodal, "Pairs holding the reference documentation");
  c.app->add_flag("--per-example", o->per_example, "Include sentence scores in the report");
  out_flag(c);
  c.run = [o](Command& c) {
    std::map<std::string, const BimodalPair*> by_id;
    auto pairs = load_bimodal(o->bimodal);
    for (const auto& p : pairs) by_id[p.id] = &p;
    std::vector<ScoredOutput> outputs;
    std::istringstream in(read_file(o->generations));
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
      ++line_no;
      if (line.empty()) continue;
      json j;
      try {
        j = json::parse(line);
      } catch (const json::exception&) {
        throw Error(ErrorKind::format, o->generations + ":" + std::to_string(line_no) + ": not JSON");
      }
      const auto id = j.at("id").get<std::string>();
      auto it = by_id.find(id);
      if (it == by_id.end()) throw Error(ErrorKind::format, "no reference for " + id);
      auto ref = reference_words(it->second->nl_tokens);
      if (ref.empty()) {
        spdlog::warn("skipping {}: empty reference documentation", id);
        continue;
      }
      outputs.push_back({id, it->second->language, split_whitespace(j.at("candidate").get<std::string>()), ref});
    }
    auto rep = bleu_report(outputs, o->per_example);
    write_json(c, "bleu.json", rep.to_json());
    print(rep.to_table());
  };
}

}  // namespace

int main(int argc, char** argv) {
  argv_copy.assign(argv + 1, argv + argc);
  CLI::App app{"Bimodal pre-training, fine-tuning and evaluation pipeline", "nlpl"};
  root = &app;
  app.set_config("--config", "", "TOML file with option values; flags take precedence");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.add_option("--seed", global.seed, "Seed for every random choice of the run")->capture_default_str();
  app.add_option("--workers", global.workers, "Worker threads (0: all cores; training uses 1)")
      ->capture_default_str();
  app.add_option("--log-level", global.log_level)
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}))
      ->capture_default_str();
  app.require_subcommand(1);
  app.fallthrough();

  std::vector<std::unique_ptr<Command>> cmds;
  add_ingest(app, cmds);
  add_split(app, cmds);
  add_train_vocab(app, cmds);
  add_train_generators(app, cmds);
  add_pretrain(app, cmds);
  add_resume(app, cmds);
  add_finetune_search(app, cmds);
  add_eval_mrr(app, cmds);
  add_learning_curve(app, cmds);
  add_build_index(app, cmds);
  add_query(app, cmds);
  add_finetune_latefusion(app, cmds);
  add_probe_build(app, cmds);
  add_probe_eval(app, cmds);
  add_finetune_gen(app, cmds);
  add_generate(app, cmds);
  add_eval_bleu(app, cmds);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ExtrasError& e) {
    return fail("unknown_flag", exit_unknown_flag, e.what());
  } catch (const CLI::ConfigError& e) {
    return fail("unknown_flag", exit_unknown_flag, e.what());
  } catch (const CLI::FileError& e) {
    return fail("missing_file", exit_missing_file, e.what());
  } catch (const CLI::ParseError& e) {
    return fail("usage", exit_usage, e.what());
  }

  auto logger = spdlog::stderr_color_mt("nlpl");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::from_str(global.log_level));

  Command* cmd = nullptr;
  for (auto& c : cmds)
    if (c->app->parsed()) cmd = c.get();
  for (auto* o : cmd->required)
    if (o->count() == 0) return fail("usage", exit_usage, o->get_name() + " is required");
  try {
    for (const auto& in : cmd->inputs)
      if (!in.path->empty() && !fs::exists(*in.path))
        throw MissingFile("--" + in.flag + ": no such file: " + *in.path);
    fs::create_directories(cmd->out);
    cmd->run(*cmd);
    write_manifest(*cmd);
  } catch (const MissingFile& e) {
    return fail("missing_file", exit_missing_file, e.what());
  } catch (const Error& e) {
    return fail(std::string(to_string(e.kind())), exit_code(e.kind()), e.what());
  } catch (const std::exception& e) {
    return fail("internal", exit_internal, e.what());
  }
  return exit_ok;
}
