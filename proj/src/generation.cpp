#include "nlpl/generation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <sstream>

#include <spdlog/spdlog.h>

#include "nlpl/optimizer.hpp"

namespace nlpl {

using nlohmann::json;

namespace {

constexpr std::uint64_t kDecoderStream = 40;
constexpr std::uint64_t kShuffleStream = 41;
constexpr std::uint64_t kDropoutStream = 42;

std::string epoch_checkpoint_path(const std::string& dir, int epoch) {
  char name[32];
  std::snprintf(name, sizeof(name), "epoch-%03d.ckpt", epoch);
  return (std::filesystem::path(dir) / name).string();
}

bool may_emit(TokenId id) { return id == special::eos || !is_special(id); }

/// Log-probabilities of the next token given [BOS] + prefix.
RowVector<Real> next_log_probs(const Seq2SeqModel<Real>& model, const DecoderConfig& dec_cfg,
                               const Matrix<Real>& memory, const TokenIds& prefix) {
  TokenIds in{special::bos};
  in.insert(in.end(), prefix.begin(), prefix.end());
  Matrix<Real> logits = decoder_forward(model.decoder, dec_cfg, in, memory, Mode::eval);
  Matrix<Real> last = logits.bottomRows(1);
  return log_softmax_rows(last).row(0);
}

}  // namespace

Seq2SeqModel<Real> fresh_seq2seq(const EncoderParams<Real>& init, const ModelConfig& enc_cfg,
                                 const DecoderConfig& dec_cfg, std::uint64_t seed) {
  dec_cfg.validate(enc_cfg);
  Seq2SeqModel<Real> m;
  m.encoder = init;
  Rng rng = make_rng(seed, kDecoderStream);
  m.decoder = DecoderParams<Real>::init(dec_cfg, enc_cfg.vocab_size, rng);
  return m;
}

EncodedInput source_input(const std::vector<std::string>& pl_tokens, const Vocabulary& vocab,
                          std::size_t max_len) {
  return single_segment_input(pl_tokens, vocab, Side::pl, max_len);
}

TokenIds target_ids(const std::vector<std::string>& nl_tokens, const Vocabulary& vocab) {
  return encode_words(nl_tokens, vocab, Side::nl);
}

Seq2SeqRun finetune_seq2seq(const EncoderParams<Real>& init, const ModelConfig& enc_cfg,
                            const DecoderConfig& dec_cfg, const Vocabulary& vocab,
                            const std::vector<BimodalPair>& train,
                            const std::vector<BimodalPair>& dev, const FinetuneHyperparams& hp,
                            const FinetuneOptions& options) {
  hp.validate();
  Seq2SeqRun run;
  run.model = fresh_seq2seq(init, enc_cfg, dec_cfg, hp.seed);
  if (train.empty()) throw Error(ErrorKind::insufficient_data, "no generation training pairs");
  std::vector<EncodedInput> sources;
  std::vector<TokenIds> targets;
  for (const auto& p : train) {
    sources.push_back(source_input(p.pl_tokens, vocab, hp.max_len));
    targets.push_back(target_ids(p.nl_tokens, vocab));
  }
  if (!options.checkpoint_dir.empty()) std::filesystem::create_directories(options.checkpoint_dir);

  auto model = run.model;
  Adam<Seq2SeqModel<Real>> opt(model, hp.beta1, hp.beta2, hp.adam_eps);
  std::int64_t step = 0;
  double best_bleu = -1.0;
  const auto limit = static_cast<std::size_t>(dec_cfg.max_target_len - 1);
  for (int epoch = 1; epoch <= hp.epochs; ++epoch) {
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng = make_rng(hp.seed, kShuffleStream, static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t token_sum = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(hp.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(hp.batch_size));
      auto grads = zeros_like(model);
      double batch_loss = 0.0;
      std::size_t tokens = 0;
      for (std::size_t b = start; b < end; ++b) {
        Rng drop = make_rng(hp.seed, kDropoutStream, static_cast<std::uint64_t>(step), b - start);
        const auto& t = targets[order[b]];
        batch_loss += static_cast<double>(
            seq2seq_loss(model, enc_cfg, dec_cfg, sources[order[b]], t, Mode::train, &drop, &grads));
        tokens += std::min(t.size(), limit) + 1;
      }
      scale(grads, Real(1) / static_cast<Real>(tokens));
      if (!std::isfinite(batch_loss) || !all_finite(grads))
        throw Error(ErrorKind::numeric,
                    "non-finite generation loss at step " + std::to_string(step + 1));
      opt.update(model, grads, hp.learning_rate_at(step));
      ++step;
      loss_sum += batch_loss;
      token_sum += tokens;
    }
    EpochLog log;
    log.epoch = epoch;
    log.step = step;
    log.train_loss = loss_sum / static_cast<double>(token_sum);
    log.dev_metric =
        dev.empty() ? 0.0 : evaluate_corpus(model, enc_cfg, dec_cfg, vocab, dev, hp.max_len).overall;
    if (dev.empty() || log.dev_metric > best_bleu) {
      best_bleu = log.dev_metric;
      run.model = model;
      run.best_epoch = epoch;
      log.best = true;
    }
    spdlog::info("generation epoch {}: train loss {:.4f}, dev BLEU {:.2f}", epoch, log.train_loss,
                 log.dev_metric);
    run.epochs.push_back(log);
    if (!options.checkpoint_dir.empty())
      to_checkpoint(model, enc_cfg, dec_cfg, options.vocab_fingerprint, step,
                    {{"epoch", epoch}, {"dev_bleu", log.dev_metric}, {"hyperparams", hp.to_json()}})
          .save(epoch_checkpoint_path(options.checkpoint_dir, epoch));
    if (options.on_epoch) options.on_epoch(log);
  }
  return run;
}

TokenIds generate_greedy(const Seq2SeqModel<Real>& model, const ModelConfig& enc_cfg,
                         const DecoderConfig& dec_cfg, const EncodedInput& source) {
  const Matrix<Real> memory = forward(model.encoder, enc_cfg, source, Mode::eval).hidden;
  TokenIds out;
  while (out.size() < static_cast<std::size_t>(dec_cfg.max_target_len)) {
    RowVector<Real> lp = next_log_probs(model, dec_cfg, memory, out);
    TokenId best = special::eos;
    for (TokenId id = 0; id < lp.cols(); ++id)
      if (may_emit(id) && lp(id) > lp(best)) best = id;
    if (best == special::eos) break;
    out.push_back(best);
  }
  return out;
}

TokenIds generate_beam(const Seq2SeqModel<Real>& model, const ModelConfig& enc_cfg,
                       const DecoderConfig& dec_cfg, const EncodedInput& source, int width) {
  if (width < 1) throw Error(ErrorKind::invalid_argument, "beam width must be positive");
  const Matrix<Real> memory = forward(model.encoder, enc_cfg, source, Mode::eval).hidden;
  struct Hyp {
    TokenIds tokens;
    double score = 0.0;
  };
  struct Expansion {
    std::size_t parent;
    TokenId token;
    double score;
  };
  std::vector<Hyp> alive{Hyp{}};
  std::vector<Hyp> finished;
  for (int t = 0; t < dec_cfg.max_target_len && !alive.empty(); ++t) {
    std::vector<Expansion> ex;
    for (std::size_t h = 0; h < alive.size(); ++h) {
      RowVector<Real> lp = next_log_probs(model, dec_cfg, memory, alive[h].tokens);
      for (TokenId id = 0; id < lp.cols(); ++id)
        if (may_emit(id)) ex.push_back({h, id, alive[h].score + static_cast<double>(lp(id))});
    }
    const auto keep = std::min(ex.size(), static_cast<std::size_t>(width));
    std::partial_sort(ex.begin(), ex.begin() + static_cast<std::ptrdiff_t>(keep), ex.end(),
                      [](const Expansion& a, const Expansion& b) {
                        if (a.score != b.score) return a.score > b.score;
                        if (a.parent != b.parent) return a.parent < b.parent;
                        return a.token < b.token;
                      });
    std::vector<Hyp> next;
    for (std::size_t i = 0; i < keep; ++i) {
      Hyp h{alive[ex[i].parent].tokens, ex[i].score};
      if (ex[i].token == special::eos) {
        finished.push_back(std::move(h));
      } else {
        h.tokens.push_back(ex[i].token);
        next.push_back(std::move(h));
      }
    }
    alive = std::move(next);
    // Scores never increase, so no live hypothesis can overtake a finished one.
    if (!finished.empty() && !alive.empty()) {
      double best_done = finished.front().score;
      for (const auto& f : finished) best_done = std::max(best_done, f.score);
      if (best_done >= alive.front().score) break;
    }
  }
  finished.insert(finished.end(), alive.begin(), alive.end());
  if (finished.empty()) return {};
  const Hyp* best = &finished.front();
  for (const auto& f : finished)
    if (f.score > best->score) best = &f;
  return best->tokens;
}

TokenIds generate(const Seq2SeqModel<Real>& model, const ModelConfig& enc_cfg,
                  const DecoderConfig& dec_cfg, const EncodedInput& source,
                  const Decoding& decoding) {
  if (decoding.beam_width <= 1) return generate_greedy(model, enc_cfg, dec_cfg, source);
  return generate_beam(model, enc_cfg, dec_cfg, source, decoding.beam_width);
}

std::vector<std::string> output_words(const TokenIds& ids, const Vocabulary& vocab) {
  std::vector<std::string> out;
  std::istringstream in(decode(ids, vocab));
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

std::vector<std::string> reference_words(const std::vector<std::string>& nl_tokens) {
  std::vector<std::string> out;
  for (const auto& t : nl_tokens)
    for (auto& w : pretokenize(t, Side::nl)) out.push_back(std::move(w));
  return out;
}

BleuReport bleu_report(const std::vector<ScoredOutput>& outputs, bool keep_per_example) {
  if (outputs.empty()) throw Error(ErrorKind::insufficient_data, "no outputs to score");
  BleuReport r;
  std::map<std::string, double> sums;
  for (const auto& o : outputs) {
    const double s = smoothed_bleu4(o.candidate, o.reference);
    sums[o.language] += s;
    ++r.examples[o.language];
    if (keep_per_example) r.per_example.emplace_back(o.id, s);
  }
  for (const auto& [lang, sum] : sums) {
    r.per_language[lang] = sum / static_cast<double>(r.examples[lang]);
    r.overall += r.per_language[lang];
  }
  r.overall /= static_cast<double>(r.per_language.size());
  return r;
}

BleuReport evaluate_corpus(const Seq2SeqModel<Real>& model, const ModelConfig& enc_cfg,
                           const DecoderConfig& dec_cfg, const Vocabulary& vocab,
                           const std::vector<BimodalPair>& test, std::size_t max_len,
                           const Decoding& decoding, bool keep_per_example) {
  std::vector<ScoredOutput> outputs;
  outputs.reserve(test.size());
  for (const auto& p : test) {
    auto ids = generate(model, enc_cfg, dec_cfg, source_input(p.pl_tokens, vocab, max_len), decoding);
    auto ref = reference_words(p.nl_tokens);
    if (ref.empty()) {
      spdlog::warn("skipping {}: empty reference documentation", p.id);
      continue;
    }
    outputs.push_back({p.id, p.language, output_words(ids, vocab), std::move(ref)});
  }
  return bleu_report(outputs, keep_per_example);
}

json BleuReport::to_json() const {
  json j{{"per_language", per_language}, {"examples", examples}, {"overall", overall}};
  if (!per_example.empty()) {
    json rows = json::array();
    for (const auto& [id, s] : per_example) rows.push_back({{"id", id}, {"bleu", s}});
    j["per_example"] = rows;
  }
  return j;
}

std::string BleuReport::to_table() const {
  std::ostringstream os;
  char line[96];
  std::snprintf(line, sizeof(line), "%-12s %8s %8s\n", "language", "examples", "BLEU-4");
  os << line;
  for (const auto& [lang, s] : per_language) {
    std::snprintf(line, sizeof(line), "%-12s %8zu %8.2f\n", lang.c_str(), examples.at(lang), s);
    os << line;
  }
  std::snprintf(line, sizeof(line), "%-12s %8s %8.2f\n", "overall", "", overall);
  os << line;
  return os.str();
}

Checkpoint to_checkpoint(const Seq2SeqModel<Real>& model, const ModelConfig& enc_cfg,
                         const DecoderConfig& dec_cfg, std::uint64_t vocab_fingerprint,
                         std::int64_t step, const json& meta) {
  Checkpoint c;
  c.kind = "seq2seq";
  c.config = json::parse(enc_cfg.to_json());
  c.vocab_fingerprint = vocab_fingerprint;
  c.step = step;
  c.meta = meta;
  c.meta["decoder"] = dec_cfg.to_json();
  c.put("param", model);
  return c;
}

Seq2SeqModel<Real> seq2seq_from_checkpoint(const Checkpoint& ckpt, ModelConfig* enc_cfg,
                                           DecoderConfig* dec_cfg) {
  if (ckpt.kind != "seq2seq")
    throw Error(ErrorKind::format, "expected a seq2seq checkpoint, got " + ckpt.kind);
  if (!ckpt.meta.contains("decoder"))
    throw Error(ErrorKind::format, "seq2seq checkpoint lacks a decoder config");
  ModelConfig ecfg;
  Seq2SeqModel<Real> m;
  m.encoder = load_encoder(ckpt, &ecfg);
  auto dcfg = DecoderConfig::from_json(ckpt.meta.at("decoder"));
  dcfg.validate(ecfg);
  m.decoder = DecoderParams<Real>::zeros(dcfg, ecfg.vocab_size);
  ckpt.get("param", m);
  if (enc_cfg) *enc_cfg = ecfg;
  if (dec_cfg) *dec_cfg = dcfg;
  return m;
}

}  // namespace nlpl
