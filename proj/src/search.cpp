#include "nlpl/search.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <spdlog/spdlog.h>

#include "nlpl/optimizer.hpp"

namespace nlpl {

using nlohmann::json;

namespace {

constexpr std::uint64_t kHeadStream = 30;
constexpr std::uint64_t kShuffleStream = 31;
constexpr std::uint64_t kDropoutStream = 32;
constexpr std::uint64_t kDistractorStream = 33;

EncodedInput pair_input(const std::vector<std::string>& nl, const std::vector<std::string>& pl,
                        const Vocabulary& vocab, std::size_t max_len) {
  return build_input(encode_words(nl, vocab, Side::nl), encode_words(pl, vocab, Side::pl), max_len);
}

std::string epoch_checkpoint_path(const std::string& dir, int epoch) {
  char name[32];
  std::snprintf(name, sizeof(name), "epoch-%03d.ckpt", epoch);
  return (std::filesystem::path(dir) / name).string();
}

}  // namespace

std::string to_string(ExampleSource s) {
  switch (s) {
    case ExampleSource::original: return "original";
    case ExampleSource::nl_replaced: return "nl-replaced";
    case ExampleSource::pl_replaced: return "pl-replaced";
  }
  return "unknown";
}

std::vector<SearchExample> build_balanced_dataset(const std::vector<BimodalPair>& pairs, Rng& rng) {
  const std::size_t n = pairs.size();
  if (n < 2) throw Error(ErrorKind::insufficient_data, "a balanced dataset needs at least 2 pairs");
  std::vector<ExampleSource> sources(n, ExampleSource::pl_replaced);
  std::fill(sources.begin(), sources.begin() + static_cast<std::ptrdiff_t>(n / 2),
            ExampleSource::nl_replaced);
  std::shuffle(sources.begin(), sources.end(), rng);

  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<SearchExample> out;
  out.reserve(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = pairs[i];
    out.push_back({p.id, p.nl_tokens, p.pl_tokens, true, ExampleSource::original, ""});
    const bool nl_side = sources[i] == ExampleSource::nl_replaced;
    const auto& original = nl_side ? p.nl_tokens : p.pl_tokens;
    std::size_t j = i;
    for (int attempt = 0;; ++attempt) {
      if (attempt == 10000)
        throw Error(ErrorKind::insufficient_data,
                    "no distinct replacement for pair " + p.id + "; all candidates are identical");
      j = pick(rng);
      if (j == i) continue;
      if ((nl_side ? pairs[j].nl_tokens : pairs[j].pl_tokens) != original) break;
    }
    SearchExample neg{p.id, p.nl_tokens, p.pl_tokens, false, sources[i], pairs[j].id};
    (nl_side ? neg.nl_tokens : neg.pl_tokens) = nl_side ? pairs[j].nl_tokens : pairs[j].pl_tokens;
    out.push_back(std::move(neg));
  }
  return out;
}

template <typename T>
SearchClassifier<T> SearchClassifier<T>::with_fresh_head(const EncoderParams<T>& encoder,
                                                         const ModelConfig& cfg,
                                                         std::uint64_t seed) {
  SearchClassifier c;
  c.encoder = encoder;
  Rng rng = make_rng(seed, kHeadStream);
  init_normal(c.head.weight, cfg.hidden, 2, 0.02, rng);
  c.head.bias = Matrix<T>::Zero(1, 2);
  return c;
}

template struct SearchClassifier<float>;
template struct SearchClassifier<double>;

FinetuneHyperparams FinetuneHyperparams::paper_scale() {
  FinetuneHyperparams h;
  h.batch_size = 64;
  h.learning_rate = 1e-5;
  h.max_len = 200;
  h.epochs = 8;
  return h;
}

void FinetuneHyperparams::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::invalid_argument, m); };
  if (batch_size < 1) fail("batch_size must be positive");
  if (!(learning_rate > 0)) fail("learning_rate must be positive");
  if (warmup_steps < 0) fail("warmup_steps must be non-negative");
  if (epochs < 0) fail("epochs must be non-negative");
  if (max_len < 4) fail("max_len must be at least 4");
}

double FinetuneHyperparams::learning_rate_at(std::int64_t step) const {
  if (warmup_steps == 0 || step >= warmup_steps) return learning_rate;
  return learning_rate * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
}

json FinetuneHyperparams::to_json() const {
  return {{"batch_size", batch_size}, {"learning_rate", learning_rate},
          {"warmup_steps", warmup_steps}, {"epochs", epochs},
          {"max_len", max_len}, {"beta1", beta1},
          {"beta2", beta2}, {"adam_eps", adam_eps},
          {"seed", seed}};
}

FinetuneHyperparams FinetuneHyperparams::from_json(const json& j) {
  FinetuneHyperparams h;
  try {
    h.batch_size = j.value("batch_size", h.batch_size);
    h.learning_rate = j.value("learning_rate", h.learning_rate);
    h.warmup_steps = j.value("warmup_steps", h.warmup_steps);
    h.epochs = j.value("epochs", h.epochs);
    h.max_len = j.value("max_len", h.max_len);
    h.beta1 = j.value("beta1", h.beta1);
    h.beta2 = j.value("beta2", h.beta2);
    h.adam_eps = j.value("adam_eps", h.adam_eps);
    h.seed = j.value("seed", h.seed);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, std::string("bad fine-tuning config: ") + e.what());
  }
  h.validate();
  return h;
}

namespace {

/// logits (1 x 2) for one encoded input.
RowVector<Real> classifier_logits(const SearchClassifier<Real>& m, const Matrix<Real>& hidden) {
  return hidden.row(0) * m.head.weight + m.head.bias;
}

}  // namespace

ClassifierRun finetune_classifier(const EncoderParams<Real>& init, const ModelConfig& cfg,
                                  const Vocabulary& vocab,
                                  const std::vector<SearchExample>& train,
                                  const std::vector<SearchExample>& dev,
                                  const FinetuneHyperparams& hp, const FinetuneOptions& options) {
  hp.validate();
  ClassifierRun run;
  run.model = SearchClassifier<Real>::with_fresh_head(init, cfg, hp.seed);
  if (hp.epochs > 0 && train.empty())
    throw Error(ErrorKind::insufficient_data, "no fine-tuning examples");
  std::vector<EncodedInput> inputs;
  inputs.reserve(train.size());
  for (const auto& e : train) inputs.push_back(pair_input(e.nl_tokens, e.pl_tokens, vocab, hp.max_len));
  if (!options.checkpoint_dir.empty()) std::filesystem::create_directories(options.checkpoint_dir);

  auto model = run.model;
  Adam<SearchClassifier<Real>> opt(model, hp.beta1, hp.beta2, hp.adam_eps);
  std::int64_t step = 0;
  double best_metric = -1.0;
  for (int epoch = 1; epoch <= hp.epochs; ++epoch) {
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng = make_rng(hp.seed, kShuffleStream, static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(hp.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(hp.batch_size));
      auto grads = zeros_like(model);
      double batch_loss = 0.0;
      for (std::size_t b = start; b < end; ++b) {
        const auto& x = inputs[order[b]];
        Rng drop = make_rng(hp.seed, kDropoutStream, static_cast<std::uint64_t>(step), b - start);
        EncoderCache<Real> cache;
        auto out = forward(model.encoder, cfg, x, Mode::train, &drop, &cache);
        RowVector<Real> z = classifier_logits(model, out.hidden);
        const Real mx = z.maxCoeff();
        const Real lse = mx + std::log((z.array() - mx).exp().sum());
        const int target = train[order[b]].match ? 1 : 0;
        batch_loss += static_cast<double>(lse - z(target));
        RowVector<Real> dz = (z.array() - lse).exp().matrix();
        dz(target) -= Real(1);
        grads.head.weight.noalias() += out.hidden.row(0).transpose() * dz;
        grads.head.bias += dz;
        Matrix<Real> dh = Matrix<Real>::Zero(out.hidden.rows(), out.hidden.cols());
        dh.row(0) = dz * model.head.weight.transpose();
        backward(model.encoder, cfg, cache, dh, grads.encoder);
      }
      const auto count = static_cast<Real>(end - start);
      scale(grads, Real(1) / count);
      if (!std::isfinite(batch_loss) || !all_finite(grads))
        throw Error(ErrorKind::numeric,
                    "non-finite fine-tuning loss at step " + std::to_string(step + 1));
      opt.update(model, grads, hp.learning_rate_at(step));
      ++step;
      loss_sum += batch_loss;
    }
    EpochLog log;
    log.epoch = epoch;
    log.step = step;
    log.train_loss = loss_sum / static_cast<double>(train.size());
    log.dev_metric = dev.empty() ? 0.0 : accuracy(model, cfg, vocab, dev, hp.max_len);
    if (dev.empty() || log.dev_metric > best_metric) {
      best_metric = log.dev_metric;
      run.model = model;
      run.best_epoch = epoch;
      log.best = true;
    }
    run.epochs.push_back(log);
    if (!options.checkpoint_dir.empty())
      to_checkpoint(model, cfg, options.vocab_fingerprint, step,
                    {{"epoch", epoch}, {"dev_accuracy", log.dev_metric}, {"hyperparams", hp.to_json()}})
          .save(epoch_checkpoint_path(options.checkpoint_dir, epoch));
    if (options.on_epoch) options.on_epoch(log);
  }
  return run;
}

MatchScore score(const SearchClassifier<Real>& model, const ModelConfig& cfg,
                 const Vocabulary& vocab, const std::vector<std::string>& nl_tokens,
                 const std::vector<std::string>& pl_tokens, std::size_t max_len) {
  auto x = pair_input(nl_tokens, pl_tokens, vocab, max_len);
  auto out = forward(model.encoder, cfg, x, Mode::eval);
  RowVector<Real> z = classifier_logits(model, out.hidden);
  const double margin = static_cast<double>(z(1)) - static_cast<double>(z(0));
  return {1.0 / (1.0 + std::exp(-margin)), x.truncated};
}

double accuracy(const SearchClassifier<Real>& model, const ModelConfig& cfg,
                const Vocabulary& vocab, const std::vector<SearchExample>& examples,
                std::size_t max_len) {
  if (examples.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& e : examples) {
    const bool predicted = score(model, cfg, vocab, e.nl_tokens, e.pl_tokens, max_len).probability > 0.5;
    if (predicted == e.match) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

Checkpoint to_checkpoint(const SearchClassifier<Real>& model, const ModelConfig& cfg,
                         std::uint64_t vocab_fingerprint, std::int64_t step, const json& meta) {
  Checkpoint c;
  c.kind = "search-classifier";
  c.config = json::parse(cfg.to_json());
  c.vocab_fingerprint = vocab_fingerprint;
  c.step = step;
  c.meta = meta;
  c.put("param", model);
  return c;
}

SearchClassifier<Real> classifier_from_checkpoint(const Checkpoint& ckpt, ModelConfig* cfg_out) {
  if (ckpt.kind != "search-classifier")
    throw Error(ErrorKind::format, "expected a search-classifier checkpoint, got " + ckpt.kind);
  ModelConfig cfg;
  auto enc = load_encoder(ckpt, &cfg);
  auto model = SearchClassifier<Real>::with_fresh_head(enc, cfg, 0);
  ckpt.get("param", model);
  if (cfg_out) *cfg_out = cfg;
  return model;
}

double mean_reciprocal_rank(const std::vector<std::size_t>& ranks) {
  if (ranks.empty()) throw Error(ErrorKind::insufficient_data, "no ranks to average");
  double sum = 0.0;
  for (auto r : ranks) {
    if (r == 0) throw Error(ErrorKind::invalid_argument, "ranks are 1-based");
    sum += 1.0 / static_cast<double>(r);
  }
  return sum / static_cast<double>(ranks.size());
}

double random_scorer_mrr(int distractors) {
  double h = 0.0;
  for (int r = 1; r <= distractors + 1; ++r) h += 1.0 / r;
  return h / (distractors + 1);
}

json MRRReport::to_json() const {
  json per = json::object();
  for (const auto& [lang, mrr] : per_language)
    per[lang] = {{"mrr", mrr}, {"queries", queries.at(lang)}};
  return {{"per_language", per},      {"macro_average", macro_average},
          {"distractors", distractors}, {"seed", seed},
          {"ties", ties}};
}

std::string MRRReport::to_table() const {
  std::ostringstream os;
  char line[96];
  std::snprintf(line, sizeof(line), "%-12s %8s %8s\n", "language", "queries", "MRR");
  os << line;
  for (const auto& [lang, mrr] : per_language) {
    std::snprintf(line, sizeof(line), "%-12s %8zu %8.4f\n", lang.c_str(), queries.at(lang), mrr);
    os << line;
  }
  std::snprintf(line, sizeof(line), "%-12s %8s %8.4f\n", "macro-avg", "", macro_average);
  os << line;
  os << "distractors K=" << distractors << ", seed " << seed << ", ties " << ties << "\n";
  return os.str();
}

namespace {

std::map<std::string, std::vector<std::size_t>> by_language(const std::vector<BimodalPair>& test) {
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < test.size(); ++i) groups[test[i].language].push_back(i);
  return groups;
}

}  // namespace

MRRReport evaluate_mrr(const std::vector<BimodalPair>& test, const PairScorer& scorer,
                       int distractors, std::uint64_t seed) {
  if (distractors < 1) throw Error(ErrorKind::invalid_argument, "need at least one distractor");
  if (test.empty()) throw Error(ErrorKind::insufficient_data, "empty test set");
  const auto groups = by_language(test);
  for (const auto& [lang, pool] : groups)
    if (pool.size() < static_cast<std::size_t>(distractors) + 1)
      throw Error(ErrorKind::insufficient_data,
                  "language " + lang + " has " + std::to_string(pool.size()) +
                      " test pairs; K=" + std::to_string(distractors) + " distractors need at least " +
                      std::to_string(distractors + 1));
  MRRReport report;
  report.distractors = distractors;
  report.seed = seed;
  for (const auto& [lang, pool] : groups) {
    std::vector<std::size_t> ranks;
    ranks.reserve(pool.size());
    for (std::size_t q : pool) {
      std::vector<std::size_t> others;
      others.reserve(pool.size() - 1);
      for (std::size_t c : pool)
        if (c != q) others.push_back(c);
      std::vector<std::size_t> chosen;
      chosen.reserve(static_cast<std::size_t>(distractors));
      Rng rng = make_rng(seed, kDistractorStream, q);
      std::sample(others.begin(), others.end(), std::back_inserter(chosen),
                  static_cast<std::size_t>(distractors), rng);
      const double truth = scorer(q, q);
      std::size_t rank = 1;
      for (std::size_t d : chosen) {
        const double s = scorer(q, d);
        if (s > truth) {
          ++rank;
        } else if (s == truth) {
          ++report.ties;
          spdlog::debug("score tie between {} and {}; ordered by id", test[q].id, test[d].id);
          if (test[d].id < test[q].id) ++rank;
        }
      }
      ranks.push_back(rank);
    }
    report.per_language[lang] = mean_reciprocal_rank(ranks);
    report.queries[lang] = ranks.size();
  }
  if (report.ties) spdlog::warn("{} score ties were broken by code id", report.ties);
  double sum = 0.0;
  for (const auto& [lang, mrr] : report.per_language) sum += mrr;
  report.macro_average = sum / static_cast<double>(report.per_language.size());
  return report;
}

int resolve_distractors(std::optional<int> requested, const std::vector<BimodalPair>& test,
                        std::string* warning) {
  if (requested) return *requested;
  std::size_t smallest = SIZE_MAX;
  for (const auto& [lang, pool] : by_language(test)) smallest = std::min(smallest, pool.size());
  if (smallest == SIZE_MAX || smallest < 2)
    throw Error(ErrorKind::insufficient_data, "test pool too small for any distractor");
  constexpr int kDefault = 999;
  if (smallest - 1 >= static_cast<std::size_t>(kDefault)) return kDefault;
  if (warning)
    *warning = "test pool allows only " + std::to_string(smallest - 1) + " distractors; using that instead of " +
               std::to_string(kDefault);
  return static_cast<int>(smallest - 1);
}

PairScorer classifier_scorer(const SearchClassifier<Real>& model, const ModelConfig& cfg,
                             const Vocabulary& vocab, const std::vector<BimodalPair>& test,
                             std::size_t max_len) {
  auto nl = std::make_shared<std::vector<TokenIds>>();
  auto pl = std::make_shared<std::vector<TokenIds>>();
  for (const auto& p : test) {
    nl->push_back(encode_words(p.nl_tokens, vocab, Side::nl));
    pl->push_back(encode_words(p.pl_tokens, vocab, Side::pl));
  }
  return [&model, cfg, nl, pl, max_len](std::size_t q, std::size_t c) {
    auto out = forward(model.encoder, cfg, build_input((*nl)[q], (*pl)[c], max_len), Mode::eval);
    RowVector<Real> z = classifier_logits(model, out.hidden);
    return static_cast<double>(z(1)) - static_cast<double>(z(0));
  };
}

EncodedInput single_segment_input(const std::vector<std::string>& tokens, const Vocabulary& vocab,
                                  Side side, std::size_t max_len) {
  if (max_len < 3) throw Error(ErrorKind::invalid_argument, "max_len must be at least 3");
  TokenIds body = encode_words(tokens, vocab, side);
  EncodedInput in;
  if (body.size() + 2 > max_len) {
    body.resize(max_len - 2);
    in.truncated = true;
  }
  in.ids.push_back(special::cls);
  in.ids.insert(in.ids.end(), body.begin(), body.end());
  in.ids.push_back(special::eos);
  const Span content{1, 1 + body.size()};
  const Span empty{1 + body.size(), 1 + body.size()};
  in.nl_span = side == Side::nl ? content : empty;
  in.pl_span = side == Side::pl ? content : empty;
  return in;
}

RowVector<Real> encode_single(const EncoderParams<Real>& params, const ModelConfig& cfg,
                              const Vocabulary& vocab, const std::vector<std::string>& tokens,
                              Side side, std::size_t max_len) {
  auto out = forward(params, cfg, single_segment_input(tokens, vocab, side, max_len), Mode::eval);
  return out.cls();
}

template <typename T>
T in_batch_softmax_loss(const Matrix<T>& code, const Matrix<T>& nl, Matrix<T>* d_code,
                        Matrix<T>* d_nl) {
  if (code.rows() != nl.rows() || code.cols() != nl.cols())
    throw Error(ErrorKind::invalid_argument, "code and NL embeddings must be row-aligned");
  const auto n = nl.rows();
  if (n == 0) return T(0);
  Matrix<T> s = nl * code.transpose();
  T loss = 0;
  Matrix<T> ds(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mx = s.row(i).maxCoeff();
    const T lse = mx + std::log((s.row(i).array() - mx).exp().sum());
    loss += lse - s(i, i);
    ds.row(i) = (s.row(i).array() - lse).exp().matrix();
    ds(i, i) -= T(1);
  }
  const T inv = T(1) / static_cast<T>(n);
  ds *= inv;
  if (d_nl) d_nl->noalias() += ds * code;
  if (d_code) d_code->noalias() += ds.transpose() * nl;
  return loss * inv;
}

template float in_batch_softmax_loss(const Matrix<float>&, const Matrix<float>&, Matrix<float>*,
                                     Matrix<float>*);
template double in_batch_softmax_loss(const Matrix<double>&, const Matrix<double>&,
                                      Matrix<double>*, Matrix<double>*);

namespace {

struct LateFusionInputs {
  std::vector<EncodedInput> nl, pl;
};

LateFusionInputs latefusion_inputs(const std::vector<BimodalPair>& pairs, const Vocabulary& vocab,
                                   std::size_t max_len) {
  LateFusionInputs in;
  for (const auto& p : pairs) {
    in.nl.push_back(single_segment_input(p.nl_tokens, vocab, Side::nl, max_len));
    in.pl.push_back(single_segment_input(p.pl_tokens, vocab, Side::pl, max_len));
  }
  return in;
}

double latefusion_dev_loss(const EncoderParams<Real>& params, const ModelConfig& cfg,
                           const LateFusionInputs& dev, int batch_size) {
  const std::size_t n = dev.nl.size();
  double sum = 0.0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(n, start + static_cast<std::size_t>(batch_size));
    const auto m = static_cast<Eigen::Index>(end - start);
    Matrix<Real> code(m, cfg.hidden), nl(m, cfg.hidden);
    for (std::size_t b = start; b < end; ++b) {
      nl.row(static_cast<Eigen::Index>(b - start)) = forward(params, cfg, dev.nl[b], Mode::eval).cls();
      code.row(static_cast<Eigen::Index>(b - start)) = forward(params, cfg, dev.pl[b], Mode::eval).cls();
    }
    sum += in_batch_softmax_loss(code, nl);
    ++batches;
  }
  return batches ? sum / static_cast<double>(batches) : 0.0;
}

}  // namespace

LateFusionRun finetune_latefusion(const EncoderParams<Real>& init, const ModelConfig& cfg,
                                  const Vocabulary& vocab, const std::vector<BimodalPair>& train,
                                  const std::vector<BimodalPair>& dev,
                                  const FinetuneHyperparams& hp, const FinetuneOptions& options) {
  hp.validate();
  LateFusionRun run;
  run.model = init;
  if (hp.epochs > 0 && train.empty()) throw Error(ErrorKind::insufficient_data, "no training pairs");
  if (hp.batch_size < 2)
    spdlog::warn("late-fusion batch size {} has no in-batch negatives; the loss is 0", hp.batch_size);
  const auto inputs = latefusion_inputs(train, vocab, hp.max_len);
  const auto dev_inputs = latefusion_inputs(dev, vocab, hp.max_len);
  if (!options.checkpoint_dir.empty()) std::filesystem::create_directories(options.checkpoint_dir);

  auto model = init;
  Adam<EncoderParams<Real>> opt(model, hp.beta1, hp.beta2, hp.adam_eps);
  std::int64_t step = 0;
  double best = 0.0;
  for (int epoch = 1; epoch <= hp.epochs; ++epoch) {
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng = make_rng(hp.seed, kShuffleStream, static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(hp.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(hp.batch_size));
      const auto m = static_cast<Eigen::Index>(end - start);
      if (m == 1) spdlog::warn("late-fusion batch of 1 at step {}; loss is 0", step + 1);
      std::vector<EncoderCache<Real>> nl_cache(static_cast<std::size_t>(m)), pl_cache(static_cast<std::size_t>(m));
      std::vector<Eigen::Index> nl_len(static_cast<std::size_t>(m)), pl_len(static_cast<std::size_t>(m));
      Matrix<Real> code(m, cfg.hidden), nl(m, cfg.hidden);
      for (Eigen::Index b = 0; b < m; ++b) {
        const auto i = order[start + static_cast<std::size_t>(b)];
        const auto ub = static_cast<std::size_t>(b);
        Rng drop = make_rng(hp.seed, kDropoutStream, static_cast<std::uint64_t>(step), ub);
        auto on = forward(model, cfg, inputs.nl[i], Mode::train, &drop, &nl_cache[ub]);
        auto op = forward(model, cfg, inputs.pl[i], Mode::train, &drop, &pl_cache[ub]);
        nl.row(b) = on.cls();
        code.row(b) = op.cls();
        nl_len[ub] = on.hidden.rows();
        pl_len[ub] = op.hidden.rows();
      }
      Matrix<Real> d_code = Matrix<Real>::Zero(m, cfg.hidden), d_nl = Matrix<Real>::Zero(m, cfg.hidden);
      const Real loss = in_batch_softmax_loss(code, nl, &d_code, &d_nl);
      auto grads = zeros_like(model);
      for (Eigen::Index b = 0; b < m; ++b) {
        const auto ub = static_cast<std::size_t>(b);
        Matrix<Real> dh = Matrix<Real>::Zero(nl_len[ub], cfg.hidden);
        dh.row(0) = d_nl.row(b);
        backward(model, cfg, nl_cache[ub], dh, grads);
        dh = Matrix<Real>::Zero(pl_len[ub], cfg.hidden);
        dh.row(0) = d_code.row(b);
        backward(model, cfg, pl_cache[ub], dh, grads);
      }
      if (!std::isfinite(loss) || !all_finite(grads))
        throw Error(ErrorKind::numeric, "non-finite late-fusion loss at step " + std::to_string(step + 1));
      opt.update(model, grads, hp.learning_rate_at(step));
      ++step;
      loss_sum += static_cast<double>(loss);
      ++batches;
    }
    EpochLog log;
    log.epoch = epoch;
    log.step = step;
    log.train_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    log.dev_metric = latefusion_dev_loss(model, cfg, dev_inputs, std::max(hp.batch_size, 2));
    if (dev.empty() || run.best_epoch == 0 || log.dev_metric < best) {
      best = log.dev_metric;
      run.model = model;
      run.best_epoch = epoch;
      log.best = true;
    }
    run.epochs.push_back(log);
    if (!options.checkpoint_dir.empty()) {
      Checkpoint c;
      c.kind = "latefusion-encoder";
      c.config = json::parse(cfg.to_json());
      c.vocab_fingerprint = options.vocab_fingerprint;
      c.step = step;
      c.meta = {{"epoch", epoch}, {"dev_loss", log.dev_metric}, {"hyperparams", hp.to_json()}};
      c.put("param", model);
      c.save(epoch_checkpoint_path(options.checkpoint_dir, epoch));
    }
    if (options.on_epoch) options.on_epoch(log);
  }
  return run;
}

std::uint64_t encoder_hash(const EncoderParams<Real>& params) {
  Fnv1a h;
  for (const auto& [name, m] : tensors(params)) {
    h.update(name);
    const std::int64_t shape[2] = {m->rows(), m->cols()};
    h.update(shape, sizeof(shape));
    h.update(m->data(), sizeof(Real) * static_cast<std::size_t>(m->size()));
  }
  return h.digest();
}

namespace {

constexpr char kIndexMagic[8] = {'N', 'L', 'P', 'L', 'I', 'N', 'D', 'X'};

template <typename V>
void put_raw(std::string& out, const V& v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get_raw(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(V) > in.size()) throw Error(ErrorKind::format, "truncated index file");
  V v;
  std::memcpy(&v, in.data() + pos, sizeof(V));
  pos += sizeof(V);
  return v;
}

}  // namespace

void RetrievalIndex::save(const std::string& path) const {
  std::string out(kIndexMagic, sizeof(kIndexMagic));
  put_raw(out, kVersion);
  put_raw(out, encoder_hash);
  put_raw(out, static_cast<std::uint32_t>(vectors.cols()));
  put_raw(out, static_cast<std::uint64_t>(ids.size()));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    put_raw(out, static_cast<std::uint32_t>(ids[i].size()));
    out += ids[i];
    out.append(reinterpret_cast<const char*>(vectors.row(static_cast<Eigen::Index>(i)).data()),
               sizeof(Real) * static_cast<std::size_t>(vectors.cols()));
  }
  put_raw(out, fnv1a(out));
  write_file(path, out);
}

RetrievalIndex RetrievalIndex::load(const std::string& path) {
  const std::string in = read_file(path);
  if (in.size() < sizeof(kIndexMagic) + 8 || std::memcmp(in.data(), kIndexMagic, sizeof(kIndexMagic)) != 0)
    throw Error(ErrorKind::format, path + " is not a retrieval index");
  std::uint64_t stored;
  std::memcpy(&stored, in.data() + in.size() - 8, 8);
  if (fnv1a(std::string_view(in).substr(0, in.size() - 8)) != stored)
    throw Error(ErrorKind::format, "index checksum mismatch in " + path);
  std::size_t pos = sizeof(kIndexMagic);
  if (get_raw<std::uint32_t>(in, pos) != kVersion)
    throw Error(ErrorKind::format, "unsupported index version in " + path);
  RetrievalIndex idx;
  idx.encoder_hash = get_raw<std::uint64_t>(in, pos);
  const auto width = get_raw<std::uint32_t>(in, pos);
  const auto count = get_raw<std::uint64_t>(in, pos);
  idx.vectors.resize(static_cast<Eigen::Index>(count), width);
  idx.ids.reserve(count);
  const std::size_t body_end = in.size() - 8;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = get_raw<std::uint32_t>(in, pos);
    const std::size_t need = len + sizeof(Real) * width;
    if (pos + need > body_end) throw Error(ErrorKind::format, "truncated index file");
    idx.ids.emplace_back(in.data() + pos, len);
    pos += len;
    std::memcpy(idx.vectors.row(static_cast<Eigen::Index>(i)).data(), in.data() + pos, sizeof(Real) * width);
    pos += sizeof(Real) * width;
  }
  if (pos != body_end) throw Error(ErrorKind::format, "trailing bytes in index file");
  return idx;
}

RetrievalIndex build_index(const std::vector<std::pair<std::string, std::vector<std::string>>>& codes,
                           const EncoderParams<Real>& params, const ModelConfig& cfg,
                           const Vocabulary& vocab, std::size_t max_len) {
  RetrievalIndex idx;
  idx.encoder_hash = encoder_hash(params);
  idx.vectors.resize(static_cast<Eigen::Index>(codes.size()), cfg.hidden);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    idx.ids.push_back(codes[i].first);
    idx.vectors.row(static_cast<Eigen::Index>(i)) =
        encode_single(params, cfg, vocab, codes[i].second, Side::pl, max_len);
  }
  return idx;
}

std::vector<Hit> query(const RetrievalIndex& index, const RowVector<Real>& q, std::size_t k) {
  if (index.size() == 0) return {};
  if (q.size() != index.vectors.cols())
    throw Error(ErrorKind::invalid_argument, "query width differs from the index width");
  Eigen::Matrix<Real, Eigen::Dynamic, 1> scores = index.vectors * q.transpose();
  std::vector<std::size_t> order(index.size());
  std::iota(order.begin(), order.end(), 0);
  auto better = [&](std::size_t a, std::size_t b) {
    const auto sa = scores(static_cast<Eigen::Index>(a)), sb = scores(static_cast<Eigen::Index>(b));
    if (sa != sb) return sa > sb;
    return index.ids[a] < index.ids[b];
  };
  k = std::min(k, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), better);
  std::vector<Hit> hits;
  hits.reserve(k);
  for (std::size_t i = 0; i < k; ++i)
    hits.push_back({index.ids[order[i]], static_cast<double>(scores(static_cast<Eigen::Index>(order[i])))});
  return hits;
}

std::vector<Hit> query(const RetrievalIndex& index, const EncoderParams<Real>& params,
                       const ModelConfig& cfg, const Vocabulary& vocab,
                       const std::vector<std::string>& nl_tokens, std::size_t k,
                       std::size_t max_len) {
  const auto h = encoder_hash(params);
  if (h != index.encoder_hash)
    throw Error(ErrorKind::hash_mismatch, "index was built with encoder " + hex64(index.encoder_hash) +
                                              ", query encoder is " + hex64(h));
  return query(index, encode_single(params, cfg, vocab, nl_tokens, Side::nl, max_len), k);
}

PairScorer latefusion_scorer(const EncoderParams<Real>& params, const ModelConfig& cfg,
                             const Vocabulary& vocab, const std::vector<BimodalPair>& test,
                             std::size_t max_len) {
  auto nl = std::make_shared<Matrix<Real>>(static_cast<Eigen::Index>(test.size()), cfg.hidden);
  auto pl = std::make_shared<Matrix<Real>>(static_cast<Eigen::Index>(test.size()), cfg.hidden);
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    nl->row(r) = encode_single(params, cfg, vocab, test[i].nl_tokens, Side::nl, max_len);
    pl->row(r) = encode_single(params, cfg, vocab, test[i].pl_tokens, Side::pl, max_len);
  }
  return [nl, pl](std::size_t q, std::size_t c) {
    return static_cast<double>(nl->row(static_cast<Eigen::Index>(q)).dot(pl->row(static_cast<Eigen::Index>(c))));
  };
}

}  // namespace nlpl
