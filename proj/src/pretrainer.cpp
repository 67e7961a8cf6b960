#include "nlpl/pretrainer.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace nlpl {

using nlohmann::json;

namespace {
// rng stream tags
constexpr std::uint64_t kInitStream = 11;
constexpr std::uint64_t kBatchStream = 12;
constexpr std::uint64_t kExampleStream = 13;
constexpr std::uint64_t kEvalStream = 14;

constexpr double kRunningDecay = 0.95;
}  // namespace

PretrainHyperparams PretrainHyperparams::paper_scale() {
  PretrainHyperparams hp;
  hp.batch_size = 2048;
  hp.learning_rate = 5e-4;
  hp.warmup_steps = 10000;
  hp.max_steps = 100000;
  return hp;
}

void PretrainHyperparams::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::invalid_argument, m); };
  if (batch_size <= 0) fail("batch_size must be positive");
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (warmup_steps < 0 || max_steps < 0) fail("step counts must be non-negative");
  if (!(mask_rate > 0.0 && mask_rate < 1.0)) fail("mask_rate must lie in (0, 1)");
  if (!(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0)) fail("bad Adam betas");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  if (checkpoint_interval <= 0) fail("checkpoint_interval must be positive");
}

double PretrainHyperparams::learning_rate_at(std::int64_t step) const {
  if (warmup_steps > 0 && step < warmup_steps)
    return learning_rate * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  return learning_rate;
}

json PretrainHyperparams::to_json() const {
  return {{"batch_size", batch_size},   {"learning_rate", learning_rate},
          {"warmup_steps", warmup_steps}, {"max_steps", max_steps},
          {"mask_rate", mask_rate},     {"beta1", beta1},
          {"beta2", beta2},             {"adam_eps", adam_eps},
          {"seed", seed},               {"checkpoint_interval", checkpoint_interval}};
}

PretrainHyperparams PretrainHyperparams::from_json(const json& j) {
  PretrainHyperparams hp;
  hp.batch_size = j.value("batch_size", hp.batch_size);
  hp.learning_rate = j.value("learning_rate", hp.learning_rate);
  hp.warmup_steps = j.value("warmup_steps", hp.warmup_steps);
  hp.max_steps = j.value("max_steps", hp.max_steps);
  hp.mask_rate = j.value("mask_rate", hp.mask_rate);
  hp.beta1 = j.value("beta1", hp.beta1);
  hp.beta2 = j.value("beta2", hp.beta2);
  hp.adam_eps = j.value("adam_eps", hp.adam_eps);
  hp.seed = j.value("seed", hp.seed);
  hp.checkpoint_interval = j.value("checkpoint_interval", hp.checkpoint_interval);
  hp.validate();
  return hp;
}

TrainState TrainState::fresh(const ModelConfig& cfg, const PretrainHyperparams& hp) {
  auto rng = make_rng(hp.seed, kInitStream, cfg.seed);
  TrainState s;
  s.params = EncoderParams<Real>::init(cfg, rng);
  s.optimizer = Adam<EncoderParams<Real>>(s.params, hp.beta1, hp.beta2, hp.adam_eps);
  return s;
}

GeneratorPair prepare_generators(const std::vector<BimodalPair>& bimodal,
                                 const std::vector<UnimodalCode>& unimodal,
                                 const Vocabulary& vocab, int order, double k,
                                 std::string* warning) {
  if (bimodal.empty())
    throw Error(ErrorKind::insufficient_data, "generator training needs bimodal pairs");
  const auto fp = vocab.fingerprint();
  std::vector<TokenIds> docs;
  for (const auto& p : bimodal) docs.push_back(encode_words(p.nl_tokens, vocab, Side::nl));
  GeneratorPair g;
  g.nl = NGramModel::train(docs, order, k, vocab.size(), fp, Provenance::bimodal_doc);

  std::vector<TokenIds> codes;
  Provenance pl_source = Provenance::unimodal_code;
  if (unimodal.empty()) {
    if (warning)
      *warning = "no unimodal code available; PL generator trained on bimodal code instead";
    pl_source = Provenance::bimodal_code;
    for (const auto& p : bimodal) codes.push_back(encode_words(p.pl_tokens, vocab, Side::pl));
  } else {
    for (const auto& u : unimodal) codes.push_back(encode_words(u.pl_tokens, vocab, Side::pl));
  }
  g.pl = NGramModel::train(codes, order, k, vocab.size(), fp, pl_source);
  return g;
}

std::vector<EncodedInput> encode_pairs(const std::vector<BimodalPair>& pairs,
                                       const Vocabulary& vocab, std::size_t max_len) {
  std::vector<EncodedInput> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs)
    out.push_back(build_input(encode_words(p.nl_tokens, vocab, Side::nl),
                              encode_words(p.pl_tokens, vocab, Side::pl), max_len));
  return out;
}

namespace {

void dump_batch(const std::string& dir, std::int64_t step,
                const std::vector<std::size_t>& indices, const std::vector<EncodedInput>& data) {
  if (dir.empty()) return;
  json j{{"step", step}, {"examples", json::array()}};
  for (auto i : indices) j["examples"].push_back({{"index", i}, {"ids", data[i].ids}});
  write_file((std::filesystem::path(dir) / "nonfinite_batch.json").string(), j.dump(1));
}

}  // namespace

StepLog pretrain_step(TrainState& state, const std::vector<EncodedInput>& data,
                      const GeneratorPair& generators, const ModelConfig& cfg,
                      const PretrainHyperparams& hp, std::uint64_t vocab_fingerprint) {
  if (data.empty()) throw Error(ErrorKind::insufficient_data, "no pre-training examples");
  const auto step = state.step;
  auto batch_rng = make_rng(hp.seed, kBatchStream, static_cast<std::uint64_t>(step));
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  std::vector<std::size_t> indices(static_cast<std::size_t>(hp.batch_size));
  for (auto& i : indices) i = pick(batch_rng);

  auto grads = zeros_like(state.params);
  StepLog log;
  log.step = step + 1;
  double mlm_sum = 0.0, rtd_sum = 0.0;
  std::size_t masked_total = 0;
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& x = data[indices[b]];
    auto rng = make_rng(hp.seed, kExampleStream, static_cast<std::uint64_t>(step), b);
    const auto n = static_cast<Eigen::Index>(x.size());

    // masked language modeling
    auto mlm_plan = select_mask_positions(x.nl_span, x.pl_span, hp.mask_rate, rng);
    auto masked = apply_mask(x, mlm_plan);
    {
      EncoderCache<Real> cache;
      auto out = forward(state.params, cfg, masked.masked_ids, x.attention_limit, Mode::train,
                         &rng, &cache);
      Matrix<Real> dh = Matrix<Real>::Zero(n, cfg.hidden);
      mlm_sum += mlm_loss(state.params, out.hidden, masked.originals, &dh, &grads);
      backward(state.params, cfg, cache, dh, grads);
      masked_total += masked.originals.size();
    }

    // replaced token detection, on an independent plan
    auto rtd_plan = select_mask_positions(x.nl_span, x.pl_span, hp.mask_rate, rng);
    auto corrupted = corrupt(x, rtd_plan, generators, vocab_fingerprint, rng);
    for (auto p : rtd_plan.all()) {
      if (corrupted.labels[p]) ++log.real_labels;
      else ++log.replaced_labels;
    }
    {
      EncoderCache<Real> cache;
      auto out = forward(state.params, cfg, corrupted.corrupt_ids, x.attention_limit, Mode::train,
                         &rng, &cache);
      Matrix<Real> dh = Matrix<Real>::Zero(n, cfg.hidden);
      rtd_sum += rtd_loss(state.params, out.hidden,
                          std::span<const std::uint8_t>(corrupted.labels), &dh, &grads);
      backward(state.params, cfg, cache, dh, grads);
    }
  }

  const double inv_batch = 1.0 / static_cast<double>(indices.size());
  log.mlm_loss = mlm_sum * inv_batch;
  log.rtd_loss = rtd_sum * inv_batch;
  log.combined = log.mlm_loss + log.rtd_loss;
  log.mlm_token_loss = masked_total ? mlm_sum / static_cast<double>(masked_total) : 0.0;
  log.learning_rate = hp.learning_rate_at(step);

  for (auto& [name, g] : tensors(grads)) *g *= static_cast<Real>(inv_batch);
  if (!std::isfinite(log.combined) || !all_finite(grads)) {
    throw Error(ErrorKind::numeric, "non-finite loss at step " + std::to_string(step + 1) +
                                        " (batch dumped when a checkpoint dir is set)");
  }
  state.optimizer.update(state.params, grads, log.learning_rate);
  ++state.step;

  double rtd_per_position = 0.0;
  {
    std::size_t positions = 0;
    for (auto i : indices) positions += data[i].size();
    rtd_per_position = rtd_sum / static_cast<double>(positions);
  }
  if (!state.has_running) {
    state.running_mlm = log.mlm_token_loss;
    state.running_rtd = rtd_per_position;
    state.has_running = true;
  } else {
    state.running_mlm = kRunningDecay * state.running_mlm + (1 - kRunningDecay) * log.mlm_token_loss;
    state.running_rtd = kRunningDecay * state.running_rtd + (1 - kRunningDecay) * rtd_per_position;
  }
  return log;
}

std::vector<std::string> pretrain(TrainState& state, const std::vector<EncodedInput>& data,
                                  const GeneratorPair& generators, const ModelConfig& cfg,
                                  const PretrainHyperparams& hp, const PretrainOptions& options) {
  cfg.validate();
  hp.validate();
  for (const auto& x : data)
    if (x.size() > static_cast<std::size_t>(cfg.max_positions))
      throw Error(ErrorKind::invalid_argument, "example longer than max_positions");
  std::vector<std::string> written;
  if (!options.checkpoint_dir.empty()) std::filesystem::create_directories(options.checkpoint_dir);
  std::ofstream loss_log;
  if (!options.loss_log.empty()) {
    loss_log.open(options.loss_log, std::ios::app);
    if (!loss_log) throw Error(ErrorKind::io, "cannot open loss log " + options.loss_log);
  }

  while (state.step < hp.max_steps) {
    StepLog log;
    try {
      log = pretrain_step(state, data, generators, cfg, hp, options.vocab_fingerprint);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::numeric) {
        auto batch_rng = make_rng(hp.seed, kBatchStream, static_cast<std::uint64_t>(state.step));
        std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
        std::vector<std::size_t> indices(static_cast<std::size_t>(hp.batch_size));
        for (auto& i : indices) i = pick(batch_rng);
        dump_batch(options.checkpoint_dir, state.step + 1, indices, data);
      }
      throw;
    }
    if (loss_log.is_open()) {
      json j{{"step", log.step},
             {"mlm_loss", log.mlm_loss},
             {"rtd_loss", log.rtd_loss},
             {"combined", log.combined},
             {"learning_rate", log.learning_rate}};
      loss_log << j.dump() << '\n';
    }
    if (options.on_step) options.on_step(log);
    if (!options.checkpoint_dir.empty() && state.step % hp.checkpoint_interval == 0) {
      char name[32];
      std::snprintf(name, sizeof(name), "step-%07lld.ckpt", static_cast<long long>(state.step));
      auto path = (std::filesystem::path(options.checkpoint_dir) / name).string();
      to_checkpoint(state, cfg, hp, options.vocab_fingerprint).save(path);
      written.push_back(path);
    }
  }
  return written;
}

Checkpoint to_checkpoint(const TrainState& state, const ModelConfig& cfg,
                         const PretrainHyperparams& hp, std::uint64_t vocab_fingerprint) {
  Checkpoint c;
  c.kind = "pretrain";
  c.config = json::parse(cfg.to_json());
  c.vocab_fingerprint = vocab_fingerprint;
  c.step = state.step;
  c.meta = {{"hyperparams", hp.to_json()},
            {"optimizer_steps", state.optimizer.steps},
            {"running_mlm", state.running_mlm},
            {"running_rtd", state.running_rtd},
            {"has_running", state.has_running}};
  c.put("param", state.params);
  c.put("adam_m", state.optimizer.m);
  c.put("adam_v", state.optimizer.v);
  return c;
}

TrainState state_from_checkpoint(const Checkpoint& ckpt, const ModelConfig& cfg,
                                 const PretrainHyperparams& hp) {
  if (ckpt.kind != "pretrain")
    throw Error(ErrorKind::invalid_argument, "not a pre-training checkpoint: " + ckpt.kind);
  if (ModelConfig::from_json(ckpt.config.dump()) != cfg)
    throw Error(ErrorKind::invalid_argument, "model config differs from the checkpoint");
  try {
    auto stored = PretrainHyperparams::from_json(ckpt.meta.at("hyperparams"));
    stored.max_steps = hp.max_steps;
    stored.checkpoint_interval = hp.checkpoint_interval;
    if (stored.to_json() != hp.to_json())
      throw Error(ErrorKind::invalid_argument, "training hyperparameters differ from the checkpoint");
    TrainState s;
    s.params = EncoderParams<Real>::zeros(cfg);
    ckpt.get("param", s.params);
    s.optimizer = Adam<EncoderParams<Real>>(s.params, hp.beta1, hp.beta2, hp.adam_eps);
    ckpt.get("adam_m", s.optimizer.m);
    ckpt.get("adam_v", s.optimizer.v);
    s.optimizer.steps = ckpt.meta.at("optimizer_steps").get<std::int64_t>();
    s.step = ckpt.step;
    s.running_mlm = ckpt.meta.at("running_mlm").get<double>();
    s.running_rtd = ckpt.meta.at("running_rtd").get<double>();
    s.has_running = ckpt.meta.at("has_running").get<bool>();
    return s;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, std::string("bad pre-training checkpoint: ") + e.what());
  }
}

std::vector<std::string> resume(const std::string& checkpoint_path,
                                const std::vector<EncodedInput>& data,
                                const GeneratorPair& generators, const ModelConfig& cfg,
                                const PretrainHyperparams& hp, const PretrainOptions& options,
                                TrainState* final_state) {
  auto ckpt = Checkpoint::load(checkpoint_path, options.vocab_fingerprint);
  auto state = state_from_checkpoint(ckpt, cfg, hp);
  auto written = pretrain(state, data, generators, cfg, hp, options);
  if (final_state) *final_state = std::move(state);
  return written;
}

EncoderParams<Real> load_encoder(const Checkpoint& ckpt, ModelConfig* cfg_out) {
  auto cfg = ModelConfig::from_json(ckpt.config.dump());
  auto params = EncoderParams<Real>::zeros(cfg);
  ckpt.get("param", params);
  if (cfg_out) *cfg_out = cfg;
  return params;
}

PretrainEval evaluate_pretraining(const EncoderParams<Real>& params, const ModelConfig& cfg,
                                  const std::vector<EncodedInput>& data,
                                  const GeneratorPair& generators, std::uint64_t vocab_fingerprint,
                                  double mask_rate, std::uint64_t seed) {
  PretrainEval ev;
  double mlm_sum = 0.0;
  std::size_t masked = 0, mlm_hits = 0, planned_hits = 0, replaced_hits = 0, all_hits = 0,
              all_positions = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& x = data[i];
    auto rng = make_rng(seed, kEvalStream, i);
    auto plan = select_mask_positions(x.nl_span, x.pl_span, mask_rate, rng);
    auto m = apply_mask(x, plan);
    auto out = forward(params, cfg, m.masked_ids, x.attention_limit, Mode::eval);
    mlm_sum += mlm_loss(params, out.hidden, m.originals);
    auto positions = plan.all();
    if (!positions.empty()) {
      std::sort(positions.begin(), positions.end());
      auto logp = mlm_log_probs<Real>(params, out.hidden, positions);
      for (std::size_t r = 0; r < positions.size(); ++r) {
        Eigen::Index arg;
        logp.row(static_cast<Eigen::Index>(r)).maxCoeff(&arg);
        if (arg == m.originals.at(positions[r])) ++mlm_hits;
      }
    }
    masked += m.originals.size();

    auto rtd_plan = select_mask_positions(x.nl_span, x.pl_span, mask_rate, rng);
    auto c = corrupt(x, rtd_plan, generators, vocab_fingerprint, rng);
    auto cout = forward(params, cfg, c.corrupt_ids, x.attention_limit, Mode::eval);
    auto probs = rtd_probs(params, cout.hidden);
    auto correct = [&](std::size_t p) { return (probs(static_cast<Eigen::Index>(p)) >= 0.5) == (c.labels[p] != 0); };
    for (std::size_t p = 0; p < x.size(); ++p) all_hits += correct(p);
    all_positions += x.size();
    for (auto p : rtd_plan.all()) {
      ++ev.planned_positions;
      planned_hits += correct(p);
      if (!c.labels[p]) {
        ++ev.replaced_positions;
        replaced_hits += correct(p);
      }
    }
  }
  auto ratio = [](std::size_t a, std::size_t b) { return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0; };
  ev.mlm_token_loss = masked ? mlm_sum / static_cast<double>(masked) : 0.0;
  ev.mlm_accuracy = ratio(mlm_hits, masked);
  ev.rtd_accuracy_planned = ratio(planned_hits, ev.planned_positions);
  ev.rtd_accuracy_replaced = ratio(replaced_hits, ev.replaced_positions);
  ev.rtd_accuracy_all = ratio(all_hits, all_positions);
  return ev;
}

}  // namespace nlpl
