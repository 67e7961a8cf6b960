#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "nlpl/pretrainer.hpp"
#include "test_util.hpp"

using namespace nlpl;

namespace {

struct Setup {
  fixtures::ToyCorpus corpus = fixtures::toy_corpus();
  GeneratorPair gens =
      prepare_generators(corpus.data.bimodal, corpus.data.unimodal, corpus.vocab, 3, 0.01);
  std::vector<EncodedInput> data = encode_pairs(corpus.data.bimodal, corpus.vocab, 96);
  ModelConfig cfg = [this] {
    auto c = fixtures::small_model(static_cast<int>(corpus.vocab.size()), 16, 1);
    c.dropout = 0.1;
    return c;
  }();
  std::uint64_t fp = corpus.vocab.fingerprint();
};

const Setup& setup() {
  static const Setup s;
  return s;
}

PretrainHyperparams hyper(int steps) {
  PretrainHyperparams hp;
  hp.batch_size = 4;
  hp.learning_rate = 1e-3;
  hp.warmup_steps = 3;
  hp.max_steps = steps;
  hp.checkpoint_interval = 3;
  hp.seed = 5;
  return hp;
}

bool same_state(const TrainState& a, const TrainState& b) {
  auto eq = [](const auto& x, const auto& y) {
    auto tx = tensors(x);
    auto ty = tensors(y);
    for (std::size_t i = 0; i < tx.size(); ++i)
      if (*tx[i].second != *ty[i].second) return false;
    return true;
  };
  return a.step == b.step && eq(a.params, b.params) && eq(a.optimizer.m, b.optimizer.m) &&
         eq(a.optimizer.v, b.optimizer.v) && a.optimizer.steps == b.optimizer.steps &&
         a.running_mlm == b.running_mlm && a.running_rtd == b.running_rtd;
}

}  // namespace

TEST(Hyperparams, WarmupScheduleAndValidation) {
  PretrainHyperparams hp;
  hp.learning_rate = 1e-3;
  hp.warmup_steps = 4;
  EXPECT_DOUBLE_EQ(hp.learning_rate_at(0), 2.5e-4);
  EXPECT_DOUBLE_EQ(hp.learning_rate_at(3), 1e-3);
  EXPECT_DOUBLE_EQ(hp.learning_rate_at(100), 1e-3);
  hp.warmup_steps = 0;
  EXPECT_DOUBLE_EQ(hp.learning_rate_at(0), 1e-3);
  EXPECT_EQ(PretrainHyperparams::from_json(hyper(9).to_json()).to_json(), hyper(9).to_json());
  auto bad = hyper(9);
  bad.mask_rate = 0.0;
  EXPECT_THROW(bad.validate(), Error);
  auto paper = PretrainHyperparams::paper_scale();
  EXPECT_EQ(paper.batch_size, 2048);
  EXPECT_EQ(paper.max_steps, 100000);
  EXPECT_EQ(paper.warmup_steps, 10000);
  EXPECT_DOUBLE_EQ(paper.learning_rate, 5e-4);
}

TEST(Pretrain, StepLogIsConsistent) {
  const auto& s = setup();
  auto state = TrainState::fresh(s.cfg, hyper(1));
  auto log = pretrain_step(state, s.data, s.gens, s.cfg, hyper(1), s.fp);
  EXPECT_EQ(log.step, 1);
  EXPECT_EQ(state.step, 1);
  EXPECT_NEAR(log.combined, log.mlm_loss + log.rtd_loss, 1e-12);
  EXPECT_GT(log.mlm_loss, 0.0);
  EXPECT_GT(log.rtd_loss, 0.0);
  EXPECT_GT(log.real_labels + log.replaced_labels, 0u);
  EXPECT_DOUBLE_EQ(log.learning_rate, 1e-3 / 3);
  EXPECT_TRUE(state.has_running);
  EXPECT_DOUBLE_EQ(state.running_mlm, log.mlm_token_loss);
  EXPECT_THROW(pretrain_step(state, {}, s.gens, s.cfg, hyper(1), s.fp), Error);
}

TEST(Pretrain, DeterministicForASeed) {
  const auto& s = setup();
  auto a = TrainState::fresh(s.cfg, hyper(5));
  auto b = TrainState::fresh(s.cfg, hyper(5));
  pretrain(a, s.data, s.gens, s.cfg, hyper(5), {.vocab_fingerprint = s.fp});
  pretrain(b, s.data, s.gens, s.cfg, hyper(5), {.vocab_fingerprint = s.fp});
  EXPECT_TRUE(same_state(a, b));
  auto other = hyper(5);
  other.seed = 6;
  auto c = TrainState::fresh(s.cfg, other);
  pretrain(c, s.data, s.gens, s.cfg, other, {.vocab_fingerprint = s.fp});
  EXPECT_FALSE(same_state(a, c));
}

TEST(Pretrain, ResumeMatchesUninterruptedRun) {
  const auto& s = setup();
  auto dir = fixtures::scratch_dir("pretrain_resume");
  const auto log_path = (dir / "loss.jsonl").string();
  auto full = TrainState::fresh(s.cfg, hyper(7));
  auto written = pretrain(full, s.data, s.gens, s.cfg, hyper(7),
                          {.vocab_fingerprint = s.fp,
                           .checkpoint_dir = (dir / "full").string(),
                           .loss_log = log_path});
  ASSERT_EQ(written.size(), 2u);
  EXPECT_TRUE(written[0].ends_with("step-0000003.ckpt"));

  // Stop at step 3, then continue from the file.
  auto part = TrainState::fresh(s.cfg, hyper(3));
  pretrain(part, s.data, s.gens, s.cfg, hyper(3),
           {.vocab_fingerprint = s.fp, .checkpoint_dir = (dir / "part").string()});
  TrainState resumed;
  resume((dir / "part" / "step-0000003.ckpt").string(), s.data, s.gens, s.cfg, hyper(7),
         {.vocab_fingerprint = s.fp}, &resumed);
  EXPECT_TRUE(same_state(full, resumed));

  std::ifstream in(log_path);
  int lines = 0;
  for (std::string line; std::getline(in, line);) {
    auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("step").get<int>(), ++lines);
  }
  EXPECT_EQ(lines, 7);
}

TEST(Pretrain, ResumeRejectsMismatches) {
  const auto& s = setup();
  auto dir = fixtures::scratch_dir("pretrain_mismatch");
  auto state = TrainState::fresh(s.cfg, hyper(3));
  pretrain(state, s.data, s.gens, s.cfg, hyper(3),
           {.vocab_fingerprint = s.fp, .checkpoint_dir = dir.string()});
  const auto path = (dir / "step-0000003.ckpt").string();
  auto changed = hyper(6);
  changed.learning_rate = 2e-3;
  EXPECT_THROW(resume(path, s.data, s.gens, s.cfg, changed, {.vocab_fingerprint = s.fp}), Error);
  auto wider = s.cfg;
  wider.hidden = 32;
  EXPECT_THROW(resume(path, s.data, s.gens, wider, hyper(6), {.vocab_fingerprint = s.fp}), Error);
  try {
    resume(path, s.data, s.gens, s.cfg, hyper(6), {.vocab_fingerprint = s.fp + 1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::hash_mismatch);
  }
  ModelConfig loaded;
  auto enc = load_encoder(Checkpoint::load(path), &loaded);
  EXPECT_EQ(loaded, s.cfg);
  EXPECT_TRUE(*tensors(enc)[0].second == *tensors(state.params)[0].second);
}

TEST(Pretrain, NonFiniteLossDumpsBatch) {
  const auto& s = setup();
  auto dir = fixtures::scratch_dir("pretrain_nan");
  auto state = TrainState::fresh(s.cfg, hyper(2));
  state.params.token_embedding.setConstant(std::numeric_limits<Real>::quiet_NaN());
  try {
    pretrain(state, s.data, s.gens, s.cfg, hyper(2),
             {.vocab_fingerprint = s.fp, .checkpoint_dir = dir.string()});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::numeric);
  }
  EXPECT_TRUE(std::filesystem::exists(dir / "nonfinite_batch.json"));
  EXPECT_EQ(state.step, 0);
}

TEST(Pretrain, LossFallsOnToyCorpus) {
  const auto& s = setup();
  auto hp = hyper(150);
  hp.batch_size = 8;
  hp.learning_rate = 3e-3;
  auto state = TrainState::fresh(s.cfg, hp);
  double first = 0.0, last = 0.0;
  pretrain(state, s.data, s.gens, s.cfg, hp,
           {.vocab_fingerprint = s.fp, .on_step = [&](const StepLog& l) {
              if (l.step <= 10) first += l.combined / 10;
              if (l.step > 140) last += l.combined / 10;
            }});
  EXPECT_LT(last, 0.8 * first);
  auto eval = evaluate_pretraining(state.params, s.cfg, s.data, s.gens, s.fp, 0.15, 1);
  EXPECT_GT(eval.planned_positions, 0u);
  EXPECT_GE(eval.rtd_accuracy_all, 0.0);
  EXPECT_LE(eval.rtd_accuracy_all, 1.0);
}
