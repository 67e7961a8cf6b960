#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "nlpl/generation.hpp"
#include "test_util.hpp"

using namespace nlpl;

namespace {

std::vector<std::string> split(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

struct Tiny {
  ModelConfig enc;
  DecoderConfig dec;
};

Tiny tiny_shapes(int vocab = 23) {
  Tiny t;
  t.enc = ModelConfig::tiny(vocab);
  t.enc.hidden = 6;
  t.enc.heads = 2;
  t.dec.layers = 1;
  t.dec.hidden = 6;
  t.dec.heads = 2;
  t.dec.ffn = 10;
  t.dec.max_target_len = 8;
  t.dec.dropout = 0.0;
  return t;
}

template <typename T>
Seq2SeqModel<T> random_model(const Tiny& t, std::uint64_t seed, double scale = 0.5) {
  Seq2SeqModel<T> m;
  m.encoder = fixtures::random_params<T>(t.enc, seed, scale);
  m.decoder = DecoderParams<T>::zeros(t.dec, t.enc.vocab_size);
  Rng rng = make_rng(seed, 7);
  std::normal_distribution<double> n(0.0, scale);
  for (auto& [name, mat] : tensors(m.decoder)) {
    const bool gain = name.ends_with(".gain");
    for (Eigen::Index i = 0; i < mat->size(); ++i)
      mat->data()[i] = static_cast<T>(gain ? 1.0 + n(rng) : n(rng));
  }
  return m;
}

EncodedInput raw_input(TokenIds ids) {
  EncodedInput x;
  x.ids = std::move(ids);
  x.nl_span = {1, 1};
  x.pl_span = {1, x.ids.size() - 1};
  return x;
}

}  // namespace

// ------------------------------------------------------------------ BLEU

TEST(Bleu, MatchesFrozenOracleFixtures) {
  std::ifstream in(fixtures::data_path("bleu_fixtures.json"));
  ASSERT_TRUE(in.good());
  auto rows = nlohmann::json::parse(in);
  ASSERT_EQ(rows.size(), 20u);
  for (const auto& r : rows) {
    const auto c = split(r["candidate"].get<std::string>());
    const auto ref = split(r["reference"].get<std::string>());
    EXPECT_NEAR(smoothed_bleu4(c, ref), r["score"].get<double>(), 1e-6)
        << r["candidate"] << " | " << r["reference"];
  }
}

TEST(Bleu, HandValues) {
  // p1..p4 all 1 after smoothing; brevity penalty exp(1 - 6/3).
  EXPECT_NEAR(smoothed_bleu4(split("the cat sat"), split("the cat sat on the mat")),
              100.0 * std::exp(-1.0), 1e-12);
  EXPECT_DOUBLE_EQ(smoothed_bleu4({}, split("a b")), 0.0);
  EXPECT_DOUBLE_EQ(smoothed_bleu4(split("x y"), split("a b")), 0.0);
  EXPECT_THROW(smoothed_bleu4(split("a"), {}), Error);
}

TEST(Bleu, IdentityScoresHundred) {
  for (const char* s : {"a", "a b", "the cat sat on the mat", "x x x x x x x"})
    EXPECT_NEAR(smoothed_bleu4(split(s), split(s)), 100.0, 1e-9) << s;
}

TEST(Bleu, ShorteningCorrectCandidateNeverHelps) {
  const auto ref = split("order a list of users from lowest to highest speed");
  double prev = smoothed_bleu4(ref, ref);
  for (std::size_t n = ref.size() - 1; n >= 1; --n) {
    std::vector<std::string> c(ref.begin(), ref.begin() + static_cast<std::ptrdiff_t>(n));
    const double s = smoothed_bleu4(c, ref);
    EXPECT_LT(s, prev) << n;
    prev = s;
  }
}

TEST(Bleu, ReportAveragesPerLanguage) {
  std::ifstream in(fixtures::data_path("bleu_fixtures.json"));
  auto rows = nlohmann::json::parse(in);
  std::vector<ScoredOutput> outs;
  for (int i : {0, 4, 5})
    outs.push_back({"e" + std::to_string(i), "python", split(rows[i]["candidate"].get<std::string>()),
                    split(rows[i]["reference"].get<std::string>())});
  auto r = bleu_report(outs, true);
  const double mean = (rows[0]["score"].get<double>() + rows[4]["score"].get<double>() +
                       rows[5]["score"].get<double>()) / 3.0;
  EXPECT_NEAR(r.per_language.at("python"), mean, 1e-9);
  EXPECT_NEAR(r.overall, mean, 1e-9);
  ASSERT_EQ(r.per_example.size(), 3u);

  outs.push_back({"g", "go", split("a b"), split("a b")});
  r = bleu_report(outs);
  EXPECT_NEAR(r.overall, (mean + 100.0) / 2.0, 1e-9);
  EXPECT_NE(r.to_table().find("overall"), std::string::npos);
  EXPECT_THROW(bleu_report({}), Error);
}

// --------------------------------------------------------------- decoder

TEST(Decoder, CausalOnRandomInputs) {
  auto t = tiny_shapes();
  t.dec.layers = 2;
  auto m = random_model<double>(t, 3);
  Rng rng = make_rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix<double> memory = Matrix<double>::Random(5, t.dec.hidden);
    TokenIds in = fixtures::random_ids(7, t.enc.vocab_size, rng);
    Matrix<double> base = decoder_forward(m.decoder, t.dec, in, memory, Mode::eval);
    const std::size_t cut = static_cast<std::size_t>(trial % 6);
    TokenIds mutated = in;
    for (std::size_t i = cut + 1; i < in.size(); ++i)
      mutated[i] = (in[i] + 1 + trial) % t.enc.vocab_size;
    Matrix<double> after = decoder_forward(m.decoder, t.dec, mutated, memory, Mode::eval);
    for (std::size_t r = 0; r <= cut; ++r)
      EXPECT_EQ(base.row(static_cast<Eigen::Index>(r)), after.row(static_cast<Eigen::Index>(r)));
    EXPECT_NE(base.bottomRows(1), after.bottomRows(1));
  }
}

TEST(Decoder, OverLengthRejected) {
  auto t = tiny_shapes();
  auto m = random_model<double>(t, 3);
  Matrix<double> memory = Matrix<double>::Random(3, t.dec.hidden);
  EXPECT_THROW(decoder_forward(m.decoder, t.dec, TokenIds(9, 7), memory, Mode::eval), Error);
}

TEST(Decoder, WidthMustMatchEncoder) {
  auto t = tiny_shapes();
  t.dec.hidden = 8;
  EXPECT_THROW(t.dec.validate(t.enc), Error);
}

TEST(Decoder, Seq2SeqGradientMatchesFiniteDifferences) {
  auto t = tiny_shapes();
  t.dec.layers = 2;
  auto m = random_model<double>(t, 5, 0.3);
  auto src = raw_input({2, 9, 11, 14, 8, 4});
  const TokenIds target{12, 7, 19, 9};
  auto grads = zeros_like(m);
  seq2seq_loss(m, t.enc, t.dec, src, target, Mode::eval, nullptr, &grads);
  auto pt = tensors(m);
  auto gt = tensors(grads);
  Rng rng = make_rng(17);
  double worst = 0.0;
  std::string where;
  for (std::size_t i = 0; i < pt.size(); ++i) {
    auto& mat = *pt[i].second;
    std::uniform_int_distribution<Eigen::Index> pick(0, mat.size() - 1);
    for (int s = 0; s < 3; ++s) {
      const auto k = pick(rng);
      const double saved = mat.data()[k];
      const double h = 1e-5;
      mat.data()[k] = saved + h;
      const double up = seq2seq_loss(m, t.enc, t.dec, src, target, Mode::eval);
      mat.data()[k] = saved - h;
      const double down = seq2seq_loss(m, t.enc, t.dec, src, target, Mode::eval);
      mat.data()[k] = saved;
      const double fd = (up - down) / (2 * h);
      const double a = gt[i].second->data()[k];
      const double err = std::abs(a - fd) / std::max(std::abs(a) + std::abs(fd), 1e-6);
      if (err > worst) {
        worst = err;
        where = pt[i].first;
      }
    }
  }
  EXPECT_LT(worst, 1e-5) << where;
  // The cross-attention path reaches the encoder.
  EXPECT_GT(gt.front().second->norm(), 0.0);
}

TEST(Decoder, TargetIsTruncatedToDecoderPositions) {
  auto t = tiny_shapes();
  auto m = random_model<double>(t, 5, 0.3);
  auto src = raw_input({2, 9, 11, 4});
  TokenIds long_target(20, 12);
  EXPECT_TRUE(std::isfinite(seq2seq_loss(m, t.enc, t.dec, src, long_target, Mode::eval)));
}

// ------------------------------------------------------------ generation

TEST(Generate, BeamWidthOneEqualsGreedy) {
  auto t = tiny_shapes(40);
  t.dec.max_target_len = 12;
  auto m = random_model<Real>(t, 21, 0.8);
  Rng rng = make_rng(4);
  std::size_t nonempty = 0;
  for (int trial = 0; trial < 25; ++trial) {
    TokenIds ids{special::cls};
    for (auto id : fixtures::random_ids(6, t.enc.vocab_size - special::count, rng))
      ids.push_back(id + special::count);
    ids.push_back(special::eos);
    auto src = raw_input(ids);
    auto g = generate_greedy(m, t.enc, t.dec, src);
    auto b = generate_beam(m, t.enc, t.dec, src, 1);
    EXPECT_EQ(g, b);
    if (!g.empty()) ++nonempty;
  }
  EXPECT_GT(nonempty, 0u);
}

TEST(Generate, GreedyIsArgmaxReplay) {
  auto t = tiny_shapes(40);
  t.dec.max_target_len = 12;
  auto m = random_model<Real>(t, 22, 0.8);
  auto src = raw_input({2, 10, 20, 30, 4});
  auto out = generate_greedy(m, t.enc, t.dec, src);
  auto memory = forward(m.encoder, t.enc, src, Mode::eval).hidden;
  TokenIds in{special::bos};
  in.insert(in.end(), out.begin(), out.end());
  if (in.size() > static_cast<std::size_t>(t.dec.max_target_len)) in.pop_back();
  Matrix<Real> logits = decoder_forward(m.decoder, t.dec, in, memory, Mode::eval);
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    TokenId best = special::eos;
    for (TokenId id = special::count; id < logits.cols(); ++id)
      if (logits(r, id) > logits(r, best)) best = id;
    if (static_cast<std::size_t>(r) < out.size()) EXPECT_EQ(best, out[static_cast<std::size_t>(r)]);
    else EXPECT_EQ(best, special::eos);
  }
  EXPECT_LE(out.size(), static_cast<std::size_t>(t.dec.max_target_len));
}

TEST(Generate, WiderBeamNeverScoresWorse) {
  auto t = tiny_shapes(30);
  t.dec.max_target_len = 6;
  auto m = random_model<Real>(t, 23, 0.8);
  auto src = raw_input({2, 10, 20, 4});
  auto memory = forward(m.encoder, t.enc, src, Mode::eval).hidden;
  auto seq_score = [&](const TokenIds& out) {
    TokenIds in{special::bos};
    in.insert(in.end(), out.begin(), out.end());
    TokenIds target = out;
    const bool full = out.size() == static_cast<std::size_t>(t.dec.max_target_len);
    if (!full) target.push_back(special::eos);
    else in.pop_back();
    Matrix<Real> logits = decoder_forward(m.decoder, t.dec, in, memory, Mode::eval);
    return -static_cast<double>(sequence_cross_entropy<Real>(logits, target, nullptr));
  };
  const double g = seq_score(generate_beam(m, t.enc, t.dec, src, 1));
  const double b = seq_score(generate_beam(m, t.enc, t.dec, src, 4));
  EXPECT_GE(b, g - 1e-5);
}

TEST(Generate, ZeroEpochsKeepsInitialDecoder) {
  auto toy = fixtures::toy_corpus();
  auto cfg = fixtures::small_model(static_cast<int>(toy.vocab.size()), 16);
  auto dec = DecoderConfig::matching(cfg);
  dec.layers = 1;
  Rng rng = make_rng(1);
  auto enc = EncoderParams<Real>::init(cfg, rng);
  FinetuneHyperparams hp;
  hp.epochs = 0;
  hp.seed = 5;
  auto run = finetune_seq2seq(enc, cfg, dec, toy.vocab, toy.data.bimodal, {}, hp);
  auto fresh = fresh_seq2seq(enc, cfg, dec, 5);
  EXPECT_EQ(run.best_epoch, 0);
  auto a = tensors(run.model);
  auto b = tensors(fresh);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a[i].second, *b[i].second) << a[i].first;
}

TEST(Generate, InitialisationChangesFirstStepLoss) {
  auto toy = fixtures::toy_corpus();
  auto cfg = fixtures::small_model(static_cast<int>(toy.vocab.size()), 16);
  auto dec = DecoderConfig::matching(cfg);
  dec.layers = 1;
  Rng r1 = make_rng(1), r2 = make_rng(2);
  auto a = EncoderParams<Real>::init(cfg, r1);
  auto b = fixtures::random_params<Real>(cfg, 2, 0.3);
  FinetuneHyperparams hp;
  hp.epochs = 1;
  hp.batch_size = 64;
  auto ra = finetune_seq2seq(a, cfg, dec, toy.vocab, toy.data.bimodal, {}, hp);
  auto rb = finetune_seq2seq(b, cfg, dec, toy.vocab, toy.data.bimodal, {}, hp);
  EXPECT_NE(ra.epochs[0].train_loss, rb.epochs[0].train_loss);
}

TEST(Generate, OverfitRegeneratesTrainingTargets) {
  auto toy = fixtures::toy_corpus();
  const auto& pairs = toy.data.bimodal;
  ASSERT_GE(pairs.size(), 8u);
  auto cfg = fixtures::small_model(static_cast<int>(toy.vocab.size()), 32);
  auto dec = DecoderConfig::matching(cfg);
  dec.layers = 1;
  dec.dropout = 0.0;
  Rng rng = make_rng(3);
  auto enc = EncoderParams<Real>::init(cfg, rng);
  FinetuneHyperparams hp;
  hp.batch_size = 4;
  hp.learning_rate = 3e-3;
  hp.warmup_steps = 10;
  hp.epochs = 150;
  hp.max_len = 128;
  auto run = finetune_seq2seq(enc, cfg, dec, toy.vocab, pairs, {}, hp);
  std::size_t exact = 0;
  for (const auto& p : pairs) {
    auto out = generate(run.model, cfg, dec, source_input(p.pl_tokens, toy.vocab, hp.max_len));
    if (out == target_ids(p.nl_tokens, toy.vocab)) ++exact;
  }
  EXPECT_EQ(exact, pairs.size());
  auto report = evaluate_corpus(run.model, cfg, dec, toy.vocab, pairs, hp.max_len);
  EXPECT_NEAR(report.overall, 100.0, 1e-9);

  auto dir = fixtures::scratch_dir("seq2seq");
  to_checkpoint(run.model, cfg, dec, toy.vocab.fingerprint(), 1).save((dir / "m.ckpt").string());
  ModelConfig cfg2;
  DecoderConfig dec2;
  auto back = seq2seq_from_checkpoint(Checkpoint::load((dir / "m.ckpt").string()), &cfg2, &dec2);
  EXPECT_EQ(cfg2, cfg);
  EXPECT_EQ(dec2, dec);
  const auto& p = pairs.front();
  auto src = source_input(p.pl_tokens, toy.vocab, hp.max_len);
  EXPECT_EQ(generate(back, cfg2, dec2, src), generate(run.model, cfg, dec, src));
  EXPECT_EQ(generate(back, cfg2, dec2, src, {3}), generate(run.model, cfg, dec, src));
}
