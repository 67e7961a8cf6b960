#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "nlpl/ngram.hpp"
#include "nlpl/pretrainer.hpp"
#include "test_util.hpp"

using namespace nlpl;

namespace {

constexpr TokenId a = 7, b = 8, c = 9;
constexpr double k = 0.01;

NGramModel abc(const std::vector<TokenIds>& seqs, int order) {
  return NGramModel::train(seqs, order, k, 10, 0xabc, Provenance::bimodal_doc);
}

double sum(const std::vector<double>& p) { return std::accumulate(p.begin(), p.end(), 0.0); }

}  // namespace

TEST(NGram, HandCounts) {
  auto m = abc({{a, a, a, a}}, 2);
  EXPECT_EQ(m.forward_count({a}, a), 3);
  EXPECT_EQ(m.forward_count({NGramModel::kStartSentinel}, a), 1);
  EXPECT_EQ(m.forward_count({a}, b), 0);
  EXPECT_EQ(m.support_size(), 3u);
  EXPECT_EQ(m.unigram_total(), 4);
}

TEST(NGram, AddKFormula) {
  auto m = abc({{a, b, a, c}}, 2);
  const double v = 3;
  const TokenIds left{a};
  EXPECT_NEAR(m.prob_forward(left, b), (1 + k) / (2 + k * v), 1e-15);
  EXPECT_NEAR(m.prob_forward(left, a), k / (2 + k * v), 1e-15);
  // Read backward the sequence is "c a b a": only b follows a.
  const TokenIds right{a};
  EXPECT_NEAR(m.prob_backward(right, b), (1 + k) / (1 + k * v), 1e-15);
  EXPECT_NEAR(m.prob_backward(TokenIds{c}, a), (1 + k) / (1 + k * v), 1e-15);
  EXPECT_EQ(m.prob_forward(left, special::mask), 0.0);
}

TEST(NGram, BidirectionalByHand) {
  // Middle position of "a ? c" after training on "a b c" and "a c c":
  // both directions give b and c one count each out of two.
  auto m = abc({{a, b, c}, {a, c, c}}, 3);
  const TokenIds left{a}, right{c};
  const auto p = m.distribution(left, right);
  ASSERT_EQ(p.size(), 3u);
  EXPECT_NEAR(p[1], (1 + k) / (2 * (1 + k) + k), 1e-12);
  EXPECT_NEAR(p[2], (1 + k) / (2 * (1 + k) + k), 1e-12);
  EXPECT_NEAR(p[0], k / (2 * (1 + k) + k), 1e-12);

  auto single = abc({{a, b, c}}, 3);
  EXPECT_NEAR(single.prob_bidirectional(left, right, b), (1 + k) / (1 + 3 * k), 1e-12);
}

TEST(NGram, BidirectionalMatchesBruteForce) {
  auto m = abc({{a, b, c}, {b, b, a, c}, {c, a}}, 3);
  const TokenIds seq{a, b, c, a};
  for (std::size_t i = 0; i < seq.size(); ++i) {
    std::span<const TokenId> s(seq);
    auto left = s.first(i), right = s.subspan(i + 1);
    std::vector<double> brute;
    for (TokenId t = a; t <= c; ++t)
      brute.push_back(std::sqrt(m.prob_forward(left, t) * m.prob_backward(right, t)));
    const double z = sum(brute);
    auto p = m.distribution(left, right);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(p[j], brute[j] / z, 1e-14);
  }
}

TEST(NGram, UnseenContextFallsBackToUnigram) {
  auto m = abc({{a, b, c}, {a}}, 3);
  // unigram counts a:2 b:1 c:1 of 4
  const TokenIds left{c, c};
  EXPECT_NEAR(m.prob_forward(left, a), (2 + k) / (4 + 3 * k), 1e-15);
  EXPECT_NEAR(m.prob_forward(left, b), (1 + k) / (4 + 3 * k), 1e-15);
}

TEST(NGram, SingleTokenSupport) {
  auto m = NGramModel::train({{7, 7, 2, 7}}, 3, k, 8, 1, Provenance::bimodal_code);
  Rng rng = make_rng(1);
  const TokenIds ctx{7};
  EXPECT_DOUBLE_EQ(m.prob_bidirectional(ctx, ctx, 7), 1.0);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(m.sample(ctx, ctx, rng), 7);
}

TEST(NGram, NormalizedOnRealCorpus) {
  auto toy = fixtures::toy_corpus();
  auto g = prepare_generators(toy.data.bimodal, toy.data.unimodal, toy.vocab, 3, k);
  Rng rng = make_rng(5);
  for (int t = 0; t < 50; ++t) {
    auto seq = fixtures::random_ids(12, static_cast<int>(toy.vocab.size()), rng);
    std::span<const TokenId> s(seq);
    const std::size_t i = static_cast<std::size_t>(t % 12);
    for (const auto* m : {&g.nl, &g.pl}) {
      auto p = m->distribution(s.first(i), s.subspan(i + 1));
      EXPECT_NEAR(sum(p), 1.0, 1e-12);
      EXPECT_TRUE(std::all_of(p.begin(), p.end(), [](double x) { return x > 0; }));
    }
  }
  EXPECT_EQ(g.nl.provenance(), Provenance::bimodal_doc);
  EXPECT_EQ(g.pl.provenance(), Provenance::unimodal_code);
  EXPECT_EQ(g.nl.vocab_fingerprint(), toy.vocab.fingerprint());
}

TEST(NGram, SamplingFrequenciesWithinThreeSigma) {
  auto m = abc({{a, b, c}, {a, c, c}}, 3);
  const TokenIds left{a}, right{c};
  const auto p = m.distribution(left, right);
  Rng rng = make_rng(42);
  const int n = 10000;
  std::array<int, 3> hits{};
  for (int i = 0; i < n; ++i) ++hits[static_cast<std::size_t>(m.sample(left, right, rng) - a)];
  for (std::size_t j = 0; j < 3; ++j) {
    const double sigma = std::sqrt(n * p[j] * (1 - p[j]));
    EXPECT_LE(std::abs(hits[j] - n * p[j]), 3 * sigma) << j;
  }
}

TEST(NGram, SerializationRoundTrip) {
  auto toy = fixtures::toy_corpus();
  auto g = prepare_generators(toy.data.bimodal, {}, toy.vocab, 3, k);
  EXPECT_EQ(g.pl.provenance(), Provenance::bimodal_code);
  auto dir = fixtures::scratch_dir("ngram");
  g.save((dir / "nl.json").string(), (dir / "pl.json").string());
  auto back = GeneratorPair::load((dir / "nl.json").string(), (dir / "pl.json").string());
  EXPECT_EQ(back.nl.serialize(), g.nl.serialize());
  EXPECT_EQ(back.pl.serialize(), g.pl.serialize());
  EXPECT_EQ(back.pl.provenance(), Provenance::bimodal_code);
  const TokenIds ctx{10, 11};
  EXPECT_EQ(back.nl.distribution(ctx, ctx), g.nl.distribution(ctx, ctx));
  EXPECT_THROW(NGramModel::deserialize("{\"format\":\"other\"}"), Error);
  EXPECT_THROW(NGramModel::deserialize("not json"), Error);
}

TEST(NGram, Errors) {
  EXPECT_THROW(abc({{a, b}}, 1), Error);
  EXPECT_THROW(NGramModel::train({{a}}, 3, 0.0, 10, 0, Provenance::bimodal_doc), Error);
  EXPECT_THROW(abc({}, 3), Error);
  EXPECT_THROW(abc({{1, 2, 3}}, 3), Error);
  EXPECT_THROW(NGramModel::train({{a}}, 3, k, 7, 0, Provenance::bimodal_doc), Error);
}
