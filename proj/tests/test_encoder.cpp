#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "nlpl/encoder.hpp"
#include "reference_encoder.hpp"
#include "test_util.hpp"

using namespace nlpl;
using nlpl::fixtures::random_fixture;
using nlpl::fixtures::random_params;

namespace {

constexpr int kVocab = 13;

ModelConfig small_config() {
  ModelConfig c;
  c.layers = 2;
  c.hidden = 8;
  c.heads = 2;
  c.ffn = 16;
  c.vocab_size = kVocab;
  c.max_positions = 16;
  c.dropout = 0.1;
  return c;
}

}  // namespace

TEST(Encoder, OutputShape) {
  auto cfg = small_config();
  auto p = random_params<double>(cfg, 1);
  Rng rng = make_rng(2);
  for (std::size_t n : {1u, 5u, 16u}) {
    auto out = forward(p, cfg, fixtures::random_ids(n, kVocab, rng), std::nullopt, Mode::eval);
    EXPECT_EQ(out.hidden.rows(), static_cast<Eigen::Index>(n));
    EXPECT_EQ(out.hidden.cols(), cfg.hidden);
    EXPECT_EQ(Matrix<double>(out.cls()), Matrix<double>(out.hidden.row(0)));
  }
}

TEST(Encoder, OverLengthInputThrows) {
  auto cfg = small_config();
  auto p = random_params<double>(cfg, 1);
  TokenIds ids(17, 8);
  EXPECT_THROW(forward(p, cfg, ids, std::nullopt, Mode::eval), Error);
}

TEST(Encoder, PermutationEquivariantWithoutPositions) {
  auto cfg = small_config();
  auto p = random_params<double>(cfg, 3);
  p.position_embedding.setZero();
  Rng rng = make_rng(4);
  TokenIds ids = fixtures::random_ids(9, kVocab, rng);
  std::vector<std::size_t> perm(ids.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  TokenIds permuted(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) permuted[i] = ids[perm[i]];
  auto a = forward(p, cfg, ids, std::nullopt, Mode::eval).hidden;
  auto b = forward(p, cfg, permuted, std::nullopt, Mode::eval).hidden;
  for (std::size_t i = 0; i < ids.size(); ++i)
    EXPECT_LT((b.row(static_cast<Eigen::Index>(i)) - a.row(static_cast<Eigen::Index>(perm[i])))
                  .cwiseAbs()
                  .maxCoeff(),
              1e-12);
}

TEST(Encoder, TinyConfigMatchesScalarReference) {
  auto cfg = ModelConfig::tiny(kVocab);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto p = random_params<double>(cfg, 100 + seed);
    Rng rng = make_rng(200 + seed);
    auto f = random_fixture(3 + seed, kVocab, rng);
    auto out = forward(p, cfg, f.ids, std::nullopt, Mode::eval).hidden;
    auto ref = reference::forward(p, cfg, f.ids);
    for (std::size_t i = 0; i < ref.size(); ++i)
      for (std::size_t j = 0; j < ref[i].size(); ++j)
        EXPECT_NEAR(out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)), ref[i][j], 1e-10);
    EXPECT_NEAR(mlm_loss(p, out, f.originals), reference::mlm_loss(p, ref, f.originals), 1e-10);
    EXPECT_NEAR(rtd_loss(p, out, std::span<const std::uint8_t>(f.labels)),
                reference::rtd_loss(p, ref, f.labels), 1e-10);
  }
}

TEST(Encoder, AttentionLimitMatchesScalarReference) {
  auto cfg = ModelConfig::tiny(kVocab);
  auto p = random_params<double>(cfg, 7);
  Rng rng = make_rng(8);
  auto ids = fixtures::random_ids(8, kVocab, rng);
  auto out = forward(p, cfg, ids, std::size_t{4}, Mode::eval).hidden;
  auto ref = reference::forward(p, cfg, ids, std::size_t{4});
  for (std::size_t i = 0; i < ref.size(); ++i)
    for (std::size_t j = 0; j < ref[i].size(); ++j)
      EXPECT_NEAR(out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)), ref[i][j], 1e-10);
}

TEST(Encoder, AttentionLimitHidesLaterTokens) {
  auto cfg = small_config();
  auto p = random_params<double>(cfg, 9);
  Rng rng = make_rng(10);
  auto ids = fixtures::random_ids(12, kVocab, rng);
  auto mutated = ids;
  for (std::size_t i = 6; i < ids.size(); ++i) mutated[i] = (ids[i] + 1) % kVocab;
  auto a = forward(p, cfg, ids, std::size_t{5}, Mode::eval).hidden;
  auto b = forward(p, cfg, mutated, std::size_t{5}, Mode::eval).hidden;
  EXPECT_EQ(Matrix<double>(a.topRows(6)), Matrix<double>(b.topRows(6)));
}

TEST(Encoder, AttentionRowsSumToOne) {
  auto cfg = small_config();
  auto p = random_params<float>(cfg, 11);
  Rng rng = make_rng(12);
  EncoderCache<float> cache;
  forward(p, cfg, fixtures::random_ids(10, kVocab, rng), std::size_t{6}, Mode::eval, nullptr, &cache);
  for (const auto& layer : cache.layers)
    for (const auto& probs : layer.attn.probs)
      for (Eigen::Index r = 0; r < probs.rows(); ++r) EXPECT_NEAR(probs.row(r).sum(), 1.0, 1e-6);
}

TEST(Encoder, EvalModeIsBitwiseDeterministic) {
  auto cfg = small_config();
  auto p = random_params<float>(cfg, 13);
  Rng rng = make_rng(14);
  auto ids = fixtures::random_ids(10, kVocab, rng);
  Rng drop = make_rng(15);
  auto a = forward(p, cfg, ids, std::nullopt, Mode::eval, &drop).hidden;
  auto b = forward(p, cfg, ids, std::nullopt, Mode::eval, &drop).hidden;
  EXPECT_EQ(0, std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())));
}

TEST(Encoder, TrainModeDropoutDependsOnRng) {
  auto cfg = small_config();
  auto p = random_params<double>(cfg, 16);
  Rng rng = make_rng(17);
  auto ids = fixtures::random_ids(10, kVocab, rng);
  Rng d1 = make_rng(1), d2 = make_rng(1), d3 = make_rng(2);
  auto a = forward(p, cfg, ids, std::nullopt, Mode::train, &d1).hidden;
  auto b = forward(p, cfg, ids, std::nullopt, Mode::train, &d2).hidden;
  auto c = forward(p, cfg, ids, std::nullopt, Mode::train, &d3).hidden;
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST(MlmLoss, EmptyPositionSetIsZero) {
  auto cfg = small_config();
  auto p = random_params<double>(cfg, 18);
  Matrix<double> h = Matrix<double>::Random(4, cfg.hidden);
  EXPECT_EQ(mlm_loss(p, h, {}), 0.0);
}

TEST(MlmLoss, UniformHeadGivesLogV) {
  auto cfg = small_config();
  auto p = random_params<double>(cfg, 19);
  p.token_embedding.setZero();
  p.mlm_bias.setZero();
  Matrix<double> h = Matrix<double>::Random(4, cfg.hidden);
  EXPECT_NEAR(mlm_loss(p, h, {{2, 5}}), std::log(double(kVocab)), 1e-12);
}

TEST(MlmLoss, LogitShiftLeavesProbabilitiesUnchanged) {
  auto cfg = small_config();
  auto p = random_params<double>(cfg, 20);
  Matrix<double> h = Matrix<double>::Random(4, cfg.hidden);
  std::vector<std::size_t> pos{0, 3};
  auto a = mlm_log_probs(p, h, pos);
  p.mlm_bias.array() += 37.5;
  auto b = mlm_log_probs(p, h, pos);
  EXPECT_LT((a.array().exp() - b.array().exp()).abs().maxCoeff(), 1e-9);
  Eigen::Index ia, ib;
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    a.row(r).maxCoeff(&ia);
    (2.0 * b.row(r)).maxCoeff(&ib);
    EXPECT_EQ(ia, ib);
  }
}

TEST(RtdLoss, HalfProbabilityGivesNLog2) {
  auto cfg = small_config();
  auto p = random_params<double>(cfg, 21);
  p.rtd_weight.setZero();
  p.rtd_bias.setZero();
  Matrix<double> h = Matrix<double>::Random(7, cfg.hidden);
  std::vector<std::uint8_t> labels{1, 0, 0, 1, 1, 0, 1};
  EXPECT_NEAR(rtd_loss(p, h, std::span<const std::uint8_t>(labels)), 7 * std::log(2.0), 1e-12);
}

TEST(RtdLoss, PerfectDiscriminatorIsBelowClipFloor) {
  auto cfg = small_config();
  auto p = random_params<double>(cfg, 22);
  Matrix<double> h = Matrix<double>::Zero(6, cfg.hidden);
  h.col(0) << 1, -1, 1, 1, -1, -1;
  p.rtd_weight.setZero();
  p.rtd_weight(0, 0) = 1e4;
  p.rtd_bias.setZero();
  std::vector<std::uint8_t> labels{1, 0, 1, 1, 0, 0};
  const double loss = rtd_loss(p, h, std::span<const std::uint8_t>(labels));
  EXPECT_LE(loss, -std::log1p(-kProbabilityFloor) * 6);
  EXPECT_GE(loss, 0.0);
  std::vector<std::uint8_t> wrong{0, 1, 0, 0, 1, 1};
  EXPECT_TRUE(std::isfinite(rtd_loss(p, h, std::span<const std::uint8_t>(wrong))));
}

TEST(CombinedLoss, IsTheUnweightedSum) {
  EXPECT_EQ(combined_loss(0.0, 0.0), 0.0);
  EXPECT_EQ(combined_loss(1.5, 2.5), 4.0);
  auto cfg = small_config();
  auto p = random_params<double>(cfg, 23);
  Rng rng = make_rng(24);
  auto f = random_fixture(9, kVocab, rng);
  const double both = fixtures::fixture_loss(p, cfg, f);
  const double mlm = fixtures::fixture_loss<double>(p, cfg, f, nullptr, true, false);
  const double rtd = fixtures::fixture_loss<double>(p, cfg, f, nullptr, false, true);
  EXPECT_NEAR(both, mlm + rtd, 1e-12);
}

TEST(Backward, ConstantLossGivesZeroGradients) {
  auto cfg = small_config();
  auto p = random_params<double>(cfg, 25);
  Rng rng = make_rng(26);
  EncoderCache<double> cache;
  auto out = forward(p, cfg, fixtures::random_ids(8, kVocab, rng), std::nullopt, Mode::eval,
                     nullptr, &cache);
  auto g = zeros_like(p);
  backward(p, cfg, cache, Matrix<double>(Matrix<double>::Zero(out.hidden.rows(), out.hidden.cols())), g);
  for (const auto& [name, m] : tensors(g)) EXPECT_EQ(m->cwiseAbs().maxCoeff(), 0.0) << name;
}

TEST(Backward, GradientIsLinearInTheLoss) {
  auto cfg = small_config();
  auto p = random_params<double>(cfg, 27);
  Rng rng = make_rng(28);
  auto f = random_fixture(9, kVocab, rng);
  auto g_both = zeros_like(p), g_mlm = zeros_like(p), g_rtd = zeros_like(p);
  fixtures::fixture_loss(p, cfg, f, &g_both);
  fixtures::fixture_loss(p, cfg, f, &g_mlm, true, false);
  fixtures::fixture_loss(p, cfg, f, &g_rtd, false, true);
  auto tb = tensors(g_both), tm = tensors(g_mlm), tr = tensors(g_rtd);
  for (std::size_t i = 0; i < tb.size(); ++i)
    EXPECT_LT((*tb[i].second - *tm[i].second - *tr[i].second).cwiseAbs().maxCoeff(), 1e-12)
        << tb[i].first;
}

TEST(Backward, TinyConfigMatchesFiniteDifferences) {
  auto cfg = ModelConfig::tiny(kVocab);
  auto p = random_params<double>(cfg, 29);
  Rng rng = make_rng(30);
  auto f = random_fixture(7, kVocab, rng);
  auto r = fixtures::gradient_check(p, cfg, f, 100, 31);
  EXPECT_LT(r.max_relative_error, 1e-3) << r.worst;
}

TEST(Backward, UntiedHeadAndDropoutMatchFiniteDifferences) {
  auto cfg = small_config();
  cfg.tie_mlm_head = false;
  auto p = random_params<double>(cfg, 32, 0.3);
  Rng rng = make_rng(33);
  auto f = random_fixture(10, kVocab, rng);
  auto r = fixtures::gradient_check(p, cfg, f, 200, 34);
  EXPECT_LT(r.max_relative_error, 1e-3) << r.worst;

  // Dropout masks are recorded, so a train-mode pass replayed with the
  // same rng differentiates exactly like any fixed network.
  auto g = zeros_like(p);
  Rng d1 = make_rng(35);
  EncoderCache<double> cache;
  auto out = forward(p, cfg, f.ids, std::nullopt, Mode::train, &d1, &cache);
  Matrix<double> dh = Matrix<double>::Zero(out.hidden.rows(), out.hidden.cols());
  mlm_loss(p, out.hidden, f.originals, &dh, &g);
  backward(p, cfg, cache, dh, g);
  auto loss_at = [&](const EncoderParams<double>& q) {
    Rng d = make_rng(35);
    auto o = forward(q, cfg, f.ids, std::nullopt, Mode::train, &d);
    return mlm_loss(q, o.hidden, f.originals);
  };
  auto q = p;
  const double h = 1e-5;
  for (Eigen::Index k = 0; k < 8; ++k) {
    q.layers[0].ffn.w1(k, k) += h;
    const double up = loss_at(q);
    q.layers[0].ffn.w1(k, k) -= 2 * h;
    const double down = loss_at(q);
    q.layers[0].ffn.w1(k, k) += h;
    const double a = g.layers[0].ffn.w1(k, k);
    EXPECT_LT(std::abs(a - (up - down) / (2 * h)) / std::max(std::abs(a), 1e-8), 1e-3);
  }
}

TEST(ModelConfig, JsonRoundTripAndValidation) {
  auto c = ModelConfig::roberta_base();
  EXPECT_EQ(c.layers, 12);
  EXPECT_EQ(c.hidden, 768);
  EXPECT_EQ(c.heads, 12);
  EXPECT_EQ(ModelConfig::from_json(c.to_json()), c);
  auto bad = ModelConfig::desk();
  bad.heads = 3;
  EXPECT_THROW(bad.validate(), Error);
}
