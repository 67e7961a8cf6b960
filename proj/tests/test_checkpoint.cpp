#include <gtest/gtest.h>

#include <fstream>

#include "nlpl/checkpoint.hpp"
#include "nlpl/encoder.hpp"
#include "test_util.hpp"

using namespace nlpl;

namespace {

ModelConfig tiny() { return fixtures::small_model(40, 8, 2); }

Checkpoint sample() {
  Checkpoint c;
  c.kind = "pretrain";
  c.config = nlohmann::json::parse(tiny().to_json());
  c.vocab_fingerprint = 0x1234abcdULL;
  c.step = 17;
  c.meta = {{"note", "x"}};
  c.put("param", fixtures::random_params<float>(tiny(), 1));
  c.put("f64", fixtures::random_params<double>(tiny(), 2));
  return c;
}

template <typename T>
bool same(const EncoderParams<T>& a, const EncoderParams<T>& b) {
  auto ta = tensors(a);
  auto tb = tensors(b);
  for (std::size_t i = 0; i < ta.size(); ++i)
    if (*ta[i].second != *tb[i].second) return false;
  return true;
}

template <typename Fn>
ErrorKind kind_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorKind::invalid_argument;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  auto c = sample();
  auto back = Checkpoint::deserialize(c.serialize());
  EXPECT_EQ(back.kind, "pretrain");
  EXPECT_EQ(back.step, 17);
  EXPECT_EQ(back.vocab_fingerprint, c.vocab_fingerprint);
  EXPECT_EQ(back.meta, c.meta);
  EXPECT_EQ(back.config, c.config);
  EXPECT_EQ(back.serialize(), c.serialize());

  auto pf = EncoderParams<float>::zeros(tiny());
  back.get("param", pf);
  EXPECT_TRUE(same(pf, fixtures::random_params<float>(tiny(), 1)));
  auto pd = EncoderParams<double>::zeros(tiny());
  back.get("f64", pd);
  EXPECT_TRUE(same(pd, fixtures::random_params<double>(tiny(), 2)));
  EXPECT_TRUE(back.has_group("f64"));
  EXPECT_FALSE(back.has_group("adam_m"));
}

TEST(Checkpoint, FileRoundTripAndVocabCheck) {
  auto dir = fixtures::scratch_dir("ckpt");
  const auto path = (dir / "a.ckpt").string();
  sample().save(path);
  EXPECT_EQ(Checkpoint::load(path).step, 17);
  EXPECT_EQ(Checkpoint::load(path, 0x1234abcdULL).step, 17);
  EXPECT_EQ(kind_of([&] { Checkpoint::load(path, 0x1234abceULL); }), ErrorKind::hash_mismatch);
  EXPECT_EQ(kind_of([&] { Checkpoint::load((dir / "missing.ckpt").string()); }), ErrorKind::io);
}

TEST(Checkpoint, DetectsEveryFlippedByte) {
  const auto bytes = sample().serialize();
  // Every byte of the header region, then a stride through the payload.
  for (std::size_t i = 0; i < bytes.size(); i += (i < 400 ? 1 : 97)) {
    auto bad = bytes;
    bad[i] = static_cast<char>(bad[i] ^ 0x5a);
    EXPECT_EQ(kind_of([&] { Checkpoint::deserialize(bad); }), ErrorKind::format) << i;
  }
}

TEST(Checkpoint, DetectsTruncationAndTrailingBytes) {
  const auto bytes = sample().serialize();
  for (std::size_t n : {std::size_t{0}, std::size_t{7}, std::size_t{20}, bytes.size() / 2,
                        bytes.size() - 1})
    EXPECT_EQ(kind_of([&] { Checkpoint::deserialize(bytes.substr(0, n)); }), ErrorKind::format);
  EXPECT_EQ(kind_of([&] { Checkpoint::deserialize(bytes + "x"); }), ErrorKind::format);
}

TEST(Checkpoint, GetChecksNamesAndShapes) {
  auto c = sample();
  auto wide = EncoderParams<float>::zeros(fixtures::small_model(40, 16, 2));
  EXPECT_EQ(kind_of([&] { c.get("param", wide); }), ErrorKind::format);
  auto deeper = EncoderParams<float>::zeros(fixtures::small_model(40, 8, 3));
  EXPECT_EQ(kind_of([&] { c.get("param", deeper); }), ErrorKind::format);
  auto p = EncoderParams<float>::zeros(tiny());
  EXPECT_EQ(kind_of([&] { c.get("nothing", p); }), ErrorKind::format);
}
