#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "nlpl/common.hpp"
#include "nlpl/corpus.hpp"
#include "test_util.hpp"

using namespace nlpl;

namespace {

RawFunctionRecord record(const std::string& func, const std::string& doc, const std::string& code,
                         const std::string& language = "python") {
  RawFunctionRecord r;
  r.func_name = func;
  r.doc = doc;
  r.code = code;
  r.language = language;
  r.repo_id = "r";
  r.url = "u/" + func;
  return r;
}

const std::string kThreeLines = "def f(xs):\n    ys = sorted(xs)\n    return ys\n";

template <typename T>
bool holds(const FilterDecision& d) {
  return std::holds_alternative<T>(d);
}

std::vector<std::string> numbered(std::size_t n) {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back("id" + std::to_string(i));
  return ids;
}

}  // namespace

TEST(Paragraph, FirstParagraphOnly) {
  EXPECT_EQ(truncate_first_paragraph("Sort items.\n\nUses quicksort."), "Sort items.");
  EXPECT_EQ(truncate_first_paragraph(""), "");
  EXPECT_EQ(truncate_first_paragraph("One line"), "One line");
  EXPECT_EQ(truncate_first_paragraph("\n\nLeading blank.\nSecond line.\n  \nThird."),
            "Leading blank.\nSecond line.");
  const std::string three = "First para\nstill first.\n\nSecond para.\n\n\nThird para.";
  EXPECT_EQ(truncate_first_paragraph(three), "First para\nstill first.");
}

TEST(Filter, PaperRules) {
  auto d = filter_record(record("run_tests", "Run all the tests.", kThreeLines));
  ASSERT_TRUE(holds<Rejection>(d));
  EXPECT_EQ(std::get<Rejection>(d).reason, "name contains test");

  d = filter_record(record("one", "Return one always here.", "def g():\n    return 1\n"));
  ASSERT_TRUE(holds<Rejection>(d));
  EXPECT_EQ(std::get<Rejection>(d).reason, "fewer than three lines");

  d = filter_record(record("sort_one", "Sort.", kThreeLines));
  ASSERT_TRUE(holds<UnimodalCode>(d));

  d = filter_record(record("sort_items", "Sort the items.\n\nMore text here.", kThreeLines));
  ASSERT_TRUE(holds<BimodalPair>(d));
  const auto& p = std::get<BimodalPair>(d);
  EXPECT_EQ(p.doc, "Sort the items.");
  EXPECT_EQ(p.nl_tokens, (std::vector<std::string>{"Sort", "the", "items."}));
  EXPECT_EQ(p.id, "u/sort_items");
}

TEST(Filter, TestMatchIgnoresCase) {
  auto d = filter_record(record("TestParser", "Check the parser works.", kThreeLines, "go"));
  ASSERT_TRUE(holds<Rejection>(d));
  d = filter_record(record("latest_value", "Return the latest value.", kThreeLines));
  EXPECT_TRUE(holds<Rejection>(d));
}

TEST(Filter, LinesIgnoreBlankAndTrailingWhitespace) {
  EXPECT_EQ(count_source_lines("a\n\n   \nb  \n\tc\n"), 3u);
  EXPECT_EQ(count_source_lines(""), 0u);
  EXPECT_EQ(count_source_lines("x = 1"), 1u);
}

TEST(Filter, MalformedAndReuseFlag) {
  auto d = filter_record(record("f", "Sort the items.", kThreeLines, "cobol"));
  ASSERT_TRUE(holds<Rejection>(d));
  EXPECT_EQ(std::get<Rejection>(d).reason, "malformed");
  d = filter_record(record("f", "Sort the items.", ""));
  EXPECT_EQ(std::get<Rejection>(d).reason, "malformed");
  auto r = record("f", "Sort the items.", kThreeLines);
  r.used_elsewhere = false;
  EXPECT_TRUE(holds<Rejection>(filter_record(r)));
  r.used_elsewhere = true;
  EXPECT_TRUE(holds<BimodalPair>(filter_record(r)));
}

TEST(Filter, Idempotent) {
  std::ifstream in(fixtures::data_path("synthetic_python_5k.jsonl"));
  std::string line;
  int checked = 0;
  while (std::getline(in, line) && checked < 300) {
    auto r = parse_record(line);
    auto d = filter_record(r);
    if (auto* p = std::get_if<BimodalPair>(&d)) {
      auto again = r;
      again.doc = p->doc;
      auto d2 = filter_record(again);
      ASSERT_TRUE(holds<BimodalPair>(d2));
      EXPECT_EQ(std::get<BimodalPair>(d2).nl_tokens, p->nl_tokens);
      EXPECT_EQ(std::get<BimodalPair>(d2).pl_tokens, p->pl_tokens);
      EXPECT_GE(p->nl_tokens.size(), 3u);
      EXPECT_GE(count_source_lines(p->code), 3u);
      std::string lower = p->func_name;
      std::transform(lower.begin(), lower.end(), lower.begin(), ::tolower);
      EXPECT_EQ(lower.find("test"), std::string::npos);
      ++checked;
    } else if (auto* u = std::get_if<UnimodalCode>(&d)) {
      EXPECT_TRUE(holds<UnimodalCode>(filter_record(r)));
      (void)u;
    }
  }
  EXPECT_GT(checked, 100);
}

TEST(Ingest, HandDerivedFixture) {
  std::ifstream in(fixtures::data_path("ingest10.jsonl"));
  auto r = ingest(in);
  EXPECT_EQ(r.input_count, 11u);
  EXPECT_EQ(r.bimodal.size() + r.unimodal.size() + r.rejected.size(), r.input_count);
  std::set<std::string> bi, uni;
  std::map<std::string, std::string> rej;
  for (const auto& p : r.bimodal) bi.insert(p.id);
  for (const auto& u : r.unimodal) uni.insert(u.id);
  for (const auto& x : r.rejected) rej[x.id] = x.reason;
  EXPECT_EQ(bi, (std::set<std::string>{"u0", "u6"}));
  EXPECT_EQ(uni, (std::set<std::string>{"u1", "u5", "u8"}));
  EXPECT_EQ(rej, (std::map<std::string, std::string>{{"u2", "name contains test"},
                                                     {"u3", "fewer than three lines"},
                                                     {"u4", "name contains test"},
                                                     {"line:6", "undecodable"},
                                                     {"u7", "malformed"},
                                                     {"u9", "fewer than three lines"}}));
}

TEST(Ingest, EmptyStream) {
  std::istringstream in("");
  auto r = ingest(in);
  EXPECT_EQ(r.input_count, 0u);
  EXPECT_TRUE(r.bimodal.empty() && r.unimodal.empty() && r.rejected.empty());
}

TEST(Ingest, JsonlRoundTrip) {
  auto toy = fixtures::toy_corpus();
  auto dir = fixtures::scratch_dir("corpus");
  save_bimodal((dir / "b.jsonl").string(), toy.data.bimodal);
  save_unimodal((dir / "u.jsonl").string(), toy.data.unimodal);
  auto b = load_bimodal((dir / "b.jsonl").string());
  auto u = load_unimodal((dir / "u.jsonl").string());
  ASSERT_EQ(b.size(), toy.data.bimodal.size());
  ASSERT_EQ(u.size(), toy.data.unimodal.size());
  for (std::size_t i = 0; i < b.size(); ++i) {
    EXPECT_EQ(b[i].id, toy.data.bimodal[i].id);
    EXPECT_EQ(b[i].nl_tokens, toy.data.bimodal[i].nl_tokens);
    EXPECT_EQ(b[i].pl_tokens, toy.data.bimodal[i].pl_tokens);
    EXPECT_EQ(b[i].code, toy.data.bimodal[i].code);
  }
  EXPECT_EQ(u.front().pl_tokens, toy.data.unimodal.front().pl_tokens);
}

TEST(Split, FloorThenDistribute) {
  EXPECT_EQ(split_sizes(10, {0.8, 0.1, 0.1}), (std::array<std::size_t, 3>{8, 1, 1}));
  // floors 3,1,1; the two leftover ids go to the .75 fractions.
  EXPECT_EQ(split_sizes(7, {0.5, 0.25, 0.25}), (std::array<std::size_t, 3>{3, 2, 2}));
  EXPECT_EQ(split_sizes(3, {1.0 / 3, 1.0 / 3, 1.0 / 3}), (std::array<std::size_t, 3>{1, 1, 1}));
  EXPECT_EQ(split_sizes(5, {1, 0, 0}), (std::array<std::size_t, 3>{5, 0, 0}));
}

TEST(Split, DeterministicDisjointExhaustive) {
  auto ids = numbered(100);
  auto a = split(ids, {0.8, 0.1, 0.1}, 7);
  auto b = split(ids, {0.8, 0.1, 0.1}, 7);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.dev, b.dev);
  EXPECT_EQ(a.test, b.test);
  EXPECT_EQ(a.train.size(), 80u);
  std::set<std::string> all(a.train.begin(), a.train.end());
  all.insert(a.dev.begin(), a.dev.end());
  all.insert(a.test.begin(), a.test.end());
  EXPECT_EQ(all.size(), 100u);
  auto c = split(ids, {0.8, 0.1, 0.1}, 8);
  EXPECT_NE(a.train, c.train);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto s = split(numbered(37), {0.6, 0.3, 0.1}, seed);
    std::set<std::string> u(s.train.begin(), s.train.end());
    u.insert(s.dev.begin(), s.dev.end());
    u.insert(s.test.begin(), s.test.end());
    EXPECT_EQ(u.size(), 37u);
    EXPECT_EQ(s.train.size() + s.dev.size() + s.test.size(), 37u);
  }
}

TEST(Split, AllTrainAndErrors) {
  auto s = split(numbered(9), {1, 0, 0}, 3);
  EXPECT_EQ(s.train.size(), 9u);
  EXPECT_TRUE(s.dev.empty() && s.test.empty());
  EXPECT_THROW(split(numbered(9), {0.5, 0.2, 0.2}, 3), Error);
  EXPECT_THROW(split(numbered(9), {1.2, -0.1, -0.1}, 3), Error);
  EXPECT_THROW(split({"a", "a"}, {1, 0, 0}, 3), Error);
}

TEST(Split, ManifestRoundTripAndSelect) {
  auto s = split(numbered(20), {0.5, 0.25, 0.25}, 11);
  auto back = split_from_json(to_json(s));
  EXPECT_EQ(back.train, s.train);
  EXPECT_EQ(back.test, s.test);
  EXPECT_EQ(back.seed, 11u);
  auto toy = fixtures::toy_corpus();
  std::vector<std::string> ids{toy.data.bimodal[3].id, toy.data.bimodal[1].id};
  auto sel = select(toy.data.bimodal, ids);
  ASSERT_EQ(sel.size(), 2u);
  EXPECT_EQ(sel[0].id, toy.data.bimodal[1].id);
}
