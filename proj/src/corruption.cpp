#include "nlpl/corruption.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>

#include <json.hpp>

namespace nlpl {

std::vector<std::size_t> MaskPlan::all() const {
  std::vector<std::size_t> out(nl_positions);
  out.insert(out.end(), pl_positions.begin(), pl_positions.end());
  return out;
}

std::size_t mask_budget(std::size_t len, double rate) {
  // 0.15 * 20 evaluates to 3.0000000000000004; do not let that round up.
  const double want = std::ceil(rate * static_cast<double>(len) - 1e-9);
  return std::min(len, static_cast<std::size_t>(std::max(0.0, want)));
}

namespace {
std::vector<std::size_t> sample_span(Span span, double rate, Rng& rng) {
  std::vector<std::size_t> all(span.size());
  std::iota(all.begin(), all.end(), span.begin);
  std::vector<std::size_t> picked;
  std::sample(all.begin(), all.end(), std::back_inserter(picked), mask_budget(span.size(), rate),
              rng);
  return picked;
}
}  // namespace

MaskPlan select_mask_positions(Span nl_span, Span pl_span, double rate, Rng& rng) {
  if (!(rate >= 0.0 && rate <= 1.0))
    throw Error(ErrorKind::invalid_argument, "mask rate must lie in [0, 1]");
  MaskPlan plan;
  plan.rate = rate;
  plan.nl_positions = sample_span(nl_span, rate, rng);
  plan.pl_positions = sample_span(pl_span, rate, rng);
  return plan;
}

namespace {
void check_plan(const EncodedInput& input, const MaskPlan& plan) {
  for (auto p : plan.nl_positions)
    if (!input.nl_span.contains(p) || p >= input.size())
      throw Error(ErrorKind::invalid_argument, "mask plan position outside the NL span");
  for (auto p : plan.pl_positions)
    if (!input.pl_span.contains(p) || p >= input.size())
      throw Error(ErrorKind::invalid_argument, "mask plan position outside the PL span");
}
}  // namespace

MaskedExample apply_mask(const EncodedInput& input, const MaskPlan& plan) {
  check_plan(input, plan);
  MaskedExample out{input.ids, {}};
  for (auto p : plan.all()) {
    out.originals[p] = input.ids[p];
    out.masked_ids[p] = special::mask;
  }
  return out;
}

CorruptExample corrupt(const EncodedInput& input, const MaskPlan& plan,
                       const GeneratorPair& generators, std::uint64_t vocab_fingerprint,
                       Rng& rng) {
  if (generators.nl.vocab_fingerprint() != vocab_fingerprint ||
      generators.pl.vocab_fingerprint() != vocab_fingerprint)
    throw Error(ErrorKind::hash_mismatch, "generator vocabulary does not match the input");
  const auto masked = apply_mask(input, plan);
  CorruptExample out{input.ids, std::vector<std::uint8_t>(input.size(), 1), plan};

  auto fill = [&](const NGramModel& gen, Span span, const std::vector<std::size_t>& positions) {
    std::span<const TokenId> seg(masked.masked_ids.data() + span.begin, span.size());
    for (auto p : positions) {
      const auto off = p - span.begin;
      const TokenId t = gen.sample(seg.first(off), seg.subspan(off + 1), rng);
      out.corrupt_ids[p] = t;
      out.labels[p] = t == input.ids[p] ? 1 : 0;
    }
  };
  fill(generators.nl, input.nl_span, plan.nl_positions);
  fill(generators.pl, input.pl_span, plan.pl_positions);
  return out;
}

std::string to_debug_json(const CorruptExample& ex) {
  nlohmann::json j{{"corrupt_ids", ex.corrupt_ids},
                   {"labels", ex.labels},
                   {"nl_positions", ex.plan.nl_positions},
                   {"pl_positions", ex.plan.pl_positions},
                   {"rate", ex.plan.rate}};
  return j.dump();
}

}  // namespace nlpl
