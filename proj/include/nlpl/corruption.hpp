#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "nlpl/common.hpp"
#include "nlpl/ngram.hpp"
#include "nlpl/tokenizer.hpp"

namespace nlpl {

struct MaskPlan {
  std::vector<std::size_t> nl_positions;  ///< sorted, inside nl_span
  std::vector<std::size_t> pl_positions;  ///< sorted, inside pl_span
  double rate = 0.0;

  std::vector<std::size_t> all() const;
  bool empty() const { return nl_positions.empty() && pl_positions.empty(); }
};

/// min(ceil(rate * len), len) positions drawn without replacement from a
/// segment of length len.
std::size_t mask_budget(std::size_t len, double rate);

MaskPlan select_mask_positions(Span nl_span, Span pl_span, double rate, Rng& rng);

struct MaskedExample {
  TokenIds masked_ids;
  std::map<std::size_t, TokenId> originals;
};

MaskedExample apply_mask(const EncodedInput& input, const MaskPlan& plan);

struct CorruptExample {
  TokenIds corrupt_ids;
  std::vector<std::uint8_t> labels;  ///< 1 = original token kept
  MaskPlan plan;
};

/// Samples a replacement for every planned position from the generator of
/// that segment, conditioned on the masked segment. NL positions are
/// sampled first, each segment in ascending position order.
CorruptExample corrupt(const EncodedInput& input, const MaskPlan& plan,
                       const GeneratorPair& generators, std::uint64_t vocab_fingerprint, Rng& rng);

/// Debug dump; not a stable format.
std::string to_debug_json(const CorruptExample& ex);

}  // namespace nlpl
