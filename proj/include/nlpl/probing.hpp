#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "nlpl/corpus.hpp"
#include "nlpl/encoder.hpp"
#include "nlpl/pretrainer.hpp"
#include "nlpl/tokenizer.hpp"

namespace nlpl {

enum class ProbeSide { nl4, pl2, pl2_preceding };
std::string to_string(ProbeSide s);
ProbeSide probe_side_from_string(const std::string& s);

/// One answer choice: a keyword group, scored by its best member.
struct ProbeCandidate {
  std::vector<std::string> members;
  std::vector<TokenIds> pieces;  ///< subword ids of each member
};

/// Cloze question with a single [MASK] slot standing for one whole word.
struct ProbeInstance {
  std::string id;
  std::string source_id;
  std::string language;
  ProbeSide side = ProbeSide::nl4;
  EncodedInput input;
  std::size_t mask_position = 0;
  std::vector<ProbeCandidate> candidates;
  std::size_t gold = 0;
  std::string masked_word;  ///< the original word under the mask

  nlohmann::json to_json() const;
  static ProbeInstance from_json(const nlohmann::json& j);
};

/// {max, maximize}, {min, minimize}, {less}, {greater}
const std::vector<std::vector<std::string>>& nl_keyword_groups();
/// {max}, {min}
const std::vector<std::vector<std::string>>& pl_keyword_groups();

struct ProbeBuildLog {
  std::size_t skipped_ambiguous = 0;  ///< NL docs naming several groups
  std::size_t skipped_truncated = 0;  ///< mask would fall outside max_len
};

/// Masks the first keyword occurrence in each qualifying documentation;
/// the input carries the complete code. Matching is case-insensitive.
std::vector<ProbeInstance> build_nl_probes(const std::vector<BimodalPair>& pairs,
                                           const Vocabulary& vocab, std::size_t max_len,
                                           ProbeBuildLog* log = nullptr);

/// One instance per exact `max`/`min` code token. With preceding_only the
/// input hides every position after the mask from attention.
std::vector<ProbeInstance> build_pl_probes(const std::vector<BimodalPair>& pairs,
                                           const Vocabulary& vocab, std::size_t max_len,
                                           bool preceding_only, ProbeBuildLog* log = nullptr);

/// Line-delimited JSON, keys sorted, one instance per line.
std::string serialize_probes(const std::vector<ProbeInstance>& instances);
std::vector<ProbeInstance> deserialize_probes(const std::string& text);

struct ProbeScore {
  std::size_t chosen = 0;
  std::vector<double> candidate_scores;              ///< max over members
  std::vector<std::vector<double>> member_scores;    ///< mean subtoken log-prob
  bool tie = false;
};

/// Scores each candidate with the MLM head at the slot. Ties go to the
/// lowest candidate index.
ProbeScore zero_shot_score(const EncoderParams<Real>& params, const ModelConfig& cfg,
                           const ProbeInstance& instance);

struct ProbeCounts {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

struct ProbeReport {
  std::map<std::string, std::map<std::string, ProbeCounts>> by_side;  ///< side -> language -> counts
  std::map<std::string, ProbeCounts> accumulated;                     ///< side -> counts
  ProbeCounts overall;

  nlohmann::json to_json() const;
  std::string to_table() const;
};

/// Pure tally of (instance, chosen index) outcomes.
ProbeReport tally(const std::vector<ProbeInstance>& instances, const std::vector<std::size_t>& chosen);

/// Throws Error(insufficient_data) on an empty instance set.
ProbeReport evaluate(const EncoderParams<Real>& params, const ModelConfig& cfg,
                     const std::vector<ProbeInstance>& instances,
                     std::vector<ProbeScore>* scores = nullptr);

}  // namespace nlpl
