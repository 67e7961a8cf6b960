#include "nlpl/probing.hpp"

#include <algorithm>
#include <cstdio>
#include <limits>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

namespace nlpl {

using nlohmann::json;

std::string to_string(ProbeSide s) {
  switch (s) {
    case ProbeSide::nl4: return "NL4";
    case ProbeSide::pl2: return "PL2";
    case ProbeSide::pl2_preceding: return "PL2-preceding";
  }
  return "unknown";
}

ProbeSide probe_side_from_string(const std::string& s) {
  if (s == "NL4") return ProbeSide::nl4;
  if (s == "PL2") return ProbeSide::pl2;
  if (s == "PL2-preceding") return ProbeSide::pl2_preceding;
  throw Error(ErrorKind::format, "unknown probe side " + s);
}

const std::vector<std::vector<std::string>>& nl_keyword_groups() {
  static const std::vector<std::vector<std::string>> groups{
      {"max", "maximize"}, {"min", "minimize"}, {"less"}, {"greater"}};
  return groups;
}

const std::vector<std::vector<std::string>>& pl_keyword_groups() {
  static const std::vector<std::vector<std::string>> groups{{"max"}, {"min"}};
  return groups;
}

namespace {

std::vector<std::string> words_of(const std::vector<std::string>& tokens, Side side) {
  std::vector<std::string> out;
  for (const auto& t : tokens)
    for (auto& w : pretokenize(t, side)) out.push_back(std::move(w));
  return out;
}

int group_of(const std::string& word, const std::vector<std::vector<std::string>>& groups) {
  for (std::size_t g = 0; g < groups.size(); ++g)
    if (std::find(groups[g].begin(), groups[g].end(), word) != groups[g].end())
      return static_cast<int>(g);
  return -1;
}

/// Word ids with the word at `masked` replaced by a single [MASK]. Returns
/// the offset of the mask within the sequence.
std::size_t masked_ids(const std::vector<std::string>& words, std::size_t masked,
                       const Vocabulary& vocab, TokenIds& out) {
  std::size_t offset = 0;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i == masked) {
      offset = out.size();
      out.push_back(special::mask);
      continue;
    }
    auto ids = encode_word(words[i], vocab);
    out.insert(out.end(), ids.begin(), ids.end());
  }
  return offset;
}

TokenIds plain_ids(const std::vector<std::string>& words, const Vocabulary& vocab) {
  TokenIds out;
  for (const auto& w : words) {
    auto ids = encode_word(w, vocab);
    out.insert(out.end(), ids.begin(), ids.end());
  }
  return out;
}

std::vector<ProbeCandidate> make_candidates(const std::vector<std::vector<std::string>>& groups,
                                            const Vocabulary& vocab) {
  std::vector<ProbeCandidate> out;
  for (const auto& g : groups) {
    ProbeCandidate c;
    c.members = g;
    for (const auto& m : g) c.pieces.push_back(encode_word(m, vocab));
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace

std::vector<ProbeInstance> build_nl_probes(const std::vector<BimodalPair>& pairs,
                                           const Vocabulary& vocab, std::size_t max_len,
                                           ProbeBuildLog* log) {
  const auto& groups = nl_keyword_groups();
  const auto candidates = make_candidates(groups, vocab);
  std::vector<ProbeInstance> out;
  for (const auto& p : pairs) {
    const auto words = words_of(p.nl_tokens, Side::nl);
    std::set<int> found;
    std::size_t first = words.size();
    for (std::size_t i = 0; i < words.size(); ++i) {
      const int g = group_of(words[i], groups);
      if (g < 0) continue;
      found.insert(g);
      first = std::min(first, i);
    }
    if (found.empty()) continue;
    if (found.size() > 1) {
      spdlog::debug("skipping NL probe for {}: several keyword groups in the documentation", p.id);
      if (log) ++log->skipped_ambiguous;
      continue;
    }
    TokenIds nl;
    const std::size_t offset = masked_ids(words, first, vocab, nl);
    ProbeInstance inst;
    inst.input = build_input(nl, encode_words(p.pl_tokens, vocab, Side::pl), max_len);
    inst.mask_position = inst.input.nl_span.begin + offset;
    if (!inst.input.nl_span.contains(inst.mask_position)) {
      if (log) ++log->skipped_truncated;
      continue;
    }
    inst.id = p.id + "#NL4";
    inst.source_id = p.id;
    inst.language = p.language;
    inst.side = ProbeSide::nl4;
    inst.candidates = candidates;
    inst.gold = static_cast<std::size_t>(*found.begin());
    inst.masked_word = words[first];
    out.push_back(std::move(inst));
  }
  return out;
}

std::vector<ProbeInstance> build_pl_probes(const std::vector<BimodalPair>& pairs,
                                           const Vocabulary& vocab, std::size_t max_len,
                                           bool preceding_only, ProbeBuildLog* log) {
  const auto& groups = pl_keyword_groups();
  const auto candidates = make_candidates(groups, vocab);
  const ProbeSide side = preceding_only ? ProbeSide::pl2_preceding : ProbeSide::pl2;
  std::vector<ProbeInstance> out;
  for (const auto& p : pairs) {
    const auto words = words_of(p.pl_tokens, Side::pl);
    TokenIds nl;
    bool nl_ready = false;
    for (std::size_t i = 0; i < words.size(); ++i) {
      const int g = group_of(words[i], groups);
      if (g < 0) continue;
      if (!nl_ready) {
        nl = plain_ids(words_of(p.nl_tokens, Side::nl), vocab);
        nl_ready = true;
      }
      TokenIds pl;
      const std::size_t offset = masked_ids(words, i, vocab, pl);
      ProbeInstance inst;
      inst.input = build_input(nl, pl, max_len);
      inst.mask_position = inst.input.pl_span.begin + offset;
      if (!inst.input.pl_span.contains(inst.mask_position)) {
        if (log) ++log->skipped_truncated;
        continue;
      }
      if (preceding_only) inst.input.attention_limit = inst.mask_position;
      inst.id = p.id + "#" + to_string(side) + ":" + std::to_string(i);
      inst.source_id = p.id;
      inst.language = p.language;
      inst.side = side;
      inst.candidates = candidates;
      inst.gold = static_cast<std::size_t>(g);
      inst.masked_word = words[i];
      out.push_back(std::move(inst));
    }
  }
  return out;
}

json ProbeInstance::to_json() const {
  json cands = json::array();
  for (const auto& c : candidates) cands.push_back({{"members", c.members}, {"pieces", c.pieces}});
  return {{"id", id},
          {"source_id", source_id},
          {"language", language},
          {"side", to_string(side)},
          {"ids", input.ids},
          {"nl_span", {input.nl_span.begin, input.nl_span.end}},
          {"pl_span", {input.pl_span.begin, input.pl_span.end}},
          {"attention_limit", input.attention_limit ? json(*input.attention_limit) : json(nullptr)},
          {"truncated", input.truncated},
          {"mask_position", mask_position},
          {"candidates", cands},
          {"gold", gold},
          {"masked_word", masked_word}};
}

ProbeInstance ProbeInstance::from_json(const json& j) {
  ProbeInstance p;
  try {
    p.id = j.at("id").get<std::string>();
    p.source_id = j.at("source_id").get<std::string>();
    p.language = j.at("language").get<std::string>();
    p.side = probe_side_from_string(j.at("side").get<std::string>());
    p.input.ids = j.at("ids").get<TokenIds>();
    p.input.nl_span = {j.at("nl_span").at(0).get<std::size_t>(), j.at("nl_span").at(1).get<std::size_t>()};
    p.input.pl_span = {j.at("pl_span").at(0).get<std::size_t>(), j.at("pl_span").at(1).get<std::size_t>()};
    if (!j.at("attention_limit").is_null())
      p.input.attention_limit = j.at("attention_limit").get<std::size_t>();
    p.input.truncated = j.at("truncated").get<bool>();
    p.mask_position = j.at("mask_position").get<std::size_t>();
    for (const auto& c : j.at("candidates"))
      p.candidates.push_back({c.at("members").get<std::vector<std::string>>(),
                              c.at("pieces").get<std::vector<TokenIds>>()});
    p.gold = j.at("gold").get<std::size_t>();
    p.masked_word = j.at("masked_word").get<std::string>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, std::string("bad probe instance: ") + e.what());
  }
  if (p.mask_position >= p.input.ids.size() || p.input.ids[p.mask_position] != special::mask ||
      std::count(p.input.ids.begin(), p.input.ids.end(), special::mask) != 1)
    throw Error(ErrorKind::format, "probe " + p.id + " must have exactly one [MASK] at mask_position");
  if (p.gold >= p.candidates.size())
    throw Error(ErrorKind::format, "probe " + p.id + " has gold index out of range");
  return p;
}

std::string serialize_probes(const std::vector<ProbeInstance>& instances) {
  std::string out;
  for (const auto& p : instances) {
    out += p.to_json().dump();
    out += '\n';
  }
  return out;
}

std::vector<ProbeInstance> deserialize_probes(const std::string& text) {
  std::vector<ProbeInstance> out;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw Error(ErrorKind::format, "probe line " + std::to_string(n) + ": " + e.what());
    }
    out.push_back(ProbeInstance::from_json(j));
  }
  return out;
}

ProbeScore zero_shot_score(const EncoderParams<Real>& params, const ModelConfig& cfg,
                           const ProbeInstance& instance) {
  auto out = forward(params, cfg, instance.input, Mode::eval);
  const std::size_t pos[1] = {instance.mask_position};
  Matrix<Real> logp = mlm_log_probs<Real>(params, out.hidden, pos);
  ProbeScore s;
  for (const auto& c : instance.candidates) {
    std::vector<double> members;
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& pieces : c.pieces) {
      double sum = 0.0;
      for (auto id : pieces) sum += static_cast<double>(logp(0, id));
      const double mean = pieces.empty() ? -std::numeric_limits<double>::infinity()
                                         : sum / static_cast<double>(pieces.size());
      members.push_back(mean);
      best = std::max(best, mean);
    }
    s.member_scores.push_back(std::move(members));
    s.candidate_scores.push_back(best);
  }
  for (std::size_t i = 1; i < s.candidate_scores.size(); ++i) {
    if (s.candidate_scores[i] > s.candidate_scores[s.chosen]) s.chosen = i;
  }
  for (std::size_t i = 0; i < s.candidate_scores.size(); ++i)
    if (i != s.chosen && s.candidate_scores[i] == s.candidate_scores[s.chosen]) s.tie = true;
  if (s.tie) spdlog::debug("probe {}: tied candidates, chose index {}", instance.id, s.chosen);
  return s;
}

ProbeReport tally(const std::vector<ProbeInstance>& instances, const std::vector<std::size_t>& chosen) {
  if (instances.empty()) throw Error(ErrorKind::insufficient_data, "no probe instances");
  if (chosen.size() != instances.size())
    throw Error(ErrorKind::invalid_argument, "need one choice per probe instance");
  ProbeReport r;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto side = to_string(instances[i].side);
    const bool ok = chosen[i] == instances[i].gold;
    for (ProbeCounts* c : {&r.by_side[side][instances[i].language], &r.accumulated[side], &r.overall}) {
      ++c->total;
      if (ok) ++c->correct;
    }
  }
  return r;
}

ProbeReport evaluate(const EncoderParams<Real>& params, const ModelConfig& cfg,
                     const std::vector<ProbeInstance>& instances, std::vector<ProbeScore>* scores) {
  if (instances.empty()) throw Error(ErrorKind::insufficient_data, "no probe instances");
  std::vector<std::size_t> chosen;
  chosen.reserve(instances.size());
  std::size_t ties = 0;
  for (const auto& inst : instances) {
    auto s = zero_shot_score(params, cfg, inst);
    chosen.push_back(s.chosen);
    if (s.tie) ++ties;
    if (scores) scores->push_back(std::move(s));
  }
  if (ties) spdlog::info("{} probe instances had tied candidates", ties);
  return tally(instances, chosen);
}

json ProbeReport::to_json() const {
  auto counts = [](const ProbeCounts& c) {
    return json{{"correct", c.correct}, {"total", c.total}, {"accuracy", c.accuracy()}};
  };
  json sides = json::object();
  for (const auto& [side, langs] : by_side) {
    json per = json::object();
    for (const auto& [lang, c] : langs) per[lang] = counts(c);
    sides[side] = {{"per_language", per}, {"accumulated", counts(accumulated.at(side))}};
  }
  return {{"sides", sides}, {"overall", counts(overall)}};
}

std::string ProbeReport::to_table() const {
  std::set<std::string> languages;
  for (const auto& [side, langs] : by_side)
    for (const auto& [lang, c] : langs) languages.insert(lang);
  std::ostringstream os;
  char cell[64];
  std::snprintf(cell, sizeof(cell), "%-15s", "side");
  os << cell;
  for (const auto& l : languages) {
    std::snprintf(cell, sizeof(cell), " %10s", l.c_str());
    os << cell;
  }
  os << "        ALL\n";
  for (const auto& [side, langs] : by_side) {
    std::snprintf(cell, sizeof(cell), "%-15s", side.c_str());
    os << cell;
    for (const auto& l : languages) {
      auto it = langs.find(l);
      if (it == langs.end()) std::snprintf(cell, sizeof(cell), " %10s", "-");
      else std::snprintf(cell, sizeof(cell), " %9.2f%%", 100 * it->second.accuracy());
      os << cell;
    }
    std::snprintf(cell, sizeof(cell), " %9.2f%%\n", 100 * accumulated.at(side).accuracy());
    os << cell;
  }
  std::snprintf(cell, sizeof(cell), "%-15s", "count");
  os << cell;
  for (const auto& l : languages) {
    std::size_t n = 0;
    for (const auto& [side, langs] : by_side)
      if (auto it = langs.find(l); it != langs.end()) n += it->second.total;
    std::snprintf(cell, sizeof(cell), " %10zu", n);
    os << cell;
  }
  std::snprintf(cell, sizeof(cell), " %10zu\n", overall.total);
  os << cell;
  return os.str();
}

}  // namespace nlpl
