#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

namespace nlpl {

/// Closed set of accepted language tags. The default covers the
/// CodeSearchNet languages plus C#.
class LanguageSet {
 public:
  LanguageSet();
  explicit LanguageSet(std::set<std::string> tags) : tags_(std::move(tags)) {}
  bool contains(const std::string& tag) const { return tags_.count(tag) != 0; }
  const std::set<std::string>& tags() const { return tags_; }

 private:
  std::set<std::string> tags_;
};

struct RawFunctionRecord {
  std::string code;
  std::string doc;
  std::string language;
  std::string repo_id;
  std::string func_name;
  std::string url;
  /// Upstream "used by at least one other project" flag, when known.
  std::optional<bool> used_elsewhere;
};

struct BimodalPair {
  std::string id;
  std::string language;
  std::string func_name;
  std::string url;
  std::string doc;   ///< first paragraph only
  std::string code;
  std::vector<std::string> nl_tokens;
  std::vector<std::string> pl_tokens;
};

struct UnimodalCode {
  std::string id;
  std::string language;
  std::string func_name;
  std::string url;
  std::string code;
  std::vector<std::string> pl_tokens;
};

struct Rejection {
  std::string id;
  std::string reason;
};

using FilterDecision = std::variant<BimodalPair, UnimodalCode, Rejection>;

std::string truncate_first_paragraph(const std::string& doc);
std::vector<std::string> split_whitespace(const std::string& text);
/// Lines that are non-empty after stripping trailing whitespace.
std::size_t count_source_lines(const std::string& code);
std::string record_id(const RawFunctionRecord& r);

FilterDecision filter_record(const RawFunctionRecord& r,
                             const LanguageSet& languages = LanguageSet());

struct IngestResult {
  std::vector<BimodalPair> bimodal;
  std::vector<UnimodalCode> unimodal;
  std::vector<Rejection> rejected;
  std::size_t input_count = 0;
};

/// Reads one JSON record per line (CodeSearchNet field names). Lines that
/// fail to decode are logged as rejections and processing continues.
IngestResult ingest(std::istream& in, const LanguageSet& languages = LanguageSet());

/// Parses a single corpus line; throws Error(format) when undecodable.
RawFunctionRecord parse_record(const std::string& line);

std::string to_jsonl(const BimodalPair& p);
std::string to_jsonl(const UnimodalCode& u);
std::string to_jsonl(const Rejection& r);
BimodalPair bimodal_from_json(const std::string& line);
UnimodalCode unimodal_from_json(const std::string& line);

std::vector<BimodalPair> load_bimodal(const std::string& path);
std::vector<UnimodalCode> load_unimodal(const std::string& path);
void save_bimodal(const std::string& path, const std::vector<BimodalPair>& pairs);
void save_unimodal(const std::string& path, const std::vector<UnimodalCode>& codes);

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> dev;
  std::vector<std::string> test;
  std::array<double, 3> ratios{1.0, 0.0, 0.0};
  std::uint64_t seed = 0;
};

/// Seeded shuffle followed by floor-then-distribute sizing: each partition
/// gets floor(ratio * n) ids and the remainder goes to the partitions with
/// the largest fractional parts (earlier partition wins ties).
DatasetSplit split(std::vector<std::string> ids, std::array<double, 3> ratios,
                   std::uint64_t seed);
std::array<std::size_t, 3> split_sizes(std::size_t n, const std::array<double, 3>& ratios);

std::string to_json(const DatasetSplit& s);
DatasetSplit split_from_json(const std::string& text);

/// Restricts pairs to the ids of one partition, preserving input order.
std::vector<BimodalPair> select(const std::vector<BimodalPair>& pairs,
                                const std::vector<std::string>& ids);

}  // namespace nlpl
