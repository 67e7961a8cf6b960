#include "nlpl/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <istream>
#include <sstream>

#include <json.hpp>

#include "nlpl/common.hpp"
#include "nlpl/tokenizer.hpp"

namespace nlpl {

using nlohmann::json;

LanguageSet::LanguageSet()
    : tags_{"go", "java", "javascript", "php", "python", "ruby", "csharp"} {}

namespace {

bool is_blank(std::string_view line) {
  return std::all_of(line.begin(), line.end(),
                     [](unsigned char c) { return std::isspace(c) != 0; });
}

std::string rstrip(std::string s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.pop_back();
  return s;
}

std::string lower_ascii(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::string::size_type start = 0;
  while (true) {
    auto end = text.find('\n', start);
    if (end == std::string::npos) {
      lines.push_back(text.substr(start));
      break;
    }
    lines.push_back(text.substr(start, end - start));
    start = end + 1;
  }
  return lines;
}

std::string string_field(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return {};
  if (!it->is_string()) throw Error(ErrorKind::format, std::string("field not a string: ") + key);
  return it->get<std::string>();
}

}  // namespace

std::string truncate_first_paragraph(const std::string& doc) {
  std::string out;
  bool started = false;
  for (const auto& line : split_lines(doc)) {
    if (is_blank(line)) {
      if (started) break;
      continue;
    }
    if (started) out += '\n';
    out += line;
    started = true;
  }
  return rstrip(out);
}

std::vector<std::string> split_whitespace(const std::string& text) {
  std::vector<std::string> words;
  std::istringstream ss(text);
  std::string w;
  while (ss >> w) words.push_back(w);
  return words;
}

std::size_t count_source_lines(const std::string& code) {
  std::size_t n = 0;
  for (const auto& line : split_lines(code))
    if (!rstrip(line).empty()) ++n;
  return n;
}

std::string record_id(const RawFunctionRecord& r) {
  if (!r.url.empty()) return r.url;
  Fnv1a h;
  h.update(r.repo_id);
  h.update("\x1f");
  h.update(r.func_name);
  h.update("\x1f");
  h.update(r.code);
  return r.language + ":" + hex64(h.digest());
}

FilterDecision filter_record(const RawFunctionRecord& r, const LanguageSet& languages) {
  const std::string id = record_id(r);
  if (r.code.empty() || !languages.contains(r.language)) return Rejection{id, "malformed"};
  if (r.used_elsewhere.has_value() && !*r.used_elsewhere)
    return Rejection{id, "project not used elsewhere"};

  const std::string doc = truncate_first_paragraph(r.doc);
  auto nl_words = split_whitespace(doc);
  const bool doc_ok = nl_words.size() >= 3;

  if (count_source_lines(r.code) < 3) return Rejection{id, "fewer than three lines"};
  if (lower_ascii(r.func_name).find("test") != std::string::npos)
    return Rejection{id, "name contains test"};

  auto pl = pretokenize(r.code, Side::pl);
  if (!doc_ok) return UnimodalCode{id, r.language, r.func_name, r.url, r.code, std::move(pl)};
  return BimodalPair{id, r.language, r.func_name, r.url, doc, r.code, std::move(nl_words),
                     std::move(pl)};
}

RawFunctionRecord parse_record(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, std::string("undecodable record: ") + e.what());
  }
  if (!j.is_object()) throw Error(ErrorKind::format, "record is not an object");
  RawFunctionRecord r;
  r.code = string_field(j, "code");
  r.doc = string_field(j, "docstring");
  r.language = string_field(j, "language");
  r.repo_id = string_field(j, "repo");
  r.func_name = string_field(j, "func_name");
  r.url = string_field(j, "url");
  if (auto it = j.find("used_elsewhere"); it != j.end() && it->is_boolean())
    r.used_elsewhere = it->get<bool>();
  return r;
}

IngestResult ingest(std::istream& in, const LanguageSet& languages) {
  IngestResult out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (is_blank(line)) continue;
    ++out.input_count;
    RawFunctionRecord r;
    try {
      r = parse_record(line);
    } catch (const Error&) {
      out.rejected.push_back({"line:" + std::to_string(line_no), "undecodable"});
      continue;
    }
    std::visit(
        [&](auto&& d) {
          using T = std::decay_t<decltype(d)>;
          if constexpr (std::is_same_v<T, BimodalPair>) out.bimodal.push_back(std::move(d));
          else if constexpr (std::is_same_v<T, UnimodalCode>) out.unimodal.push_back(std::move(d));
          else out.rejected.push_back(std::move(d));
        },
        filter_record(r, languages));
  }
  return out;
}

std::string to_jsonl(const BimodalPair& p) {
  json j{{"id", p.id},          {"language", p.language},   {"func_name", p.func_name},
         {"url", p.url},        {"docstring", p.doc},       {"code", p.code},
         {"docstring_tokens", p.nl_tokens}, {"code_tokens", p.pl_tokens}};
  return j.dump(-1, ' ', false, json::error_handler_t::replace);
}

std::string to_jsonl(const UnimodalCode& u) {
  json j{{"id", u.id},   {"language", u.language}, {"func_name", u.func_name},
         {"url", u.url}, {"code", u.code},         {"code_tokens", u.pl_tokens}};
  return j.dump(-1, ' ', false, json::error_handler_t::replace);
}

std::string to_jsonl(const Rejection& r) {
  return json{{"id", r.id}, {"reason", r.reason}}.dump(-1, ' ', false,
                                                       json::error_handler_t::replace);
}

BimodalPair bimodal_from_json(const std::string& line) {
  try {
    auto j = json::parse(line);
    BimodalPair p;
    p.id = j.at("id").get<std::string>();
    p.language = j.at("language").get<std::string>();
    p.func_name = j.value("func_name", "");
    p.url = j.value("url", "");
    p.doc = j.at("docstring").get<std::string>();
    p.code = j.at("code").get<std::string>();
    p.nl_tokens = j.contains("docstring_tokens")
                      ? j["docstring_tokens"].get<std::vector<std::string>>()
                      : split_whitespace(p.doc);
    p.pl_tokens = j.contains("code_tokens") ? j["code_tokens"].get<std::vector<std::string>>()
                                            : pretokenize(p.code, Side::pl);
    return p;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, std::string("bad bimodal record: ") + e.what());
  }
}

UnimodalCode unimodal_from_json(const std::string& line) {
  try {
    auto j = json::parse(line);
    UnimodalCode u;
    u.id = j.at("id").get<std::string>();
    u.language = j.at("language").get<std::string>();
    u.func_name = j.value("func_name", "");
    u.url = j.value("url", "");
    u.code = j.at("code").get<std::string>();
    u.pl_tokens = j.contains("code_tokens") ? j["code_tokens"].get<std::vector<std::string>>()
                                            : pretokenize(u.code, Side::pl);
    return u;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, std::string("bad unimodal record: ") + e.what());
  }
}

namespace {
template <typename T, typename F>
std::vector<T> load_lines(const std::string& path, F&& parse) {
  std::istringstream in(read_file(path));
  std::vector<T> out;
  std::string line;
  while (std::getline(in, line))
    if (!is_blank(line)) out.push_back(parse(line));
  return out;
}

template <typename T>
void save_lines(const std::string& path, const std::vector<T>& items) {
  std::string buf;
  for (const auto& x : items) {
    buf += to_jsonl(x);
    buf += '\n';
  }
  write_file(path, buf);
}
}  // namespace

std::vector<BimodalPair> load_bimodal(const std::string& path) {
  return load_lines<BimodalPair>(path, bimodal_from_json);
}
std::vector<UnimodalCode> load_unimodal(const std::string& path) {
  return load_lines<UnimodalCode>(path, unimodal_from_json);
}
void save_bimodal(const std::string& path, const std::vector<BimodalPair>& pairs) {
  save_lines(path, pairs);
}
void save_unimodal(const std::string& path, const std::vector<UnimodalCode>& codes) {
  save_lines(path, codes);
}

std::array<std::size_t, 3> split_sizes(std::size_t n, const std::array<double, 3>& ratios) {
  double total = 0.0;
  for (double r : ratios) {
    if (!(r >= 0.0) || !std::isfinite(r))
      throw Error(ErrorKind::invalid_argument, "split ratios must be non-negative");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9)
    throw Error(ErrorKind::invalid_argument, "split ratios must sum to 1");

  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> frac{};
  std::size_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    // Round away representation noise (0.1 * 30 = 3.0000000000000004).
    double exact = std::round(ratios[i] * static_cast<double>(n) * 1e9) / 1e9;
    sizes[i] = static_cast<std::size_t>(std::floor(exact));
    frac[i] = exact - static_cast<double>(sizes[i]);
    assigned += sizes[i];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return frac[a] > frac[b]; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++sizes[order[k % 3]];
  return sizes;
}

DatasetSplit split(std::vector<std::string> ids, std::array<double, 3> ratios,
                   std::uint64_t seed) {
  auto sizes = split_sizes(ids.size(), ratios);
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
    throw Error(ErrorKind::invalid_argument, "duplicate ids in split input");
  auto rng = make_rng(seed, 0x5917);
  std::shuffle(ids.begin(), ids.end(), rng);

  DatasetSplit s;
  s.ratios = ratios;
  s.seed = seed;
  auto it = ids.begin();
  std::array<std::vector<std::string>*, 3> parts{&s.train, &s.dev, &s.test};
  for (std::size_t i = 0; i < 3; ++i) {
    auto n = static_cast<std::ptrdiff_t>(sizes[i]);
    parts[i]->assign(it, it + n);
    std::sort(parts[i]->begin(), parts[i]->end());
    it += n;
  }
  return s;
}

std::string to_json(const DatasetSplit& s) {
  json j{{"seed", s.seed},
         {"ratios", s.ratios},
         {"train", s.train},
         {"dev", s.dev},
         {"test", s.test}};
  return j.dump(2) + "\n";
}

DatasetSplit split_from_json(const std::string& text) {
  try {
    auto j = json::parse(text);
    DatasetSplit s;
    s.seed = j.at("seed").get<std::uint64_t>();
    s.ratios = j.at("ratios").get<std::array<double, 3>>();
    s.train = j.at("train").get<std::vector<std::string>>();
    s.dev = j.at("dev").get<std::vector<std::string>>();
    s.test = j.at("test").get<std::vector<std::string>>();
    return s;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, std::string("bad split manifest: ") + e.what());
  }
}

std::vector<BimodalPair> select(const std::vector<BimodalPair>& pairs,
                                const std::vector<std::string>& ids) {
  std::set<std::string> wanted(ids.begin(), ids.end());
  std::vector<BimodalPair> out;
  for (const auto& p : pairs)
    if (wanted.count(p.id)) out.push_back(p);
  return out;
}

}  // namespace nlpl
