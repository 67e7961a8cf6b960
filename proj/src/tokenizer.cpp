#include "nlpl/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <set>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

namespace nlpl {

using nlohmann::json;

namespace {

constexpr std::string_view kContinuation = "##";

const char* const kSpecialNames[special::count] = {"[PAD]", "[UNK]", "[CLS]", "[SEP]",
                                                  "[EOS]", "[MASK]", "[BOS]"};

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xe) return 3;
  if ((lead >> 3) == 0x1e) return 4;
  return 1;
}

bool is_split_punct(unsigned char c) { return c < 0x80 && std::ispunct(c) && c != '_'; }

}  // namespace

std::vector<std::string> utf8_units(std::string_view text) {
  std::vector<std::string> units;
  std::size_t i = 0;
  while (i < text.size()) {
    auto len = utf8_length(static_cast<unsigned char>(text[i]));
    bool valid = i + len <= text.size();
    for (std::size_t k = 1; valid && k < len; ++k)
      valid = (static_cast<unsigned char>(text[i + k]) & 0xc0) == 0x80;
    if (!valid) len = 1;
    units.emplace_back(text.substr(i, len));
    i += len;
  }
  return units;
}

std::vector<std::string> pretokenize(std::string_view text, Side side) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    auto c = static_cast<unsigned char>(ch);
    if (c < 0x80 && std::isspace(c)) {
      flush();
    } else if (is_split_punct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur += (side == Side::nl && c < 0x80) ? static_cast<char>(std::tolower(c)) : ch;
    }
  }
  flush();
  return out;
}

std::string normalize(std::string_view text, Side side) {
  std::string out;
  for (const auto& w : pretokenize(text, side)) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

Vocabulary::Vocabulary() {
  for (const char* name : kSpecialNames) add(name);
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw Error(ErrorKind::invalid_argument, "token id out of range: " + std::to_string(id));
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocabulary::id_or_unk(std::string_view token) const {
  return find(token).value_or(special::unk);
}

TokenId Vocabulary::add(const std::string& token) {
  if (token.empty()) throw Error(ErrorKind::invalid_argument, "empty vocabulary entry");
  auto [it, inserted] = index_.emplace(token, static_cast<TokenId>(tokens_.size()));
  if (inserted) tokens_.push_back(token);
  return it->second;
}

std::string Vocabulary::serialize() const {
  std::string out;
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    json j{{"token", tokens_[i]}, {"id", i}, {"special", is_special(static_cast<TokenId>(i))}};
    out += j.dump(-1, ' ', false, json::error_handler_t::replace);
    out += '\n';
  }
  return out;
}

Vocabulary Vocabulary::deserialize(const std::string& text) {
  Vocabulary v;
  std::istringstream in(text);
  std::string line;
  std::size_t expected = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw Error(ErrorKind::format, std::string("bad vocabulary line: ") + e.what());
    }
    auto id = j.at("id").get<std::size_t>();
    auto tok = j.at("token").get<std::string>();
    if (id != expected) throw Error(ErrorKind::format, "vocabulary ids are not dense");
    if (id < special::count) {
      if (tok != kSpecialNames[id] || !j.at("special").get<bool>())
        throw Error(ErrorKind::format, "vocabulary special tokens out of place");
    } else if (v.add(tok) != static_cast<TokenId>(id)) {
      throw Error(ErrorKind::format, "duplicate vocabulary entry: " + tok);
    }
    ++expected;
  }
  if (expected < special::count) throw Error(ErrorKind::format, "vocabulary missing specials");
  return v;
}

void Vocabulary::save(const std::string& path) const { write_file(path, serialize()); }

Vocabulary Vocabulary::load(const std::string& path) { return deserialize(read_file(path)); }

std::uint64_t Vocabulary::fingerprint() const { return fnv1a(serialize()); }

namespace {

struct MergeState {
  std::vector<std::string> symbols;  // symbol id -> text
  std::unordered_map<std::string, int> symbol_ids;
  std::vector<std::vector<int>> words;
  std::vector<std::int64_t> freq;
  std::unordered_map<std::uint64_t, std::int64_t> pair_count;
  std::unordered_map<std::uint64_t, std::unordered_set<std::size_t>> pair_words;

  int intern(const std::string& s) {
    auto [it, inserted] = symbol_ids.emplace(s, static_cast<int>(symbols.size()));
    if (inserted) symbols.push_back(s);
    return it->second;
  }

  static std::uint64_t key(int a, int b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
           static_cast<std::uint32_t>(b);
  }

  void account(std::size_t w, int sign) {
    const auto& syms = words[w];
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
      auto k = key(syms[i], syms[i + 1]);
      pair_count[k] += sign * freq[w];
      if (sign > 0) pair_words[k].insert(w);
    }
  }
};

}  // namespace

Vocabulary train_subword_vocab(const std::vector<SideText>& corpus, std::size_t target_size,
                               std::size_t min_pair_count) {
  std::map<std::string, std::int64_t> word_counts;
  for (const auto& item : corpus)
    for (auto& w : pretokenize(item.text, item.side)) ++word_counts[w];
  if (word_counts.empty()) throw Error(ErrorKind::invalid_argument, "empty corpus");

  MergeState st;
  std::set<std::string> alphabet;
  for (const auto& [word, count] : word_counts) {
    std::vector<int> syms;
    auto units = utf8_units(word);
    for (std::size_t i = 0; i < units.size(); ++i) {
      std::string s = i == 0 ? units[i] : std::string(kContinuation) + units[i];
      alphabet.insert(s);
      syms.push_back(st.intern(s));
    }
    st.words.push_back(std::move(syms));
    st.freq.push_back(count);
  }

  Vocabulary vocab;
  if (target_size <= vocab.size() + alphabet.size())
    throw Error(ErrorKind::invalid_argument,
                "target vocabulary size " + std::to_string(target_size) + " must exceed " +
                    std::to_string(vocab.size() + alphabet.size()) +
                    " (specials + base alphabet)");
  for (const auto& s : alphabet) vocab.add(s);

  for (std::size_t w = 0; w < st.words.size(); ++w) st.account(w, +1);

  while (vocab.size() < target_size) {
    std::uint64_t best = 0;
    std::int64_t best_count = 0;
    for (const auto& [k, c] : st.pair_count) {
      if (c < static_cast<std::int64_t>(min_pair_count) || c < best_count) continue;
      if (c > best_count) {
        best = k;
        best_count = c;
        continue;
      }
      auto a = static_cast<int>(k >> 32), b = static_cast<int>(k & 0xffffffffu);
      auto ba = static_cast<int>(best >> 32), bb = static_cast<int>(best & 0xffffffffu);
      if (std::tie(st.symbols[a], st.symbols[b]) < std::tie(st.symbols[ba], st.symbols[bb]))
        best = k;
    }
    if (best_count == 0) break;

    const int left = static_cast<int>(best >> 32);
    const int right = static_cast<int>(best & 0xffffffffu);
    const std::string merged = st.symbols[left] + st.symbols[right].substr(kContinuation.size());
    const int merged_id = st.intern(merged);
    vocab.add(merged);

    std::vector<std::size_t> affected(st.pair_words[best].begin(), st.pair_words[best].end());
    std::sort(affected.begin(), affected.end());
    for (auto w : affected) {
      st.account(w, -1);
      auto& syms = st.words[w];
      std::vector<int> next;
      for (std::size_t i = 0; i < syms.size(); ++i) {
        if (i + 1 < syms.size() && syms[i] == left && syms[i + 1] == right) {
          next.push_back(merged_id);
          ++i;
        } else {
          next.push_back(syms[i]);
        }
      }
      syms = std::move(next);
      st.account(w, +1);
    }
    st.pair_words.erase(best);
    for (auto it = st.pair_count.begin(); it != st.pair_count.end();) {
      if (it->second <= 0) {
        st.pair_words.erase(it->first);
        it = st.pair_count.erase(it);
      } else {
        ++it;
      }
    }
  }
  return vocab;
}

TokenIds encode_word(std::string_view word, const Vocabulary& vocab) {
  TokenIds out;
  auto units = utf8_units(word);
  std::size_t i = 0;
  while (i < units.size()) {
    std::size_t match_end = 0;
    TokenId match_id = special::unk;
    std::string piece = i == 0 ? "" : std::string(kContinuation);
    for (std::size_t j = i; j < units.size(); ++j) {
      piece += units[j];
      if (auto id = vocab.find(piece)) {
        match_end = j + 1;
        match_id = *id;
      }
    }
    if (match_end == 0) {
      out.push_back(special::unk);
      ++i;
    } else {
      out.push_back(match_id);
      i = match_end;
    }
  }
  return out;
}

TokenIds encode_words(const std::vector<std::string>& words, const Vocabulary& vocab,
                      Side side) {
  TokenIds out;
  for (const auto& w : words)
    for (const auto& piece : pretokenize(w, side)) {
      auto ids = encode_word(piece, vocab);
      out.insert(out.end(), ids.begin(), ids.end());
    }
  return out;
}

TokenIds encode(std::string_view text, const Vocabulary& vocab, Side side) {
  TokenIds out;
  for (const auto& w : pretokenize(text, side)) {
    auto ids = encode_word(w, vocab);
    out.insert(out.end(), ids.begin(), ids.end());
  }
  return out;
}

std::string decode(const TokenIds& ids, const Vocabulary& vocab) {
  std::string out;
  for (auto id : ids) {
    const auto& tok = vocab.token(id);
    if (!is_special(id) && tok.starts_with(kContinuation) && !out.empty()) {
      out += tok.substr(kContinuation.size());
      continue;
    }
    if (!out.empty()) out += ' ';
    out += tok;
  }
  return out;
}

EncodedInput build_input(const TokenIds& nl_ids, const TokenIds& pl_ids, std::size_t max_len) {
  if (max_len < 4) throw Error(ErrorKind::invalid_argument, "max_len must be at least 4");
  std::size_t nl_keep = nl_ids.size(), pl_keep = pl_ids.size();
  const std::size_t total = nl_keep + pl_keep;
  EncodedInput in;
  if (total + 3 > max_len) {
    const std::size_t budget = max_len - 3;
    const bool nl_longer = nl_keep >= pl_keep;
    const std::size_t longer = nl_longer ? nl_keep : pl_keep;
    const std::size_t long_keep = budget * longer / total;
    const std::size_t short_keep = budget - long_keep;
    nl_keep = nl_longer ? long_keep : short_keep;
    pl_keep = nl_longer ? short_keep : long_keep;
    in.truncated = true;
  }
  in.ids.reserve(nl_keep + pl_keep + 3);
  in.ids.push_back(special::cls);
  in.ids.insert(in.ids.end(), nl_ids.begin(), nl_ids.begin() + static_cast<std::ptrdiff_t>(nl_keep));
  in.nl_span = {1, 1 + nl_keep};
  in.ids.push_back(special::sep);
  in.ids.insert(in.ids.end(), pl_ids.begin(), pl_ids.begin() + static_cast<std::ptrdiff_t>(pl_keep));
  in.pl_span = {nl_keep + 2, nl_keep + 2 + pl_keep};
  in.ids.push_back(special::eos);
  return in;
}

}  // namespace nlpl
