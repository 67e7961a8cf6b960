#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "nlpl/common.hpp"

namespace nlpl {

/// Which side of a pair a text belongs to. NL is lowercased, PL keeps case.
enum class Side { nl, pl };

/// Reserved ids. They occupy the first slots of every vocabulary.
namespace special {
inline constexpr TokenId pad = 0;
inline constexpr TokenId unk = 1;
inline constexpr TokenId cls = 2;
inline constexpr TokenId sep = 3;
inline constexpr TokenId eos = 4;
inline constexpr TokenId mask = 5;
inline constexpr TokenId bos = 6;  ///< decoder start-of-sequence
inline constexpr TokenId count = 7;
}  // namespace special

inline bool is_special(TokenId id) { return id >= 0 && id < special::count; }

/// Splits on whitespace, emits each ASCII punctuation character (other than
/// '_') as its own token, and lowercases ASCII letters for NL.
std::vector<std::string> pretokenize(std::string_view text, Side side);

/// Text after pre-tokenization, joined by single spaces. This is what
/// decode(encode(t)) reproduces when every character is in the vocabulary.
std::string normalize(std::string_view text, Side side);

/// Splits a UTF-8 string into code points. Invalid bytes become
/// single-byte units.
std::vector<std::string> utf8_units(std::string_view text);

struct SideText {
  std::string text;
  Side side = Side::nl;
};

/// Subword inventory shared by NL and PL. Word-initial pieces are stored
/// bare, continuation pieces carry a "##" prefix.
class Vocabulary {
 public:
  Vocabulary();

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  std::optional<TokenId> find(std::string_view token) const;
  TokenId id_or_unk(std::string_view token) const;

  /// Appends a token; returns the existing id when already present.
  TokenId add(const std::string& token);

  /// One JSON object per line: {"token": ..., "id": ..., "special": ...}.
  /// Tokens are UTF-8; control characters use JSON \u escapes.
  std::string serialize() const;
  static Vocabulary deserialize(const std::string& text);
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

  /// FNV-1a of serialize(); stamped into checkpoints and indexes.
  std::uint64_t fingerprint() const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Frequency-driven pair merging over word-internal symbols. Ties between
/// equally frequent pairs go to the lexicographically smallest pair, so the
/// result is fully determined by the corpus. Pairs seen fewer than
/// min_pair_count times are never merged.
Vocabulary train_subword_vocab(const std::vector<SideText>& corpus, std::size_t target_size,
                               std::size_t min_pair_count = 2);

/// Greedy longest-match segmentation. Characters with no matching piece
/// become [UNK].
TokenIds encode(std::string_view text, const Vocabulary& vocab, Side side);
TokenIds encode_words(const std::vector<std::string>& words, const Vocabulary& vocab,
                      Side side);
/// Pieces of a single pre-tokenized word.
TokenIds encode_word(std::string_view word, const Vocabulary& vocab);
std::string decode(const TokenIds& ids, const Vocabulary& vocab);

struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool contains(std::size_t i) const { return i >= begin && i < end; }
};

/// [CLS] nl [SEP] pl [EOS], with half-open spans for both segments.
struct EncodedInput {
  TokenIds ids;
  Span nl_span;
  Span pl_span;
  /// When set, keys after this position are hidden from every query.
  std::optional<std::size_t> attention_limit;
  bool truncated = false;

  std::size_t size() const { return ids.size(); }
};

/// Over-length inputs are cut proportionally: the longer segment keeps
/// floor(budget * len / total) tokens and the shorter one takes the rest.
EncodedInput build_input(const TokenIds& nl_ids, const TokenIds& pl_ids, std::size_t max_len);

}  // namespace nlpl
