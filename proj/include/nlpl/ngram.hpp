#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "nlpl/common.hpp"

namespace nlpl {

/// Where a generator's training sequences came from.
enum class Provenance { bimodal_doc, bimodal_code, unimodal_code };
std::string_view to_string(Provenance p);

/// Add-k smoothed n-gram model read in both directions.
///
/// The output support is the contiguous id range [first_id, vocab_size),
/// i.e. every non-reserved vocabulary entry; V = vocab_size - first_id.
/// Sequences are padded with n-1 boundary sentinels on the left (forward)
/// and on the right (backward) so edge positions get full-width contexts.
/// Contexts never seen in training fall back to the smoothed unigram.
class NGramModel {
 public:
  static constexpr TokenId kStartSentinel = -1;
  static constexpr TokenId kEndSentinel = -2;

  struct ContextCounts {
    std::int64_t total = 0;
    std::map<TokenId, std::int64_t> next;
  };
  using Table = std::map<std::vector<TokenId>, ContextCounts>;

  NGramModel() = default;

  /// Throws on an empty corpus or order < 2.
  static NGramModel train(const std::vector<TokenIds>& sequences, int order, double k,
                          std::size_t vocab_size, std::uint64_t vocab_fingerprint,
                          Provenance provenance, TokenId first_id = 7);

  int order() const { return order_; }
  double smoothing() const { return k_; }
  std::size_t vocab_size() const { return vocab_size_; }
  std::size_t support_size() const { return vocab_size_ - static_cast<std::size_t>(first_id_); }
  TokenId first_id() const { return first_id_; }
  std::uint64_t vocab_fingerprint() const { return vocab_fingerprint_; }
  Provenance provenance() const { return provenance_; }
  const Table& forward_table() const { return forward_; }
  const Table& backward_table() const { return backward_; }
  const std::map<TokenId, std::int64_t>& unigram() const { return unigram_; }
  std::int64_t unigram_total() const { return unigram_total_; }

  std::int64_t forward_count(const std::vector<TokenId>& context, TokenId token) const;

  /// p(token | last n-1 ids of left_context).
  double prob_forward(std::span<const TokenId> left_context, TokenId token) const;
  /// p(token | first n-1 ids of right_context), read right to left.
  double prob_backward(std::span<const TokenId> right_context, TokenId token) const;

  /// Normalized sqrt(p_fwd * p_bwd) over the support; entry i is the
  /// probability of id first_id + i.
  std::vector<double> distribution(std::span<const TokenId> left_context,
                                   std::span<const TokenId> right_context) const;
  double prob_bidirectional(std::span<const TokenId> left_context,
                            std::span<const TokenId> right_context, TokenId token) const;
  TokenId sample(std::span<const TokenId> left_context, std::span<const TokenId> right_context,
                 Rng& rng) const;

  std::string serialize() const;
  static NGramModel deserialize(const std::string& text);

 private:
  std::vector<TokenId> forward_key(std::span<const TokenId> left) const;
  std::vector<TokenId> backward_key(std::span<const TokenId> right) const;
  void fill(const Table& table, const std::vector<TokenId>& key, std::vector<double>& out) const;

  int order_ = 3;
  double k_ = 0.01;
  std::size_t vocab_size_ = 0;
  TokenId first_id_ = 7;
  std::uint64_t vocab_fingerprint_ = 0;
  Provenance provenance_ = Provenance::bimodal_doc;
  Table forward_;
  Table backward_;
  std::map<TokenId, std::int64_t> unigram_;
  std::int64_t unigram_total_ = 0;
};

/// The two replacement generators used for corruption.
struct GeneratorPair {
  NGramModel nl;
  NGramModel pl;

  void save(const std::string& nl_path, const std::string& pl_path) const;
  static GeneratorPair load(const std::string& nl_path, const std::string& pl_path);
};

}  // namespace nlpl
