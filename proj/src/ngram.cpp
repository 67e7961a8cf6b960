#include "nlpl/ngram.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace nlpl {

using nlohmann::json;

namespace {

constexpr const char* kFormat = "nlpl-ngram/1";

void count_direction(NGramModel::Table& table, const TokenIds& seq, int order, TokenId pad,
                     bool reversed, TokenId first_id, std::size_t vocab_size,
                     std::map<TokenId, std::int64_t>* unigram, std::int64_t* unigram_total) {
  const auto width = static_cast<std::size_t>(order - 1);
  std::vector<TokenId> padded(width, pad);
  if (reversed) padded.insert(padded.end(), seq.rbegin(), seq.rend());
  else padded.insert(padded.end(), seq.begin(), seq.end());
  for (std::size_t j = width; j < padded.size(); ++j) {
    const TokenId tok = padded[j];
    if (tok < first_id || static_cast<std::size_t>(tok) >= vocab_size) continue;
    std::vector<TokenId> ctx(padded.begin() + static_cast<std::ptrdiff_t>(j - width),
                             padded.begin() + static_cast<std::ptrdiff_t>(j));
    auto& cc = table[ctx];
    ++cc.next[tok];
    ++cc.total;
    if (unigram) {
      ++(*unigram)[tok];
      ++*unigram_total;
    }
  }
}

json table_to_json(const NGramModel::Table& t) {
  json arr = json::array();
  for (const auto& [ctx, cc] : t) {
    json next = json::array();
    for (const auto& [tok, c] : cc.next) next.push_back({tok, c});
    arr.push_back({{"context", ctx}, {"next", next}});
  }
  return arr;
}

NGramModel::Table table_from_json(const json& arr) {
  NGramModel::Table t;
  for (const auto& e : arr) {
    auto& cc = t[e.at("context").get<std::vector<TokenId>>()];
    for (const auto& n : e.at("next")) {
      auto c = n.at(1).get<std::int64_t>();
      if (c < 0) throw Error(ErrorKind::format, "negative n-gram count");
      cc.next[n.at(0).get<TokenId>()] += c;
      cc.total += c;
    }
  }
  return t;
}

}  // namespace

std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::bimodal_doc: return "bimodal_doc";
    case Provenance::bimodal_code: return "bimodal_code";
    case Provenance::unimodal_code: return "unimodal_code";
  }
  return "unknown";
}

namespace {
Provenance provenance_from_string(const std::string& s) {
  if (s == "bimodal_doc") return Provenance::bimodal_doc;
  if (s == "bimodal_code") return Provenance::bimodal_code;
  if (s == "unimodal_code") return Provenance::unimodal_code;
  throw Error(ErrorKind::format, "unknown provenance: " + s);
}
}  // namespace

NGramModel NGramModel::train(const std::vector<TokenIds>& sequences, int order, double k,
                             std::size_t vocab_size, std::uint64_t vocab_fingerprint,
                             Provenance provenance, TokenId first_id) {
  if (order < 2) throw Error(ErrorKind::invalid_argument, "n-gram order must be at least 2");
  if (!(k > 0.0)) throw Error(ErrorKind::invalid_argument, "smoothing constant must be positive");
  if (first_id < 0 || static_cast<std::size_t>(first_id) >= vocab_size)
    throw Error(ErrorKind::invalid_argument, "empty n-gram support");
  NGramModel m;
  m.order_ = order;
  m.k_ = k;
  m.vocab_size_ = vocab_size;
  m.first_id_ = first_id;
  m.vocab_fingerprint_ = vocab_fingerprint;
  m.provenance_ = provenance;
  for (const auto& seq : sequences) {
    count_direction(m.forward_, seq, order, kStartSentinel, false, first_id, vocab_size,
                    &m.unigram_, &m.unigram_total_);
    count_direction(m.backward_, seq, order, kEndSentinel, true, first_id, vocab_size, nullptr,
                    nullptr);
  }
  if (m.unigram_total_ == 0) throw Error(ErrorKind::invalid_argument, "empty n-gram corpus");
  return m;
}

std::vector<TokenId> NGramModel::forward_key(std::span<const TokenId> left) const {
  const auto width = static_cast<std::size_t>(order_ - 1);
  std::vector<TokenId> key(width, kStartSentinel);
  const std::size_t take = std::min(width, left.size());
  std::copy(left.end() - static_cast<std::ptrdiff_t>(take), left.end(),
            key.end() - static_cast<std::ptrdiff_t>(take));
  return key;
}

std::vector<TokenId> NGramModel::backward_key(std::span<const TokenId> right) const {
  const auto width = static_cast<std::size_t>(order_ - 1);
  std::vector<TokenId> key(width, kEndSentinel);
  const std::size_t take = std::min(width, right.size());
  std::copy(right.begin(), right.begin() + static_cast<std::ptrdiff_t>(take), key.begin());
  std::reverse(key.begin(), key.end());
  return key;
}

std::int64_t NGramModel::forward_count(const std::vector<TokenId>& context, TokenId token) const {
  auto it = forward_.find(context);
  if (it == forward_.end()) return 0;
  auto jt = it->second.next.find(token);
  return jt == it->second.next.end() ? 0 : jt->second;
}

void NGramModel::fill(const Table& table, const std::vector<TokenId>& key,
                      std::vector<double>& out) const {
  const double v = static_cast<double>(support_size());
  const std::map<TokenId, std::int64_t>* counts = &unigram_;
  double total = static_cast<double>(unigram_total_);
  if (auto it = table.find(key); it != table.end() && it->second.total > 0) {
    counts = &it->second.next;
    total = static_cast<double>(it->second.total);
  }
  const double denom = total + k_ * v;
  out.assign(support_size(), k_ / denom);
  for (const auto& [tok, c] : *counts)
    out[static_cast<std::size_t>(tok - first_id_)] += static_cast<double>(c) / denom;
}

double NGramModel::prob_forward(std::span<const TokenId> left_context, TokenId token) const {
  if (token < first_id_ || static_cast<std::size_t>(token) >= vocab_size_) return 0.0;
  std::vector<double> p;
  fill(forward_, forward_key(left_context), p);
  return p[static_cast<std::size_t>(token - first_id_)];
}

double NGramModel::prob_backward(std::span<const TokenId> right_context, TokenId token) const {
  if (token < first_id_ || static_cast<std::size_t>(token) >= vocab_size_) return 0.0;
  std::vector<double> p;
  fill(backward_, backward_key(right_context), p);
  return p[static_cast<std::size_t>(token - first_id_)];
}

std::vector<double> NGramModel::distribution(std::span<const TokenId> left_context,
                                             std::span<const TokenId> right_context) const {
  std::vector<double> fwd, bwd;
  fill(forward_, forward_key(left_context), fwd);
  fill(backward_, backward_key(right_context), bwd);
  double z = 0.0;
  for (std::size_t i = 0; i < fwd.size(); ++i) {
    fwd[i] = std::sqrt(fwd[i] * bwd[i]);
    z += fwd[i];
  }
  for (auto& p : fwd) p /= z;
  return fwd;
}

double NGramModel::prob_bidirectional(std::span<const TokenId> left_context,
                                      std::span<const TokenId> right_context,
                                      TokenId token) const {
  if (token < first_id_ || static_cast<std::size_t>(token) >= vocab_size_) return 0.0;
  return distribution(left_context, right_context)[static_cast<std::size_t>(token - first_id_)];
}

TokenId NGramModel::sample(std::span<const TokenId> left_context,
                           std::span<const TokenId> right_context, Rng& rng) const {
  auto p = distribution(left_context, right_context);
  double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  for (std::size_t i = 0; i < p.size(); ++i) {
    u -= p[i];
    if (u < 0.0) return first_id_ + static_cast<TokenId>(i);
  }
  // Rounding left a sliver of mass; take the last token with support.
  return first_id_ + static_cast<TokenId>(p.size() - 1);
}

std::string NGramModel::serialize() const {
  json unigram = json::array();
  for (const auto& [tok, c] : unigram_) unigram.push_back({tok, c});
  json j{{"format", kFormat},
         {"order", order_},
         {"k", k_},
         {"vocab_size", vocab_size_},
         {"first_id", first_id_},
         {"vocab_fingerprint", hex64(vocab_fingerprint_)},
         {"provenance", to_string(provenance_)},
         {"unigram", unigram},
         {"forward", table_to_json(forward_)},
         {"backward", table_to_json(backward_)}};
  return j.dump() + "\n";
}

NGramModel NGramModel::deserialize(const std::string& text) {
  try {
    auto j = json::parse(text);
    if (j.at("format").get<std::string>() != kFormat)
      throw Error(ErrorKind::format, "unsupported n-gram format");
    NGramModel m;
    m.order_ = j.at("order").get<int>();
    m.k_ = j.at("k").get<double>();
    m.vocab_size_ = j.at("vocab_size").get<std::size_t>();
    m.first_id_ = j.at("first_id").get<TokenId>();
    m.vocab_fingerprint_ = parse_hex64(j.at("vocab_fingerprint").get<std::string>());
    m.provenance_ = provenance_from_string(j.at("provenance").get<std::string>());
    for (const auto& e : j.at("unigram")) {
      auto c = e.at(1).get<std::int64_t>();
      m.unigram_[e.at(0).get<TokenId>()] = c;
      m.unigram_total_ += c;
    }
    m.forward_ = table_from_json(j.at("forward"));
    m.backward_ = table_from_json(j.at("backward"));
    if (m.order_ < 2 || !(m.k_ > 0.0) || m.unigram_total_ <= 0)
      throw Error(ErrorKind::format, "invalid n-gram model header");
    return m;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, std::string("bad n-gram model: ") + e.what());
  }
}

void GeneratorPair::save(const std::string& nl_path, const std::string& pl_path) const {
  write_file(nl_path, nl.serialize());
  write_file(pl_path, pl.serialize());
}

GeneratorPair GeneratorPair::load(const std::string& nl_path, const std::string& pl_path) {
  return {NGramModel::deserialize(read_file(nl_path)), NGramModel::deserialize(read_file(pl_path))};
}

}  // namespace nlpl
