#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nlpl/checkpoint.hpp"
#include "nlpl/corpus.hpp"
#include "nlpl/encoder.hpp"
#include "nlpl/pretrainer.hpp"
#include "nlpl/tokenizer.hpp"

namespace nlpl {

// ---------------------------------------------------------------------------
// Early fusion: binary relevance classifier over [CLS]

enum class ExampleSource { original, nl_replaced, pl_replaced };
std::string to_string(ExampleSource s);

struct SearchExample {
  std::string id;  ///< id of the pair this example was derived from
  std::vector<std::string> nl_tokens;
  std::vector<std::string> pl_tokens;
  bool match = true;
  ExampleSource source = ExampleSource::original;
  std::string replacement_id;  ///< pair the replaced side came from
};

/// One positive per pair and as many negatives, half with the NL side and
/// half with the PL side swapped for another pair's. Replacements are
/// redrawn until they differ from the original side.
std::vector<SearchExample> build_balanced_dataset(const std::vector<BimodalPair>& pairs, Rng& rng);

template <typename T>
struct ClassifierHead {
  using Scalar = T;
  Matrix<T> weight;  // d x 2, column 1 is "match"
  Matrix<T> bias;    // 1 x 2

  template <typename Self, typename F>
  static void each(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "weight", self.weight);
    f(prefix + "bias", self.bias);
  }
};

/// Encoder plus classification head; trained jointly.
template <typename T>
struct SearchClassifier {
  using Scalar = T;
  EncoderParams<T> encoder;
  ClassifierHead<T> head;

  template <typename Self, typename F>
  static void each(Self& self, const std::string& prefix, F&& f) {
    EncoderParams<T>::each(self.encoder, prefix, f);
    ClassifierHead<T>::each(self.head, prefix + "cls.", f);
  }

  static SearchClassifier with_fresh_head(const EncoderParams<T>& encoder, const ModelConfig& cfg,
                                          std::uint64_t seed);
};

struct FinetuneHyperparams {
  int batch_size = 16;
  double learning_rate = 1e-4;
  int warmup_steps = 50;
  int epochs = 4;
  std::size_t max_len = 128;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1;

  /// Learning rate 1e-5, batch 64, max length 200, 8 epochs.
  static FinetuneHyperparams paper_scale();

  void validate() const;
  double learning_rate_at(std::int64_t step) const;
  nlohmann::json to_json() const;
  static FinetuneHyperparams from_json(const nlohmann::json& j);
};

struct EpochLog {
  int epoch = 0;  ///< 1-based
  std::int64_t step = 0;
  double train_loss = 0.0;
  double dev_metric = 0.0;  ///< accuracy for the classifier, in-batch loss for late fusion
  bool best = false;
};

struct FinetuneOptions {
  std::uint64_t vocab_fingerprint = 0;
  std::string checkpoint_dir;  ///< when set, one checkpoint per epoch
  std::function<void(const EpochLog&)> on_epoch;
};

struct ClassifierRun {
  SearchClassifier<Real> model;  ///< the best-on-dev epoch
  std::vector<EpochLog> epochs;
  int best_epoch = 0;  ///< 0 when no epoch ran
};

/// Cross-entropy on a 2-way softmax over [CLS]. The returned model is the
/// epoch with the highest dev accuracy (the earliest on ties). With an
/// empty dev set the last epoch wins.
ClassifierRun finetune_classifier(const EncoderParams<Real>& init, const ModelConfig& cfg,
                                  const Vocabulary& vocab,
                                  const std::vector<SearchExample>& train,
                                  const std::vector<SearchExample>& dev,
                                  const FinetuneHyperparams& hp,
                                  const FinetuneOptions& options = {});

struct MatchScore {
  double probability = 0.0;  ///< P(match); 1 - probability is P(mismatch)
  bool truncated = false;
};

MatchScore score(const SearchClassifier<Real>& model, const ModelConfig& cfg,
                 const Vocabulary& vocab, const std::vector<std::string>& nl_tokens,
                 const std::vector<std::string>& pl_tokens, std::size_t max_len);

double accuracy(const SearchClassifier<Real>& model, const ModelConfig& cfg,
                const Vocabulary& vocab, const std::vector<SearchExample>& examples,
                std::size_t max_len);

Checkpoint to_checkpoint(const SearchClassifier<Real>& model, const ModelConfig& cfg,
                         std::uint64_t vocab_fingerprint, std::int64_t step,
                         const nlohmann::json& meta = nlohmann::json::object());
SearchClassifier<Real> classifier_from_checkpoint(const Checkpoint& ckpt, ModelConfig* cfg_out);

// ---------------------------------------------------------------------------
// MRR evaluation

/// Reciprocal-rank mean of 1-based ranks.
double mean_reciprocal_rank(const std::vector<std::size_t>& ranks);

/// (1 / (K + 1)) * sum_{r=1..K+1} 1/r: the MRR of a scorer that ranks the
/// true code uniformly at random among K distractors.
double random_scorer_mrr(int distractors);

struct MRRReport {
  std::map<std::string, double> per_language;
  std::map<std::string, std::size_t> queries;
  double macro_average = 0.0;
  int distractors = 0;
  std::uint64_t seed = 0;
  std::size_t ties = 0;  ///< comparisons decided by code id

  nlohmann::json to_json() const;
  std::string to_table() const;
};

/// Higher is more relevant. Arguments index into the test vector: the
/// query pair's NL against the candidate pair's code.
using PairScorer = std::function<double(std::size_t query, std::size_t candidate)>;

/// For every test pair, K distractor codes are drawn (seeded, without
/// replacement) from the other pairs of the same language, and the true
/// code is ranked among them. Equal scores are ordered by code id.
/// Throws Error(insufficient_data) when a language has fewer than K + 1
/// pairs.
MRRReport evaluate_mrr(const std::vector<BimodalPair>& test, const PairScorer& scorer,
                       int distractors, std::uint64_t seed);

/// K to use given a request and the smallest per-language pool: the
/// request when given, else 999 capped at pool - 1 (with a warning).
int resolve_distractors(std::optional<int> requested, const std::vector<BimodalPair>& test,
                        std::string* warning = nullptr);

/// Scores by the match-minus-mismatch logit. Keeps a reference to model.
PairScorer classifier_scorer(const SearchClassifier<Real>& model, const ModelConfig& cfg,
                             const Vocabulary& vocab, const std::vector<BimodalPair>& test,
                             std::size_t max_len);

// ---------------------------------------------------------------------------
// Late fusion: separate encodings compared by dot product

/// [CLS] tokens [EOS], cut to max_len.
EncodedInput single_segment_input(const std::vector<std::string>& tokens, const Vocabulary& vocab,
                                  Side side, std::size_t max_len);

RowVector<Real> encode_single(const EncoderParams<Real>& params, const ModelConfig& cfg,
                              const Vocabulary& vocab, const std::vector<std::string>& tokens,
                              Side side, std::size_t max_len);

/// In-batch softmax loss over row-aligned (code, nl) embeddings:
/// -(1/N) sum_i log softmax_j(code_j . nl_i)[i]. Gradients are added into
/// d_code / d_nl when given. A batch of one has loss exactly 0.
template <typename T>
T in_batch_softmax_loss(const Matrix<T>& code, const Matrix<T>& nl, Matrix<T>* d_code = nullptr,
                        Matrix<T>* d_nl = nullptr);

struct LateFusionRun {
  EncoderParams<Real> model;
  std::vector<EpochLog> epochs;
  int best_epoch = 0;
};

/// Fine-tunes one shared encoder for both sides with in-batch negatives.
/// Best epoch is the one with the lowest mean dev loss over fixed dev
/// batches.
LateFusionRun finetune_latefusion(const EncoderParams<Real>& init, const ModelConfig& cfg,
                                  const Vocabulary& vocab, const std::vector<BimodalPair>& train,
                                  const std::vector<BimodalPair>& dev,
                                  const FinetuneHyperparams& hp,
                                  const FinetuneOptions& options = {});

/// FNV-1a over parameter names, shapes and values.
std::uint64_t encoder_hash(const EncoderParams<Real>& params);

struct RetrievalIndex {
  static constexpr std::uint32_t kVersion = 1;

  std::uint64_t encoder_hash = 0;
  std::vector<std::string> ids;
  Matrix<Real> vectors;  // one row per id

  std::size_t size() const { return ids.size(); }
  void save(const std::string& path) const;
  static RetrievalIndex load(const std::string& path);
};

struct Hit {
  std::string id;
  double score = 0.0;
};

RetrievalIndex build_index(const std::vector<std::pair<std::string, std::vector<std::string>>>& codes,
                           const EncoderParams<Real>& params, const ModelConfig& cfg,
                           const Vocabulary& vocab, std::size_t max_len);

/// Top k by dot product, ties by id.
std::vector<Hit> query(const RetrievalIndex& index, const RowVector<Real>& q, std::size_t k);

/// Encodes the query with params; throws Error(hash_mismatch) when params
/// are not the encoder the index was built with.
std::vector<Hit> query(const RetrievalIndex& index, const EncoderParams<Real>& params,
                       const ModelConfig& cfg, const Vocabulary& vocab,
                       const std::vector<std::string>& nl_tokens, std::size_t k,
                       std::size_t max_len);

PairScorer latefusion_scorer(const EncoderParams<Real>& params, const ModelConfig& cfg,
                             const Vocabulary& vocab, const std::vector<BimodalPair>& test,
                             std::size_t max_len);

}  // namespace nlpl
