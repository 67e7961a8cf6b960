#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "nlpl/bleu.hpp"
#include "nlpl/checkpoint.hpp"
#include "nlpl/corpus.hpp"
#include "nlpl/decoder.hpp"
#include "nlpl/search.hpp"

namespace nlpl {

/// Encoder copied from init, decoder freshly initialized from seed.
Seq2SeqModel<Real> fresh_seq2seq(const EncoderParams<Real>& init, const ModelConfig& enc_cfg,
                                 const DecoderConfig& dec_cfg, std::uint64_t seed);

/// [CLS] code [EOS], cut to max_len.
EncodedInput source_input(const std::vector<std::string>& pl_tokens, const Vocabulary& vocab,
                          std::size_t max_len);
TokenIds target_ids(const std::vector<std::string>& nl_tokens, const Vocabulary& vocab);

struct Seq2SeqRun {
  Seq2SeqModel<Real> model;  ///< the best-on-dev epoch
  std::vector<EpochLog> epochs;
  int best_epoch = 0;
};

/// Teacher-forced token-level cross-entropy, averaged over the target
/// tokens of each batch. hp.max_len is the source length. The returned
/// model is the epoch with the highest greedy dev BLEU (earliest on ties);
/// with an empty dev set the last epoch wins. Throws Error(numeric) on a
/// non-finite loss.
Seq2SeqRun finetune_seq2seq(const EncoderParams<Real>& init, const ModelConfig& enc_cfg,
                            const DecoderConfig& dec_cfg, const Vocabulary& vocab,
                            const std::vector<BimodalPair>& train,
                            const std::vector<BimodalPair>& dev, const FinetuneHyperparams& hp,
                            const FinetuneOptions& options = {});

/// width 1 is greedy search.
struct Decoding {
  int beam_width = 1;
};

/// Argmax at every step over ordinary tokens and [EOS], ties to the lower
/// id. Stops at [EOS] (not included) or when the decoder positions run out.
TokenIds generate_greedy(const Seq2SeqModel<Real>& model, const ModelConfig& enc_cfg,
                         const DecoderConfig& dec_cfg, const EncodedInput& source);

/// Beam search on summed log-probabilities without length normalization.
/// Equal scores are ordered by parent rank, then token id.
TokenIds generate_beam(const Seq2SeqModel<Real>& model, const ModelConfig& enc_cfg,
                       const DecoderConfig& dec_cfg, const EncodedInput& source, int width);

TokenIds generate(const Seq2SeqModel<Real>& model, const ModelConfig& enc_cfg,
                  const DecoderConfig& dec_cfg, const EncodedInput& source,
                  const Decoding& decoding = {});

/// Words of decoded output, as compared by BLEU.
std::vector<std::string> output_words(const TokenIds& ids, const Vocabulary& vocab);
/// Pre-tokenized, lowercased documentation words.
std::vector<std::string> reference_words(const std::vector<std::string>& nl_tokens);

struct BleuReport {
  std::map<std::string, double> per_language;
  std::map<std::string, std::size_t> examples;
  double overall = 0.0;  ///< mean of the per-language scores
  std::vector<std::pair<std::string, double>> per_example;

  nlohmann::json to_json() const;
  std::string to_table() const;
};

struct ScoredOutput {
  std::string id;
  std::string language;
  std::vector<std::string> candidate;
  std::vector<std::string> reference;
};

/// Per-language mean of sentence-level smoothed BLEU-4.
BleuReport bleu_report(const std::vector<ScoredOutput>& outputs, bool keep_per_example = false);

/// Generates for every pair and scores against its documentation.
BleuReport evaluate_corpus(const Seq2SeqModel<Real>& model, const ModelConfig& enc_cfg,
                           const DecoderConfig& dec_cfg, const Vocabulary& vocab,
                           const std::vector<BimodalPair>& test, std::size_t max_len,
                           const Decoding& decoding = {}, bool keep_per_example = false);

Checkpoint to_checkpoint(const Seq2SeqModel<Real>& model, const ModelConfig& enc_cfg,
                         const DecoderConfig& dec_cfg, std::uint64_t vocab_fingerprint,
                         std::int64_t step, const nlohmann::json& meta = nlohmann::json::object());
Seq2SeqModel<Real> seq2seq_from_checkpoint(const Checkpoint& ckpt, ModelConfig* enc_cfg,
                                           DecoderConfig* dec_cfg);

}  // namespace nlpl
