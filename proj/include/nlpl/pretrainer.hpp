#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nlpl/checkpoint.hpp"
#include "nlpl/corpus.hpp"
#include "nlpl/corruption.hpp"
#include "nlpl/encoder.hpp"
#include "nlpl/ngram.hpp"
#include "nlpl/optimizer.hpp"
#include "nlpl/tokenizer.hpp"

namespace nlpl {

/// Training runs use single precision; double is kept for gradient checks.
using Real = float;

struct PretrainHyperparams {
  int batch_size = 32;
  double learning_rate = 3e-4;
  int warmup_steps = 200;
  int max_steps = 5000;
  double mask_rate = 0.15;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1;
  int checkpoint_interval = 1000;

  /// Batch 2,048, learning rate 5e-4, 10K warmup, 100K steps.
  static PretrainHyperparams paper_scale();

  void validate() const;
  /// Linear warmup to learning_rate, then constant.
  double learning_rate_at(std::int64_t step) const;
  nlohmann::json to_json() const;
  static PretrainHyperparams from_json(const nlohmann::json& j);
};

struct TrainState {
  EncoderParams<Real> params;
  Adam<EncoderParams<Real>> optimizer;
  std::int64_t step = 0;
  double running_mlm = 0.0;  ///< smoothed per-token MLM loss
  double running_rtd = 0.0;  ///< smoothed per-position RTD loss
  bool has_running = false;

  static TrainState fresh(const ModelConfig& cfg, const PretrainHyperparams& hp);
};

struct StepLog {
  std::int64_t step = 0;  ///< 1-based index of the completed step
  double mlm_loss = 0.0;  ///< batch mean of the per-example MLM sum
  double rtd_loss = 0.0;  ///< batch mean of the per-example RTD sum
  double combined = 0.0;
  double learning_rate = 0.0;
  double mlm_token_loss = 0.0;
  std::size_t real_labels = 0;      ///< planned RTD positions the generator reproduced
  std::size_t replaced_labels = 0;  ///< planned RTD positions that were replaced
};

struct PretrainOptions {
  std::uint64_t vocab_fingerprint = 0;
  std::string checkpoint_dir;  ///< empty: no checkpoint files
  std::string loss_log;        ///< empty: no loss log; appended otherwise
  std::function<void(const StepLog&)> on_step;
};

/// Trains the NL generator on bimodal documentation and the PL generator
/// on unimodal code. With no unimodal code the PL generator falls back to
/// the bimodal code side and a warning is returned through `warning`.
GeneratorPair prepare_generators(const std::vector<BimodalPair>& bimodal,
                                 const std::vector<UnimodalCode>& unimodal,
                                 const Vocabulary& vocab, int order, double k,
                                 std::string* warning = nullptr);

/// Encodes pairs into the two-segment layout.
std::vector<EncodedInput> encode_pairs(const std::vector<BimodalPair>& pairs,
                                       const Vocabulary& vocab, std::size_t max_len);

/// One optimizer step on the hybrid objective; returns its log entry.
StepLog pretrain_step(TrainState& state, const std::vector<EncodedInput>& data,
                      const GeneratorPair& generators, const ModelConfig& cfg,
                      const PretrainHyperparams& hp, std::uint64_t vocab_fingerprint);

/// Runs from state.step up to hp.max_steps. Returns the checkpoint paths
/// written (empty when no checkpoint_dir is configured).
std::vector<std::string> pretrain(TrainState& state, const std::vector<EncodedInput>& data,
                                  const GeneratorPair& generators, const ModelConfig& cfg,
                                  const PretrainHyperparams& hp, const PretrainOptions& options);

Checkpoint to_checkpoint(const TrainState& state, const ModelConfig& cfg,
                         const PretrainHyperparams& hp, std::uint64_t vocab_fingerprint);

/// Restores a training state. Throws Error(invalid_argument) when the
/// stored model config or training hyperparameters (other than max_steps
/// and checkpoint_interval) differ from the requested ones.
TrainState state_from_checkpoint(const Checkpoint& ckpt, const ModelConfig& cfg,
                                 const PretrainHyperparams& hp);

/// Continues training from a checkpoint file.
std::vector<std::string> resume(const std::string& checkpoint_path,
                                const std::vector<EncodedInput>& data,
                                const GeneratorPair& generators, const ModelConfig& cfg,
                                const PretrainHyperparams& hp, const PretrainOptions& options,
                                TrainState* final_state = nullptr);

/// Encoder weights from any checkpoint with a "param" group.
EncoderParams<Real> load_encoder(const Checkpoint& ckpt, ModelConfig* cfg_out = nullptr);

struct PretrainEval {
  double mlm_token_loss = 0.0;
  double mlm_accuracy = 0.0;
  double rtd_accuracy_planned = 0.0;   ///< over every position the RTD plan touched
  double rtd_accuracy_replaced = 0.0;  ///< over positions whose token actually changed
  double rtd_accuracy_all = 0.0;
  std::size_t planned_positions = 0;
  std::size_t replaced_positions = 0;
};

/// Eval-mode pass over every example with fresh seeded masks/corruptions.
PretrainEval evaluate_pretraining(const EncoderParams<Real>& params, const ModelConfig& cfg,
                                  const std::vector<EncodedInput>& data,
                                  const GeneratorPair& generators, std::uint64_t vocab_fingerprint,
                                  double mask_rate, std::uint64_t seed);

}  // namespace nlpl
