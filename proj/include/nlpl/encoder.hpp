#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nlpl/layers.hpp"
#include "nlpl/tokenizer.hpp"

namespace nlpl {

/// Shape of the bidirectional encoder.
struct ModelConfig {
  int layers = 4;
  int hidden = 128;
  int heads = 4;
  int ffn = 512;
  int vocab_size = 8000;
  int max_positions = 256;
  double dropout = 0.1;
  std::uint64_t seed = 1;
  bool tie_mlm_head = true;

  /// L=4, d=128, h=4, ffn=512, vocab 8k, 256 positions.
  static ModelConfig desk();
  /// The 125M-parameter RoBERTa-base shape (L=12, d=768, h=12).
  static ModelConfig roberta_base();
  /// L=1, d=4, h=1; used by the scalar reference tests.
  static ModelConfig tiny(int vocab_size);

  /// Throws Error(invalid_argument) on inconsistent shapes.
  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
  bool operator==(const ModelConfig&) const = default;
};

enum class Mode { train, eval };

template <typename T>
struct EncoderLayerParams {
  using Scalar = T;
  AttentionParams<T> attn;
  LayerNormParams<T> ln1;
  FeedForwardParams<T> ffn;
  LayerNormParams<T> ln2;

  template <typename Self, typename F>
  static void each(Self& self, const std::string& prefix, F&& f) {
    AttentionParams<T>::each(self.attn, prefix + "attn.", f);
    LayerNormParams<T>::each(self.ln1, prefix + "ln1.", f);
    FeedForwardParams<T>::each(self.ffn, prefix + "ffn.", f);
    LayerNormParams<T>::each(self.ln2, prefix + "ln2.", f);
  }
};

/// All learnable encoder weights, including the MLM and RTD heads.
template <typename T>
struct EncoderParams {
  using Scalar = T;
  Matrix<T> token_embedding;     // vocab x d
  Matrix<T> position_embedding;  // positions x d
  LayerNormParams<T> embedding_ln;
  std::vector<EncoderLayerParams<T>> layers;
  Matrix<T> mlm_projection;  // vocab x d; empty when tied to token_embedding
  Matrix<T> mlm_bias;        // 1 x vocab
  Matrix<T> rtd_weight;      // d x 1
  Matrix<T> rtd_bias;        // 1 x 1

  template <typename Self, typename F>
  static void each(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "embedding.token", self.token_embedding);
    f(prefix + "embedding.position", self.position_embedding);
    LayerNormParams<T>::each(self.embedding_ln, prefix + "embedding.ln.", f);
    for (std::size_t i = 0; i < self.layers.size(); ++i)
      EncoderLayerParams<T>::each(self.layers[i], prefix + "layer" + std::to_string(i) + ".", f);
    if (self.mlm_projection.size() != 0) f(prefix + "mlm.projection", self.mlm_projection);
    f(prefix + "mlm.bias", self.mlm_bias);
    f(prefix + "rtd.weight", self.rtd_weight);
    f(prefix + "rtd.bias", self.rtd_bias);
  }

  /// Normal(0, 0.02) weights, zero biases, unit layer-norm gains.
  static EncoderParams init(const ModelConfig& cfg, Rng& rng);
  /// Correct shapes, all zeros.
  static EncoderParams zeros(const ModelConfig& cfg);

  const Matrix<T>& mlm_weights() const {
    return mlm_projection.size() != 0 ? mlm_projection : token_embedding;
  }
};

template <typename T>
struct EncoderLayerCache {
  AttentionCache<T> attn;
  Matrix<T> attn_dropout;
  LayerNormCache<T> ln1;
  FeedForwardCache<T> ffn;
  Matrix<T> ffn_dropout;
  LayerNormCache<T> ln2;
};

/// Everything backward() needs from a recorded forward pass.
template <typename T>
struct EncoderCache {
  TokenIds ids;
  LayerNormCache<T> embedding_ln;
  Matrix<T> embedding_dropout;
  std::vector<EncoderLayerCache<T>> layers;
};

template <typename T>
struct EncoderOutput {
  Matrix<T> hidden;  // positions x d
  auto cls() const { return hidden.row(0); }
};

/// Runs the encoder. In train mode with a non-null dropout_rng, dropout is
/// applied; eval mode is deterministic. When attention_limit is set, keys
/// after it are invisible to every position in every layer. Pass a cache to
/// record activations for backward().
template <typename T>
EncoderOutput<T> forward(const EncoderParams<T>& params, const ModelConfig& cfg,
                         const TokenIds& ids, std::optional<std::size_t> attention_limit,
                         Mode mode, Rng* dropout_rng = nullptr, EncoderCache<T>* cache = nullptr);

template <typename T>
EncoderOutput<T> forward(const EncoderParams<T>& params, const ModelConfig& cfg,
                         const EncodedInput& input, Mode mode, Rng* dropout_rng = nullptr,
                         EncoderCache<T>* cache = nullptr) {
  return forward(params, cfg, input.ids, input.attention_limit, mode, dropout_rng, cache);
}

/// Accumulates d(loss)/d(params) into grads given d(loss)/d(hidden).
template <typename T>
void backward(const EncoderParams<T>& params, const ModelConfig& cfg,
              const EncoderCache<T>& cache, const Matrix<T>& d_hidden,
              EncoderParams<T>& grads);

/// Log-softmax of the MLM head at the given positions (rows x vocab).
template <typename T>
Matrix<T> mlm_log_probs(const EncoderParams<T>& params, const Matrix<T>& hidden,
                        std::span<const std::size_t> positions);

/// Sum over positions of -log p(original | context). Zero for an empty set.
/// When d_hidden/grads are given, the gradient is accumulated into them.
template <typename T>
T mlm_loss(const EncoderParams<T>& params, const Matrix<T>& hidden,
           const std::map<std::size_t, TokenId>& originals, Matrix<T>* d_hidden = nullptr,
           EncoderParams<T>* grads = nullptr);

/// Probability that each position holds its original token.
template <typename T>
Eigen::Matrix<T, Eigen::Dynamic, 1> rtd_probs(const EncoderParams<T>& params,
                                              const Matrix<T>& hidden);

inline constexpr double kProbabilityFloor = 1e-12;

/// Binary cross-entropy summed over every position, with probabilities
/// clipped to [1e-12, 1 - 1e-12].
template <typename T>
T rtd_loss(const EncoderParams<T>& params, const Matrix<T>& hidden,
           std::span<const std::uint8_t> labels, Matrix<T>* d_hidden = nullptr,
           EncoderParams<T>* grads = nullptr);

template <typename T>
T combined_loss(T mlm, T rtd) {
  return mlm + rtd;
}

}  // namespace nlpl
