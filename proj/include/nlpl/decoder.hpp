#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "nlpl/encoder.hpp"
#include "nlpl/layers.hpp"

namespace nlpl {

/// Shape of the Transformer decoder. Its width must equal the encoder's.
struct DecoderConfig {
  int layers = 2;
  int hidden = 128;
  int heads = 4;
  int ffn = 512;
  int max_target_len = 64;  ///< decoder positions, [BOS] included
  double dropout = 0.1;

  /// Two layers sized like the given encoder.
  static DecoderConfig matching(const ModelConfig& encoder);
  /// L=6, d=768, h=12.
  static DecoderConfig paper_scale();

  void validate(const ModelConfig& encoder) const;
  nlohmann::json to_json() const;
  static DecoderConfig from_json(const nlohmann::json& j);
  bool operator==(const DecoderConfig&) const = default;
};

template <typename T>
struct DecoderLayerParams {
  using Scalar = T;
  AttentionParams<T> self_attn;
  LayerNormParams<T> ln1;
  AttentionParams<T> cross_attn;
  LayerNormParams<T> ln2;
  FeedForwardParams<T> ffn;
  LayerNormParams<T> ln3;

  template <typename Self, typename F>
  static void each(Self& self, const std::string& prefix, F&& f) {
    AttentionParams<T>::each(self.self_attn, prefix + "self.", f);
    LayerNormParams<T>::each(self.ln1, prefix + "ln1.", f);
    AttentionParams<T>::each(self.cross_attn, prefix + "cross.", f);
    LayerNormParams<T>::each(self.ln2, prefix + "ln2.", f);
    FeedForwardParams<T>::each(self.ffn, prefix + "ffn.", f);
    LayerNormParams<T>::each(self.ln3, prefix + "ln3.", f);
  }
};

/// Output logits reuse the target embedding matrix.
template <typename T>
struct DecoderParams {
  using Scalar = T;
  Matrix<T> token_embedding;     // vocab x d
  Matrix<T> position_embedding;  // max_target_len x d
  LayerNormParams<T> embedding_ln;
  std::vector<DecoderLayerParams<T>> layers;
  Matrix<T> output_bias;  // 1 x vocab

  template <typename Self, typename F>
  static void each(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "embedding.token", self.token_embedding);
    f(prefix + "embedding.position", self.position_embedding);
    LayerNormParams<T>::each(self.embedding_ln, prefix + "embedding.ln.", f);
    for (std::size_t i = 0; i < self.layers.size(); ++i)
      DecoderLayerParams<T>::each(self.layers[i], prefix + "layer" + std::to_string(i) + ".", f);
    f(prefix + "output.bias", self.output_bias);
  }

  static DecoderParams init(const DecoderConfig& cfg, int vocab_size, Rng& rng);
  static DecoderParams zeros(const DecoderConfig& cfg, int vocab_size);
};

template <typename T>
struct DecoderLayerCache {
  AttentionCache<T> self_attn;
  Matrix<T> self_dropout;
  LayerNormCache<T> ln1;
  AttentionCache<T> cross_attn;
  Matrix<T> cross_dropout;
  LayerNormCache<T> ln2;
  FeedForwardCache<T> ffn;
  Matrix<T> ffn_dropout;
  LayerNormCache<T> ln3;
};

template <typename T>
struct DecoderCache {
  TokenIds ids;
  LayerNormCache<T> embedding_ln;
  Matrix<T> embedding_dropout;
  std::vector<DecoderLayerCache<T>> layers;
  Matrix<T> hidden;
};

/// Logits (targets x vocab) for every prefix position. Position t attends
/// to target positions <= t and to all of memory.
template <typename T>
Matrix<T> decoder_forward(const DecoderParams<T>& params, const DecoderConfig& cfg,
                          const TokenIds& target_in, const Matrix<T>& memory, Mode mode,
                          Rng* dropout_rng = nullptr, DecoderCache<T>* cache = nullptr);

/// Accumulates parameter gradients into grads and returns d(loss)/d(memory).
template <typename T>
Matrix<T> decoder_backward(const DecoderParams<T>& params, const DecoderConfig& cfg,
                           const DecoderCache<T>& cache, const Matrix<T>& d_logits,
                           DecoderParams<T>& grads);

/// Summed cross-entropy of targets under logits; writes d(loss)/d(logits).
template <typename T>
T sequence_cross_entropy(const Matrix<T>& logits, const TokenIds& targets, Matrix<T>* d_logits);

/// Encoder and decoder trained together for code-to-documentation.
template <typename T>
struct Seq2SeqModel {
  using Scalar = T;
  EncoderParams<T> encoder;
  DecoderParams<T> decoder;

  template <typename Self, typename F>
  static void each(Self& self, const std::string& prefix, F&& f) {
    EncoderParams<T>::each(self.encoder, prefix, f);
    DecoderParams<T>::each(self.decoder, prefix + "dec.", f);
  }
};

/// Teacher-forced loss of one example: source ids run through the encoder,
/// [BOS] + target through the decoder, predicting target + [EOS].
template <typename T>
T seq2seq_loss(const Seq2SeqModel<T>& model, const ModelConfig& enc_cfg,
               const DecoderConfig& dec_cfg, const EncodedInput& source, const TokenIds& target,
               Mode mode, Rng* dropout_rng = nullptr, Seq2SeqModel<T>* grads = nullptr);

}  // namespace nlpl
