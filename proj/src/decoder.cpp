#include "nlpl/decoder.hpp"

#include <cmath>

namespace nlpl {

using nlohmann::json;

DecoderConfig DecoderConfig::matching(const ModelConfig& encoder) {
  DecoderConfig c;
  c.hidden = encoder.hidden;
  c.heads = encoder.heads;
  c.ffn = encoder.ffn;
  c.dropout = encoder.dropout;
  return c;
}

DecoderConfig DecoderConfig::paper_scale() {
  DecoderConfig c;
  c.layers = 6;
  c.hidden = 768;
  c.heads = 12;
  c.ffn = 3072;
  return c;
}

void DecoderConfig::validate(const ModelConfig& encoder) const {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::invalid_argument, m); };
  if (layers < 0) fail("decoder layers must be non-negative");
  if (hidden <= 0 || heads <= 0 || ffn <= 0) fail("decoder hidden, heads and ffn must be positive");
  if (hidden % heads != 0) fail("decoder width must be divisible by the head count");
  if (hidden != encoder.hidden)
    fail("decoder width " + std::to_string(hidden) + " differs from encoder width " +
         std::to_string(encoder.hidden));
  if (max_target_len < 2) fail("max_target_len must be at least 2");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("decoder dropout must lie in [0, 1)");
}

json DecoderConfig::to_json() const {
  return {{"layers", layers}, {"hidden", hidden}, {"heads", heads},
          {"ffn", ffn},       {"max_target_len", max_target_len}, {"dropout", dropout}};
}

DecoderConfig DecoderConfig::from_json(const json& j) {
  try {
    DecoderConfig c;
    c.layers = j.value("layers", c.layers);
    c.hidden = j.value("hidden", c.hidden);
    c.heads = j.value("heads", c.heads);
    c.ffn = j.value("ffn", c.ffn);
    c.max_target_len = j.value("max_target_len", c.max_target_len);
    c.dropout = j.value("dropout", c.dropout);
    return c;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, std::string("bad decoder config: ") + e.what());
  }
}

template <typename T>
DecoderParams<T> DecoderParams<T>::init(const DecoderConfig& cfg, int vocab_size, Rng& rng) {
  constexpr double kStd = 0.02;
  DecoderParams p;
  init_normal(p.token_embedding, vocab_size, cfg.hidden, kStd, rng);
  init_normal(p.position_embedding, cfg.max_target_len, cfg.hidden, kStd, rng);
  p.embedding_ln.init(cfg.hidden);
  p.layers.resize(static_cast<std::size_t>(cfg.layers));
  for (auto& layer : p.layers) {
    layer.self_attn.init(cfg.hidden, kStd, rng);
    layer.ln1.init(cfg.hidden);
    layer.cross_attn.init(cfg.hidden, kStd, rng);
    layer.ln2.init(cfg.hidden);
    layer.ffn.init(cfg.hidden, cfg.ffn, kStd, rng);
    layer.ln3.init(cfg.hidden);
  }
  p.output_bias = Matrix<T>::Zero(1, vocab_size);
  return p;
}

template <typename T>
DecoderParams<T> DecoderParams<T>::zeros(const DecoderConfig& cfg, int vocab_size) {
  Rng rng(0);
  auto p = init(cfg, vocab_size, rng);
  for (auto& [name, m] : tensors(p)) m->setZero();
  return p;
}

template <typename T>
Matrix<T> decoder_forward(const DecoderParams<T>& params, const DecoderConfig& cfg,
                          const TokenIds& target_in, const Matrix<T>& memory, Mode mode,
                          Rng* dropout_rng, DecoderCache<T>* cache) {
  const auto n = static_cast<Eigen::Index>(target_in.size());
  if (n == 0) throw Error(ErrorKind::invalid_argument, "empty decoder input");
  if (n > cfg.max_target_len)
    throw Error(ErrorKind::invalid_argument, "decoder input length " + std::to_string(n) +
                                                 " exceeds max_target_len " +
                                                 std::to_string(cfg.max_target_len));
  const auto vocab = params.token_embedding.rows();
  Rng* drop = (mode == Mode::train) ? dropout_rng : nullptr;

  Matrix<T> x(n, cfg.hidden);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto id = target_in[static_cast<std::size_t>(i)];
    if (id < 0 || id >= vocab)
      throw Error(ErrorKind::invalid_argument, "token id out of range: " + std::to_string(id));
    x.row(i) = params.token_embedding.row(id) + params.position_embedding.row(i);
  }
  if (cache) {
    cache->ids = target_in;
    cache->layers.resize(params.layers.size());
  }
  x = layer_norm(x, params.embedding_ln, cache ? &cache->embedding_ln : nullptr);
  {
    auto m = dropout_mask<T>(n, cfg.hidden, cfg.dropout, drop);
    apply_dropout(x, m);
    if (cache) cache->embedding_dropout = std::move(m);
  }

  const AttentionMask causal{true, std::nullopt};
  const AttentionMask open{false, std::nullopt};
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& p = params.layers[l];
    auto* c = cache ? &cache->layers[l] : nullptr;
    Matrix<T> a = attention(p.self_attn, x, x, cfg.heads, causal, c ? &c->self_attn : nullptr);
    auto am = dropout_mask<T>(n, cfg.hidden, cfg.dropout, drop);
    apply_dropout(a, am);
    Matrix<T> y1 = layer_norm<T>(x + a, p.ln1, c ? &c->ln1 : nullptr);
    Matrix<T> b = attention(p.cross_attn, y1, memory, cfg.heads, open, c ? &c->cross_attn : nullptr);
    auto bm = dropout_mask<T>(n, cfg.hidden, cfg.dropout, drop);
    apply_dropout(b, bm);
    Matrix<T> y2 = layer_norm<T>(y1 + b, p.ln2, c ? &c->ln2 : nullptr);
    Matrix<T> f = feed_forward(p.ffn, y2, c ? &c->ffn : nullptr);
    auto fm = dropout_mask<T>(n, cfg.hidden, cfg.dropout, drop);
    apply_dropout(f, fm);
    x = layer_norm<T>(y2 + f, p.ln3, c ? &c->ln3 : nullptr);
    if (c) {
      c->self_dropout = std::move(am);
      c->cross_dropout = std::move(bm);
      c->ffn_dropout = std::move(fm);
    }
  }
  Matrix<T> logits = x * params.token_embedding.transpose();
  logits.rowwise() += params.output_bias.row(0);
  if (cache) cache->hidden = std::move(x);
  return logits;
}

template <typename T>
Matrix<T> decoder_backward(const DecoderParams<T>& params, const DecoderConfig& cfg,
                           const DecoderCache<T>& cache, const Matrix<T>& d_logits,
                           DecoderParams<T>& grads) {
  grads.output_bias += d_logits.colwise().sum();
  grads.token_embedding.noalias() += d_logits.transpose() * cache.hidden;
  Matrix<T> dx = d_logits * params.token_embedding;
  Matrix<T> d_memory;
  for (std::size_t l = params.layers.size(); l-- > 0;) {
    const auto& p = params.layers[l];
    const auto& c = cache.layers[l];
    auto& g = grads.layers[l];
    Matrix<T> dr3 = layer_norm_backward(c.ln3, p.ln3, dx, g.ln3);
    Matrix<T> df = dr3;
    apply_dropout(df, c.ffn_dropout);
    Matrix<T> dy2 = dr3 + feed_forward_backward(p.ffn, c.ffn, df, g.ffn);
    Matrix<T> dr2 = layer_norm_backward(c.ln2, p.ln2, dy2, g.ln2);
    Matrix<T> db = dr2;
    apply_dropout(db, c.cross_dropout);
    auto [dq_cross, dmem] = attention_backward(p.cross_attn, c.cross_attn, db, cfg.heads, g.cross_attn);
    if (d_memory.size() == 0) d_memory = std::move(dmem);
    else d_memory += dmem;
    Matrix<T> dy1 = dr2 + dq_cross;
    Matrix<T> dr1 = layer_norm_backward(c.ln1, p.ln1, dy1, g.ln1);
    Matrix<T> da = dr1;
    apply_dropout(da, c.self_dropout);
    auto [dq, dkv] = attention_backward(p.self_attn, c.self_attn, da, cfg.heads, g.self_attn);
    dx = dr1 + dq + dkv;
  }
  apply_dropout(dx, cache.embedding_dropout);
  Matrix<T> de = layer_norm_backward(cache.embedding_ln, params.embedding_ln, dx, grads.embedding_ln);
  for (Eigen::Index i = 0; i < de.rows(); ++i) {
    grads.token_embedding.row(cache.ids[static_cast<std::size_t>(i)]) += de.row(i);
    grads.position_embedding.row(i) += de.row(i);
  }
  return d_memory;
}

template <typename T>
T sequence_cross_entropy(const Matrix<T>& logits, const TokenIds& targets, Matrix<T>* d_logits) {
  if (static_cast<Eigen::Index>(targets.size()) != logits.rows())
    throw Error(ErrorKind::invalid_argument, "need one target per decoder position");
  Matrix<T> logp = log_softmax_rows(logits);
  T loss = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) loss -= logp(static_cast<Eigen::Index>(i), targets[i]);
  if (d_logits) {
    *d_logits = logp.array().exp().matrix();
    for (std::size_t i = 0; i < targets.size(); ++i)
      (*d_logits)(static_cast<Eigen::Index>(i), targets[i]) -= T(1);
  }
  return loss;
}

template <typename T>
T seq2seq_loss(const Seq2SeqModel<T>& model, const ModelConfig& enc_cfg,
               const DecoderConfig& dec_cfg, const EncodedInput& source, const TokenIds& target,
               Mode mode, Rng* dropout_rng, Seq2SeqModel<T>* grads) {
  const std::size_t keep =
      std::min(target.size(), static_cast<std::size_t>(dec_cfg.max_target_len - 1));
  TokenIds in{special::bos};
  TokenIds out;
  in.insert(in.end(), target.begin(), target.begin() + static_cast<std::ptrdiff_t>(keep));
  out.insert(out.end(), target.begin(), target.begin() + static_cast<std::ptrdiff_t>(keep));
  out.push_back(special::eos);

  EncoderCache<T> enc_cache;
  DecoderCache<T> dec_cache;
  auto memory = forward(model.encoder, enc_cfg, source, mode, dropout_rng, grads ? &enc_cache : nullptr);
  Matrix<T> logits = decoder_forward(model.decoder, dec_cfg, in, memory.hidden, mode, dropout_rng,
                                     grads ? &dec_cache : nullptr);
  Matrix<T> d_logits;
  const T loss = sequence_cross_entropy(logits, out, grads ? &d_logits : nullptr);
  if (grads) {
    Matrix<T> d_memory = decoder_backward(model.decoder, dec_cfg, dec_cache, d_logits, grads->decoder);
    if (d_memory.size() != 0) backward(model.encoder, enc_cfg, enc_cache, d_memory, grads->encoder);
  }
  return loss;
}

#define NLPL_INSTANTIATE_DECODER(T)                                                             \
  template struct DecoderParams<T>;                                                             \
  template Matrix<T> decoder_forward(const DecoderParams<T>&, const DecoderConfig&,             \
                                     const TokenIds&, const Matrix<T>&, Mode, Rng*,             \
                                     DecoderCache<T>*);                                         \
  template Matrix<T> decoder_backward(const DecoderParams<T>&, const DecoderConfig&,            \
                                      const DecoderCache<T>&, const Matrix<T>&,                 \
                                      DecoderParams<T>&);                                       \
  template T sequence_cross_entropy(const Matrix<T>&, const TokenIds&, Matrix<T>*);             \
  template T seq2seq_loss(const Seq2SeqModel<T>&, const ModelConfig&, const DecoderConfig&,     \
                          const EncodedInput&, const TokenIds&, Mode, Rng*, Seq2SeqModel<T>*);

NLPL_INSTANTIATE_DECODER(float)
NLPL_INSTANTIATE_DECODER(double)

}  // namespace nlpl
