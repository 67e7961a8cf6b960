#include "nlpl/encoder.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace nlpl {

using nlohmann::json;

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::roberta_base() {
  ModelConfig c;
  c.layers = 12;
  c.hidden = 768;
  c.heads = 12;
  c.ffn = 3072;
  c.vocab_size = 50265;
  c.max_positions = 512;
  return c;
}

ModelConfig ModelConfig::tiny(int vocab_size) {
  ModelConfig c;
  c.layers = 1;
  c.hidden = 4;
  c.heads = 1;
  c.ffn = 8;
  c.vocab_size = vocab_size;
  c.max_positions = 32;
  c.dropout = 0.0;
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::invalid_argument, m); };
  if (layers < 0) fail("layers must be non-negative");
  if (hidden <= 0 || heads <= 0 || ffn <= 0) fail("hidden, heads and ffn must be positive");
  if (hidden % heads != 0) fail("hidden width must be divisible by the head count");
  if (vocab_size <= special::count) fail("vocab_size must exceed the reserved tokens");
  if (max_positions < 4) fail("max_positions must be at least 4");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
}

std::string ModelConfig::to_json() const {
  json j{{"layers", layers},         {"hidden", hidden},
         {"heads", heads},           {"ffn", ffn},
         {"vocab_size", vocab_size}, {"max_positions", max_positions},
         {"dropout", dropout},       {"seed", seed},
         {"tie_mlm_head", tie_mlm_head}};
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  try {
    auto j = json::parse(text);
    ModelConfig c;
    c.layers = j.value("layers", c.layers);
    c.hidden = j.value("hidden", c.hidden);
    c.heads = j.value("heads", c.heads);
    c.ffn = j.value("ffn", c.ffn);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.max_positions = j.value("max_positions", c.max_positions);
    c.dropout = j.value("dropout", c.dropout);
    c.seed = j.value("seed", c.seed);
    c.tie_mlm_head = j.value("tie_mlm_head", c.tie_mlm_head);
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, std::string("bad model config: ") + e.what());
  }
}

template <typename T>
EncoderParams<T> EncoderParams<T>::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  constexpr double kStd = 0.02;
  EncoderParams p;
  init_normal(p.token_embedding, cfg.vocab_size, cfg.hidden, kStd, rng);
  init_normal(p.position_embedding, cfg.max_positions, cfg.hidden, kStd, rng);
  p.embedding_ln.init(cfg.hidden);
  p.layers.resize(static_cast<std::size_t>(cfg.layers));
  for (auto& layer : p.layers) {
    layer.attn.init(cfg.hidden, kStd, rng);
    layer.ln1.init(cfg.hidden);
    layer.ffn.init(cfg.hidden, cfg.ffn, kStd, rng);
    layer.ln2.init(cfg.hidden);
  }
  if (!cfg.tie_mlm_head) init_normal(p.mlm_projection, cfg.vocab_size, cfg.hidden, kStd, rng);
  p.mlm_bias = Matrix<T>::Zero(1, cfg.vocab_size);
  init_normal(p.rtd_weight, cfg.hidden, 1, kStd, rng);
  p.rtd_bias = Matrix<T>::Zero(1, 1);
  return p;
}

template <typename T>
EncoderParams<T> EncoderParams<T>::zeros(const ModelConfig& cfg) {
  Rng rng(0);
  auto p = init(cfg, rng);
  for (auto& [name, m] : tensors(p)) m->setZero();
  return p;
}

template <typename T>
EncoderOutput<T> forward(const EncoderParams<T>& params, const ModelConfig& cfg,
                         const TokenIds& ids, std::optional<std::size_t> attention_limit,
                         Mode mode, Rng* dropout_rng, EncoderCache<T>* cache) {
  const auto n = static_cast<Eigen::Index>(ids.size());
  if (n == 0) throw Error(ErrorKind::invalid_argument, "empty encoder input");
  if (n > cfg.max_positions)
    throw Error(ErrorKind::invalid_argument,
                "input length " + std::to_string(n) + " exceeds max positions " +
                    std::to_string(cfg.max_positions));
  Rng* drop = (mode == Mode::train) ? dropout_rng : nullptr;

  Matrix<T> x(n, cfg.hidden);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto id = ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= cfg.vocab_size)
      throw Error(ErrorKind::invalid_argument, "token id out of range: " + std::to_string(id));
    x.row(i) = params.token_embedding.row(id) + params.position_embedding.row(i);
  }
  if (cache) {
    cache->ids = ids;
    cache->layers.resize(params.layers.size());
  }
  x = layer_norm(x, params.embedding_ln, cache ? &cache->embedding_ln : nullptr);
  {
    auto m = dropout_mask<T>(n, cfg.hidden, cfg.dropout, drop);
    apply_dropout(x, m);
    if (cache) cache->embedding_dropout = std::move(m);
  }

  AttentionMask mask{false, attention_limit};
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& p = params.layers[l];
    auto* c = cache ? &cache->layers[l] : nullptr;
    Matrix<T> a = attention(p.attn, x, x, cfg.heads, mask, c ? &c->attn : nullptr);
    auto am = dropout_mask<T>(n, cfg.hidden, cfg.dropout, drop);
    apply_dropout(a, am);
    Matrix<T> y1 = layer_norm<T>(x + a, p.ln1, c ? &c->ln1 : nullptr);
    Matrix<T> f = feed_forward(p.ffn, y1, c ? &c->ffn : nullptr);
    auto fm = dropout_mask<T>(n, cfg.hidden, cfg.dropout, drop);
    apply_dropout(f, fm);
    x = layer_norm<T>(y1 + f, p.ln2, c ? &c->ln2 : nullptr);
    if (c) {
      c->attn_dropout = std::move(am);
      c->ffn_dropout = std::move(fm);
    }
  }
  return {std::move(x)};
}

template <typename T>
void backward(const EncoderParams<T>& params, const ModelConfig& cfg,
              const EncoderCache<T>& cache, const Matrix<T>& d_hidden,
              EncoderParams<T>& grads) {
  Matrix<T> dx = d_hidden;
  for (std::size_t l = params.layers.size(); l-- > 0;) {
    const auto& p = params.layers[l];
    const auto& c = cache.layers[l];
    auto& g = grads.layers[l];
    Matrix<T> dr2 = layer_norm_backward(c.ln2, p.ln2, dx, g.ln2);
    Matrix<T> df = dr2;
    apply_dropout(df, c.ffn_dropout);
    Matrix<T> dy1 = dr2 + feed_forward_backward(p.ffn, c.ffn, df, g.ffn);
    Matrix<T> dr1 = layer_norm_backward(c.ln1, p.ln1, dy1, g.ln1);
    Matrix<T> da = dr1;
    apply_dropout(da, c.attn_dropout);
    auto [dq, dkv] = attention_backward(p.attn, c.attn, da, cfg.heads, g.attn);
    dx = dr1 + dq + dkv;
  }
  apply_dropout(dx, cache.embedding_dropout);
  Matrix<T> de = layer_norm_backward(cache.embedding_ln, params.embedding_ln, dx, grads.embedding_ln);
  for (Eigen::Index i = 0; i < de.rows(); ++i) {
    grads.token_embedding.row(cache.ids[static_cast<std::size_t>(i)]) += de.row(i);
    grads.position_embedding.row(i) += de.row(i);
  }
}

namespace {
template <typename T>
Matrix<T> gather_rows(const Matrix<T>& m, std::span<const std::size_t> rows) {
  Matrix<T> out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

template <typename T>
T softplus(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}
}  // namespace

template <typename T>
Matrix<T> mlm_log_probs(const EncoderParams<T>& params, const Matrix<T>& hidden,
                        std::span<const std::size_t> positions) {
  Matrix<T> logits = gather_rows(hidden, positions) * params.mlm_weights().transpose();
  logits.rowwise() += params.mlm_bias.row(0);
  return log_softmax_rows(logits);
}

template <typename T>
T mlm_loss(const EncoderParams<T>& params, const Matrix<T>& hidden,
           const std::map<std::size_t, TokenId>& originals, Matrix<T>* d_hidden,
           EncoderParams<T>* grads) {
  if (originals.empty()) return T(0);
  std::vector<std::size_t> positions;
  std::vector<TokenId> targets;
  for (const auto& [p, t] : originals) {
    if (p >= static_cast<std::size_t>(hidden.rows()))
      throw Error(ErrorKind::invalid_argument, "masked position outside the input");
    positions.push_back(p);
    targets.push_back(t);
  }
  Matrix<T> logp = mlm_log_probs<T>(params, hidden, positions);
  T loss = 0;
  for (std::size_t i = 0; i < targets.size(); ++i)
    loss -= logp(static_cast<Eigen::Index>(i), targets[i]);

  if (d_hidden || grads) {
    Matrix<T> dlogits = logp.array().exp().matrix();
    for (std::size_t i = 0; i < targets.size(); ++i)
      dlogits(static_cast<Eigen::Index>(i), targets[i]) -= T(1);
    const auto& w = params.mlm_weights();
    if (d_hidden) {
      Matrix<T> dh = dlogits * w;
      for (std::size_t i = 0; i < positions.size(); ++i)
        d_hidden->row(static_cast<Eigen::Index>(positions[i])) += dh.row(static_cast<Eigen::Index>(i));
    }
    if (grads) {
      Matrix<T> hm = gather_rows(hidden, std::span<const std::size_t>(positions));
      auto& gw = params.mlm_projection.size() != 0 ? grads->mlm_projection : grads->token_embedding;
      gw.noalias() += dlogits.transpose() * hm;
      grads->mlm_bias += dlogits.colwise().sum();
    }
  }
  return loss;
}

template <typename T>
Eigen::Matrix<T, Eigen::Dynamic, 1> rtd_probs(const EncoderParams<T>& params,
                                              const Matrix<T>& hidden) {
  Eigen::Matrix<T, Eigen::Dynamic, 1> z = hidden * params.rtd_weight;
  z.array() += params.rtd_bias(0, 0);
  return z.unaryExpr([](T v) { return T(1) / (T(1) + std::exp(-v)); });
}

template <typename T>
T rtd_loss(const EncoderParams<T>& params, const Matrix<T>& hidden,
           std::span<const std::uint8_t> labels, Matrix<T>* d_hidden,
           EncoderParams<T>* grads) {
  const auto n = hidden.rows();
  if (static_cast<Eigen::Index>(labels.size()) != n)
    throw Error(ErrorKind::invalid_argument, "need one RTD label per position");
  Eigen::Matrix<T, Eigen::Dynamic, 1> z = hidden * params.rtd_weight;
  z.array() += params.rtd_bias(0, 0);
  const T log_floor = std::log(T(kProbabilityFloor));
  const T log_ceil = std::log1p(-T(kProbabilityFloor));
  T loss = 0;
  Eigen::Matrix<T, Eigen::Dynamic, 1> dz(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const bool real = labels[static_cast<std::size_t>(i)] != 0;
    // log p(original) = -softplus(-z); log(1 - p) = -softplus(z)
    const T lp = real ? -softplus(-z(i)) : -softplus(z(i));
    const T clipped = std::clamp(lp, log_floor, log_ceil);
    loss -= clipped;
    const T p = T(1) / (T(1) + std::exp(-z(i)));
    dz(i) = (clipped == lp) ? p - (real ? T(1) : T(0)) : T(0);
  }
  if (d_hidden) d_hidden->noalias() += dz * params.rtd_weight.transpose();
  if (grads) {
    grads->rtd_weight.noalias() += hidden.transpose() * dz;
    grads->rtd_bias(0, 0) += dz.sum();
  }
  return loss;
}

#define NLPL_INSTANTIATE_ENCODER(T)                                                            \
  template struct EncoderParams<T>;                                                            \
  template EncoderOutput<T> forward(const EncoderParams<T>&, const ModelConfig&,               \
                                    const TokenIds&, std::optional<std::size_t>, Mode, Rng*,   \
                                    EncoderCache<T>*);                                         \
  template void backward(const EncoderParams<T>&, const ModelConfig&, const EncoderCache<T>&, \
                         const Matrix<T>&, EncoderParams<T>&);                                 \
  template Matrix<T> mlm_log_probs(const EncoderParams<T>&, const Matrix<T>&,                  \
                                   std::span<const std::size_t>);                              \
  template T mlm_loss(const EncoderParams<T>&, const Matrix<T>&,                               \
                      const std::map<std::size_t, TokenId>&, Matrix<T>*, EncoderParams<T>*);   \
  template Eigen::Matrix<T, Eigen::Dynamic, 1> rtd_probs(const EncoderParams<T>&,              \
                                                         const Matrix<T>&);                    \
  template T rtd_loss(const EncoderParams<T>&, const Matrix<T>&, std::span<const std::uint8_t>, \
                      Matrix<T>*, EncoderParams<T>*);

NLPL_INSTANTIATE_ENCODER(float)
NLPL_INSTANTIATE_ENCODER(double)

}  // namespace nlpl
