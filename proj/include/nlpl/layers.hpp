#pragma once

// Dense building blocks shared by the encoder and the decoder. Activations
// are (positions x features) row-major matrices; every forward has a
// matching backward that accumulates parameter gradients with +=.

#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "nlpl/common.hpp"

namespace nlpl {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

/// (name, tensor) view over a parameter tree, in a fixed order.
template <typename Scalar>
using TensorList = std::vector<std::pair<std::string, Matrix<Scalar>*>>;
template <typename Scalar>
using ConstTensorList = std::vector<std::pair<std::string, const Matrix<Scalar>*>>;

template <typename Params>
auto tensors(Params& p) {
  using Scalar = typename std::remove_const_t<Params>::Scalar;
  using Ptr = std::conditional_t<std::is_const_v<Params>, const Matrix<Scalar>*, Matrix<Scalar>*>;
  std::vector<std::pair<std::string, Ptr>> out;
  std::remove_const_t<Params>::each(p, std::string(), [&](const std::string& name, auto& m) {
    out.emplace_back(name, &m);
  });
  return out;
}

/// Same tree shape, all zeros.
template <typename Params>
Params zeros_like(const Params& p) {
  Params z = p;
  for (auto& [name, m] : tensors(z)) m->setZero();
  return z;
}

template <typename Params>
std::size_t parameter_count(const Params& p) {
  std::size_t n = 0;
  for (const auto& [name, m] : tensors(p)) n += static_cast<std::size_t>(m->size());
  return n;
}

template <typename Params>
bool all_finite(const Params& p) {
  for (const auto& [name, m] : tensors(p))
    if (!m->allFinite()) return false;
  return true;
}

template <typename Params>
void scale(Params& p, typename Params::Scalar factor) {
  for (auto& [name, m] : tensors(p)) *m *= factor;
}

/// Element-wise copy between trees of identical shape but different scalar.
template <typename To, typename From>
void copy_cast(const From& src, To& dst) {
  auto s = tensors(src);
  auto d = tensors(dst);
  if (s.size() != d.size()) throw Error(ErrorKind::invalid_argument, "parameter trees differ");
  for (std::size_t i = 0; i < s.size(); ++i)
    *d[i].second = s[i].second->template cast<typename To::Scalar>();
}

template <typename Scalar>
void init_normal(Matrix<Scalar>& m, Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  m.resize(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(dist(rng));
}

// ---------------------------------------------------------------- linear

template <typename Scalar>
Matrix<Scalar> linear(const Matrix<Scalar>& x, const Matrix<Scalar>& w, const Matrix<Scalar>& b) {
  Matrix<Scalar> y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

/// Returns dx; accumulates dw and db.
template <typename Scalar>
Matrix<Scalar> linear_backward(const Matrix<Scalar>& x, const Matrix<Scalar>& w,
                               const Matrix<Scalar>& dy, Matrix<Scalar>& dw,
                               Matrix<Scalar>& db) {
  dw.noalias() += x.transpose() * dy;
  db += dy.colwise().sum();
  return dy * w.transpose();
}

// ------------------------------------------------------------ layer norm

template <typename T>
struct LayerNormParams {
  using Scalar = T;
  Matrix<T> gain, bias;

  template <typename Self, typename F>
  static void each(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "gain", self.gain);
    f(prefix + "bias", self.bias);
  }
  void init(Eigen::Index width) {
    gain = Matrix<T>::Ones(1, width);
    bias = Matrix<T>::Zero(1, width);
  }
};

template <typename Scalar>
struct LayerNormCache {
  Matrix<Scalar> normalized;     // (x - mean) / std
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std;
};

inline constexpr double kLayerNormEps = 1e-5;

template <typename Scalar>
Matrix<Scalar> layer_norm(const Matrix<Scalar>& x, const LayerNormParams<Scalar>& p,
                          LayerNormCache<Scalar>* cache) {
  const auto n = x.rows();
  const auto d = x.cols();
  Matrix<Scalar> xhat(n, d);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Scalar mean = x.row(i).mean();
    auto centered = (x.row(i).array() - mean).eval();
    const Scalar var = centered.square().mean();
    inv_std(i) = Scalar(1) / std::sqrt(var + Scalar(kLayerNormEps));
    xhat.row(i) = centered * inv_std(i);
  }
  Matrix<Scalar> y = (xhat.array().rowwise() * p.gain.row(0).array()).matrix();
  y.rowwise() += p.bias.row(0);
  if (cache) {
    cache->normalized = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

template <typename Scalar>
Matrix<Scalar> layer_norm_backward(const LayerNormCache<Scalar>& cache,
                                   const LayerNormParams<Scalar>& p, const Matrix<Scalar>& dy,
                                   LayerNormParams<Scalar>& grads) {
  const auto& xhat = cache.normalized;
  grads.gain += (dy.array() * xhat.array()).colwise().sum().matrix();
  grads.bias += dy.colwise().sum();
  Matrix<Scalar> dxhat = (dy.array().rowwise() * p.gain.row(0).array()).matrix();
  Matrix<Scalar> dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const Scalar m1 = dxhat.row(i).mean();
    const Scalar m2 = (dxhat.row(i).array() * xhat.row(i).array()).mean();
    dx.row(i) = ((dxhat.row(i).array() - m1 - xhat.row(i).array() * m2) * cache.inv_std(i)).matrix();
  }
  return dx;
}

// ------------------------------------------------------------------ gelu

template <typename Scalar>
Scalar gelu(Scalar x) {
  return Scalar(0.5) * x * (Scalar(1) + std::erf(x / std::sqrt(Scalar(2))));
}

template <typename Scalar>
Scalar gelu_derivative(Scalar x) {
  const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x / std::sqrt(Scalar(2))));
  const Scalar pdf = std::exp(Scalar(-0.5) * x * x) / std::sqrt(Scalar(2) * std::numbers::pi_v<Scalar>);
  return cdf + x * pdf;
}

// -------------------------------------------------------------- softmax

/// Row-wise softmax in place; -inf entries get probability zero.
template <typename Derived>
void softmax_rows(Eigen::MatrixBase<Derived>& s) {
  using Scalar = typename Derived::Scalar;
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const Scalar mx = s.row(i).maxCoeff();
    s.row(i) = (s.row(i).array() - mx).exp().matrix();
    s.row(i) /= s.row(i).sum();
  }
}

/// Row-wise log-softmax.
template <typename Scalar>
Matrix<Scalar> log_softmax_rows(const Matrix<Scalar>& s) {
  Matrix<Scalar> out(s.rows(), s.cols());
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const Scalar mx = s.row(i).maxCoeff();
    const Scalar lse = mx + std::log((s.row(i).array() - mx).exp().sum());
    out.row(i) = (s.row(i).array() - lse).matrix();
  }
  return out;
}

// -------------------------------------------------------------- dropout

/// Inverted dropout mask (0 or 1/(1-rate)); empty when inactive.
template <typename Scalar>
Matrix<Scalar> dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng* rng) {
  if (rng == nullptr || rate <= 0.0) return {};
  std::bernoulli_distribution keep(1.0 - rate);
  Matrix<Scalar> m(rows, cols);
  const Scalar scale = static_cast<Scalar>(1.0 / (1.0 - rate));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = keep(*rng) ? scale : Scalar(0);
  return m;
}

template <typename Scalar>
void apply_dropout(Matrix<Scalar>& x, const Matrix<Scalar>& mask) {
  if (mask.size() != 0) x.array() *= mask.array();
}

// ------------------------------------------------------------ attention

template <typename T>
struct AttentionParams {
  using Scalar = T;
  Matrix<T> wq, bq, wk, bk, wv, bv, wo, bo;

  template <typename Self, typename F>
  static void each(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "wq", self.wq);
    f(prefix + "bq", self.bq);
    f(prefix + "wk", self.wk);
    f(prefix + "bk", self.bk);
    f(prefix + "wv", self.wv);
    f(prefix + "bv", self.bv);
    f(prefix + "wo", self.wo);
    f(prefix + "bo", self.bo);
  }
  void init(Eigen::Index width, double stddev, Rng& rng) {
    init_normal(wq, width, width, stddev, rng);
    init_normal(wk, width, width, stddev, rng);
    init_normal(wv, width, width, stddev, rng);
    init_normal(wo, width, width, stddev, rng);
    bq = bk = bv = bo = Matrix<T>::Zero(1, width);
  }
};

/// Which keys a query may see. Keys after key_limit are hidden from every
/// query; with causal set, query i also cannot see keys after i.
struct AttentionMask {
  bool causal = false;
  std::optional<std::size_t> key_limit;
};

template <typename Scalar>
struct AttentionCache {
  Matrix<Scalar> xq, xkv, q, k, v, context;
  std::vector<Matrix<Scalar>> probs;  // per head, (queries x keys)
};

template <typename Scalar>
Matrix<Scalar> attention(const AttentionParams<Scalar>& p, const Matrix<Scalar>& xq,
                         const Matrix<Scalar>& xkv, int heads, const AttentionMask& mask,
                         AttentionCache<Scalar>* cache) {
  const auto nq = xq.rows();
  const auto nk = xkv.rows();
  const auto d = p.wq.cols();
  const auto dh = d / heads;
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  Matrix<Scalar> q = linear(xq, p.wq, p.bq);
  Matrix<Scalar> k = linear(xkv, p.wk, p.bk);
  Matrix<Scalar> v = linear(xkv, p.wv, p.bv);
  Matrix<Scalar> context(nq, d);
  std::vector<Matrix<Scalar>> probs;
  if (cache) probs.reserve(static_cast<std::size_t>(heads));
  const Scalar neg_inf = -std::numeric_limits<Scalar>::infinity();
  for (int h = 0; h < heads; ++h) {
    Matrix<Scalar> s = (q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose()) * scale;
    if (mask.key_limit && static_cast<Eigen::Index>(*mask.key_limit) + 1 < nk)
      s.rightCols(nk - static_cast<Eigen::Index>(*mask.key_limit) - 1).setConstant(neg_inf);
    if (mask.causal)
      for (Eigen::Index i = 0; i < nq; ++i)
        if (i + 1 < nk) s.row(i).tail(nk - i - 1).setConstant(neg_inf);
    softmax_rows(s);
    context.middleCols(h * dh, dh).noalias() = s * v.middleCols(h * dh, dh);
    if (cache) probs.push_back(std::move(s));
  }
  Matrix<Scalar> out = linear(context, p.wo, p.bo);
  if (cache) {
    cache->xq = xq;
    cache->xkv = xkv;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->context = std::move(context);
    cache->probs = std::move(probs);
  }
  return out;
}

/// Returns (d_xq, d_xkv). For self-attention the caller adds the two.
template <typename Scalar>
std::pair<Matrix<Scalar>, Matrix<Scalar>> attention_backward(const AttentionParams<Scalar>& p,
                                                             const AttentionCache<Scalar>& c,
                                                             const Matrix<Scalar>& dout,
                                                             int heads,
                                                             AttentionParams<Scalar>& g) {
  const auto d = p.wq.cols();
  const auto dh = d / heads;
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  Matrix<Scalar> dcontext = linear_backward(c.context, p.wo, dout, g.wo, g.bo);
  Matrix<Scalar> dq(c.q.rows(), d), dk(c.k.rows(), d), dv(c.v.rows(), d);
  for (int h = 0; h < heads; ++h) {
    const auto& a = c.probs[static_cast<std::size_t>(h)];
    auto dctx = dcontext.middleCols(h * dh, dh);
    dv.middleCols(h * dh, dh).noalias() = a.transpose() * dctx;
    Matrix<Scalar> da = dctx * c.v.middleCols(h * dh, dh).transpose();
    // softmax backward: ds = a * (da - rowsum(da * a))
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dot = (da.array() * a.array()).rowwise().sum();
    Matrix<Scalar> ds = (a.array() * (da.array().colwise() - dot.array())).matrix() * scale;
    dq.middleCols(h * dh, dh).noalias() = ds * c.k.middleCols(h * dh, dh);
    dk.middleCols(h * dh, dh).noalias() = ds.transpose() * c.q.middleCols(h * dh, dh);
  }
  Matrix<Scalar> dxq = linear_backward(c.xq, p.wq, dq, g.wq, g.bq);
  Matrix<Scalar> dxkv = linear_backward(c.xkv, p.wk, dk, g.wk, g.bk);
  dxkv += linear_backward(c.xkv, p.wv, dv, g.wv, g.bv);
  return {std::move(dxq), std::move(dxkv)};
}

// --------------------------------------------------------- feed-forward

template <typename T>
struct FeedForwardParams {
  using Scalar = T;
  Matrix<T> w1, b1, w2, b2;

  template <typename Self, typename F>
  static void each(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "w1", self.w1);
    f(prefix + "b1", self.b1);
    f(prefix + "w2", self.w2);
    f(prefix + "b2", self.b2);
  }
  void init(Eigen::Index width, Eigen::Index inner, double stddev, Rng& rng) {
    init_normal(w1, width, inner, stddev, rng);
    init_normal(w2, inner, width, stddev, rng);
    b1 = Matrix<T>::Zero(1, inner);
    b2 = Matrix<T>::Zero(1, width);
  }
};

template <typename Scalar>
struct FeedForwardCache {
  Matrix<Scalar> x, pre, act;
};

template <typename Scalar>
Matrix<Scalar> feed_forward(const FeedForwardParams<Scalar>& p, const Matrix<Scalar>& x,
                            FeedForwardCache<Scalar>* cache) {
  Matrix<Scalar> pre = linear(x, p.w1, p.b1);
  Matrix<Scalar> act = pre.unaryExpr([](Scalar v) { return gelu(v); });
  Matrix<Scalar> out = linear(act, p.w2, p.b2);
  if (cache) {
    cache->x = x;
    cache->pre = std::move(pre);
    cache->act = std::move(act);
  }
  return out;
}

template <typename Scalar>
Matrix<Scalar> feed_forward_backward(const FeedForwardParams<Scalar>& p,
                                     const FeedForwardCache<Scalar>& c, const Matrix<Scalar>& dout,
                                     FeedForwardParams<Scalar>& g) {
  Matrix<Scalar> dact = linear_backward(c.act, p.w2, dout, g.w2, g.b2);
  Matrix<Scalar> dpre =
      (dact.array() * c.pre.unaryExpr([](Scalar v) { return gelu_derivative(v); }).array())
          .matrix();
  return linear_backward(c.x, p.w1, dpre, g.w1, g.b1);
}

}  // namespace nlpl
