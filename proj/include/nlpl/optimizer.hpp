#pragma once

#include <cmath>
#include <cstdint>

#include "nlpl/layers.hpp"

namespace nlpl {

/// Adam with bias correction. Moments share the parameter tree layout.
template <typename Params>
struct Adam {
  using Scalar = typename Params::Scalar;

  Params m;
  Params v;
  std::int64_t steps = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  Adam() = default;
  Adam(const Params& like, double b1, double b2, double e)
      : m(zeros_like(like)), v(zeros_like(like)), beta1(b1), beta2(b2), eps(e) {}

  void update(Params& params, const Params& grads, double learning_rate) {
    ++steps;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(steps));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(steps));
    const auto b1 = static_cast<Scalar>(beta1), b2 = static_cast<Scalar>(beta2);
    const auto step = static_cast<Scalar>(learning_rate / c1);
    const auto inv_c2 = static_cast<Scalar>(1.0 / c2);
    const auto e = static_cast<Scalar>(eps);
    auto p = tensors(params);
    auto g = tensors(grads);
    auto mm = tensors(m);
    auto vv = tensors(v);
    for (std::size_t i = 0; i < p.size(); ++i) {
      auto& mi = *mm[i].second;
      auto& vi = *vv[i].second;
      const auto& gi = *g[i].second;
      mi = b1 * mi + (Scalar(1) - b1) * gi;
      vi = b2 * vi + (Scalar(1) - b2) * gi.cwiseAbs2();
      p[i].second->array() -= step * mi.array() / ((vi.array() * inv_c2).sqrt() + e);
    }
  }
};

}  // namespace nlpl
