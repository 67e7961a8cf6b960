#include "nlpl/bleu.hpp"

#include <cmath>
#include <map>

#include "nlpl/common.hpp"

namespace nlpl {

namespace {

using Counts = std::map<std::vector<std::string>, std::size_t>;

Counts ngram_counts(const std::vector<std::string>& tokens, std::size_t n) {
  Counts out;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i)
    ++out[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                   tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return out;
}

}  // namespace

double smoothed_bleu4(const std::vector<std::string>& candidate,
                      const std::vector<std::string>& reference) {
  if (reference.empty()) throw Error(ErrorKind::invalid_argument, "empty BLEU reference");
  if (candidate.empty()) return 0.0;
  const double c = static_cast<double>(candidate.size());
  const double r = static_cast<double>(reference.size());
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto cand = ngram_counts(candidate, n);
    const auto ref = ngram_counts(reference, n);
    std::size_t matches = 0;
    for (const auto& [g, count] : cand) {
      auto it = ref.find(g);
      if (it != ref.end()) matches += std::min(count, it->second);
    }
    const std::size_t total = candidate.size() >= n ? candidate.size() - n + 1 : 0;
    double p;
    if (n == 1) {
      if (matches == 0) return 0.0;
      p = static_cast<double>(matches) / static_cast<double>(total);
    } else {
      p = static_cast<double>(matches + 1) / static_cast<double>(total + 1);
    }
    log_sum += std::log(p);
  }
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return 100.0 * bp * std::exp(log_sum / 4.0);
}

}  // namespace nlpl
