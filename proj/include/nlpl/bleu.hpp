#pragma once

#include <string>
#include <vector>

namespace nlpl {

/// Sentence-level BLEU-4 on a 0..100 scale. Unigram precision is plain;
/// precisions for n = 2..4 add one to matches and to candidate n-gram
/// counts. An empty candidate or one with no unigram match scores 0.
/// Throws Error(invalid_argument) on an empty reference.
double smoothed_bleu4(const std::vector<std::string>& candidate,
                      const std::vector<std::string>& reference);

}  // namespace nlpl
