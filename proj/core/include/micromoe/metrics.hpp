#pragma once

#include <string>
#include <vector>

#include "micromoe/tensor.hpp"

namespace micromoe {

/// Metric tokenization: lowercase, split on whitespace, strip ASCII
/// punctuation from each token, drop tokens that become empty. Candidates
/// and references go through the same normalization.
std::vector<std::string> metric_tokens(const std::string& text);

/// TP / (TP + FN) over unique reference words: TP counts reference words
/// present in the candidate, FN those absent. Empty reference throws.
double recall(const std::string& candidate, const std::string& reference);

/// Fraction of candidate words that appear in the reference. An empty
/// candidate scores 0.
double exact_match(const std::string& candidate, const std::string& reference);

/// Unsmoothed BLEU with clipped n-gram precision, brevity penalty
/// e^(1 - r/c) when c <= r, uniform weights and max_n capped at the
/// candidate length. Any zero n-gram precision gives 0.
double bleu(const std::string& candidate, const std::string& reference,
            int max_n = 4);

/// Unclipped n-gram precision, the naive oracle the clipping property is
/// checked against.
double ngram_precision(const std::string& candidate,
                       const std::string& reference, int n, bool clipped);

/// Yes/no accuracy with first-token matching after normalization. Every
/// reference must normalize to yes or no.
double closed_accuracy(const std::vector<std::string>& predictions,
                       const std::vector<std::string>& references);

/// Full normalized-string equality.
double classification_accuracy(const std::vector<std::string>& predictions,
                               const std::vector<std::string>& references);

/// Mean silhouette with Euclidean distance. Singleton clusters score 0;
/// coincident points score 0 through the max guard. Needs at least two
/// distinct labels.
double silhouette(const std::vector<std::vector<double>>& points,
                  const std::vector<int>& labels);

}  // namespace micromoe
