#include "micromoe/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace micromoe {

std::vector<std::string> metric_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream ss(text);
  std::string raw;
  while (ss >> raw) {
    std::string tok;
    for (char c : raw) {
      if (std::ispunct(static_cast<unsigned char>(c))) continue;
      tok += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

double recall(const std::string& candidate, const std::string& reference) {
  std::set<std::string> ref_words;
  for (const auto& w : metric_tokens(reference)) ref_words.insert(w);
  if (ref_words.empty())
    throw std::invalid_argument("recall: empty reference");
  std::set<std::string> cand_words;
  for (const auto& w : metric_tokens(candidate)) cand_words.insert(w);
  std::size_t tp = 0;
  for (const auto& w : ref_words) tp += cand_words.count(w);
  return static_cast<double>(tp) / static_cast<double>(ref_words.size());
}

double exact_match(const std::string& candidate,
                   const std::string& reference) {
  auto cand = metric_tokens(candidate);
  if (cand.empty()) return 0.0;
  std::set<std::string> ref_words;
  for (const auto& w : metric_tokens(reference)) ref_words.insert(w);
  std::size_t matches = 0;
  for (const auto& w : cand) matches += ref_words.count(w);
  return static_cast<double>(matches) / static_cast<double>(cand.size());
}

namespace {

std::map<std::vector<std::string>, int> ngram_counts(
    const std::vector<std::string>& words, int n) {
  std::map<std::vector<std::string>, int> counts;
  if (n < 1 || words.size() < static_cast<std::size_t>(n)) return counts;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= words.size(); ++i)
    counts[{words.begin() + static_cast<std::ptrdiff_t>(i),
            words.begin() + static_cast<std::ptrdiff_t>(i) + n}] += 1;
  return counts;
}

}  // namespace

double ngram_precision(const std::string& candidate,
                       const std::string& reference, int n, bool clipped) {
  auto cand = metric_tokens(candidate);
  auto ref = metric_tokens(reference);
  auto cand_counts = ngram_counts(cand, n);
  auto ref_counts = ngram_counts(ref, n);
  long total = 0, matched = 0;
  for (const auto& [ng, count] : cand_counts) {
    total += count;
    auto it = ref_counts.find(ng);
    long in_ref = it == ref_counts.end() ? 0 : it->second;
    matched += clipped ? std::min<long>(count, in_ref)
                       : (in_ref > 0 ? count : 0);
  }
  if (total == 0) return 0.0;
  return static_cast<double>(matched) / static_cast<double>(total);
}

double bleu(const std::string& candidate, const std::string& reference,
            int max_n) {
  auto cand = metric_tokens(candidate);
  auto ref = metric_tokens(reference);
  if (cand.empty() || ref.empty()) return 0.0;
  // n-grams longer than the candidate are undefined; cap the order.
  int n_max = std::min<int>(max_n, static_cast<int>(cand.size()));
  double log_sum = 0.0;
  for (int n = 1; n <= n_max; ++n) {
    double p = ngram_precision(candidate, reference, n, true);
    if (p == 0.0) return 0.0;  // unsmoothed
    log_sum += std::log(p) / static_cast<double>(n_max);
  }
  double c = static_cast<double>(cand.size());
  double r = static_cast<double>(ref.size());
  double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum);
}

namespace {

std::string normalized_join(const std::string& s) {
  auto toks = metric_tokens(s);
  std::string out;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    if (i) out += ' ';
    out += toks[i];
  }
  return out;
}

}  // namespace

double closed_accuracy(const std::vector<std::string>& predictions,
                       const std::vector<std::string>& references) {
  if (predictions.size() != references.size())
    throw std::invalid_argument("closed_accuracy: size mismatch");
  if (predictions.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    auto ref = metric_tokens(references[i]);
    if (ref.size() != 1 || (ref[0] != "yes" && ref[0] != "no"))
      throw std::invalid_argument(
          "closed_accuracy: reference outside {yes, no}: " + references[i]);
    auto pred = metric_tokens(predictions[i]);
    if (!pred.empty() && pred[0] == ref[0]) ++correct;
  }
  return static_cast<double>(correct) /
         static_cast<double>(predictions.size());
}

double classification_accuracy(const std::vector<std::string>& predictions,
                               const std::vector<std::string>& references) {
  if (predictions.size() != references.size())
    throw std::invalid_argument("classification_accuracy: size mismatch");
  if (predictions.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i)
    if (normalized_join(predictions[i]) == normalized_join(references[i]))
      ++correct;
  return static_cast<double>(correct) /
         static_cast<double>(predictions.size());
}

double silhouette(const std::vector<std::vector<double>>& points,
                  const std::vector<int>& labels) {
  if (points.size() != labels.size())
    throw std::invalid_argument("silhouette: size mismatch");
  std::size_t n = points.size();
  std::set<int> cluster_set(labels.begin(), labels.end());
  if (cluster_set.size() < 2)
    throw std::invalid_argument("silhouette: needs at least two clusters");

  auto dist = [&](std::size_t i, std::size_t j) {
    double d2 = 0.0;
    for (std::size_t k = 0; k < points[i].size(); ++k) {
      double d = points[i][k] - points[j][k];
      d2 += d * d;
    }
    return std::sqrt(d2);
  };

  std::map<int, std::size_t> cluster_size;
  for (int l : labels) cluster_size[l] += 1;

  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (cluster_size[labels[i]] == 1) continue;  // singleton: s = 0
    double a = 0.0;
    std::map<int, double> other_sum;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      if (labels[j] == labels[i])
        a += dist(i, j);
      else
        other_sum[labels[j]] += dist(i, j);
    }
    a /= static_cast<double>(cluster_size[labels[i]] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [l, sum] : other_sum)
      b = std::min(b, sum / static_cast<double>(cluster_size[l]));
    double denom = std::max(a, b);
    if (denom > 0.0) total += (b - a) / denom;  // a = b = 0 scores 0
  }
  return total / static_cast<double>(n);
}

}  // namespace micromoe
