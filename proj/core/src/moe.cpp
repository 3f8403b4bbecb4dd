#include "micromoe/moe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace micromoe {

Val router_logits(Graph& g, Val tokens, const Router& router) {
  std::size_t d = g.value(tokens).cols();
  if (d != static_cast<std::size_t>(router.input_dim()))
    throw std::invalid_argument("router_logits: embedding dim mismatch");
  Val x = tokens;
  if (router.in_shift && router.in_scale)
    x = g.mul_rowvec(g.add_rowvec(x, g.param(router.in_shift)),
                     g.param(router.in_scale));
  Val h = g.add_rowvec(g.matmul(x, g.param(router.w1)), g.param(router.b1));
  if (router.depth == 1) return h;
  return g.add_rowvec(g.matmul(g.gelu(h), g.param(router.w2)),
                      g.param(router.b2));
}

Val sequence_logits(Graph& g, Val per_token_logits) {
  return g.mean_rows(per_token_logits);
}

int argmax_low(const double* v, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < n; ++i)
    if (v[i] > v[best]) best = i;
  return static_cast<int>(best);
}

std::vector<int> top_k_indices(const double* logits, std::size_t n, int k) {
  if (k < 1 || static_cast<std::size_t>(k) > n)
    throw std::invalid_argument("top_k_indices: k out of range");
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return logits[a] > logits[b];  // stable keeps ties on the lower index
  });
  order.resize(static_cast<std::size_t>(k));
  return order;
}

double GateDecision::selected_weight_sum() const {
  double s = 0.0;
  for (int e : selected) s += weights[static_cast<std::size_t>(e)];
  return s;
}

GateDecision gate(const std::vector<double>& logits, int k) {
  GateDecision d;
  d.logits = logits;
  d.selected = top_k_indices(logits.data(), logits.size(), k);
  d.weights.assign(logits.size(), 0.0);
  // Softmax over the selected logits, matching the tape's softmax numerics.
  double mx = logits[static_cast<std::size_t>(d.selected[0])];
  for (int e : d.selected)
    mx = std::max(mx, logits[static_cast<std::size_t>(e)]);
  double sum = 0.0;
  std::vector<double> ex(d.selected.size());
  for (std::size_t j = 0; j < d.selected.size(); ++j) {
    ex[j] = std::exp(logits[static_cast<std::size_t>(d.selected[j])] - mx);
    sum += ex[j];
  }
  for (std::size_t j = 0; j < d.selected.size(); ++j)
    d.weights[static_cast<std::size_t>(d.selected[j])] = ex[j] / sum;
  return d;
}

void ActivationTrace::record(int layer, const std::string& modality,
                             int expert, bool image_token) {
  Counts& c = cells[Key{layer, modality, expert}];
  c.top1 += 1;
  if (image_token)
    c.image_tokens += 1;
  else
    c.text_tokens += 1;
}

void ActivationTrace::merge(const ActivationTrace& other) {
  for (const auto& [key, counts] : other.cells) {
    Counts& c = cells[key];
    c.top1 += counts.top1;
    c.image_tokens += counts.image_tokens;
    c.text_tokens += counts.text_tokens;
  }
}

std::uint64_t ActivationTrace::routed_tokens(int layer,
                                             const std::string& modality) const {
  std::uint64_t total = 0;
  for (const auto& [key, counts] : cells)
    if (key.layer == layer && key.modality == modality) total += counts.top1;
  return total;
}

void ActivationTrace::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write trace: " + path.string());
  out << "layer,modality,expert,top1_count,image_token_count,text_token_count\n";
  for (const auto& [key, counts] : cells)
    out << key.layer << ',' << key.modality << ',' << key.expert << ','
        << counts.top1 << ',' << counts.image_tokens << ','
        << counts.text_tokens << '\n';
}

ActivationTrace ActivationTrace::read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open trace: " + path.string());
  ActivationTrace trace;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string field;
    Key key;
    Counts counts;
    std::getline(ss, field, ',');
    key.layer = std::stoi(field);
    std::getline(ss, key.modality, ',');
    std::getline(ss, field, ',');
    key.expert = std::stoi(field);
    std::getline(ss, field, ',');
    counts.top1 = std::stoull(field);
    std::getline(ss, field, ',');
    counts.image_tokens = std::stoull(field);
    std::getline(ss, field, ',');
    counts.text_tokens = std::stoull(field);
    trace.cells[key] = counts;
  }
  return trace;
}

}  // namespace micromoe
