#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "micromoe/graph.hpp"
#include "micromoe/param.hpp"

namespace micromoe {

/// Modality-classifier router: an MLP of depth 1 or 2 producing one logit
/// per expert. Trained separately on labeled data and frozen before the
/// sparse experts are tuned; a frozen router's weights never change again.
///
/// The fixed input scaler (shift then scale per dimension, estimated from
/// the training embeddings) conditions the residual-stream activations for
/// the fresh MLP; it never trains. Identity when absent.
struct Router {
  int depth = 1;  // 1: linear, 2: linear-GeLU-linear
  std::shared_ptr<Tensor> in_shift, in_scale;  // (1, d_model) each
  std::shared_ptr<Tensor> w1, b1;  // (d_model, h) or (d_model, experts)
  std::shared_ptr<Tensor> w2, b2;  // depth 2 only: (h, experts)
  bool frozen = false;

  int input_dim() const { return static_cast<int>(w1->rows()); }
  int output_dim() const {
    return static_cast<int>(depth == 2 ? w2->cols() : w1->cols());
  }
};

/// Per-token routing logits (tokens, experts) on the tape.
Val router_logits(Graph& g, Val tokens, const Router& router);

/// Sequence-level logits: the mean of the per-token logits, shape
/// (1, experts). The sequence prediction is the argmax (ties to index 0).
Val sequence_logits(Graph& g, Val per_token_logits);

/// Argmax with ties broken toward the lower index.
int argmax_low(const double* v, std::size_t n);

/// One token's gate: the K selected experts and their weights.
///
/// Selection is top-K by logit with ties to the lower index; weights are the
/// softmax over the K selected logits, so the selected weights sum to one
/// and every unselected weight is exactly zero.
struct GateDecision {
  std::vector<int> selected;         // K expert indices, descending by logit
  std::vector<double> weights;       // full length-E vector; zeros unselected
  std::vector<double> logits;        // full length-E logit vector

  double selected_weight_sum() const;
};

GateDecision gate(const std::vector<double>& logits, int k);

/// Top-K selection only (no weights); shared by gate() and the tape path.
std::vector<int> top_k_indices(const double* logits, std::size_t n, int k);

/// Top-1 expert counts per (layer, modality, expert) plus an image/text
/// token split per (layer, expert). Traces merge associatively so per-sample
/// traces can be combined in a fixed order.
struct ActivationTrace {
  struct Key {
    int layer;
    std::string modality;
    int expert;
    auto operator<=>(const Key&) const = default;
  };
  struct Counts {
    std::uint64_t top1 = 0;
    std::uint64_t image_tokens = 0;
    std::uint64_t text_tokens = 0;
  };
  std::map<Key, Counts> cells;

  void record(int layer, const std::string& modality, int expert,
              bool image_token);
  void merge(const ActivationTrace& other);
  std::uint64_t routed_tokens(int layer, const std::string& modality) const;

  /// CSV with header layer,modality,expert,top1_count,image_token_count,
  /// text_token_count, rows in key order.
  void write_csv(const std::filesystem::path& path) const;
  static ActivationTrace read_csv(const std::filesystem::path& path);
};

/// Low-rank additive adapter for one weight matrix: the effective weight is
/// W + (alpha / rank) * down * up with W frozen. up is zero-initialized, so
/// a freshly adapted layer computes exactly what the base layer computed.
struct LoraAdapter {
  std::string target;  // parameter name of the adapted weight
  int rank = 0;
  double alpha = 1.0;
  std::shared_ptr<Tensor> down;  // (d_in, rank)
  std::shared_ptr<Tensor> up;    // (rank, d_out)

  double scaling() const { return alpha / static_cast<double>(rank); }
};

}  // namespace micromoe
