#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "micromoe/graph.hpp"
#include "micromoe/moe.hpp"
#include "micromoe/param.hpp"
#include "micromoe/vision.hpp"
#include "micromoe/vocab.hpp"

namespace micromoe {

struct Checkpoint;  // serialize.hpp owns the container format

struct TransformerConfig {
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int ffn_hidden = 128;
  int vocab_size = 0;
  int max_seq = 64;
  std::vector<int> moe_layers;  // empty for a dense model
};

struct VisionConfig {
  int image_size = 16;
  int patch_size = 4;
  int d_vision = 32;
};

struct MoeSpec {
  int experts = 4;
  int top_k = 2;
  int router_depth = 1;
  int router_hidden = 32;
  bool meta_expert = true;
  bool learned_router = false;   // ablation: train the router with the LM loss
  double aux_coefficient = 0.01; // load-balancing weight for the learned router
};

struct ModelConfig {
  TransformerConfig transformer;
  VisionConfig vision;
  MoeSpec moe;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

/// One combined sequence: image tokens (when an image is present) followed
/// by text tokens. prefix_len indexes the combined sequence; the loss covers
/// positions >= prefix_len only.
struct Sequence {
  std::optional<SyntheticImage> image;
  std::vector<int> text;  // token ids after the image block
  int prefix_len = 0;
  std::string modality;
};

using SequenceBatch = std::vector<Sequence>;

/// Side hooks for a forward pass.
struct ForwardOptions {
  ActivationTrace* trace = nullptr;
  std::vector<Val>* aux_terms = nullptr;  // one load-balancing term per MoE layer
  std::function<void(int layer, const Tensor& hidden)> slot_input;
  std::function<void(int layer, const Tensor& hidden)> slot_output;
};

/// The miniature multimodal causal LM.
///
/// Architecture: frozen linear patch encoder -> two-layer GeLU projector ->
/// token+position embeddings -> pre-norm multi-head attention blocks whose
/// feed-forward slot is either a dense GeLU FFN or a routed expert bank with
/// an always-active meta expert -> final layer norm -> vocabulary head.
/// The FFN/MoE sublayer maps x to x + f(x) directly on the residual stream,
/// so a one-expert bank with a zeroed meta expert reproduces the dense block
/// bit for bit.
class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t init_seed);

  const ModelConfig& config() const { return cfg_; }
  bool is_moe() const { return !cfg_.transformer.moe_layers.empty(); }
  bool expanded_from_dense() const { return expanded_; }

  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  Router& router();
  const Router& router() const;

  /// Logits (seq_len, vocab) for one sequence on the tape. Throws on
  /// overlong sequences.
  Val build_logits(Graph& g, const Sequence& seq,
                   const ForwardOptions& opts = {}) const;

  /// Plain forward returning the logits tensor.
  Tensor lm_forward(const Sequence& seq,
                    const ForwardOptions& opts = {}) const;

  /// Sum of -log p over response positions plus the number of positions.
  /// Throws when the sequence has no response positions.
  std::pair<Val, long> build_nll_sum(Graph& g, const Sequence& seq,
                                     const ForwardOptions& opts = {}) const;

  /// Mean NLL over the batch's response positions, as a plain value.
  double nll_loss(const SequenceBatch& batch) const;

  /// Argmax decoding, ties to the lower token id, stops at EOS or max_new.
  /// The prompt text must end at the prefix; throws when the prompt cannot
  /// fit with max_new tokens of headroom.
  std::vector<int> greedy_generate(const Sequence& prompt, int max_new) const;

  std::size_t image_token_count() const;

  // Instrumentation: per-layer expert invocation counters (index experts_
  // is the meta expert) and a running check that selected gate weights sum
  // to one.
  struct RoutingAudit {
    std::uint64_t tokens = 0;
    double max_gate_sum_error = 0.0;
  };
  const RoutingAudit& routing_audit() const { return audit_; }
  void reset_routing_audit() { audit_ = {}; }
  const std::map<int, std::vector<std::uint64_t>>& expert_invocations() const {
    return invocations_;
  }
  void reset_expert_invocations();

  const std::map<std::string, LoraAdapter>& lora_adapters() const {
    return lora_;
  }

  // Sublayer builders, exposed for block-level gradient checks.
  // attention: pre-norm multi-head attention with residual.
  // ffn: the dense feed-forward (no residual).
  // moe_sublayer: x + selected experts + meta expert, routing on x itself.
  Val attention(Graph& g, Val x, int layer) const;
  Val ffn(Graph& g, Val x, const std::string& prefix) const;
  Val moe_sublayer(Graph& g, Val x, int layer,
                   const std::string& modality = "", std::size_t n_image = 0,
                   const ForwardOptions& opts = {}) const;

  friend Model expand_from_dense(const Model& dense, const MoeSpec& spec,
                                 const std::vector<int>& moe_layer_indices,
                                 const Router& router);
  friend void apply_lora(Model& model, const std::vector<std::string>& targets,
                         int rank, double alpha, std::uint64_t seed);
  friend Model model_from_checkpoint(const Checkpoint& ck);
  friend void reinit_router(Model& model, std::uint64_t seed);

 private:
  struct NoInitTag {};
  Model(ModelConfig cfg, NoInitTag);

  void register_params(std::uint64_t seed, bool random_init);
  Val linear(Graph& g, Val x, const std::string& w, const std::string& b) const;

  ModelConfig cfg_;
  ParamSet params_;
  VisionEncoder vision_;
  Projector projector_;
  Router router_;
  bool expanded_ = false;
  std::map<std::string, LoraAdapter> lora_;

  mutable RoutingAudit audit_;
  mutable std::map<int, std::vector<std::uint64_t>> invocations_;
};

/// MoE model whose experts and meta expert at every listed layer are bitwise
/// copies of the dense model's FFN there; all other parameters are bitwise
/// copies too. The router must be trained and frozen, and its output dim
/// must equal the expert count.
Model expand_from_dense(const Model& dense, const MoeSpec& spec,
                        const std::vector<int>& moe_layer_indices,
                        const Router& router);

/// Attaches rank-r adapters to every parameter matching one of the target
/// patterns, freezes the base weights and registers <name>.lora_down /
/// <name>.lora_up as the only trainable parameters of those layers.
void apply_lora(Model& model, const std::vector<std::string>& targets,
                int rank, double alpha, std::uint64_t seed);

/// Runs every sequence through the model and accumulates top-1 routing
/// counts. Sequences must carry modality labels.
ActivationTrace trace_activations(const Model& model,
                                  const SequenceBatch& batch);

struct ParamCount {
  std::size_t total = 0;
  std::size_t activated = 0;
  std::map<std::string, std::size_t> by_module;
  std::string note;
};

/// Exact enumeration of stored and per-forward-activated parameters.
/// Activated excludes the (E - K) unselected experts at each MoE layer; the
/// meta expert and the router always count as activated.
ParamCount count_parameters(const Model& model, int top_k);

/// Re-randomizes the router weights and marks them trainable. Used by the
/// learned-router ablation, which trains the same MLP end-to-end with the
/// LM loss instead of attaching the frozen modality classifier.
void reinit_router(Model& model, std::uint64_t seed);

// Checkpoint glue.
Model model_from_checkpoint(const Checkpoint& ck);
void copy_params_into_checkpoint(const Model& model, Checkpoint& ck);

}  // namespace micromoe
