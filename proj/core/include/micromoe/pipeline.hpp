#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "micromoe/config.hpp"
#include "micromoe/evaluate.hpp"
#include "micromoe/model.hpp"
#include "micromoe/serialize.hpp"
#include "micromoe/synthdata.hpp"

namespace micromoe {

/// Raised when a training step produces a non-finite loss; carries the step.
class TrainingNanError : public NumericalError {
 public:
  TrainingNanError(long at_step, const std::string& msg)
      : NumericalError(msg), step(at_step) {}
  long step;
};

struct LossRow {
  long step;
  double lr;
  double loss;
};

struct PhaseOutcome {
  Checkpoint checkpoint;
  std::vector<LossRow> losses;
  double final_loss = 0.0;
};

void write_loss_csv(const std::vector<LossRow>& rows,
                    const std::filesystem::path& path);

/// Mid-phase snapshot sink: called after every save_every steps with a
/// resumable checkpoint.
using SaveHook = std::function<void(const Checkpoint&)>;

/// Optional resume point: the optimizer state and step of a mid-phase
/// checkpoint whose parameters have already been loaded into the model.
struct ResumePoint {
  long step = 0;
  OptimSnapshot optim;
};

/// Phase 1: alignment. Trains only the projector on caption continuation;
/// every non-projector parameter is left frozen and byte-identical.
PhaseOutcome run_phase1(Model& model, const std::vector<Record>& corpus,
                        const RunConfig& cfg, const Vocabulary& vocab,
                        std::uint64_t corpus_seed,
                        const SaveHook& save = nullptr,
                        const ResumePoint* resume = nullptr);

/// Phase 2: instruction tuning. Trains everything except the vision
/// encoder on instruction/response pairs.
PhaseOutcome run_phase2(Model& model, const std::vector<Record>& corpus,
                        const RunConfig& cfg, const Vocabulary& vocab,
                        std::uint64_t corpus_seed,
                        const SaveHook& save = nullptr,
                        const ResumePoint* resume = nullptr);

/// Phase 3: sparse expert tuning on a model produced by expand_from_dense.
/// By default only experts and the meta expert train; the router and vision
/// encoder stay frozen (phase3_train_non_ffn widens the set). A learned-
/// router model instead trains the router end-to-end with a load-balancing
/// term added to the loss.
PhaseOutcome run_phase3(Model& model, const std::vector<Record>& corpus,
                        const RunConfig& cfg, const Vocabulary& vocab,
                        std::uint64_t corpus_seed,
                        const SaveHook& save = nullptr,
                        const ResumePoint* resume = nullptr);

struct RouterOutcome {
  Router router;            // frozen, ready for expand_from_dense
  ParamSet params;          // owns the router tensors
  double heldout_accuracy = 0.0;
  double silhouette_score = 0.0;
  Checkpoint checkpoint;
  std::vector<LossRow> losses;
};

/// Trains the modality-classifier router on hidden states collected at the
/// future MoE slots of the frozen source model, supervising the mean-pooled
/// sequence logits. Held-out accuracy and the silhouette of held-out
/// sequence-level router embeddings are reported alongside.
RouterOutcome train_router(const Model& source_model,
                           const std::string& source_phase,
                           const std::vector<Record>& labeled,
                           const std::vector<Record>& heldout,
                           const RunConfig& cfg, const Vocabulary& vocab,
                           std::uint64_t corpus_seed,
                           const SaveHook& save = nullptr,
                           const Checkpoint* resume = nullptr);

/// Rebuilds a router from its standalone checkpoint.
RouterOutcome router_from_checkpoint(const Checkpoint& ck);

/// First n records per modality, in corpus order.
std::vector<Record> labeled_subset(const std::vector<Record>& records,
                                   int per_modality);

/// Phase-aware checkpoint assembly for LM models.
Checkpoint make_model_checkpoint(const Model& model, const std::string& phase,
                                 long step, const std::string& cfg_hash,
                                 std::uint64_t corpus_seed,
                                 const AdamW* optimizer);

}  // namespace micromoe
