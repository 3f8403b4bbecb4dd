#pragma once

#include <cstdint>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "micromoe/model.hpp"

namespace micromoe {

/// Per-phase training knobs. Steps may be given directly or derived from
/// epochs over the phase's split (steps = epochs * ceil(n / batch)).
struct PhaseParams {
  long steps = 0;
  double epochs = 0.0;  // used when steps == 0
  double lr = 2e-3;
  int batch = 8;
  long warmup = 20;
  double min_lr = 2e-4;
  double weight_decay = 0.0;
  long save_every = 0;  // 0: only the final checkpoint
  int labels_per_modality = 25;  // router phase only

  long resolve_steps(long split_size) const;
};

/// Fully resolved run configuration. It deliberately excludes output paths,
/// so its hash identifies the run semantics and resumed runs can verify they
/// continue the same experiment.
struct RunConfig {
  std::uint64_t seed = 1234;
  std::string data_dir;
  ModelConfig model;  // transformer.vocab_size is filled from the corpus
  std::map<std::string, PhaseParams> phases;  // align, instruct, router, moe
  bool phase3_train_non_ffn = false;
  int eval_max_new = 8;
  std::string init_checkpoint;
  std::string router_checkpoint;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  std::string hash() const;

  const PhaseParams& phase(const std::string& id) const;
};

/// The toy defaults: d_model 64, 4 layers, 4 heads, FFN 128, MoE at layers
/// {1, 3} with 4 experts top-2, and phase step budgets in the 1:3:9 ratio.
RunConfig default_run_config();

/// The dense (pre-expansion) variant: same transformer, no MoE layers.
ModelConfig dense_variant(const ModelConfig& cfg);

}  // namespace micromoe
