#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "micromoe/optim.hpp"
#include "micromoe/param.hpp"

namespace micromoe {

/// Optimizer state carried inside a checkpoint.
struct OptimSnapshot {
  long step = 0;
  std::map<std::string, AdamW::Moments> moments;
};

/// Self-describing checkpoint: a JSON header (names, shapes, freeze flags,
/// training metadata, an opaque model-config blob) followed by one raw
/// little-endian float64 payload. Save/load round-trips are bit-exact.
struct Checkpoint {
  std::string phase;  // "align", "instruct", "router", "moe"
  long step = 0;
  std::string config_hash;
  std::uint64_t corpus_seed = 0;
  nlohmann::json model_config;  // owned by the model layer
  ParamSet params;
  std::optional<OptimSnapshot> optim;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// FNV-1a hash of a canonical JSON dump, as a 16-digit hex string.
std::string config_hash(const nlohmann::json& j);

}  // namespace micromoe
