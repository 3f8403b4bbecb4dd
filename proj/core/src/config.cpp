#include "micromoe/config.hpp"

#include <cmath>
#include <stdexcept>

#include "micromoe/serialize.hpp"

namespace micromoe {

long PhaseParams::resolve_steps(long split_size) const {
  if (steps > 0) return steps;
  if (epochs > 0.0) {
    long per_epoch = (split_size + batch - 1) / batch;
    long n = static_cast<long>(std::ceil(epochs * static_cast<double>(per_epoch)));
    return std::max<long>(n, 1);
  }
  throw std::invalid_argument("phase needs steps or epochs");
}

namespace {

nlohmann::json phase_to_json(const PhaseParams& p) {
  return {{"steps", p.steps},
          {"epochs", p.epochs},
          {"lr", p.lr},
          {"batch", p.batch},
          {"warmup", p.warmup},
          {"min_lr", p.min_lr},
          {"weight_decay", p.weight_decay},
          {"save_every", p.save_every},
          {"labels_per_modality", p.labels_per_modality}};
}

PhaseParams phase_from_json(const nlohmann::json& j) {
  PhaseParams p;
  p.steps = j.value("steps", 0L);
  p.epochs = j.value("epochs", 0.0);
  p.lr = j.value("lr", 2e-3);
  p.batch = j.value("batch", 8);
  p.warmup = j.value("warmup", 20L);
  p.min_lr = j.value("min_lr", 2e-4);
  p.weight_decay = j.value("weight_decay", 0.0);
  p.save_every = j.value("save_every", 0L);
  p.labels_per_modality = j.value("labels_per_modality", 25);
  if (p.batch < 1) throw std::invalid_argument("batch must be >= 1");
  return p;
}

}  // namespace

nlohmann::json RunConfig::to_json() const {
  nlohmann::json phases_json;
  for (const auto& [name, p] : phases) phases_json[name] = phase_to_json(p);
  return {{"seed", seed},
          {"data_dir", data_dir},
          {"model", model.to_json()},
          {"phases", phases_json},
          {"phase3_train_non_ffn", phase3_train_non_ffn},
          {"eval_max_new", eval_max_new},
          {"init_checkpoint", init_checkpoint},
          {"router_checkpoint", router_checkpoint}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig cfg = default_run_config();
  if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("data_dir")) cfg.data_dir = j["data_dir"].get<std::string>();
  if (j.contains("model")) cfg.model = ModelConfig::from_json(j["model"]);
  if (j.contains("phases"))
    for (const auto& [name, pj] : j["phases"].items())
      cfg.phases[name] = phase_from_json(pj);
  if (j.contains("phase3_train_non_ffn"))
    cfg.phase3_train_non_ffn = j["phase3_train_non_ffn"].get<bool>();
  if (j.contains("eval_max_new"))
    cfg.eval_max_new = j["eval_max_new"].get<int>();
  if (j.contains("init_checkpoint"))
    cfg.init_checkpoint = j["init_checkpoint"].get<std::string>();
  if (j.contains("router_checkpoint"))
    cfg.router_checkpoint = j["router_checkpoint"].get<std::string>();
  return cfg;
}

std::string RunConfig::hash() const {
  // Checkpoint cadence is operational, not part of the experiment identity:
  // a resumed run must hash equal to the uninterrupted one.
  nlohmann::json j = to_json();
  for (auto& [name, phase] : j["phases"].items()) phase["save_every"] = 0;
  return config_hash(j);
}

const PhaseParams& RunConfig::phase(const std::string& id) const {
  auto it = phases.find(id);
  if (it == phases.end())
    throw std::invalid_argument("config has no phase '" + id + "'");
  return it->second;
}

RunConfig default_run_config() {
  RunConfig cfg;
  cfg.model.transformer.d_model = 64;
  cfg.model.transformer.n_layers = 4;
  cfg.model.transformer.n_heads = 4;
  cfg.model.transformer.ffn_hidden = 128;
  cfg.model.transformer.max_seq = 64;
  cfg.model.transformer.moe_layers = {1, 3};
  cfg.model.transformer.vocab_size = 512;

  // Step budgets keep the 1:3:9 phase ratio at desk scale.
  PhaseParams align;
  align.steps = 220;
  align.lr = 5e-3;
  align.batch = 8;
  align.warmup = 20;
  align.min_lr = 5e-4;

  PhaseParams instruct = align;
  instruct.steps = 660;
  instruct.lr = 2e-3;
  instruct.min_lr = 2e-4;

  PhaseParams router;
  router.steps = 1200;
  router.lr = 1e-1;
  router.batch = 32;
  router.warmup = 20;
  router.min_lr = 1e-2;

  PhaseParams moe = instruct;
  moe.steps = 1980;
  moe.lr = 3e-3;
  moe.min_lr = 3e-4;

  cfg.phases = {{"align", align},
                {"instruct", instruct},
                {"router", router},
                {"moe", moe}};
  return cfg;
}

ModelConfig dense_variant(const ModelConfig& cfg) {
  ModelConfig dense = cfg;
  dense.transformer.moe_layers.clear();
  return dense;
}

}  // namespace micromoe
