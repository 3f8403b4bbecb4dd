#include "micromoe/pipeline.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>

#include "micromoe/metrics.hpp"
#include "micromoe/rng.hpp"

namespace micromoe {

void write_loss_csv(const std::vector<LossRow>& rows,
                    const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write losses: " + path.string());
  out << "step,lr,loss\n";
  char lr_buf[32], loss_buf[32];
  for (const LossRow& r : rows) {
    std::snprintf(lr_buf, sizeof(lr_buf), "%.10g", r.lr);
    std::snprintf(loss_buf, sizeof(loss_buf), "%.17g", r.loss);
    out << r.step << ',' << lr_buf << ',' << loss_buf << '\n';
  }
}

Checkpoint make_model_checkpoint(const Model& model, const std::string& phase,
                                 long step, const std::string& cfg_hash,
                                 std::uint64_t corpus_seed,
                                 const AdamW* optimizer) {
  Checkpoint ck;
  ck.phase = phase;
  ck.step = step;
  ck.config_hash = cfg_hash;
  ck.corpus_seed = corpus_seed;
  copy_params_into_checkpoint(model, ck);
  if (optimizer) {
    OptimSnapshot snap;
    snap.step = optimizer->step_count();
    snap.moments = optimizer->moments();
    ck.optim = std::move(snap);
  }
  return ck;
}

namespace {

// Applies trainable/frozen masks, keeping adapted base weights frozen and
// adapter halves trainable iff their target matched.
void apply_masks(Model& model, const std::vector<std::string>& trainable,
                 const std::vector<std::string>& frozen) {
  model.params().set_phase_masks(trainable, frozen);
  for (const auto& [target, adapter] : model.lora_adapters()) {
    bool t = false;
    for (const auto& pat : trainable) t = t || name_matches(pat, target);
    for (const auto& pat : frozen) t = t && !name_matches(pat, target);
    model.params().get(target)->requires_grad = false;
    adapter.down->requires_grad = t;
    adapter.up->requires_grad = t;
  }
}

using BatchLossBuilder =
    std::function<Val(Graph&, const std::vector<std::size_t>&)>;

struct StepLoopOutcome {
  std::vector<LossRow> losses;
  OptimSnapshot optim;
  long final_step = 0;
  double final_loss = 0.0;
};

// Deterministic training loop. Batch indices come from a counter-keyed
// stream, so a resumed run replays exactly the steps an uninterrupted run
// would have taken.
StepLoopOutcome run_step_loop(
    ParamSet& params, const PhaseParams& pp, long total_steps,
    std::size_t n_examples, const BatchLossBuilder& build_loss,
    std::uint64_t seed, const std::string& phase_tag,
    const ResumePoint* resume,
    const std::function<void(long, const AdamW&, double)>& on_save) {
  if (n_examples == 0)
    throw std::invalid_argument(phase_tag + ": empty training set");

  AdamW::Config ocfg;
  ocfg.schedule.base_lr = pp.lr;
  ocfg.schedule.min_lr = pp.min_lr;
  ocfg.schedule.warmup_steps = pp.warmup;
  ocfg.schedule.total_steps = total_steps;
  ocfg.weight_decay = pp.weight_decay;
  AdamW opt(ocfg);

  long start = 0;
  if (resume) {
    opt.restore(resume->optim.step, resume->optim.moments);
    start = resume->step;
  }

  StepLoopOutcome out;
  for (long step = start; step < total_steps; ++step) {
    std::vector<std::size_t> batch(static_cast<std::size_t>(pp.batch));
    for (std::size_t i = 0; i < batch.size(); ++i)
      batch[i] = static_cast<std::size_t>(
          derive_stream(seed, "batch:" + phase_tag,
                        static_cast<std::uint64_t>(step), i)
              .next_below(n_examples));

    double loss_value = 0.0;
    try {
      params.zero_grads();
      Graph g;
      Val loss = build_loss(g, batch);
      loss_value = g.value(loss).at(0, 0);
      if (!std::isfinite(loss_value))
        throw NumericalError("non-finite loss");
      g.backward(loss);
      // Sparsity can leave an expert untouched by a whole batch; its
      // gradient is exactly zero, not missing.
      for (const auto& name : params.trainable_names()) {
        auto t = params.get(name);
        if (!t->has_grad()) t->ensure_grad();
      }
      opt.step(params);
    } catch (const NumericalError& e) {
      throw TrainingNanError(step, std::string(e.what()) + " at step " +
                                       std::to_string(step));
    }
    out.losses.push_back({step, opt.config().schedule.lr_at(step), loss_value});
    out.final_loss = loss_value;
    if (pp.save_every > 0 && (step + 1) % pp.save_every == 0 &&
        step + 1 < total_steps && on_save)
      on_save(step + 1, opt, loss_value);
  }
  out.optim.step = opt.step_count();
  out.optim.moments = opt.moments();
  out.final_step = total_steps;
  return out;
}

PhaseOutcome run_lm_phase(const std::string& phase_id, Model& model,
                          const std::vector<Record>& corpus,
                          const RunConfig& cfg, const Vocabulary& vocab,
                          std::uint64_t corpus_seed, const SaveHook& save,
                          const ResumePoint* resume, SequenceStyle style,
                          bool learned_router) {
  const PhaseParams& pp = cfg.phase(phase_id);
  SequenceBatch sequences = sequences_from_records(
      corpus, vocab, model.image_token_count(), style);
  long total_steps = pp.resolve_steps(static_cast<long>(sequences.size()));
  std::string cfg_hash = cfg.hash();

  auto build_loss = [&](Graph& g, const std::vector<std::size_t>& batch) {
    Val total;
    long count = 0;
    std::vector<Val> aux_terms;
    ForwardOptions opts;
    if (learned_router) opts.aux_terms = &aux_terms;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      auto [nll, n] = model.build_nll_sum(g, sequences[batch[i]], opts);
      count += n;
      total = i == 0 ? nll : g.add(total, nll);
    }
    Val loss = g.scale(total, 1.0 / static_cast<double>(count));
    if (!aux_terms.empty()) {
      Val aux = aux_terms[0];
      for (std::size_t i = 1; i < aux_terms.size(); ++i)
        aux = g.add(aux, aux_terms[i]);
      loss = g.add(loss, g.scale(aux, cfg.model.moe.aux_coefficient /
                                          static_cast<double>(
                                              aux_terms.size())));
    }
    return loss;
  };

  auto on_save = [&](long step, const AdamW& opt, double) {
    if (!save) return;
    save(make_model_checkpoint(model, phase_id, step, cfg_hash, corpus_seed,
                               &opt));
  };

  StepLoopOutcome loop =
      run_step_loop(model.params(), pp, total_steps, sequences.size(),
                    build_loss, cfg.seed, phase_id, resume, on_save);

  PhaseOutcome out;
  out.losses = std::move(loop.losses);
  out.final_loss = loop.final_loss;
  AdamW final_opt(AdamW::Config{});
  final_opt.restore(loop.optim.step, loop.optim.moments);
  out.checkpoint = make_model_checkpoint(model, phase_id, loop.final_step,
                                         cfg_hash, corpus_seed, &final_opt);
  return out;
}

}  // namespace

PhaseOutcome run_phase1(Model& model, const std::vector<Record>& corpus,
                        const RunConfig& cfg, const Vocabulary& vocab,
                        std::uint64_t corpus_seed, const SaveHook& save,
                        const ResumePoint* resume) {
  if (model.is_moe())
    throw std::invalid_argument("phase 1 expects the dense model");
  apply_masks(model, {"projector.*"}, {});
  for (const auto& name : model.params().trainable_names())
    if (name.rfind("projector.", 0) != 0)
      throw std::invalid_argument(
          "phase 1 trainable set includes non-projector name: " + name);
  return run_lm_phase("align", model, corpus, cfg, vocab, corpus_seed, save,
                      resume, SequenceStyle::kAlign, false);
}

PhaseOutcome run_phase2(Model& model, const std::vector<Record>& corpus,
                        const RunConfig& cfg, const Vocabulary& vocab,
                        std::uint64_t corpus_seed, const SaveHook& save,
                        const ResumePoint* resume) {
  if (model.is_moe())
    throw std::invalid_argument("phase 2 expects the dense model");
  apply_masks(model, {"projector.*", "lm.*"}, {"vision.*"});
  return run_lm_phase("instruct", model, corpus, cfg, vocab, corpus_seed, save,
                      resume, SequenceStyle::kInstruct, false);
}

PhaseOutcome run_phase3(Model& model, const std::vector<Record>& corpus,
                        const RunConfig& cfg, const Vocabulary& vocab,
                        std::uint64_t corpus_seed, const SaveHook& save,
                        const ResumePoint* resume) {
  if (!model.is_moe() || !model.expanded_from_dense())
    throw std::invalid_argument(
        "phase 3 requires a model produced by expand_from_dense");
  bool learned = model.config().moe.learned_router;
  if (!learned && !model.router().frozen)
    throw std::invalid_argument("phase 3 requires a frozen router");

  std::vector<std::string> trainable, frozen;
  if (cfg.phase3_train_non_ffn) {
    trainable = {"lm.*", "projector.*"};
    frozen = {"vision.*", "router.*"};
  } else {
    trainable = {"lm.layer*.moe.*"};
    frozen = {};
  }
  if (learned) trainable.push_back("router.*");
  apply_masks(model, trainable, frozen);
  return run_lm_phase("moe", model, corpus, cfg, vocab, corpus_seed, save,
                      resume, SequenceStyle::kInstruct, learned);
}

namespace {

// Hidden states entering each future MoE slot, one example per
// (record, slot) pair.
struct RouterExample {
  Tensor hidden;  // (seq, d_model)
  int label;
};

std::vector<RouterExample> collect_router_examples(
    const Model& source, const std::vector<Record>& records,
    const Vocabulary& vocab, const std::vector<int>& slots, int experts) {
  std::vector<RouterExample> out;
  for (const Record& rec : records) {
    int label = -1;
    const auto& names = modality_names();
    for (std::size_t m = 0; m < names.size(); ++m)
      if (names[m] == rec.modality) label = static_cast<int>(m);
    if (label < 0)
      throw std::invalid_argument("router label outside modality set: " +
                                  rec.modality);
    label %= experts;  // modality -> expert mapping when E != 4

    Sequence seq = sequence_from_record(rec, vocab, source.image_token_count(),
                                        SequenceStyle::kInstruct);
    ForwardOptions opts;
    std::map<int, Tensor> captured;
    opts.slot_input = [&](int layer, const Tensor& hidden) {
      captured[layer] = hidden;
    };
    source.lm_forward(seq, opts);
    for (int slot : slots) {
      auto it = captured.find(slot);
      if (it == captured.end())
        throw std::logic_error("slot input not captured");
      out.push_back({it->second, label});
    }
  }
  return out;
}

Router make_router(ParamSet& params, const ModelConfig& mc,
                   std::uint64_t seed) {
  Router r;
  r.depth = mc.moe.router_depth;
  std::size_t d = static_cast<std::size_t>(mc.transformer.d_model);
  std::size_t e = static_cast<std::size_t>(mc.moe.experts);
  auto init = [&](const std::string& name, std::size_t rows, std::size_t cols,
                  double sigma) {
    Tensor t(rows, cols);
    if (sigma > 0.0) {
      RngStream rng = derive_stream(seed, "router-init:" + name);
      for (double& x : t.values()) x = sigma * rng.next_normal();
    }
    return params.add(name, std::move(t));
  };
  r.in_shift = init("router.in_shift", 1, d, 0.0);
  r.in_scale = init("router.in_scale", 1, d, 0.0);
  std::fill(r.in_scale->values().begin(), r.in_scale->values().end(), 1.0);
  r.in_shift->requires_grad = false;
  r.in_scale->requires_grad = false;
  if (r.depth == 1) {
    r.w1 = init("router.l1.w", d, e, 0.02);
    r.b1 = init("router.l1.b", 1, e, 0.0);
  } else if (r.depth == 2) {
    std::size_t h = static_cast<std::size_t>(mc.moe.router_hidden);
    r.w1 = init("router.l1.w", d, h, 0.02);
    r.b1 = init("router.l1.b", 1, h, 0.0);
    r.w2 = init("router.l2.w", h, e, 0.02);
    r.b2 = init("router.l2.b", 1, e, 0.0);
  } else {
    throw std::invalid_argument("router depth must be 1 or 2");
  }
  return r;
}

// Sequence-level router embedding: the class-probability vector of the
// mean-pooled logits, averaged over slots. Confident routers concentrate
// sequences near the simplex corners, which the silhouette rewards.
std::vector<double> router_embedding(const Router& router,
                                     const std::vector<const Tensor*>& slots) {
  std::size_t e = static_cast<std::size_t>(router.output_dim());
  std::vector<double> out(e, 0.0);
  for (const Tensor* hidden : slots) {
    Graph g;
    Val logits = router_logits(g, g.constant(*hidden), router);
    Val probs = g.softmax_rows(sequence_logits(g, logits));
    for (std::size_t k = 0; k < e; ++k)
      out[k] += g.value(probs).at(0, k) / static_cast<double>(slots.size());
  }
  return out;
}

}  // namespace

RouterOutcome train_router(const Model& source_model,
                           const std::string& source_phase,
                           const std::vector<Record>& labeled,
                           const std::vector<Record>& heldout,
                           const RunConfig& cfg, const Vocabulary& vocab,
                           std::uint64_t corpus_seed, const SaveHook& save,
                           const Checkpoint* resume) {
  if (labeled.empty())
    throw std::invalid_argument("train_router: empty labeled subset");
  if (source_phase != "instruct")
    std::cerr << "warning: router trained on embeddings from a model in "
                 "phase '"
              << source_phase << "', not the instruction-tuned one\n";
  const std::vector<int>& slots = cfg.model.transformer.moe_layers;
  if (slots.empty())
    throw std::invalid_argument("train_router: config lists no MoE layers");

  RouterOutcome out;
  out.router = make_router(out.params, cfg.model, cfg.seed);
  ResumePoint resume_point;
  const ResumePoint* resume_ptr = nullptr;
  if (resume) {
    for (const auto& [name, tensor] : resume->params.entries())
      out.params.get(name)->values() = tensor->values();
    if (!resume->optim)
      throw std::invalid_argument("router resume checkpoint lacks optimizer state");
    resume_point.step = resume->step;
    resume_point.optim = *resume->optim;
    resume_ptr = &resume_point;
  }

  auto examples = collect_router_examples(source_model, labeled, vocab, slots,
                                          cfg.model.moe.experts);

  // Estimate the fixed input scaler from the training embeddings; the
  // residual stream is far from per-dimension zero mean / unit scale, and a
  // fresh MLP trains poorly on it otherwise.
  if (!resume) {
    std::size_t d = static_cast<std::size_t>(cfg.model.transformer.d_model);
    std::vector<double> mean(d, 0.0), var(d, 0.0);
    std::size_t tokens = 0;
    for (const RouterExample& ex : examples) tokens += ex.hidden.rows();
    for (const RouterExample& ex : examples)
      for (std::size_t r = 0; r < ex.hidden.rows(); ++r)
        for (std::size_t c = 0; c < d; ++c)
          mean[c] += ex.hidden.at(r, c) / static_cast<double>(tokens);
    for (const RouterExample& ex : examples)
      for (std::size_t r = 0; r < ex.hidden.rows(); ++r)
        for (std::size_t c = 0; c < d; ++c) {
          double dd = ex.hidden.at(r, c) - mean[c];
          var[c] += dd * dd / static_cast<double>(tokens);
        }
    for (std::size_t c = 0; c < d; ++c) {
      out.router.in_shift->at(0, c) = -mean[c];
      out.router.in_scale->at(0, c) = 1.0 / std::sqrt(var[c] + 1e-6);
    }
  }

  const PhaseParams& pp = cfg.phase("router");
  long total_steps = pp.resolve_steps(static_cast<long>(examples.size()));

  auto build_loss = [&](Graph& g, const std::vector<std::size_t>& batch) {
    Val total;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const RouterExample& ex = examples[batch[i]];
      Val logits = router_logits(g, g.constant(ex.hidden), out.router);
      Val seq = sequence_logits(g, logits);
      Val nll = g.nll_sum(seq, {{0, ex.label}});
      total = i == 0 ? nll : g.add(total, nll);
    }
    return g.scale(total, 1.0 / static_cast<double>(batch.size()));
  };

  std::string cfg_hash = cfg.hash();
  auto router_checkpoint = [&](long step, const AdamW* opt) {
    Checkpoint ck;
    ck.phase = "router";
    ck.step = step;
    ck.config_hash = cfg_hash;
    ck.corpus_seed = corpus_seed;
    ck.model_config = {
        {"router_config", cfg.model.to_json()},
        {"router_frozen", true}};
    for (const auto& [name, tensor] : out.params.entries()) {
      auto copy = ck.params.add(name, *tensor);
      copy->requires_grad = tensor->requires_grad;
      copy->zero_grad();
    }
    if (opt) {
      OptimSnapshot snap;
      snap.step = opt->step_count();
      snap.moments = opt->moments();
      ck.optim = std::move(snap);
    }
    return ck;
  };

  auto on_save = [&](long step, const AdamW& opt, double) {
    if (save) save(router_checkpoint(step, &opt));
  };

  StepLoopOutcome loop =
      run_step_loop(out.params, pp, total_steps, examples.size(), build_loss,
                    cfg.seed, "router", resume_ptr, on_save);
  out.losses = std::move(loop.losses);

  // Freeze before reporting; the returned router never trains again.
  for (const auto& name : out.params.names())
    out.params.get(name)->requires_grad = false;
  out.router.frozen = true;

  // Held-out metrics: sequence prediction is the argmax of the mean-pooled
  // logits, averaged over slots; embeddings feed the silhouette.
  if (!heldout.empty()) {
    std::vector<std::vector<double>> embeddings;
    std::vector<int> labels;
    std::size_t correct = 0;
    for (const Record& rec : heldout) {
      Sequence seq = sequence_from_record(
          rec, vocab, source_model.image_token_count(),
          SequenceStyle::kInstruct);
      ForwardOptions opts;
      std::map<int, Tensor> captured;
      opts.slot_input = [&](int layer, const Tensor& hidden) {
        captured[layer] = hidden;
      };
      source_model.lm_forward(seq, opts);
      std::vector<const Tensor*> slot_tensors;
      for (int slot : slots) slot_tensors.push_back(&captured.at(slot));
      std::vector<double> emb = router_embedding(out.router, slot_tensors);

      int label = -1;
      const auto& names = modality_names();
      for (std::size_t m = 0; m < names.size(); ++m)
        if (names[m] == rec.modality) label = static_cast<int>(m);
      if (label < 0)
        throw std::invalid_argument("router label outside modality set");
      label %= cfg.model.moe.experts;
      if (argmax_low(emb.data(), emb.size()) == label) ++correct;
      embeddings.push_back(std::move(emb));
      labels.push_back(label);
    }
    out.heldout_accuracy =
        static_cast<double>(correct) / static_cast<double>(heldout.size());
    std::set<int> distinct(labels.begin(), labels.end());
    out.silhouette_score =
        distinct.size() >= 2 ? silhouette(embeddings, labels) : 0.0;
  }

  out.checkpoint = router_checkpoint(loop.final_step, nullptr);
  {
    AdamW final_opt(AdamW::Config{});
    final_opt.restore(loop.optim.step, loop.optim.moments);
    OptimSnapshot snap;
    snap.step = final_opt.step_count();
    snap.moments = final_opt.moments();
    out.checkpoint.optim = std::move(snap);
  }
  return out;
}

RouterOutcome router_from_checkpoint(const Checkpoint& ck) {
  if (ck.phase != "router")
    throw std::invalid_argument("not a router checkpoint (phase " + ck.phase +
                                ")");
  ModelConfig mc = ModelConfig::from_json(ck.model_config.at("router_config"));
  RouterOutcome out;
  out.router = make_router(out.params, mc, 0);
  for (const auto& [name, tensor] : ck.params.entries()) {
    auto dst = out.params.get(name);
    if (!dst->same_shape(*tensor))
      throw std::runtime_error("router checkpoint shape mismatch at " + name);
    dst->values() = tensor->values();
    dst->requires_grad = false;
  }
  out.router.frozen = ck.model_config.value("router_frozen", true);
  out.checkpoint = ck;
  return out;
}

std::vector<Record> labeled_subset(const std::vector<Record>& records,
                                   int per_modality) {
  std::map<std::string, int> taken;
  std::vector<Record> out;
  for (const Record& r : records) {
    if (taken[r.modality] >= per_modality) continue;
    taken[r.modality] += 1;
    out.push_back(r);
  }
  return out;
}

}  // namespace micromoe
