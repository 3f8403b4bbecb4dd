// Command-line entry point: corpus generation, the training phases,
// evaluation, activation tracing, parameter accounting and the ablation
// grid. Exit codes: 0 success, 2 configuration error, 3 missing
// prerequisite, 4 numerical failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "micromoe/config.hpp"
#include "micromoe/evaluate.hpp"
#include "micromoe/model.hpp"
#include "micromoe/pipeline.hpp"
#include "micromoe/serialize.hpp"
#include "micromoe/synthdata.hpp"

namespace fs = std::filesystem;
using namespace micromoe;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kMissingPrerequisite = 3;
constexpr int kNumericalFailure = 4;

class CliError : public std::runtime_error {
 public:
  CliError(int code, const std::string& msg)
      : std::runtime_error(msg), exit_code(code) {}
  int exit_code;
};

struct CorpusBundle {
  std::vector<Record> records;
  DatasetManifest manifest;
  Vocabulary vocab = corpus_vocabulary();
};

CorpusBundle load_corpus(const fs::path& data_dir) {
  if (!fs::exists(data_dir / "corpus.jsonl"))
    throw CliError(kConfigError,
                   "no corpus.jsonl under " + data_dir.string());
  CorpusBundle bundle;
  bundle.records = load_records(data_dir / "corpus.jsonl");
  std::ifstream mf(data_dir / "manifest.json");
  if (!mf)
    throw CliError(kConfigError,
                   "no manifest.json under " + data_dir.string());
  bundle.manifest = DatasetManifest::from_json(nlohmann::json::parse(mf));
  bundle.vocab = Vocabulary::load(data_dir / "vocab.txt");
  if (bundle.vocab.content_hash() != bundle.manifest.vocabulary_hash)
    throw CliError(kConfigError, "vocabulary hash mismatch in " +
                                     data_dir.string());
  return bundle;
}

void write_json_file(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

void write_manifest(const fs::path& out_dir, const std::string& phase,
                    const RunConfig& cfg, std::uint64_t corpus_seed,
                    const nlohmann::json& final_metrics) {
  write_json_file(out_dir / "manifest.json",
                  {{"phase", phase},
                   {"config", cfg.to_json()},
                   {"config_hash", cfg.hash()},
                   {"corpus_seed", corpus_seed},
                   {"final_metrics", final_metrics}});
}

// ---------------------------------------------------------------- gen-data

int cmd_gen_data(std::uint64_t seed, const std::string& out,
                 const std::vector<std::string>& size_args) {
  std::map<std::string, int> sizes = {
      {"align", 64}, {"instruct", 64}, {"tune", 64}, {"test", 32}};
  for (const std::string& arg : size_args) {
    std::size_t start = 0;
    while (start < arg.size()) {
      std::size_t end = arg.find(',', start);
      if (end == std::string::npos) end = arg.size();
      std::string pair = arg.substr(start, end - start);
      std::size_t eq = pair.find('=');
      if (eq == std::string::npos)
        throw CliError(kConfigError, "bad --sizes entry: " + pair);
      try {
        sizes[pair.substr(0, eq)] = std::stoi(pair.substr(eq + 1));
      } catch (const std::exception&) {
        throw CliError(kConfigError, "bad --sizes entry: " + pair);
      }
      start = end + 1;
    }
  }
  try {
    GeneratedCorpus corpus = generate_corpus(seed, sizes);
    write_corpus(corpus, out);
  } catch (const std::invalid_argument& e) {
    throw CliError(kConfigError, e.what());
  }
  std::cout << "wrote corpus to " << out << "\n";
  return kOk;
}

// ------------------------------------------------------------------- train

struct TrainArgs {
  std::string phase;
  std::string config_path;
  std::string data_dir;
  std::string out_dir;
  std::string init_ckpt;
  std::string router_ckpt;
  std::string resume_ckpt;
  std::optional<std::uint64_t> seed;
  std::optional<long> steps;
  std::optional<long> save_every;
};

RunConfig resolve_config(const TrainArgs& args) {
  RunConfig cfg = default_run_config();
  if (!args.config_path.empty()) {
    std::ifstream in(args.config_path);
    if (!in)
      throw CliError(kConfigError, "cannot open config " + args.config_path);
    try {
      cfg = RunConfig::from_json(nlohmann::json::parse(in));
    } catch (const std::exception& e) {
      throw CliError(kConfigError,
                     std::string("bad config file: ") + e.what());
    }
  }
  // Flags override file values.
  if (!args.data_dir.empty()) cfg.data_dir = args.data_dir;
  if (args.seed) cfg.seed = *args.seed;
  if (!args.init_ckpt.empty()) cfg.init_checkpoint = args.init_ckpt;
  if (!args.router_ckpt.empty()) cfg.router_checkpoint = args.router_ckpt;
  if (args.steps && cfg.phases.count(args.phase))
    cfg.phases[args.phase].steps = *args.steps;
  if (args.save_every && cfg.phases.count(args.phase))
    cfg.phases[args.phase].save_every = *args.save_every;
  if (cfg.data_dir.empty())
    throw CliError(kConfigError, "no data directory (--data or config)");
  return cfg;
}

Checkpoint load_ckpt_or_die(const std::string& path, const char* what) {
  if (path.empty())
    throw CliError(kMissingPrerequisite,
                   std::string("missing prerequisite: ") + what);
  if (!fs::exists(path))
    throw CliError(kMissingPrerequisite,
                   std::string(what) + " not found: " + path);
  return load_checkpoint(path);
}

int cmd_train(const TrainArgs& args) {
  RunConfig cfg = resolve_config(args);
  if (args.out_dir.empty()) throw CliError(kConfigError, "missing --out");
  fs::create_directories(args.out_dir);
  fs::path out_dir = args.out_dir;

  CorpusBundle corpus = load_corpus(cfg.data_dir);
  cfg.model.transformer.vocab_size = corpus.vocab.size();
  write_json_file(out_dir / "config.json", cfg.to_json());
  std::uint64_t corpus_seed = corpus.manifest.seed;
  std::string cfg_hash = cfg.hash();

  // Resume bookkeeping shared by all phases.
  std::optional<Checkpoint> resume_ck;
  if (!args.resume_ckpt.empty()) {
    resume_ck = load_checkpoint(args.resume_ckpt);
    if (resume_ck->phase != args.phase)
      throw CliError(kConfigError, "resume checkpoint is for phase '" +
                                       resume_ck->phase + "', not '" +
                                       args.phase + "'");
    if (resume_ck->config_hash != cfg_hash)
      throw CliError(kConfigError,
                     "resume checkpoint was built from a different config");
    if (!resume_ck->optim)
      throw CliError(kConfigError,
                     "resume checkpoint lacks optimizer state");
  }

  SaveHook save = [&](const Checkpoint& ck) {
    save_checkpoint(
        out_dir / ("checkpoint_step" + std::to_string(ck.step) + ".bin"), ck);
  };

  try {
    if (args.phase == "align" || args.phase == "instruct" ||
        args.phase == "moe") {
      Model model = [&]() {
        if (resume_ck) return model_from_checkpoint(*resume_ck);
        if (args.phase == "align")
          return Model(dense_variant(cfg.model), cfg.seed);
        if (args.phase == "instruct") {
          Checkpoint init = load_ckpt_or_die(
              cfg.init_checkpoint, "phase-1 (align) checkpoint (--init)");
          if (init.phase != "align")
            std::cerr << "warning: instruct phase initialized from a '"
                      << init.phase << "' checkpoint\n";
          return model_from_checkpoint(init);
        }
        // moe: expand the instruct model with the frozen router.
        Checkpoint init = load_ckpt_or_die(
            cfg.init_checkpoint, "phase-2 (instruct) checkpoint (--init)");
        Checkpoint router_ck = load_ckpt_or_die(
            cfg.router_checkpoint, "router checkpoint (--router-ckpt)");
        if (init.phase != "instruct")
          std::cerr << "warning: moe phase initialized from a '" << init.phase
                    << "' checkpoint\n";
        Model dense = model_from_checkpoint(init);
        RouterOutcome router = router_from_checkpoint(router_ck);
        Model moe = expand_from_dense(dense, cfg.model.moe,
                                      cfg.model.transformer.moe_layers,
                                      router.router);
        if (cfg.model.moe.learned_router) reinit_router(moe, cfg.seed);
        return moe;
      }();

      ResumePoint point;
      const ResumePoint* resume_ptr = nullptr;
      if (resume_ck) {
        point.step = resume_ck->step;
        point.optim = *resume_ck->optim;
        resume_ptr = &point;
      }

      std::string split = args.phase == "align"
                              ? "align"
                              : (args.phase == "instruct" ? "instruct"
                                                          : "tune");
      auto records = filter_split(corpus.records, split);
      PhaseOutcome outcome;
      if (args.phase == "align")
        outcome = run_phase1(model, records, cfg, corpus.vocab, corpus_seed,
                             save, resume_ptr);
      else if (args.phase == "instruct")
        outcome = run_phase2(model, records, cfg, corpus.vocab, corpus_seed,
                             save, resume_ptr);
      else
        outcome = run_phase3(model, records, cfg, corpus.vocab, corpus_seed,
                             save, resume_ptr);

      save_checkpoint(out_dir / "checkpoint.bin", outcome.checkpoint);
      write_loss_csv(outcome.losses, out_dir / "losses.csv");
      write_manifest(out_dir, args.phase, cfg, corpus_seed,
                     {{"final_loss", outcome.final_loss},
                      {"steps", outcome.checkpoint.step}});
    } else if (args.phase == "router") {
      Checkpoint init = load_ckpt_or_die(
          cfg.init_checkpoint, "phase-2 (instruct) checkpoint (--init)");
      Model source = model_from_checkpoint(init);
      auto tune = filter_split(corpus.records, "tune");
      auto test = filter_split(corpus.records, "test");
      auto labeled =
          labeled_subset(tune, cfg.phase("router").labels_per_modality);
      RouterOutcome outcome = train_router(
          source, init.phase, labeled, test, cfg, corpus.vocab, corpus_seed,
          save, resume_ck ? &*resume_ck : nullptr);
      save_checkpoint(out_dir / "checkpoint.bin", outcome.checkpoint);
      write_loss_csv(outcome.losses, out_dir / "losses.csv");
      write_manifest(out_dir, "router", cfg, corpus_seed,
                     {{"heldout_accuracy", outcome.heldout_accuracy},
                      {"silhouette", outcome.silhouette_score},
                      {"labeled_records", labeled.size()}});
    } else {
      throw CliError(kConfigError, "unknown phase: " + args.phase);
    }
  } catch (const TrainingNanError& e) {
    std::cerr << "numerical failure at step " << e.step << ": " << e.what()
              << "\n";
    return kNumericalFailure;
  }
  return kOk;
}

// -------------------------------------------------------------------- eval

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir,
             const std::string& out, const std::string& split, int max_new) {
  Checkpoint ck = load_ckpt_or_die(ckpt_path, "model checkpoint");
  if (ck.phase == "router")
    throw CliError(kConfigError, "cannot evaluate a router checkpoint");
  CorpusBundle corpus = load_corpus(data_dir);
  Model model = model_from_checkpoint(ck);
  auto records = filter_split(corpus.records, split);
  if (records.empty())
    throw CliError(kConfigError, "no records in split '" + split + "'");
  MetricReport report = evaluate(model, records, corpus.vocab, max_new);
  fs::create_directories(out);
  report.write_json(fs::path(out) / "report.json");
  report.write_csv(fs::path(out) / "report.csv");
  std::cout << report.to_json().dump(2) << "\n";
  return kOk;
}

// ------------------------------------------------------------------- trace

int cmd_trace(const std::string& ckpt_path, const std::string& data_dir,
              const std::string& out, const std::string& split) {
  Checkpoint ck = load_ckpt_or_die(ckpt_path, "model checkpoint");
  CorpusBundle corpus = load_corpus(data_dir);
  Model model = model_from_checkpoint(ck);
  if (!model.is_moe())
    throw CliError(kConfigError,
                   "trace requires a sparse (moe) model checkpoint");
  auto records = filter_split(corpus.records, split);
  if (records.empty())
    throw CliError(kConfigError, "no records in split '" + split + "'");
  SequenceBatch batch = sequences_from_records(
      records, corpus.vocab, model.image_token_count(),
      SequenceStyle::kInstruct);
  ActivationTrace trace = trace_activations(model, batch);
  fs::create_directories(out);
  trace.write_csv(fs::path(out) / "trace.csv");
  std::cout << "wrote " << (fs::path(out) / "trace.csv").string() << "\n";
  return kOk;
}

// ------------------------------------------------------------ count-params

int cmd_count_params(const std::string& ckpt_path, const std::string& out) {
  Checkpoint ck = load_ckpt_or_die(ckpt_path, "model checkpoint");
  if (ck.phase == "router")
    throw CliError(kConfigError, "cannot count a router checkpoint alone");
  Model model = model_from_checkpoint(ck);
  int top_k = model.is_moe() ? model.config().moe.top_k : 1;
  ParamCount count = count_parameters(model, top_k);
  nlohmann::json j = {{"total", count.total},
                      {"activated", count.activated},
                      {"top_k", top_k},
                      {"by_module", count.by_module},
                      {"note", count.note}};
  std::cout << j.dump(2) << "\n";
  if (!out.empty()) write_json_file(out, j);
  return kOk;
}

// ------------------------------------------------------------------ ablate

struct AblationCell {
  bool meta = true;
  std::string router = "frozen";  // frozen | learned
  int top_k = 2;
  int experts = 4;
  std::string tuning = "moe";  // moe | sft

  std::string id() const {
    return "meta-" + std::string(meta ? "on" : "off") + "_router-" + router +
           "_k" + std::to_string(top_k) + "_e" + std::to_string(experts) +
           "_" + tuning;
  }
  std::string setting() const {
    return "meta=" + std::string(meta ? "on" : "off") + ";router=" + router +
           ";K=" + std::to_string(top_k) + ";E=" + std::to_string(experts) +
           ";tuning=" + tuning;
  }
};

int cmd_ablate(const std::string& matrix_path, const std::string& config_path,
               const std::string& data_dir, const std::string& out_dir) {
  if (out_dir.empty()) throw CliError(kConfigError, "missing --out");
  std::ifstream mf(matrix_path);
  if (!mf) throw CliError(kConfigError, "cannot open matrix " + matrix_path);
  nlohmann::json matrix;
  try {
    matrix = nlohmann::json::parse(mf);
  } catch (const std::exception& e) {
    throw CliError(kConfigError, std::string("bad matrix file: ") + e.what());
  }

  auto str_list = [&](const char* key, std::vector<std::string> dflt)
      -> std::vector<std::string> {
    if (!matrix.contains(key)) return dflt;
    auto v = matrix[key].get<std::vector<std::string>>();
    if (v.empty()) throw CliError(kConfigError, std::string(key) + " empty");
    return v;
  };
  auto int_list = [&](const char* key, std::vector<int> dflt) {
    if (!matrix.contains(key)) return dflt;
    auto v = matrix[key].get<std::vector<int>>();
    if (v.empty()) throw CliError(kConfigError, std::string(key) + " empty");
    return v;
  };
  std::vector<std::string> metas = str_list("meta", {"on"});
  std::vector<std::string> routers = str_list("router", {"frozen"});
  std::vector<int> ks = int_list("K", {2});
  std::vector<int> es = int_list("E", {4});
  std::vector<std::string> tunings = str_list("tuning", {"moe"});
  for (const auto& m : metas)
    if (m != "on" && m != "off")
      throw CliError(kConfigError, "invalid meta value: " + m);
  for (const auto& r : routers)
    if (r != "frozen" && r != "learned")
      throw CliError(kConfigError, "invalid router value: " + r);
  for (const auto& t : tunings)
    if (t != "moe" && t != "sft")
      throw CliError(kConfigError, "invalid tuning value: " + t);

  std::vector<AblationCell> cells;
  for (const auto& t : tunings)
    for (const auto& m : metas)
      for (const auto& r : routers)
        for (int e : es)
          for (int k : ks) {
            if (k > e)
              throw CliError(kConfigError,
                             "invalid cell: K=" + std::to_string(k) +
                                 " > E=" + std::to_string(e));
            cells.push_back({m == "on", r, k, e, t});
          }

  TrainArgs base;
  base.phase = "moe";
  base.config_path = config_path;
  base.data_dir = data_dir;
  RunConfig cfg = resolve_config(base);
  CorpusBundle corpus = load_corpus(cfg.data_dir);
  cfg.model.transformer.vocab_size = corpus.vocab.size();
  std::uint64_t corpus_seed = corpus.manifest.seed;

  fs::path out(out_dir);
  fs::create_directories(out / "shared");
  write_json_file(out / "config.json", cfg.to_json());

  auto align_recs = filter_split(corpus.records, "align");
  auto instr_recs = filter_split(corpus.records, "instruct");
  auto tune_recs = filter_split(corpus.records, "tune");
  auto test_recs = filter_split(corpus.records, "test");

  // Shared prerequisites: one dense phase-1/2 model, one router per expert
  // count.
  std::cout << "[ablate] training shared dense model\n";
  Model dense(dense_variant(cfg.model), cfg.seed);
  run_phase1(dense, align_recs, cfg, corpus.vocab, corpus_seed);
  PhaseOutcome p2 =
      run_phase2(dense, instr_recs, cfg, corpus.vocab, corpus_seed);
  save_checkpoint(out / "shared" / "instruct.bin", p2.checkpoint);

  std::map<int, RouterOutcome> routers_by_e;
  for (int e : es) {
    RunConfig rc = cfg;
    rc.model.moe.experts = e;
    auto labeled =
        labeled_subset(tune_recs, rc.phase("router").labels_per_modality);
    std::cout << "[ablate] training router for E=" << e << "\n";
    routers_by_e.emplace(
        e, train_router(dense, "instruct", labeled, test_recs, rc,
                        corpus.vocab, corpus_seed));
  }

  AblationCell baseline_cell;
  bool have_baseline = false;
  for (const AblationCell& c : cells)
    if (c.meta && c.router == "frozen" && c.top_k == 2 && c.experts == 4 &&
        c.tuning == "moe") {
      baseline_cell = c;
      have_baseline = true;
    }
  if (!have_baseline) baseline_cell = cells.front();

  std::map<std::string, std::map<std::string, double>> results;
  for (const AblationCell& cell : cells) {
    std::cout << "[ablate] cell " << cell.id() << "\n";
    fs::path cell_dir = out / "cells" / cell.id();
    fs::create_directories(cell_dir);

    RunConfig cc = cfg;
    cc.model.moe.experts = cell.experts;
    cc.model.moe.top_k = cell.top_k;
    cc.model.moe.meta_expert = cell.meta;
    cc.model.moe.learned_router = cell.router == "learned";

    MetricReport report;
    try {
      if (cell.tuning == "sft") {
        // Dense fine-tuning on the tuning split, no expansion.
        Model model = model_from_checkpoint(p2.checkpoint);
        RunConfig sft_cfg = cc;
        sft_cfg.phases["instruct"] = cc.phase("moe");
        PhaseOutcome out3 =
            run_phase2(model, tune_recs, sft_cfg, corpus.vocab, corpus_seed);
        save_checkpoint(cell_dir / "checkpoint.bin", out3.checkpoint);
        write_loss_csv(out3.losses, cell_dir / "losses.csv");
        report = evaluate(model, test_recs, corpus.vocab, cc.eval_max_new);
      } else {
        Model model = model_from_checkpoint(p2.checkpoint);
        Model moe = expand_from_dense(model, cc.model.moe,
                                      cc.model.transformer.moe_layers,
                                      routers_by_e.at(cell.experts).router);
        if (cc.model.moe.learned_router) reinit_router(moe, cc.seed);
        PhaseOutcome out3 =
            run_phase3(moe, tune_recs, cc, corpus.vocab, corpus_seed);
        save_checkpoint(cell_dir / "checkpoint.bin", out3.checkpoint);
        write_loss_csv(out3.losses, cell_dir / "losses.csv");
        report = evaluate(moe, test_recs, corpus.vocab, cc.eval_max_new);
      }
    } catch (const TrainingNanError& e) {
      std::cerr << "numerical failure in cell " << cell.id() << " at step "
                << e.step << "\n";
      return kNumericalFailure;
    }
    report.write_json(cell_dir / "report.json");
    report.write_csv(cell_dir / "report.csv");
    write_manifest(cell_dir, "ablate:" + cell.id(), cc, corpus_seed,
                   report.to_json());
    results[cell.id()] = report.aggregates;
  }

  const auto& base_metrics = results.at(baseline_cell.id());
  std::ofstream table(out / "ablation.csv", std::ios::trunc);
  table << "method,setting,metric,value,delta_vs_baseline\n";
  char buf[32], dbuf[32];
  for (const AblationCell& cell : cells) {
    for (const auto& [metric, value] : results.at(cell.id())) {
      double delta =
          value -
          (base_metrics.count(metric) ? base_metrics.at(metric) : 0.0);
      std::snprintf(buf, sizeof(buf), "%.10g", value);
      std::snprintf(dbuf, sizeof(dbuf), "%.10g", delta);
      table << cell.id() << ',' << cell.setting() << ',' << metric << ','
            << buf << ',' << dbuf << '\n';
    }
  }
  std::cout << "wrote " << (out / "ablation.csv").string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale sparse mixture-of-experts multimodal LM"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpus");
  std::uint64_t gen_seed = 1234;
  std::string gen_out;
  std::vector<std::string> gen_sizes;
  gen->add_option("--seed", gen_seed, "corpus seed");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--sizes", gen_sizes,
                  "split sizes, e.g. align=64,instruct=64,tune=64,test=32");

  // train
  auto* train = app.add_subcommand("train", "run one training phase");
  TrainArgs targs;
  train->add_option("--phase", targs.phase, "align|instruct|router|moe")
      ->required()
      ->check(CLI::IsMember({"align", "instruct", "router", "moe"}));
  train->add_option("--config", targs.config_path, "run config JSON");
  train->add_option("--data", targs.data_dir, "corpus directory");
  train->add_option("--out", targs.out_dir, "run output directory");
  train->add_option("--init", targs.init_ckpt, "initial checkpoint");
  train->add_option("--router-ckpt", targs.router_ckpt, "router checkpoint");
  train->add_option("--resume", targs.resume_ckpt, "mid-phase checkpoint");
  std::uint64_t train_seed = 0;
  long train_steps = 0, train_save_every = 0;
  auto* seed_opt = train->add_option("--seed", train_seed, "run seed");
  auto* steps_opt = train->add_option("--steps", train_steps, "step override");
  auto* save_opt =
      train->add_option("--save-every", train_save_every,
                        "save a resumable checkpoint every N steps");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_ckpt, eval_data, eval_out, eval_split = "test";
  int eval_max_new = 8;
  eval_cmd->add_option("--checkpoint", eval_ckpt)->required();
  eval_cmd->add_option("--data", eval_data)->required();
  eval_cmd->add_option("--out", eval_out)->required();
  eval_cmd->add_option("--split", eval_split, "corpus split (default test)");
  eval_cmd->add_option("--max-new", eval_max_new, "generation budget");

  // trace
  auto* trace_cmd =
      app.add_subcommand("trace", "export expert activation counts");
  std::string trace_ckpt, trace_data, trace_out, trace_split = "test";
  trace_cmd->add_option("--checkpoint", trace_ckpt)->required();
  trace_cmd->add_option("--data", trace_data)->required();
  trace_cmd->add_option("--out", trace_out)->required();
  trace_cmd->add_option("--split", trace_split, "corpus split (default test)");

  // count-params
  auto* count_cmd =
      app.add_subcommand("count-params", "total and activated parameters");
  std::string count_ckpt, count_out;
  count_cmd->add_option("--checkpoint", count_ckpt)->required();
  count_cmd->add_option("--out", count_out, "also write JSON here");

  // ablate
  auto* ablate_cmd = app.add_subcommand("ablate", "run an ablation grid");
  std::string ab_matrix, ab_config, ab_data, ab_out;
  ablate_cmd->add_option("--matrix", ab_matrix)->required();
  ablate_cmd->add_option("--config", ab_config, "base run config");
  ablate_cmd->add_option("--data", ab_data, "corpus directory");
  ablate_cmd->add_option("--out", ab_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_name() == "CallForHelp" ? kOk : kConfigError;
  }

  try {
    if (*gen) return cmd_gen_data(gen_seed, gen_out, gen_sizes);
    if (*train) {
      if (!seed_opt->empty()) targs.seed = train_seed;
      if (!steps_opt->empty()) targs.steps = train_steps;
      if (!save_opt->empty()) targs.save_every = train_save_every;
      return cmd_train(targs);
    }
    if (*eval_cmd)
      return cmd_eval(eval_ckpt, eval_data, eval_out, eval_split,
                      eval_max_new);
    if (*trace_cmd)
      return cmd_trace(trace_ckpt, trace_data, trace_out, trace_split);
    if (*count_cmd) return cmd_count_params(count_ckpt, count_out);
    if (*ablate_cmd) return cmd_ablate(ab_matrix, ab_config, ab_data, ab_out);
  } catch (const CliError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code;
  } catch (const TrainingNanError& e) {
    std::cerr << "numerical failure at step " << e.step << ": " << e.what()
              << "\n";
    return kNumericalFailure;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumericalFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigError;
  }
  return kConfigError;
}
