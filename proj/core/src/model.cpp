#include "micromoe/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include "micromoe/rng.hpp"
#include "micromoe/serialize.hpp"

namespace micromoe {

namespace {

std::string layer_prefix(int layer) {
  return "lm.layer" + std::to_string(layer);
}

std::string expert_prefix(int layer, int e) {
  return layer_prefix(layer) + ".moe.expert" + std::to_string(e);
}

std::string meta_prefix(int layer) { return layer_prefix(layer) + ".moe.meta"; }

Tensor causal_mask(std::size_t n) {
  Tensor m(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) m.at(i, j) = -1e30;
  return m;
}

std::vector<int> iota_ids(std::size_t n) {
  std::vector<int> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  return ids;
}

}  // namespace

nlohmann::json ModelConfig::to_json() const {
  return {
      {"transformer",
       {{"d_model", transformer.d_model},
        {"n_layers", transformer.n_layers},
        {"n_heads", transformer.n_heads},
        {"ffn_hidden", transformer.ffn_hidden},
        {"vocab_size", transformer.vocab_size},
        {"max_seq", transformer.max_seq},
        {"moe_layers", transformer.moe_layers}}},
      {"vision",
       {{"image_size", vision.image_size},
        {"patch_size", vision.patch_size},
        {"d_vision", vision.d_vision}}},
      {"moe",
       {{"experts", moe.experts},
        {"top_k", moe.top_k},
        {"router_depth", moe.router_depth},
        {"router_hidden", moe.router_hidden},
        {"meta_expert", moe.meta_expert},
        {"learned_router", moe.learned_router},
        {"aux_coefficient", moe.aux_coefficient}}}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  const auto& t = j.at("transformer");
  cfg.transformer.d_model = t.at("d_model").get<int>();
  cfg.transformer.n_layers = t.at("n_layers").get<int>();
  cfg.transformer.n_heads = t.at("n_heads").get<int>();
  cfg.transformer.ffn_hidden = t.at("ffn_hidden").get<int>();
  cfg.transformer.vocab_size = t.at("vocab_size").get<int>();
  cfg.transformer.max_seq = t.at("max_seq").get<int>();
  cfg.transformer.moe_layers = t.at("moe_layers").get<std::vector<int>>();
  const auto& v = j.at("vision");
  cfg.vision.image_size = v.at("image_size").get<int>();
  cfg.vision.patch_size = v.at("patch_size").get<int>();
  cfg.vision.d_vision = v.at("d_vision").get<int>();
  const auto& m = j.at("moe");
  cfg.moe.experts = m.at("experts").get<int>();
  cfg.moe.top_k = m.at("top_k").get<int>();
  cfg.moe.router_depth = m.at("router_depth").get<int>();
  cfg.moe.router_hidden = m.at("router_hidden").get<int>();
  cfg.moe.meta_expert = m.at("meta_expert").get<bool>();
  cfg.moe.learned_router = m.at("learned_router").get<bool>();
  cfg.moe.aux_coefficient = m.at("aux_coefficient").get<double>();
  return cfg;
}

Model::Model(ModelConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
  register_params(init_seed, true);
}

Model::Model(ModelConfig cfg, NoInitTag) : cfg_(std::move(cfg)) {
  register_params(0, false);
}

void Model::register_params(std::uint64_t seed, bool random_init) {
  const TransformerConfig& t = cfg_.transformer;
  if (t.d_model % t.n_heads != 0)
    throw std::invalid_argument("d_model must be divisible by n_heads");
  for (int l : t.moe_layers)
    if (l < 0 || l >= t.n_layers)
      throw std::invalid_argument("moe layer index out of range");
  if (t.vocab_size <= 0)
    throw std::invalid_argument("vocab_size must be positive");

  auto dense_init = [&](const std::string& name, std::size_t r, std::size_t c,
                        double sigma) {
    Tensor tensor(r, c);
    if (random_init && sigma > 0.0) {
      RngStream rng = derive_stream(seed, "init:" + name);
      for (double& x : tensor.values()) x = sigma * rng.next_normal();
    }
    return params_.add(name, std::move(tensor));
  };
  auto ones_init = [&](const std::string& name, std::size_t c) {
    return params_.add(name, Tensor::full(1, c, 1.0));
  };

  std::size_t d = static_cast<std::size_t>(t.d_model);
  std::size_t ffn = static_cast<std::size_t>(t.ffn_hidden);
  std::size_t dv = static_cast<std::size_t>(cfg_.vision.d_vision);
  std::size_t patch =
      static_cast<std::size_t>(cfg_.vision.patch_size * cfg_.vision.patch_size);

  vision_.patch_size = static_cast<std::size_t>(cfg_.vision.patch_size);
  vision_.weight = dense_init("vision.patch.w", patch, dv, 0.25);
  vision_.bias = dense_init("vision.patch.b", 1, dv, 0.0);

  projector_.w1 = dense_init("projector.l1.w", dv, d, 0.02);
  projector_.b1 = dense_init("projector.l1.b", 1, d, 0.0);
  projector_.w2 = dense_init("projector.l2.w", d, d, 0.02);
  projector_.b2 = dense_init("projector.l2.b", 1, d, 0.0);

  dense_init("lm.tok_emb", static_cast<std::size_t>(t.vocab_size), d, 0.02);
  dense_init("lm.pos_emb", static_cast<std::size_t>(t.max_seq), d, 0.02);

  std::set<int> moe_set(t.moe_layers.begin(), t.moe_layers.end());
  for (int l = 0; l < t.n_layers; ++l) {
    std::string lp = layer_prefix(l);
    ones_init(lp + ".ln1.g", d);
    dense_init(lp + ".ln1.b", 1, d, 0.0);
    for (const char* part : {"wq", "wk", "wv", "wo"})
      dense_init(lp + ".attn." + std::string(part), d, d, 0.02);
    for (const char* part : {"bq", "bk", "bv", "bo"})
      dense_init(lp + ".attn." + std::string(part), 1, d, 0.0);

    auto add_ffn = [&](const std::string& prefix) {
      dense_init(prefix + ".w1", d, ffn, 0.02);
      dense_init(prefix + ".b1", 1, ffn, 0.0);
      dense_init(prefix + ".w2", ffn, d, 0.02);
      dense_init(prefix + ".b2", 1, d, 0.0);
    };
    if (moe_set.count(l)) {
      for (int e = 0; e < cfg_.moe.experts; ++e) add_ffn(expert_prefix(l, e));
      if (cfg_.moe.meta_expert) add_ffn(meta_prefix(l));
    } else {
      add_ffn(lp + ".ffn");
    }
  }
  ones_init("lm.final_ln.g", d);
  dense_init("lm.final_ln.b", 1, d, 0.0);
  dense_init("lm.head.w", d, static_cast<std::size_t>(t.vocab_size), 0.02);
  dense_init("lm.head.b", 1, static_cast<std::size_t>(t.vocab_size), 0.0);

  if (is_moe()) {
    router_.depth = cfg_.moe.router_depth;
    router_.in_shift = dense_init("router.in_shift", 1, d, 0.0);
    router_.in_scale = dense_init("router.in_scale", 1, d, 0.0);
    std::fill(router_.in_scale->values().begin(),
              router_.in_scale->values().end(), 1.0);
    router_.in_shift->requires_grad = false;
    router_.in_scale->requires_grad = false;
    if (router_.depth == 1) {
      router_.w1 = dense_init("router.l1.w", d,
                              static_cast<std::size_t>(cfg_.moe.experts), 0.02);
      router_.b1 = dense_init("router.l1.b", 1,
                              static_cast<std::size_t>(cfg_.moe.experts), 0.0);
    } else if (router_.depth == 2) {
      std::size_t h = static_cast<std::size_t>(cfg_.moe.router_hidden);
      router_.w1 = dense_init("router.l1.w", d, h, 0.02);
      router_.b1 = dense_init("router.l1.b", 1, h, 0.0);
      router_.w2 = dense_init("router.l2.w", h,
                              static_cast<std::size_t>(cfg_.moe.experts), 0.02);
      router_.b2 = dense_init("router.l2.b", 1,
                              static_cast<std::size_t>(cfg_.moe.experts), 0.0);
    } else {
      throw std::invalid_argument("router depth must be 1 or 2");
    }
  }
}

Router& Model::router() {
  if (!is_moe()) throw std::logic_error("dense model has no router");
  return router_;
}

const Router& Model::router() const {
  if (!is_moe()) throw std::logic_error("dense model has no router");
  return router_;
}

std::size_t Model::image_token_count() const {
  std::size_t g = static_cast<std::size_t>(cfg_.vision.image_size) /
                  static_cast<std::size_t>(cfg_.vision.patch_size);
  return g * g;
}

Val Model::linear(Graph& g, Val x, const std::string& w,
                  const std::string& b) const {
  Val weight = g.param(params_.get(w));
  auto it = lora_.find(w);
  if (it != lora_.end()) {
    const LoraAdapter& a = it->second;
    weight = g.add(weight, g.scale(g.matmul(g.param(a.down), g.param(a.up)),
                                   a.scaling()));
  }
  return g.add_rowvec(g.matmul(x, weight), g.param(params_.get(b)));
}

Val Model::ffn(Graph& g, Val x, const std::string& prefix) const {
  Val h = g.gelu(linear(g, x, prefix + ".w1", prefix + ".b1"));
  return linear(g, h, prefix + ".w2", prefix + ".b2");
}

Val Model::attention(Graph& g, Val x, int layer) const {
  const std::string lp = layer_prefix(layer);
  std::size_t S = g.value(x).rows();
  std::size_t heads = static_cast<std::size_t>(cfg_.transformer.n_heads);
  std::size_t dh = static_cast<std::size_t>(cfg_.transformer.d_model) / heads;

  Val h = g.layer_norm(x, g.param(params_.get(lp + ".ln1.g")),
                       g.param(params_.get(lp + ".ln1.b")));
  Val q = linear(g, h, lp + ".attn.wq", lp + ".attn.bq");
  Val k = linear(g, h, lp + ".attn.wk", lp + ".attn.bk");
  Val v = linear(g, h, lp + ".attn.wv", lp + ".attn.bv");

  Val mask = g.constant(causal_mask(S));
  std::vector<Val> outs;
  for (std::size_t i = 0; i < heads; ++i) {
    Val qh = g.slice_cols(q, i * dh, (i + 1) * dh);
    Val kh = g.slice_cols(k, i * dh, (i + 1) * dh);
    Val vh = g.slice_cols(v, i * dh, (i + 1) * dh);
    Val scores = g.scale(g.matmul(qh, g.transpose(kh)),
                         1.0 / std::sqrt(static_cast<double>(dh)));
    Val att = g.softmax_rows(g.add(scores, mask));
    outs.push_back(g.matmul(att, vh));
  }
  Val o = linear(g, g.concat_cols(outs), lp + ".attn.wo", lp + ".attn.bo");
  return g.add(x, o);
}

Val Model::moe_sublayer(Graph& g, Val x, int layer,
                        const std::string& modality, std::size_t n_image,
                        const ForwardOptions& opts) const {
  const int E = cfg_.moe.experts;
  const int K = cfg_.moe.top_k;
  Val logits = router_logits(g, x, router_);
  const Tensor& lv = g.value(logits);
  std::size_t S = lv.rows();

  std::vector<std::vector<int>> selected(S);
  for (std::size_t s = 0; s < S; ++s)
    selected[s] =
        top_k_indices(lv.row(s), static_cast<std::size_t>(E), K);

  Val gates = g.softmax_rows(g.gather_cols_per_row(logits, selected));
  const Tensor& gv = g.value(gates);
  for (std::size_t s = 0; s < S; ++s) {
    double sum = 0.0;
    for (std::size_t j = 0; j < gv.cols(); ++j) sum += gv.at(s, j);
    audit_.tokens += 1;
    audit_.max_gate_sum_error =
        std::max(audit_.max_gate_sum_error, std::abs(sum - 1.0));
  }

  if (opts.trace) {
    for (std::size_t s = 0; s < S; ++s)
      opts.trace->record(layer, modality,
                         argmax_low(lv.row(s), static_cast<std::size_t>(E)),
                         s < n_image);
  }

  if (opts.aux_terms) {
    // Switch-style load balancing: experts * sum_e fraction_e * mean_prob_e.
    Tensor frac(1, static_cast<std::size_t>(E));
    for (std::size_t s = 0; s < S; ++s)
      for (int e : selected[s])
        frac.at(0, static_cast<std::size_t>(e)) += 1.0;
    for (double& f : frac.values())
      f /= static_cast<double>(S) * static_cast<double>(K);
    Val mean_prob = g.mean_rows(g.softmax_rows(logits));
    opts.aux_terms->push_back(
        g.scale(g.sum_all(g.mul(g.constant(std::move(frac)), mean_prob)),
                static_cast<double>(E)));
  }

  auto& counters = invocations_[layer];
  if (counters.empty())
    counters.assign(static_cast<std::size_t>(E) + 1, 0);

  Val out = x;
  for (int e = 0; e < E; ++e) {
    std::vector<std::size_t> rows;
    std::vector<std::size_t> slots;
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t j = 0; j < selected[s].size(); ++j)
        if (selected[s][j] == e) {
          rows.push_back(s);
          slots.push_back(j);
        }
    if (rows.empty()) continue;  // sparsity: this expert never runs
    counters[static_cast<std::size_t>(e)] += 1;
    Val xe = g.gather_rows(x, rows);
    Val ye = ffn(g, xe, expert_prefix(layer, e));
    Val we = g.gather_cells(gates, rows, slots);
    out = g.add(out, g.scatter_rows(g.rowwise_scale(ye, we), rows, S));
  }
  if (cfg_.moe.meta_expert) {
    counters[static_cast<std::size_t>(E)] += 1;
    out = g.add(out, ffn(g, x, meta_prefix(layer)));
  }
  return out;
}

Val Model::build_logits(Graph& g, const Sequence& seq,
                        const ForwardOptions& opts) const {
  std::size_t n_image = 0;
  Val x;
  Val tok_table = g.param(params_.get("lm.tok_emb"));
  if (seq.image) {
    Val tokens = encode_image(g, *seq.image, vision_);
    Val proj = project(g, tokens, projector_);
    n_image = g.value(proj).rows();
    if (!seq.text.empty()) {
      Val txt = g.embedding_rows(tok_table, seq.text);
      x = g.concat_rows(proj, txt);
    } else {
      x = proj;
    }
  } else {
    if (seq.text.empty())
      throw std::invalid_argument("empty sequence");
    x = g.embedding_rows(tok_table, seq.text);
  }

  std::size_t S = g.value(x).rows();
  if (S > static_cast<std::size_t>(cfg_.transformer.max_seq))
    throw std::length_error("sequence exceeds max length");
  Val pos = g.embedding_rows(g.param(params_.get("lm.pos_emb")), iota_ids(S));
  x = g.add(x, pos);

  std::set<int> moe_set(cfg_.transformer.moe_layers.begin(),
                        cfg_.transformer.moe_layers.end());
  for (int l = 0; l < cfg_.transformer.n_layers; ++l) {
    x = attention(g, x, l);
    if (opts.slot_input) opts.slot_input(l, g.value(x));
    if (moe_set.count(l))
      x = moe_sublayer(g, x, l, seq.modality, n_image, opts);
    else
      x = g.add(x, ffn(g, x, layer_prefix(l) + ".ffn"));
    if (opts.slot_output) opts.slot_output(l, g.value(x));
  }
  x = g.layer_norm(x, g.param(params_.get("lm.final_ln.g")),
                   g.param(params_.get("lm.final_ln.b")));
  return linear(g, x, "lm.head.w", "lm.head.b");
}

Tensor Model::lm_forward(const Sequence& seq, const ForwardOptions& opts) const {
  Graph g;
  return g.value(build_logits(g, seq, opts));
}

std::pair<Val, long> Model::build_nll_sum(Graph& g, const Sequence& seq,
                                          const ForwardOptions& opts) const {
  Val logits = build_logits(g, seq, opts);
  std::size_t S = g.value(logits).rows();
  std::size_t n_image = seq.image ? image_token_count() : 0;
  if (seq.prefix_len < 1 ||
      static_cast<std::size_t>(seq.prefix_len) < n_image)
    throw std::invalid_argument("prefix must cover the image block");
  if (static_cast<std::size_t>(seq.prefix_len) >= S)
    throw std::invalid_argument("sequence has no response positions");

  std::vector<std::pair<std::size_t, int>> targets;
  for (std::size_t j = static_cast<std::size_t>(seq.prefix_len); j < S; ++j)
    targets.emplace_back(j - 1, seq.text[j - n_image]);
  Val nll = g.nll_sum(logits, targets);
  return {nll, static_cast<long>(targets.size())};
}

double Model::nll_loss(const SequenceBatch& batch) const {
  Graph g;
  Val total;
  long count = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto [nll, n] = build_nll_sum(g, batch[i]);
    count += n;
    total = i == 0 ? nll : g.add(total, nll);
  }
  if (count == 0) throw std::invalid_argument("batch has no response positions");
  return g.value(total).at(0, 0) / static_cast<double>(count);
}

std::vector<int> Model::greedy_generate(const Sequence& prompt,
                                        int max_new) const {
  std::size_t n_image = prompt.image ? image_token_count() : 0;
  if (n_image + prompt.text.size() + static_cast<std::size_t>(max_new) >
      static_cast<std::size_t>(cfg_.transformer.max_seq))
    throw std::length_error("prompt cannot fit max_new tokens in context");

  Sequence cur = prompt;
  std::vector<int> out;
  for (int i = 0; i < max_new; ++i) {
    Graph g;
    Val logits = build_logits(g, cur);
    const Tensor& lv = g.value(logits);
    int next = argmax_low(lv.row(lv.rows() - 1), lv.cols());
    if (next == Vocabulary::kEos) break;
    out.push_back(next);
    cur.text.push_back(next);
  }
  return out;
}

void Model::reset_expert_invocations() {
  for (auto& [layer, counts] : invocations_)
    std::fill(counts.begin(), counts.end(), 0);
}

Model expand_from_dense(const Model& dense, const MoeSpec& spec,
                        const std::vector<int>& moe_layer_indices,
                        const Router& router) {
  if (dense.is_moe())
    throw std::invalid_argument("expand_from_dense: model is already sparse");
  if (moe_layer_indices.empty())
    throw std::invalid_argument("expand_from_dense: no MoE layers given");
  if (!router.frozen)
    throw std::invalid_argument("expand_from_dense: router must be frozen");
  if (router.output_dim() != spec.experts)
    throw std::invalid_argument(
        "expand_from_dense: router output dim != expert count");
  if (router.input_dim() != dense.cfg_.transformer.d_model)
    throw std::invalid_argument("expand_from_dense: router input dim mismatch");

  ModelConfig cfg = dense.cfg_;
  cfg.transformer.moe_layers = moe_layer_indices;
  cfg.moe = spec;
  cfg.moe.router_depth = router.depth;
  if (router.depth == 2)
    cfg.moe.router_hidden = static_cast<int>(router.w1->cols());

  Model out(cfg, Model::NoInitTag{});
  auto copy_into = [&](const std::string& dst, const Tensor& src) {
    auto t = out.params_.get(dst);
    if (!t->same_shape(src))
      throw std::logic_error("expand_from_dense: shape mismatch at " + dst);
    t->values() = src.values();
  };

  // Everything the two models share is copied bitwise.
  for (const auto& [name, tensor] : dense.params_.entries())
    if (out.params_.contains(name)) {
      copy_into(name, *tensor);
      out.params_.get(name)->requires_grad = tensor->requires_grad;
    }

  // Experts and the meta expert start as copies of the dense FFN.
  for (int l : moe_layer_indices) {
    for (const char* part : {".w1", ".b1", ".w2", ".b2"}) {
      const Tensor& src =
          *dense.params_.get(layer_prefix(l) + ".ffn" + part);
      for (int e = 0; e < spec.experts; ++e)
        copy_into(expert_prefix(l, e) + part, src);
      if (spec.meta_expert) copy_into(meta_prefix(l) + part, src);
    }
  }

  // Attach the trained router, frozen.
  if (router.in_shift) copy_into("router.in_shift", *router.in_shift);
  if (router.in_scale) copy_into("router.in_scale", *router.in_scale);
  copy_into("router.l1.w", *router.w1);
  copy_into("router.l1.b", *router.b1);
  if (router.depth == 2) {
    copy_into("router.l2.w", *router.w2);
    copy_into("router.l2.b", *router.b2);
  }
  for (const auto& name : out.params_.names())
    if (name.rfind("router.", 0) == 0)
      out.params_.get(name)->requires_grad = false;
  out.router_.frozen = true;
  out.expanded_ = true;
  return out;
}

void apply_lora(Model& model, const std::vector<std::string>& targets,
                int rank, double alpha, std::uint64_t seed) {
  if (rank < 1) throw std::invalid_argument("apply_lora: rank must be >= 1");
  std::vector<std::string> matched;
  for (const auto& name : model.params_.names()) {
    if (name.find(".lora_") != std::string::npos) continue;
    for (const auto& pat : targets)
      if (name_matches(pat, name)) {
        matched.push_back(name);
        break;
      }
  }
  if (matched.empty())
    throw std::invalid_argument("apply_lora: no parameters match the targets");

  for (const auto& name : matched) {
    if (model.lora_.count(name))
      throw std::invalid_argument("apply_lora: " + name + " already adapted");
    auto base = model.params_.get(name);
    std::size_t din = base->rows(), dout = base->cols();
    if (static_cast<std::size_t>(rank) >= std::min(din, dout))
      throw std::invalid_argument("apply_lora: rank >= min(dims) for " + name);

    LoraAdapter a;
    a.target = name;
    a.rank = rank;
    a.alpha = alpha;
    Tensor down(din, static_cast<std::size_t>(rank));
    RngStream rng = derive_stream(seed, "lora:" + name);
    for (double& x : down.values()) x = 0.02 * rng.next_normal();
    a.down = model.params_.add(name + ".lora_down", std::move(down));
    a.up = model.params_.add(name + ".lora_up",
                             Tensor(static_cast<std::size_t>(rank), dout));
    base->requires_grad = false;
    model.lora_[name] = std::move(a);
  }
}

ActivationTrace trace_activations(const Model& model,
                                  const SequenceBatch& batch) {
  if (!model.is_moe())
    throw std::invalid_argument("trace_activations: model has no MoE layers");
  ActivationTrace trace;
  for (const Sequence& seq : batch) {
    if (seq.modality.empty())
      throw std::invalid_argument("trace_activations: unlabeled record");
    ActivationTrace per_sample;
    ForwardOptions opts;
    opts.trace = &per_sample;
    model.lm_forward(seq, opts);
    trace.merge(per_sample);
  }
  return trace;
}

void reinit_router(Model& model, std::uint64_t seed) {
  if (!model.is_moe())
    throw std::invalid_argument("reinit_router: dense model has no router");
  for (const auto& name : model.params_.names()) {
    if (name.rfind("router.", 0) != 0) continue;
    auto t = model.params_.get(name);
    if (name == "router.in_shift") {
      std::fill(t->values().begin(), t->values().end(), 0.0);
      t->requires_grad = false;
      continue;
    }
    if (name == "router.in_scale") {
      std::fill(t->values().begin(), t->values().end(), 1.0);
      t->requires_grad = false;
      continue;
    }
    if (name.back() == 'w') {
      RngStream rng = derive_stream(seed, "reinit:" + name);
      for (double& x : t->values()) x = 0.02 * rng.next_normal();
    } else {
      std::fill(t->values().begin(), t->values().end(), 0.0);
    }
    t->requires_grad = true;
  }
  model.router_.frozen = false;
}

Model model_from_checkpoint(const Checkpoint& ck) {
  ModelConfig cfg = ModelConfig::from_json(ck.model_config.at("config"));
  Model m(cfg, Model::NoInitTag{});
  if (ck.model_config.contains("lora") && !ck.model_config["lora"].is_null()) {
    for (const auto& entry : ck.model_config["lora"])
      apply_lora(m, {entry.at("target").get<std::string>()},
                 entry.at("rank").get<int>(), entry.at("alpha").get<double>(),
                 0);
  }
  for (const auto& [name, dst] : m.params_.entries()) {
    auto src = ck.params.get(name);  // throws on missing
    if (!dst->same_shape(*src))
      throw std::runtime_error("checkpoint shape mismatch at " + name);
    dst->values() = src->values();
    dst->requires_grad = src->requires_grad;
  }
  for (const auto& [name, tensor] : ck.params.entries())
    if (!m.params_.contains(name))
      throw std::runtime_error("checkpoint carries unknown parameter " + name);
  m.expanded_ = ck.model_config.value("expanded", false);
  if (m.is_moe())
    m.router_.frozen = ck.model_config.value("router_frozen", false);
  return m;
}

void copy_params_into_checkpoint(const Model& model, Checkpoint& ck) {
  ck.model_config = nlohmann::json{
      {"config", model.config().to_json()},
      {"expanded", model.expanded_from_dense()},
      {"router_frozen", model.is_moe() && model.router().frozen}};
  nlohmann::json lora = nlohmann::json::array();
  for (const auto& [target, adapter] : model.lora_adapters())
    lora.push_back({{"target", target},
                    {"rank", adapter.rank},
                    {"alpha", adapter.alpha}});
  ck.model_config["lora"] = lora;
  ck.params = ParamSet();
  for (const auto& [name, tensor] : model.params().entries()) {
    auto copy = ck.params.add(name, *tensor);
    copy->requires_grad = tensor->requires_grad;
    copy->zero_grad();
  }
}

ParamCount count_parameters(const Model& model, int top_k) {
  const ModelConfig& cfg = model.config();
  ParamCount out;
  for (const auto& [name, tensor] : model.params().entries()) {
    out.total += tensor->size();
    out.by_module[name.substr(0, name.find('.'))] += tensor->size();
  }
  out.activated = out.total;
  if (model.is_moe()) {
    if (top_k < 1 || top_k > cfg.moe.experts)
      throw std::invalid_argument("count_parameters: top_k out of range");
    for (int l : cfg.transformer.moe_layers) {
      std::size_t per_expert = 0;
      for (const char* part : {".w1", ".b1", ".w2", ".b2"})
        per_expert += model.params().get(expert_prefix(l, 0) + part)->size();
      out.activated -=
          static_cast<std::size_t>(cfg.moe.experts - top_k) * per_expert;
    }
  }
  out.note =
      "exact enumeration for this architecture: activated = total - "
      "(experts - top_k) * per-expert size per MoE layer; the meta expert "
      "and router always count as activated. The convention is not "
      "calibrated to reproduce parameter totals reported for unrelated "
      "large-model families.";
  return out;
}

}  // namespace micromoe
