#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "micromoe/evaluate.hpp"
#include "micromoe/gradcheck.hpp"
#include "micromoe/model.hpp"
#include "micromoe/rng.hpp"
#include "micromoe/synthdata.hpp"
#include "micromoe/vision.hpp"
#include "micromoe/vocab.hpp"

namespace micromoe {
namespace {

ModelConfig tiny_config(int vocab, std::vector<int> moe_layers = {}) {
  ModelConfig cfg;
  cfg.transformer.d_model = 16;
  cfg.transformer.n_layers = 2;
  cfg.transformer.n_heads = 2;
  cfg.transformer.ffn_hidden = 24;
  cfg.transformer.vocab_size = vocab;
  cfg.transformer.max_seq = 48;
  cfg.transformer.moe_layers = std::move(moe_layers);
  cfg.vision.image_size = 8;
  cfg.vision.patch_size = 4;
  cfg.vision.d_vision = 8;
  return cfg;
}

SyntheticImage checker_image(std::size_t n) {
  SyntheticImage img;
  img.pixels = Tensor(n, n);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x)
      img.pixels.at(y, x) = ((x + y) % 2) ? 0.75 : 0.25;
  return img;
}

TEST(Vocab, RoundTripAndReservedIds) {
  Vocabulary v = corpus_vocabulary();
  EXPECT_EQ(v.size(), 512);
  EXPECT_EQ(v.id_of("<bos>"), Vocabulary::kBos);
  std::string s = "is there a lesion in the upper half ?";
  EXPECT_EQ(v.detokenize(v.tokenize(s)), s);
  EXPECT_EQ(v.id_of("not-a-word"), Vocabulary::kUnk);
}

TEST(Vocab, RoundTripForAllCorpusSentences) {
  Vocabulary v = corpus_vocabulary();
  auto corpus = generate_corpus(
      7, {{"align", 8}, {"instruct", 8}, {"tune", 8}, {"test", 8}});
  for (const Record& r : corpus.records) {
    EXPECT_EQ(v.detokenize(v.tokenize(r.caption)), r.caption);
    EXPECT_EQ(v.detokenize(v.tokenize(r.instruction)), r.instruction);
    EXPECT_EQ(v.detokenize(v.tokenize(r.response)), r.response);
  }
}

TEST(Vocab, SaveLoadPreservesIds) {
  Vocabulary v = corpus_vocabulary();
  auto path = std::filesystem::temp_directory_path() / "micromoe_vocab.txt";
  v.save(path);
  Vocabulary loaded = Vocabulary::load(path);
  EXPECT_EQ(loaded.size(), v.size());
  EXPECT_EQ(loaded.id_of("lesion"), v.id_of("lesion"));
  EXPECT_EQ(loaded.content_hash(), v.content_hash());
  std::filesystem::remove(path);
}

TEST(Vision, TokenCountFromShapeArithmetic) {
  ModelConfig cfg = tiny_config(32);
  Model model(cfg, 1);
  // 8x8 image with patch 4 gives 4 tokens.
  Tensor tokens = encode_image(
      checker_image(8), VisionEncoder{4, model.params().get("vision.patch.w"),
                                      model.params().get("vision.patch.b")});
  EXPECT_EQ(tokens.rows(), 4u);
  EXPECT_EQ(tokens.cols(), 8u);

  SyntheticImage bad = checker_image(9);
  EXPECT_THROW(extract_patches(bad, 4), std::invalid_argument);
}

TEST(Vision, ZeroImageGivesBiasRows) {
  ModelConfig cfg = tiny_config(32);
  Model model(cfg, 2);
  auto bias = model.params().get("vision.patch.b");
  for (std::size_t i = 0; i < bias->size(); ++i)
    bias->data()[i] = 0.25 * static_cast<double>(i);
  SyntheticImage zero;
  zero.pixels = Tensor(8, 8);
  Tensor tokens = encode_image(
      zero, VisionEncoder{4, model.params().get("vision.patch.w"), bias});
  for (std::size_t r = 0; r < tokens.rows(); ++r)
    for (std::size_t c = 0; c < tokens.cols(); ++c)
      EXPECT_DOUBLE_EQ(tokens.at(r, c), bias->at(0, c));
}

TEST(Vision, GoldenTokenChecksum) {
  // Reference-seed weights on a fixed image; frozen when first generated.
  ModelConfig cfg = tiny_config(32);
  Model model(cfg, 424242);
  Tensor tokens = encode_image(
      checker_image(8), VisionEncoder{4, model.params().get("vision.patch.w"),
                                      model.params().get("vision.patch.b")});
  std::string bytes(reinterpret_cast<const char*>(tokens.data()),
                    tokens.size() * sizeof(double));
  EXPECT_EQ(fnv1a64(bytes), 0xa001c1d14e5722cdULL);
}

TEST(Projector, ClosedFormAtZeroInput) {
  ModelConfig cfg = tiny_config(32);
  Model model(cfg, 3);
  Projector proj{model.params().get("projector.l1.w"),
                 model.params().get("projector.l1.b"),
                 model.params().get("projector.l2.w"),
                 model.params().get("projector.l2.b")};
  RngStream rng(55);
  for (double& x : proj.b1->values()) x = rng.next_normal();
  for (double& x : proj.b2->values()) x = rng.next_normal();

  Tensor zero(3, 8);
  Tensor out = project(zero, proj);
  // GeLU(b1) * W2 + b2, computed by hand.
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t c = 0; c < out.cols(); ++c) {
      double expect = proj.b2->at(0, c);
      for (std::size_t h = 0; h < proj.w2->rows(); ++h) {
        double b = proj.b1->at(0, h);
        double gelu = 0.5 * b * (1.0 + std::erf(b / std::sqrt(2.0)));
        expect += gelu * proj.w2->at(h, c);
      }
      EXPECT_NEAR(out.at(r, c), expect, 1e-12);
    }
  }
}

TEST(Projector, GradientMatchesFiniteDifferences) {
  ModelConfig cfg = tiny_config(32);
  Model model(cfg, 4);
  model.params().set_phase_masks({"projector.*"}, {});
  Projector proj{model.params().get("projector.l1.w"),
                 model.params().get("projector.l1.b"),
                 model.params().get("projector.l2.w"),
                 model.params().get("projector.l2.b")};
  RngStream rng(66);
  Tensor input(4, 8);
  for (double& x : input.values()) x = rng.next_normal();
  Tensor weights(4, 16);
  for (double& x : weights.values()) x = rng.next_normal();

  auto f = [&](Graph& g) {
    Val out = project(g, g.constant(input), proj);
    return g.sum_all(g.mul(out, g.constant(weights)));
  };
  auto report = finite_difference_check(f, model.params(), 1e-5);
  EXPECT_LT(report.max_error, 1e-4);
}

TEST(Backbone, CausalityUnderFuturePerturbation) {
  Vocabulary vocab = corpus_vocabulary();
  ModelConfig cfg = tiny_config(vocab.size());
  Model model(cfg, 5);
  Sequence seq;
  seq.image = checker_image(8);
  seq.text = vocab.tokenize("is there a lesion in the upper half ? yes");
  seq.prefix_len = 4;

  Tensor base = model.lm_forward(seq);
  RngStream rng(77);
  for (int trial = 0; trial < 6; ++trial) {
    std::size_t t = rng.next_below(seq.text.size() - 1) + 1;
    Sequence perturbed = seq;
    perturbed.text[t] = (perturbed.text[t] + 17) % vocab.size();
    Tensor out = model.lm_forward(perturbed);
    std::size_t combined_t = 4 + t;  // four image tokens precede the text
    for (std::size_t r = 0; r < combined_t; ++r)
      for (std::size_t c = 0; c < base.cols(); ++c)
        ASSERT_EQ(base.at(r, c), out.at(r, c))
            << "row " << r << " changed by perturbation at " << combined_t;
  }
}

TEST(Backbone, SingleTokenLogitShape) {
  ModelConfig cfg = tiny_config(64);
  Model model(cfg, 6);
  Sequence seq;
  seq.text = {Vocabulary::kBos};
  seq.prefix_len = 1;
  Tensor logits = model.lm_forward(seq);
  EXPECT_EQ(logits.rows(), 1u);
  EXPECT_EQ(logits.cols(), 64u);
}

TEST(Backbone, OverlongSequenceRejected) {
  ModelConfig cfg = tiny_config(64);
  Model model(cfg, 6);
  Sequence seq;
  seq.text.assign(60, Vocabulary::kBos);
  seq.prefix_len = 1;
  EXPECT_THROW(model.lm_forward(seq), std::length_error);
}

TEST(Backbone, FreshModelEntropyNearLogVocab) {
  Vocabulary vocab = corpus_vocabulary();
  ModelConfig cfg = tiny_config(vocab.size());
  cfg.transformer.d_model = 64;
  cfg.transformer.n_heads = 4;
  Model model(cfg, 7);
  Sequence seq;
  seq.image = checker_image(8);
  seq.text = vocab.tokenize("describe the scan");
  seq.prefix_len = 5;
  Tensor logits = model.lm_forward(seq);
  double target = std::log(static_cast<double>(vocab.size()));
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    double mx = logits.at(r, 0);
    for (std::size_t c = 0; c < logits.cols(); ++c)
      mx = std::max(mx, logits.at(r, c));
    double z = 0.0, ent = 0.0;
    for (std::size_t c = 0; c < logits.cols(); ++c)
      z += std::exp(logits.at(r, c) - mx);
    for (std::size_t c = 0; c < logits.cols(); ++c) {
      double p = std::exp(logits.at(r, c) - mx) / z;
      if (p > 0) ent -= p * std::log(p);
    }
    EXPECT_NEAR(ent, target, 0.05 * target);
  }
}

TEST(Backbone, NllLossHandCases) {
  ModelConfig cfg = tiny_config(16);
  Model model(cfg, 8);

  // Rig the head so the model assigns probability ~1 to token 5 everywhere:
  // loss on a target sequence of 5s is ~0.
  auto hw = model.params().get("lm.head.w");
  std::fill(hw->values().begin(), hw->values().end(), 0.0);
  auto hb = model.params().get("lm.head.b");
  std::fill(hb->values().begin(), hb->values().end(), 0.0);
  hb->at(0, 5) = 200.0;

  Sequence seq;
  seq.text = {Vocabulary::kBos, 5, 5, 5};
  seq.prefix_len = 1;
  EXPECT_NEAR(model.nll_loss({seq}), 0.0, 1e-9);

  // Uniform logits: loss is ln(vocab).
  hb->at(0, 5) = 0.0;
  EXPECT_NEAR(model.nll_loss({seq}), std::log(16.0), 1e-9);

  // No response positions is an error.
  Sequence empty;
  empty.text = {Vocabulary::kBos, 5};
  empty.prefix_len = 2;
  EXPECT_THROW(model.nll_loss({empty}), std::invalid_argument);
}

TEST(Backbone, NllLossHandComputedThreeTokens) {
  // Hand-set logits via a rigged head bias; three-token response.
  ModelConfig cfg = tiny_config(8);
  Model model(cfg, 9);
  auto hw = model.params().get("lm.head.w");
  std::fill(hw->values().begin(), hw->values().end(), 0.0);
  auto hb = model.params().get("lm.head.b");
  std::fill(hb->values().begin(), hb->values().end(), 0.0);
  hb->at(0, 6) = 1.0;  // constant logits: 1 at token 6, 0 elsewhere

  Sequence seq;
  seq.text = {Vocabulary::kBos, 6, 7, 6};
  seq.prefix_len = 1;
  // Each position: softmax over [0,...,1@6,0]; p(6) = e / (e + 7),
  // p(7) = 1 / (e + 7).
  double z = std::exp(1.0) + 7.0;
  double expected =
      -(std::log(std::exp(1.0) / z) * 2 + std::log(1.0 / z)) / 3.0;
  EXPECT_NEAR(model.nll_loss({seq}), expected, 1e-12);
}

TEST(Backbone, LossMaskShiftRemovesOneTerm) {
  Vocabulary vocab = corpus_vocabulary();
  ModelConfig cfg = tiny_config(vocab.size());
  Model model(cfg, 10);
  Sequence seq;
  seq.image = checker_image(8);
  seq.text = vocab.tokenize("a ct scan with no lesion");
  seq.text.insert(seq.text.begin(), Vocabulary::kBos);
  seq.text.push_back(Vocabulary::kEos);
  seq.prefix_len = 5;

  Graph g1, g2;
  auto [nll1, n1] = model.build_nll_sum(g1, seq);
  Sequence shifted = seq;
  shifted.prefix_len += 1;
  auto [nll2, n2] = model.build_nll_sum(g2, shifted);
  EXPECT_EQ(n1, n2 + 1);
  // The removed term is exactly the first response position's NLL.
  Graph g3;
  Val logits = model.build_logits(g3, seq);
  std::size_t row = static_cast<std::size_t>(seq.prefix_len) - 1;
  int target = seq.text[static_cast<std::size_t>(seq.prefix_len) - 4];
  Val one = g3.nll_sum(logits, {{row, target}});
  EXPECT_NEAR(g1.value(nll1).at(0, 0) - g2.value(nll2).at(0, 0),
              g3.value(one).at(0, 0), 1e-12);
}

TEST(Backbone, GreedyGenerateRigged) {
  ModelConfig cfg = tiny_config(16);
  Model model(cfg, 11);
  auto hb = model.params().get("lm.head.b");

  // EOS forced first: empty generation.
  std::fill(hb->values().begin(), hb->values().end(), 0.0);
  hb->at(0, Vocabulary::kEos) = 500.0;
  Sequence prompt;
  prompt.text = {Vocabulary::kBos, 7};
  prompt.prefix_len = 2;
  EXPECT_TRUE(model.greedy_generate(prompt, 5).empty());

  // Constant token 9 rig: exactly max_new copies.
  std::fill(hb->values().begin(), hb->values().end(), 0.0);
  hb->at(0, 9) = 500.0;
  auto out = model.greedy_generate(prompt, 3);
  EXPECT_EQ(out, (std::vector<int>{9, 9, 9}));

  // Context overflow reported.
  Sequence big;
  big.text.assign(44, 7);
  big.prefix_len = 44;
  EXPECT_THROW(model.greedy_generate(big, 10), std::length_error);
}

TEST(Backbone, GreedyGenerateFixedSequenceViaTransitionRig) {
  // Zero out everything except a token-transition head so generation walks
  // BOS -> 7 -> 9 -> 5 -> EOS regardless of position.
  ModelConfig cfg = tiny_config(16);
  cfg.transformer.n_layers = 1;
  Model model(cfg, 12);
  for (const auto& name : model.params().names()) {
    if (name.rfind("lm.", 0) == 0 && name.find("ln1.g") == std::string::npos &&
        name.find("final_ln.g") == std::string::npos) {
      auto t = model.params().get(name);
      std::fill(t->values().begin(), t->values().end(), 0.0);
    }
  }
  auto emb = model.params().get("lm.tok_emb");
  for (std::size_t i = 0; i < 16; ++i) emb->at(i, i) = 4.0;
  auto hw = model.params().get("lm.head.w");
  auto set_transition = [&](int from, int to) {
    // After layer norm the dominant coordinate of tok_emb[from] is `from`.
    hw->at(static_cast<std::size_t>(from), static_cast<std::size_t>(to)) =
        10.0;
  };
  set_transition(Vocabulary::kBos, 7);
  set_transition(7, 9);
  set_transition(9, 5);
  set_transition(5, Vocabulary::kEos);

  Sequence prompt;
  prompt.text = {Vocabulary::kBos};
  prompt.prefix_len = 1;
  EXPECT_EQ(model.greedy_generate(prompt, 8), (std::vector<int>{7, 9, 5}));
}

TEST(Backbone, AttentionBlockGradientsMatchFiniteDifferences) {
  ModelConfig cfg = tiny_config(32);
  cfg.transformer.n_layers = 1;
  cfg.transformer.d_model = 8;
  cfg.transformer.n_heads = 2;
  Model model(cfg, 13);
  model.params().set_phase_masks({"lm.layer0.attn.*", "lm.layer0.ln1.*"}, {});

  RngStream rng(88);
  Tensor input(5, 8);
  for (double& x : input.values()) x = rng.next_normal();
  Tensor weights(5, 8);
  for (double& x : weights.values()) x = rng.next_normal();
  auto f = [&](Graph& g) {
    Val out = model.attention(g, g.constant(input), 0);
    return g.sum_all(g.mul(out, g.constant(weights)));
  };
  auto report = finite_difference_check(f, model.params(), 1e-5);
  EXPECT_LT(report.max_error, 1e-4);
}

TEST(Backbone, DenseFfnBlockGradientsMatchFiniteDifferences) {
  ModelConfig cfg = tiny_config(32);
  cfg.transformer.n_layers = 1;
  cfg.transformer.d_model = 8;
  cfg.transformer.n_heads = 2;
  cfg.transformer.ffn_hidden = 12;
  Model model(cfg, 14);
  model.params().set_phase_masks({"lm.layer0.ffn.*"}, {});

  RngStream rng(89);
  Tensor input(5, 8);
  for (double& x : input.values()) x = rng.next_normal();
  Tensor weights(5, 8);
  for (double& x : weights.values()) x = rng.next_normal();
  auto f = [&](Graph& g) {
    Val x = g.constant(input);
    Val out = g.add(x, model.ffn(g, x, "lm.layer0.ffn"));
    return g.sum_all(g.mul(out, g.constant(weights)));
  };
  auto report = finite_difference_check(f, model.params(), 1e-5);
  EXPECT_LT(report.max_error, 1e-4);
}

}  // namespace
}  // namespace micromoe
