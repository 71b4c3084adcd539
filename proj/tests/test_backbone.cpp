#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>
#include <string>

#include "petl/model.hpp"
#include "test_util.hpp"

using namespace petl;
using petl::testing::finite_difference;
using petl::testing::max_abs_diff;
using petl::testing::probe;
using petl::testing::rand_tensor;
using petl::testing::spectrograms;
using petl::testing::tiny_config;

namespace {

using Inputs = std::vector<Tensor>;

EncoderLayer zero_layer(std::size_t d, std::size_t ff) {
  auto z = [](Shape s) { return Tensor::zeros(std::move(s)); };
  EncoderLayer l;
  l.ln1_gamma = Tensor::full({d}, 1.0);
  l.ln1_beta = z({d});
  l.wq = z({d, d}), l.wk = z({d, d}), l.wv = z({d, d}), l.wo = z({d, d});
  l.bq = z({d}), l.bk = z({d}), l.bv = z({d}), l.bo = z({d});
  l.ln2_gamma = Tensor::full({d}, 1.0);
  l.ln2_beta = z({d});
  l.w_ff1 = z({d, ff}), l.b_ff1 = z({ff}), l.w_ff2 = z({ff, d}), l.b_ff2 = z({d});
  return l;
}

Tensor encode_traced(Model& m, const Tensor& x, std::vector<LayerTrace>& trace) {
  NoGradScope ng;
  return m.encode(x, false, &trace);
}

}  // namespace

TEST(PatchEmbed, DeskGridGivesSeventeenTokens) {
  BackboneConfig cfg;  // 32x32 input, 8x8 patches
  Model m(cfg, method::LinearProbe{}, 0);
  Tensor seq = patch_embed(spectrograms(cfg, 2), PatchEmbedding::bind(m.params()), cfg);
  EXPECT_EQ(seq.shape(), (Shape{2, 17, cfg.d}));
}

TEST(PatchEmbed, ZeroInputShowsClsAndBias) {
  const auto cfg = tiny_config();
  const std::size_t d = cfg.d, s = cfg.seq_len();
  std::mt19937_64 rng(1);
  PatchEmbedding emb{Tensor::zeros({64, d}), rand_tensor({d}, rng), rand_tensor({1, d}, rng), Tensor::zeros({s, d})};
  Tensor seq = patch_embed(Tensor::zeros({1, 16, 16}), emb, cfg);
  for (std::size_t j = 0; j < d; ++j) {
    EXPECT_EQ(seq[j], emb.cls[j]);
    for (std::size_t t = 1; t < s; ++t) EXPECT_EQ(seq[t * d + j], emb.bias[j]);
  }
}

TEST(PatchEmbed, Gradcheck) {
  const auto cfg = tiny_config();
  std::mt19937_64 rng(2);
  auto r = finite_difference({rand_tensor({2, 16, 16}, rng, true), rand_tensor({64, 8}, rng, true),
                              rand_tensor({8}, rng, true), rand_tensor({1, 8}, rng, true),
                              rand_tensor({5, 8}, rng, true)},
                             [&](const Inputs& in) {
                               return probe(patch_embed(in[0], PatchEmbedding{in[1], in[2], in[3], in[4]}, cfg));
                             });
  EXPECT_LT(r.max_rel, 1e-4);
}

TEST(PatchEmbed, GridMismatchThrows) {
  const auto cfg = tiny_config();
  Model m(cfg, method::LinearProbe{}, 0);
  EXPECT_THROW(patch_embed(Tensor::zeros({1, 16, 24}), PatchEmbedding::bind(m.params()), cfg), DimensionError);
}

TEST(EncoderLayer, ZeroSublayersAreIdentity) {
  std::mt19937_64 rng(3);
  Tensor x = rand_tensor({2, 5, 8}, rng);
  Tensor y = layer_forward(x, zero_layer(8, 16), {}, 2, false);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(EncoderLayer, AttentionRowsSumToOne) {
  const auto cfg = tiny_config();
  Model m(cfg, method::LinearProbe{}, 4);
  std::vector<LayerTrace> trace;
  encode_traced(m, spectrograms(cfg, 3), trace);
  for (const auto& t : trace) {
    const std::size_t cols = t.attn_probs.last_dim();
    for (std::size_t r = 0; r < t.attn_probs.rows(); ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < cols; ++j) s += t.attn_probs[r * cols + j];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Encode, ShapeAndBitDeterminism) {
  const auto cfg = tiny_config();
  Model a(cfg, method::Lora{.r = 2}, 11), b(cfg, method::Lora{.r = 2}, 11);
  Tensor x = spectrograms(cfg, 4);
  NoGradScope ng;
  Tensor ya = a.encode(x, false), yb = b.encode(x, false);
  EXPECT_EQ(ya.shape(), (Shape{4, cfg.d}));
  for (std::size_t i = 0; i < ya.numel(); ++i) EXPECT_EQ(ya[i], yb[i]);
}

TEST(Encode, SequenceLengthsFollowThePlan) {
  const auto cfg = tiny_config(3);
  const std::size_t s = cfg.seq_len(), p = 3;
  Tensor x = spectrograms(cfg, 2);
  std::vector<LayerTrace> trace;
  for (const PetlMethod& m : {PetlMethod{method::LinearProbe{}}, PetlMethod{method::Lora{.r = 2}},
                              PetlMethod{method::Bottleneck{.r = 2}}, PetlMethod{method::BitFit{}}}) {
    Model model(cfg, m, 0);
    encode_traced(model, x, trace);
    for (const auto& t : trace) EXPECT_EQ(t.input.dim(1), s) << method_name(m);
  }
  for (const PetlMethod& m : {PetlMethod{method::PromptShallow{p}}, PetlMethod{method::PromptDeep{p}}}) {
    Model model(cfg, m, 0);
    encode_traced(model, x, trace);
    for (const auto& t : trace) {
      EXPECT_EQ(t.input.dim(1), s + p) << method_name(m);
      EXPECT_EQ(t.output.dim(1), s + p) << method_name(m);
    }
  }
  Model prefix(cfg, method::Prefix{p}, 0);
  encode_traced(prefix, x, trace);
  for (const auto& t : trace) {
    EXPECT_EQ(t.input.dim(1), s);
    EXPECT_EQ(t.keys.dim(1), s + p);
    EXPECT_EQ(t.attn_probs.shape(), (Shape{2, cfg.heads, s, s + p}));
  }
}

TEST(Classify, ZeroHeadGivesZeroLogits) {
  std::mt19937_64 rng(5);
  Tensor logits = classify(rand_tensor({3, 8}, rng), ClassifierHead{Tensor::zeros({8, 4}), Tensor::zeros({4})});
  EXPECT_EQ(logits.shape(), (Shape{3, 4}));
  for (double v : logits.data()) EXPECT_EQ(v, 0.0);
}

TEST(Classify, HeadParameterCounts) {
  auto head_count = [](const BackboneConfig& cfg) {
    std::size_t n = 0;
    for (const auto& s : head_layout(cfg)) n += s.numel();
    return n;
  };
  EXPECT_EQ(head_count(BackboneConfig::full_scale(50)), 768u * 50 + 50);
  EXPECT_EQ(head_count(BackboneConfig::full_scale(50)), 38450u);
  EXPECT_EQ(head_count(BackboneConfig::full_scale(10)), 7690u);
}

TEST(Classify, Gradcheck) {
  std::mt19937_64 rng(6);
  auto r = finite_difference({rand_tensor({3, 8}, rng, true), rand_tensor({8, 4}, rng, true), rand_tensor({4}, rng, true)},
                             [](const Inputs& in) { return probe(classify(in[0], ClassifierHead{in[1], in[2]})); });
  EXPECT_LT(r.max_rel, 1e-6);
}

TEST(Freeze, LoraTrainableSetIsAdaptersPlusHead) {
  const auto cfg = tiny_config();
  Model m(cfg, method::Lora{.r = 2}, 0);
  std::set<std::string> expected{"head.weight", "head.bias"};
  for (std::size_t i = 0; i < cfg.layers; ++i)
    for (const char* n : {"A_q", "B_q", "A_v", "B_v"}) expected.insert("layer." + std::to_string(i) + ".mhsa.lora." + n);
  EXPECT_EQ(m.params().trainable_ids(), expected);
}

TEST(Freeze, BitFitTrainableSetIsLayerShiftsPlusHead) {
  const auto cfg = tiny_config();
  Model m(cfg, method::BitFit{}, 0);
  std::set<std::string> expected{"head.weight", "head.bias"};
  for (const auto& [id, t] : m.params().entries()) {
    const bool in_layers = id.rfind("layer.", 0) == 0;
    const bool shift = id.ends_with(".bias") || id.ends_with(".beta");
    if (in_layers && shift) expected.insert(id);
  }
  EXPECT_EQ(expected.size(), 2 + cfg.layers * 8);  // q,k,v,o,fc1,fc2 biases + ln1/ln2 betas
  EXPECT_EQ(m.params().trainable_ids(), expected);
}

TEST(Freeze, FreezeAllKeepsHeadAndModules) {
  const auto cfg = tiny_config();
  Model m(cfg, method::FullFineTune{}, 0);
  freeze_all(m.params());
  for (const auto& id : m.params().trainable_ids()) EXPECT_NE(param_owner(id), ParamOwner::Backbone) << id;
  EXPECT_TRUE(m.params().is_trainable("head.weight"));
}

TEST(Freeze, BackwardLeavesBackboneGradsAbsent) {
  const auto cfg = tiny_config();
  Model m(cfg, method::Lora{.r = 2}, 0);
  Tape tape;
  Tensor loss;
  const std::size_t labels[] = {0, 2};
  {
    TapeScope scope(tape);
    loss = ops::cross_entropy(m.logits(spectrograms(cfg, 2), true), labels);
  }
  tape.backward(loss);
  for (const auto& [id, t] : m.params().entries()) {
    if (param_owner(id) == ParamOwner::Backbone) {
      EXPECT_FALSE(t.has_grad()) << id;
    }
  }
  double head_norm = 0.0;
  for (double g : m.params().at("head.weight").grad()) head_norm += g * g;
  EXPECT_GT(head_norm, 0.0);
}

TEST(PreLn, LayerNormPerturbationIsLocalized) {
  const auto cfg = tiny_config(3);
  Model m(cfg, method::LinearProbe{}, 9);
  Tensor x = spectrograms(cfg, 2);
  std::vector<LayerTrace> base, moved;
  encode_traced(m, x, base);
  m.params().at("layer.1.ln2.gamma")[0] += 0.5;
  encode_traced(m, x, moved);
  for (std::size_t i = 0; i <= 1; ++i) {
    EXPECT_EQ(max_abs_diff(base[i].input, moved[i].input), 0.0);
    EXPECT_EQ(max_abs_diff(base[i].attn_input, moved[i].attn_input), 0.0);
  }
  EXPECT_EQ(max_abs_diff(base[0].ff_input, moved[0].ff_input), 0.0);
  EXPECT_GT(max_abs_diff(base[1].ff_input, moved[1].ff_input), 1e-6);
  EXPECT_GT(max_abs_diff(base[1].output, moved[1].output), 1e-6);
  EXPECT_GT(max_abs_diff(base[2].input, moved[2].input), 1e-6);

  m.params().at("layer.1.ln2.gamma")[0] -= 0.5;
  m.params().at("layer.2.ln1.beta")[1] += 0.5;
  encode_traced(m, x, moved);
  EXPECT_EQ(max_abs_diff(base[2].input, moved[2].input), 0.0);
  EXPECT_GT(max_abs_diff(base[2].attn_input, moved[2].attn_input), 1e-6);
}

TEST(Config, InvalidBackbonesRejected) {
  auto cfg = tiny_config();
  cfg.heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.patch.patch_w = 5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.layers = 0;
  EXPECT_THROW(Model(cfg, method::LinearProbe{}, 0), ConfigError);
}
