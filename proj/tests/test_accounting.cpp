#include <gtest/gtest.h>

#include <sstream>

#include "petl/accounting.hpp"
#include "petl/model.hpp"
#include "test_util.hpp"

using namespace petl;
using petl::testing::tiny_config;

namespace {

const BackboneConfig kFull = BackboneConfig::full_scale();

accounting::ParamReport census(const PetlMethod& m, const BackboneConfig& cfg = kFull) {
  return accounting::count_trainable(build_plan(m, cfg), cfg);
}

std::vector<PetlMethod> method_grid(std::size_t h) {
  std::vector<PetlMethod> out{method::FullFineTune{}, method::LinearProbe{}, method::BitFit{},
                              method::Lora{.r = h},   method::Lora{.r = h, .target_v = false},
                              method::PromptShallow{h}, method::PromptDeep{h}, method::Prefix{h}};
  for (auto c : {AdapterConfig::Pfeiffer, AdapterConfig::Houlsby}) {
    for (auto mode : {AdapterMode::Parallel, AdapterMode::Sequential})
      out.push_back(method::Bottleneck{.r = h, .config = c, .mode = mode});
    for (std::size_t k : {1, 2, 5})
      out.push_back(method::Conformer{.r = h, .k = k, .config = c});
  }
  return out;
}

}  // namespace

TEST(Census, ReferenceBudgets) {
  EXPECT_EQ(census(method::Lora{.r = 6}).trainable_params, 221184u);
  EXPECT_EQ(census(method::PromptShallow{300}).trainable_params, 230400u);
  EXPECT_EQ(census(method::PromptDeep{25}).trainable_params, 230400u);
  EXPECT_EQ(census(method::Prefix{24}).trainable_params, 221184u);
  EXPECT_EQ(census(method::BitFit{}).trainable_params, 101376u);
  EXPECT_EQ(census(method::Bottleneck{.r = 12}).trainable_params, 248976u);
  EXPECT_EQ(census(method::Bottleneck{.r = 12, .config = AdapterConfig::Houlsby}).trainable_params, 497952u);
  EXPECT_EQ(census(method::LinearProbe{}).trainable_params, 0u);
  EXPECT_EQ(census(method::LinearProbe{}).head_params, 38450u);
}

TEST(Census, BottleneckMatchesHandFormula) {
  const std::size_t d = 768, L = 12, r = 12;
  EXPECT_EQ(census(method::Bottleneck{.r = r}).trainable_params, L * (2 * d * r + r + d + 2 * d));
}

TEST(Census, BackboneTotalMatchesIndependentFormula) {
  const std::size_t d = 768, L = 12, ff = 4 * d, patches = (128 / 16) * (640 / 16);
  const std::size_t embed = 16 * 16 * d + d + d + (patches + 1) * d;
  const std::size_t layer = 4 * (d * d + d) + (d * ff + ff) + (ff * d + d) + 4 * d;
  const std::size_t expected = embed + L * layer + 2 * d;
  EXPECT_EQ(expected, 85500672u);
  EXPECT_EQ(accounting::backbone_total(kFull), expected);
  EXPECT_EQ(census(method::Lora{}).backbone_params, expected);
}

TEST(Census, EnumerationEqualsClosedFormOverGrid) {
  for (std::size_t d : {8, 12}) {
    for (std::size_t layers : {1, 3}) {
      BackboneConfig cfg = tiny_config(layers);
      cfg.d = d;
      cfg.heads = 2;
      for (std::size_t h : {1, 2, 5}) {
        for (const auto& m : method_grid(h)) {
          const auto r = census(m, cfg);
          EXPECT_EQ(r.trainable_params, accounting::closed_form(m, cfg)) << describe(m) << " d=" << d;
          std::size_t sum = 0;
          for (const auto& [k, n] : r.per_module) sum += n;
          EXPECT_EQ(sum, r.trainable_params) << describe(m);
        }
      }
    }
  }
}

TEST(Census, AllocatedStoreAgreesWithLayoutCensus) {
  const auto cfg = tiny_config(2);
  for (const auto& m : method_grid(2)) {
    Model model(cfg, m, 0);
    const auto a = accounting::count_trainable(model.params(), model.plan(), cfg);
    const auto b = census(m, cfg);
    EXPECT_EQ(a.trainable_params, b.trainable_params) << describe(m);
    EXPECT_EQ(a.head_params, b.head_params) << describe(m);
    EXPECT_EQ(a.total_params, b.total_params) << describe(m);
    EXPECT_EQ(a.per_module, b.per_module) << describe(m);
  }
}

TEST(Census, HoulsbyIsTwicePfeiffer) {
  for (std::size_t r : {1, 6, 12}) {
    EXPECT_EQ(census(method::Bottleneck{.r = r, .config = AdapterConfig::Houlsby}).trainable_params,
              2 * census(method::Bottleneck{.r = r}).trainable_params);
    EXPECT_EQ(census(method::Conformer{.r = r, .k = 8, .config = AdapterConfig::Houlsby}).trainable_params,
              2 * census(method::Conformer{.r = r, .k = 8}).trainable_params);
  }
}

TEST(Census, ConformerIsAffineInKernel) {
  for (auto c : {AdapterConfig::Pfeiffer, AdapterConfig::Houlsby}) {
    const std::size_t sites = c == AdapterConfig::Pfeiffer ? 1 : 2;
    const std::size_t base = census(method::Conformer{.r = 8, .k = 1, .config = c}).trainable_params;
    for (std::size_t k = 1; k <= 31; k += 3)
      EXPECT_EQ(census(method::Conformer{.r = 8, .k = k, .config = c}).trainable_params,
                base + 12 * sites * 8 * (k - 1));
  }
}

TEST(Percent, ReferenceRatios) {
  auto pct = [](const PetlMethod& m) { return accounting::sig2(census(m).percent_of_full); };
  EXPECT_EQ(pct(method::Bottleneck{.r = 12}), "0.29");
  EXPECT_EQ(pct(method::Bottleneck{.r = 12, .config = AdapterConfig::Houlsby}), "0.58");
  EXPECT_EQ(pct(method::Conformer{.r = 8, .k = 8}), "0.29");
  EXPECT_EQ(pct(method::Conformer{.r = 8, .k = 8, .config = AdapterConfig::Houlsby}), "0.58");
  EXPECT_EQ(pct(method::FullFineTune{}), "100");
  EXPECT_DOUBLE_EQ(census(method::FullFineTune{}).percent_of_full, 100.0);
}

TEST(Percent, ZeroDenominatorRejected) {
  accounting::ParamReport r;
  EXPECT_THROW(accounting::percent_of_full(r, 0), ConfigError);
}

TEST(Percent, TwoSignificantFigures) {
  EXPECT_EQ(accounting::sig2(0.29121), "0.29");
  EXPECT_EQ(accounting::sig2(0.5824), "0.58");
  EXPECT_EQ(accounting::sig2(2.345), "2.3");
  EXPECT_EQ(accounting::sig2(0.0), "0");
}

TEST(Census, ConformerReferenceConfigurationCarriesNote) {
  EXPECT_FALSE(census(method::Conformer{.r = 8, .k = 31}).note.empty());
  EXPECT_TRUE(census(method::Conformer{.r = 8, .k = 8}).note.empty());
}

TEST(SolveBudget, InvertsReferenceLora) {
  EXPECT_EQ(accounting::solve_budget(method::Lora{}, 221184, kFull), 6u);
  EXPECT_EQ(accounting::solve_budget(method::Lora{}, 221183, kFull), 5u);
  EXPECT_EQ(accounting::solve_budget(method::Prefix{}, 221184, kFull), 24u);
  EXPECT_EQ(accounting::solve_budget(method::Bottleneck{}, 248976, kFull), 12u);
}

TEST(SolveBudget, InfeasibleTargetThrows) {
  const std::size_t min_lora = accounting::closed_form(method::Lora{.r = 1}, kFull);
  EXPECT_THROW(accounting::solve_budget(method::Lora{}, min_lora - 1, kFull), ConfigError);
  EXPECT_THROW(accounting::solve_budget(method::BitFit{}, 1000000, kFull), ConfigError);
}

TEST(SolveBudget, MonotoneAndTight) {
  for (const PetlMethod& family : {PetlMethod{method::Lora{}}, PetlMethod{method::Bottleneck{}},
                                   PetlMethod{method::Conformer{.r = 8, .k = 31}}, PetlMethod{method::PromptDeep{}}}) {
    std::size_t prev = 0;
    for (std::size_t target = 60000; target <= 1000000; target += 47000) {
      const std::size_t h = accounting::solve_budget(family, target, kFull);
      EXPECT_GE(h, prev) << method_name(family);
      EXPECT_LE(accounting::closed_form(accounting::with_hyperparameter(family, h), kFull), target);
      EXPECT_GT(accounting::closed_form(accounting::with_hyperparameter(family, h + 1), kFull), target);
      prev = h;
    }
  }
}

TEST(Report, JsonAndTableOutputs) {
  const auto r = census(method::Lora{.r = 6});
  const auto j = accounting::to_json(r);
  EXPECT_EQ(j["trainable_params"], 221184u);
  EXPECT_EQ(j["closed_form"], 221184u);
  EXPECT_EQ(j["head_params"], 38450u);
  EXPECT_EQ(j["method"], "lora");
  std::ostringstream os;
  accounting::print_table(os, r, true);
  EXPECT_NE(os.str().find("221,184"), std::string::npos);
  EXPECT_NE(os.str().find("(match)"), std::string::npos);
  EXPECT_NE(os.str().find("layer.11.mhsa.lora"), std::string::npos);
}
