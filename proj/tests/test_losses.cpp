#include <gtest/gtest.h>
#include <set>

#include "spot/decoder.hpp"
#include "spot/losses.hpp"
#include "support.hpp"

using namespace spot;
using namespace spot::testing;
using namespace spot::loss;

namespace {

double sig(double x) { return 1 / (1 + std::exp(-x)); }

double dice_oracle(const std::vector<double>& x, const std::vector<double>& t) {
  double pt = 0, p = 0, s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    pt += sig(x[i]) * t[i];
    p += sig(x[i]);
    s += t[i];
  }
  return 1 - (2 * pt + 1) / (p + s + 1);
}

double bce_oracle(double x, double t) { return -(t * std::log(sig(x)) + (1 - t) * std::log(1 - sig(x))); }

std::vector<double> random_cost(std::mt19937_64& eng, std::size_t n) {
  std::uniform_real_distribution<double> u(0, 10);
  std::vector<double> c(n);
  for (auto& x : c) x = u(eng);
  return c;
}

// Ground truth over `nv` voxels with objects covering the listed voxel sets.
SceneGroundTruth make_gt(std::size_t nv, std::uint32_t ncls, std::vector<std::pair<std::uint32_t, std::vector<std::uint32_t>>> objs) {
  SceneGroundTruth gt;
  gt.n_classes = ncls;
  gt.labels.assign(nv, 0);
  for (auto& [c, vox] : objs) {
    for (auto v : vox) gt.labels[v] = c;
    gt.objects.push_back({c, vox});
  }
  return gt;
}

LayerPrediction<double> random_pred(std::mt19937_64& eng, std::size_t rows, std::size_t ncls, std::size_t nv) {
  return {random_tensor({rows, ncls}, eng, -3, 3), random_tensor({rows, nv}, eng, -3, 3)};
}

}  // namespace

TEST(Dice, Examples) {
  std::vector<double> t{1, 0, 1, 1, 0}, x(5);
  for (int i = 0; i < 5; ++i) x[i] = t[i] > 0 ? 20 : -20;
  EXPECT_LT(loss::dice_loss<double>(x, t), 1e-6);
  std::vector<double> zt(5, 0.0), zx(5, -20.0);
  EXPECT_NEAR(loss::dice_loss<double>(zx, zt), 0.0, 1e-7);
  std::mt19937_64 eng(1);
  auto r = random_tensor({12}, eng, -3, 3).vec();
  std::vector<double> rt(12);
  for (auto& v : rt) v = double(eng() % 2);
  EXPECT_NEAR(loss::dice_loss<double>(r, rt), dice_oracle(r, rt), 1e-12);
  EXPECT_THROW(loss::dice_loss<double>(r, t), ShapeError);
}

TEST(MaskBce, Examples) {
  std::vector<double> zero(6, 0.0), t{1, 0, 1, 0, 1, 1};
  std::vector<std::size_t> all{0, 1, 2, 3, 4, 5}, some{1, 4};
  EXPECT_NEAR(loss::mask_bce<double>(zero, t, all), std::log(2.0), 1e-15);
  std::vector<double> sat(6);
  for (int i = 0; i < 6; ++i) sat[i] = t[i] > 0 ? 20 : -20;
  EXPECT_LT(loss::mask_bce<double>(sat, t, all), 1e-6);
  std::mt19937_64 eng(2);
  auto x = random_tensor({6}, eng, -4, 4).vec();
  EXPECT_NEAR(loss::mask_bce<double>(x, t, some), 0.5 * (bce_oracle(x[1], t[1]) + bce_oracle(x[4], t[4])), 1e-10);
  EXPECT_THROW(loss::mask_bce<double>(x, t, {}), Error);
}

TEST(SamplePoints, UniformWithoutReplacementAndDeterministic) {
  const auto a = sample_points(5000, 2048, 9);
  EXPECT_EQ(a.size(), 2048u);
  EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
  EXPECT_EQ(std::adjacent_find(a.begin(), a.end()), a.end());
  EXPECT_EQ(a, sample_points(5000, 2048, 9));
  EXPECT_NE(a, sample_points(5000, 2048, 10));
  EXPECT_EQ(sample_points(100, 2048, 1).size(), 100u);
}

TEST(Hungarian, Examples) {
  std::vector<double> diag{0, 5, 5, 5, 0, 5, 5, 5, 0};
  EXPECT_EQ(hungarian_match(diag, 3, 3).pairs, (std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}, {1, 1}, {2, 2}}));
  EXPECT_EQ(hungarian_match(std::vector<double>{3.0}, 1, 1).pairs, (std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}}));
  std::mt19937_64 eng(3);
  const auto c = random_cost(eng, 30);
  const auto a = hungarian_match(c, 6, 5);
  EXPECT_NEAR(assignment_cost(c, 5, a), brute_force_assignment(c, 6, 5), 1e-12);
  EXPECT_THROW(hungarian_match(std::vector<double>{1, std::nan("")}, 2, 1), Error);
  EXPECT_THROW(hungarian_match(std::vector<double>{1, 2}, 1, 2), Error);
}

TEST(Hungarian, MatchesBruteForceOnRandomInstances) {
  std::mt19937_64 eng(4);
  for (int t = 0; t < 200; ++t) {
    const std::size_t nobj = 1 + eng() % 6, nq = nobj + eng() % 3;
    auto c = random_cost(eng, nq * nobj);
    if (t % 4 == 0)
      for (auto& x : c) x = std::round(x / 3);  // many ties
    const auto a = hungarian_match(c, nq, nobj);
    ASSERT_EQ(a.pairs.size(), nobj);
    std::set<std::size_t> qs;
    for (std::size_t o = 0; o < nobj; ++o) {
      EXPECT_EQ(a.pairs[o].second, o);
      qs.insert(a.pairs[o].first);
    }
    EXPECT_EQ(qs.size(), nobj);
    EXPECT_NEAR(assignment_cost(c, nobj, a), brute_force_assignment(c, nq, nobj), 1e-9);
    EXPECT_EQ(hungarian_match(c, nq, nobj), a);
  }
}

TEST(MatchCost, Examples) {
  const LossWeights w;
  std::vector<double> logits{-30, 30, -30}, heat{20, 20, -20, -20}, tgt{1, 1, 0, 0};
  EXPECT_LT(match_cost<double>(logits, heat, tgt, 1, w), 1e-6);

  std::vector<double> good_l{0, 2, 0}, bad_l{0, 1, 0}, good_h{2, 2, -2, -2}, bad_h{1, -1, 1, -2};
  EXPECT_LT(match_cost<double>(good_l, good_h, tgt, 1, w), match_cost<double>(bad_l, bad_h, tgt, 1, w));

  std::mt19937_64 eng(5);
  auto l = random_tensor({3}, eng, -2, 2).vec(), h = random_tensor({4}, eng, -2, 2).vec();
  double ce = -std::log(std::exp(l[2]) / (std::exp(l[0]) + std::exp(l[1]) + std::exp(l[2])));
  double bce = 0;
  for (int i = 0; i < 4; ++i) bce += bce_oracle(h[i], tgt[i]) / 4;
  EXPECT_NEAR(match_cost<double>(l, h, tgt, 2, w), w.w_ce * ce + w.w_bce * bce + w.w_dice * dice_oracle(h, tgt), 1e-12);
}

TEST(LossMatch, ZeroWeightsGiveZero) {
  std::mt19937_64 eng(6);
  const auto gt = make_gt(6, 3, {{1, {0, 1}}, {2, {4}}});
  LossWeights w{0, 0, 0, 0.1, 2048};
  Tp t(false);
  EXPECT_EQ(loss_match<double>(t, {random_pred(eng, 3, 3, 6)}, 3, gt, w, 1).value.item(), 0.0);
}

TEST(LossMatch, SingleQuerySingleObjectEqualsMatchCost) {
  std::mt19937_64 eng(7);
  const auto gt = make_gt(8, 3, {{2, {1, 2, 5}}});
  const LossWeights w;
  const auto pred = random_pred(eng, 1, 3, 8);
  Tp t(false);
  const double got = loss_match<double>(t, {pred}, 1, gt, w, 3).value.item();
  const auto samples = sample_points(8, w.n_sample_points, layer_sample_seed(3, 0));
  std::vector<double> tgt(8, 0.0);
  for (auto v : gt.objects[0].voxels) tgt[v] = 1;
  EXPECT_NEAR(got, match_cost<double>(pred.class_logits.data(), pred.mask_heatmaps.data(), tgt, 2, w), 1e-12);
}

TEST(LossMatch, InvariantUnderObjectPermutation) {
  std::mt19937_64 eng(8);
  const auto gt = make_gt(20, 4, {{1, {0, 1, 2}}, {3, {5, 6}}, {2, {10, 11, 12, 13}}});
  auto perm = gt;
  std::swap(perm.objects[0], perm.objects[2]);
  std::swap(perm.objects[1], perm.objects[2]);
  std::vector<LayerPrediction<double>> preds{random_pred(eng, 5, 4, 20), random_pred(eng, 5, 4, 20)};
  LossWeights w;
  w.n_sample_points = 12;
  Tp t(false);
  EXPECT_NEAR(loss_match<double>(t, preds, 5, gt, w, 4).value.item(), loss_match<double>(t, preds, 5, perm, w, 4).value.item(),
              1e-12);
}

TEST(LossMatch, UnmatchedQueriesTargetNoObject) {
  const auto gt = make_gt(4, 3, {{2, {0, 1}}});
  LossWeights w;
  w.w_bce = w.w_dice = 0;
  // Query 1 predicts class 2 with certainty, query 0 predicts no-object.
  LayerPrediction<double> pred{Td({2, 3}, {30, -30, -30, -30, -30, 30}), Td::zeros({2, 4})};
  Tp t(false);
  const auto m = loss_match<double>(t, {pred}, 2, gt, w, 0);
  EXPECT_EQ(m.assignments[0].pairs, (std::vector<std::pair<std::size_t, std::size_t>>{{1, 0}}));
  EXPECT_LT(m.value.item(), 1e-10);
}

TEST(LossDn, DisabledPerfectAndOracle) {
  std::mt19937_64 eng(9);
  const auto gt = make_gt(10, 3, {{1, {0, 1, 2}}, {2, {6, 7}}});
  const LossWeights w;
  Tp t(false);
  EXPECT_EQ(loss_dn<double>(t, {random_pred(eng, 4, 3, 10)}, 4, {}, gt, w, 1).item(), 0.0);

  std::vector<std::pair<std::size_t, std::size_t>> asg{{0, 0}, {1, 1}, {2, 0}, {3, 1}};
  auto perfect = random_pred(eng, 6, 3, 10);
  for (auto [q, o] : asg) {
    for (std::size_t c = 0; c < 3; ++c) perfect.class_logits.mutable_data()[(2 + q) * 3 + c] = c == gt.objects[o].class_id ? 30 : -30;
    for (std::size_t v = 0; v < 10; ++v) perfect.mask_heatmaps.mutable_data()[(2 + q) * 10 + v] = gt.labels[v] == gt.objects[o].class_id ? 30 : -30;
  }
  EXPECT_LT(loss_dn<double>(t, {perfect}, 2, asg, gt, w, 1).item(), 1e-5);

  std::vector<LayerPrediction<double>> preds{random_pred(eng, 6, 3, 10), random_pred(eng, 6, 3, 10)};
  double oracle = 0;
  for (std::size_t l = 0; l < 2; ++l) {
    const auto samples = sample_points(10, w.n_sample_points, layer_sample_seed(5, l));
    for (auto [q, o] : asg) {
      std::vector<double> heat, tgt;
      for (auto s : samples) {
        heat.push_back(preds[l].mask_heatmaps(2 + q, s));
        tgt.push_back(gt.labels[s] == gt.objects[o].class_id ? 1.0 : 0.0);
      }
      oracle += match_cost<double>(preds[l].class_logits.data().subspan((2 + q) * 3, 3), heat, tgt, gt.objects[o].class_id, w) / 4;
    }
  }
  EXPECT_NEAR(loss_dn<double>(t, preds, 2, asg, gt, w, 5).item(), oracle, 1e-12);
}

TEST(Losses, NonNegative) {
  std::mt19937_64 eng(10);
  const auto gt = make_gt(15, 4, {{1, {0, 1}}, {3, {7, 8, 9}}});
  for (int i = 0; i < 20; ++i) {
    std::vector<LayerPrediction<double>> preds{random_pred(eng, 6, 4, 15)};
    Tp t(false);
    EXPECT_GE(loss_match<double>(t, preds, 4, gt, LossWeights{}, i).value.item(), 0.0);
    std::vector<std::pair<std::size_t, std::size_t>> asg{{0, 0}, {1, 1}};
    EXPECT_GE(loss_dn<double>(t, preds, 4, asg, gt, LossWeights{}, i).item(), 0.0);
  }
}

// Full-model gradient checks with assignment and sampled points frozen.
class ModelGradient : public ::testing::Test {
 protected:
  void SetUp() override {
    SceneSpec spec;
    spec.dims = {8, 8, 4};
    spec.n_objects = 2;
    spec.n_classes = 3;
    spec.channels = 8;
    spec.seed = 3;
    scene = generate_scene(spec);
    cfg.channels = 8;
    cfg.heads = 2;
    cfg.layers = 2;
    cfg.queries = 4;
    cfg.levels = 2;
    cfg.n_classes = 3;
    cfg.rho = 0.3;
    cfg.query_init_std = 0.5;
    ctx = make_context<double>(scene.grid, cfg.levels);
  }

  double check(AttentionBackend backend, bool with_dn) {
    cfg.backend = backend;
    DecoderModel<double> model(cfg, 5);
    DnConfig dn;
    dn.groups = 1;
    LossWeights w;
    w.n_sample_points = 64;
    ForwardOptions<double> opt;
    opt.train = true;
    opt.dn = with_dn ? &dn : nullptr;
    opt.seed = 2;
    std::vector<Assignment> frozen;
    {
      Tp t(false);
      auto out = forward(t, ctx, &scene.gt, model, opt);
      frozen = loss_match(t, out.preds, out.n_match, scene.gt, w, 9).assignments;
    }
    auto fn = [&](Tp& t) {
      auto out = forward(t, ctx, &scene.gt, model, opt);
      auto lm = loss_match(t, out.preds, out.n_match, scene.gt, w, 9, &frozen).value;
      if (!out.dn) return lm;
      const auto asg = dn_assignment(out.dn->targets);
      return ops::add(t, lm, loss_dn<double>(t, out.preds, out.n_match, asg, scene.gt, w, 9));
    };
    std::vector<Td> params;
    for (auto& [n, p] : model.params()) params.push_back(p);
    return gradient_error(fn, params, 1e-6);
  }

  Scene scene;
  DecoderConfig cfg;
  SceneContext<double> ctx;
};

TEST_F(ModelGradient, MatchLossMaskedBackend) { EXPECT_LT(check(AttentionBackend::kMasked, false), 1e-4); }
TEST_F(ModelGradient, MatchLossPrototypeBackend) { EXPECT_LT(check(AttentionBackend::kPrototype, false), 1e-4); }
TEST_F(ModelGradient, MatchAndDenoisingLoss) { EXPECT_LT(check(AttentionBackend::kPrototype, true), 1e-4); }
