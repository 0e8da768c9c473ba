// Tests for the transformer block, cosine classifier, conv backbones, and the
// assembled model: shape contracts, residual structure, known probability
// values, tie-breaking, seed reproducibility, and finite-difference gradients.

#include <gtest/gtest.h>

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "fsct/backbone.hpp"
#include "fsct/gradcheck.hpp"
#include "fsct/harness.hpp"
#include "fsct/model.hpp"
#include "fsct/rng.hpp"
#include "fsct/tensor.hpp"

namespace {

using namespace fsct;

// Builds a flat-feature episode with deterministic contents.
Episode make_episode(std::size_t ways, std::size_t shots, std::size_t qpc, std::size_t dim,
                     std::uint64_t seed) {
  Rng rng(seed);
  Episode ep;
  ep.ways = ways;
  ep.shots = shots;
  ep.queries_per_cat = qpc;
  ep.support = Tensor::normal({ways * shots, dim}, 0.0, 1.0, rng);
  ep.query = Tensor::normal({ways * qpc, dim}, 0.0, 1.0, rng);
  ep.query_labels.resize(ways * qpc);
  for (std::size_t i = 0; i < ep.query_labels.size(); ++i) ep.query_labels[i] = i / qpc;
  ep.category_ids.resize(ways);
  for (std::size_t c = 0; c < ways; ++c) ep.category_ids[c] = c;
  return ep;
}

TEST(TransformerForward, ProducesPerQueryPerCategoryFeatures) {
  Rng rng(11);
  const std::size_t n = 5, q = 80, d = 64;
  TransformerBlock block(d, 8, AttentionMode::kCosine, /*pre=*/true, rng);
  Tensor protos = Tensor::normal({n, d}, 0.0, 1.0, rng);
  Tensor queries = Tensor::normal({q, d}, 0.0, 1.0, rng);
  Tensor map;
  Tensor h = transformer_forward(protos, queries, block, &map);
  EXPECT_EQ(h.shape(), (Shape{q, n, d}));
  EXPECT_EQ(map.shape(), (Shape{q, n}));
}

TEST(TransformerForward, ZeroValuePathLeavesOnlyPrototypeResidual) {
  // With the value projection zeroed the attention contributes nothing, so
  // every query row must collapse to the same prototype-driven features.
  Rng rng(12);
  const std::size_t n = 3, q = 7, d = 10;
  TransformerBlock block(d, 2, AttentionMode::kCosine, /*pre=*/true, rng);
  block.heads.w_value = Tensor::zeros(block.heads.w_value.shape());
  Tensor protos = Tensor::normal({n, d}, 0.0, 1.0, rng);
  Tensor queries = Tensor::normal({q, d}, 0.0, 1.0, rng);
  Tensor h = transformer_forward(protos, queries, block);
  for (std::size_t i = 1; i < q; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t f = 0; f < d; ++f)
        EXPECT_NEAR(h.at({i, j, f}), h.at({0, j, f}), 1e-15);
}

TEST(TransformerForward, PostNormDiffersFromPreNorm) {
  Rng rng(13);
  const std::size_t n = 3, q = 4, d = 8;
  TransformerBlock pre(d, 2, AttentionMode::kCosine, true, rng);
  TransformerBlock post = pre;
  post.pre_norm = false;
  Tensor protos = Tensor::normal({n, d}, 0.0, 1.0, rng);
  Tensor queries = Tensor::normal({q, d}, 0.0, 1.0, rng);
  Tensor ha = transformer_forward(protos, queries, pre);
  Tensor hb = transformer_forward(protos, queries, post);
  EXPECT_EQ(ha.shape(), hb.shape());
  double max_diff = 0.0;
  for (std::size_t i = 0; i < ha.size(); ++i)
    max_diff = std::max(max_diff, std::abs(ha.data()[i] - hb.data()[i]));
  EXPECT_GT(max_diff, 1e-3);
}

TEST(TransformerForward, RejectsWidthMismatch) {
  Rng rng(14);
  TransformerBlock block(8, 2, AttentionMode::kCosine, true, rng);
  Tensor protos = Tensor::zeros({3, 8});
  Tensor queries = Tensor::zeros({4, 6});
  EXPECT_THROW(transformer_forward(protos, queries, block), std::invalid_argument);
}

TEST(TransformerForward, GradientsMatchFiniteDifferencesBothNorms) {
  for (bool pre : {true, false}) {
    Rng rng(15);
    const std::size_t n = 3, q = 4, d = 6;
    TransformerBlock block(d, 2, AttentionMode::kCosine, pre, rng);
    Tensor protos = Tensor::normal({n, d}, 0.0, 1.0, rng);
    Tensor queries = Tensor::normal({q, d}, 0.0, 1.0, rng);
    // A fixed linear readout keeps the probed gradients well away from zero,
    // where central differences are dominated by rounding noise.
    Tensor readout = Tensor::normal({q, n, d}, 0.0, 1.0, rng);
    protos.set_requires_grad(true);
    queries.set_requires_grad(true);
    std::vector<std::pair<std::string, Tensor>> params = {{"protos", protos},
                                                          {"queries", queries}};
    Rng probe(16);
    GradCheckReport rep = gradient_check(
        params,
        [&]() { return sum_all(mul(transformer_forward(protos, queries, block), readout)); },
        1e-5, 6, &probe);
    EXPECT_LT(rep.max_rel_err, 1e-4) << (pre ? "pre" : "post") << "-norm worst: " << rep.worst;
  }
}

TEST(CosineClassify, IdenticalFeatureRowsGiveUniformProbabilities) {
  const std::size_t q = 3, n = 4, d = 5;
  Tensor h = Tensor::zeros({q, n, d});
  for (std::size_t i = 0; i < q; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t f = 0; f < d; ++f) h.data()[(i * n + j) * d + f] = 0.3 * f + 1.0;
  Tensor w = Tensor::from({d, 1}, {1.0, -2.0, 0.5, 0.0, 3.0});
  Tensor p = cosine_classify(h, w);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p.data()[i], 1.0 / n, 1e-12);
}

TEST(CosineClassify, PerfectAlignmentHitsTheCosineProbabilityCeiling) {
  // Scores are cosines, so with 5 categories the true probability can reach
  // at most e / (e + 4/e): one category at +1, the rest at -1.
  const std::size_t n = 5, d = 2;
  Tensor h = Tensor::zeros({1, n, d});
  h.data()[0] = 1.0;                                        // category 0: [1, 0]
  for (std::size_t j = 1; j < n; ++j) h.data()[j * d] = -1.0;  // others: [-1, 0]
  Tensor w = Tensor::from({d, 1}, {1.0, 0.0});
  Tensor p = cosine_classify(h, w);
  const double e = std::exp(1.0);
  const double ceiling = e / (e + 4.0 / e);
  EXPECT_NEAR(p.data()[0], ceiling, 1e-12);
  EXPECT_NEAR(ceiling, 0.6487856442839394, 1e-15);
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) sum += p.data()[j];
  EXPECT_NEAR(sum, 1.0, 1e-12);
}

TEST(CosineClassify, RowsSumToOne) {
  Rng rng(17);
  Tensor h = Tensor::normal({6, 5, 9}, 0.0, 2.0, rng);
  Tensor w = Tensor::normal({9, 1}, 0.0, 1.0, rng);
  Tensor p = cosine_classify(h, w);
  for (std::size_t i = 0; i < 6; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < 5; ++j) sum += p.at({i, j});
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(CosineClassify, WeightRescaleLeavesProbabilitiesUnchanged) {
  Rng rng(18);
  Tensor h = Tensor::normal({4, 3, 7}, 0.0, 1.0, rng);
  Tensor w = Tensor::normal({7, 1}, 0.0, 1.0, rng);
  Tensor w_scaled = w.clone();
  for (double& v : w_scaled.data()) v *= 37.5;
  Tensor pa = cosine_classify(h, w);
  Tensor pb = cosine_classify(h, w_scaled);
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_NEAR(pa.data()[i], pb.data()[i], 1e-12);
}

TEST(CosineClassify, ScaleOptionSharpensTheDistribution) {
  Rng rng(19);
  Tensor h = Tensor::normal({4, 5, 7}, 0.0, 1.0, rng);
  Tensor w = Tensor::normal({7, 1}, 0.0, 1.0, rng);
  Tensor plain = cosine_classify(h, w, 1.0);
  Tensor sharp = cosine_classify(h, w, 10.0);
  for (std::size_t i = 0; i < 4; ++i) {
    double mp = 0.0, ms = 0.0;
    for (std::size_t j = 0; j < 5; ++j) {
      mp = std::max(mp, plain.at({i, j}));
      ms = std::max(ms, sharp.at({i, j}));
    }
    EXPECT_GT(ms, mp);
  }
}

TEST(CosineClassify, RejectsBadShapes) {
  Tensor h = Tensor::zeros({2, 3, 4});
  EXPECT_THROW(cosine_classify(Tensor::zeros({2, 3}), Tensor::zeros({3, 1})),
               std::invalid_argument);
  EXPECT_THROW(cosine_classify(h, Tensor::zeros({5, 1})), std::invalid_argument);
  EXPECT_THROW(cosine_classify(h, Tensor::zeros({4, 2})), std::invalid_argument);
}

TEST(ModelState, SameSeedGivesIdenticalParameters) {
  ModelConfig cfg;
  cfg.ways = 3;
  cfg.shots = 2;
  cfg.input = SampleDims{.features = 12};
  cfg.num_heads = 2;
  Rng a(derive_seed(5, Stream::kInit)), b(derive_seed(5, Stream::kInit));
  Rng c(derive_seed(6, Stream::kInit));
  ModelState ma(cfg, a), mb(cfg, b), mc(cfg, c);
  bool any_diff_c = false;
  ma.for_each_array([&](const std::string& name, Tensor& t) {
    Tensor* tb = nullptr;
    Tensor* tc = nullptr;
    mb.for_each_array([&](const std::string& n2, Tensor& t2) { if (n2 == name) tb = &t2; });
    mc.for_each_array([&](const std::string& n2, Tensor& t2) { if (n2 == name) tc = &t2; });
    ASSERT_NE(tb, nullptr);
    ASSERT_NE(tc, nullptr);
    for (std::size_t i = 0; i < t.size(); ++i) {
      EXPECT_EQ(t.data()[i], tb->data()[i]) << name;
      if (t.data()[i] != tc->data()[i]) any_diff_c = true;
    }
  });
  EXPECT_TRUE(any_diff_c);
}

TEST(ModelState, ParameterNamesAreUniqueAndOrderIsStable) {
  ModelConfig cfg;
  cfg.input = SampleDims{.channels = 3, .height = 32, .width = 32};
  cfg.backbone = BackboneKind::kConv4;
  cfg.conv_channels = 4;
  cfg.num_heads = 2;
  Rng rng(derive_seed(7, Stream::kInit));
  ModelState state(cfg, rng);
  std::vector<std::string> first, second;
  state.for_each_array([&](const std::string& n, Tensor&) { first.push_back(n); });
  state.for_each_array([&](const std::string& n, Tensor&) { second.push_back(n); });
  EXPECT_EQ(first, second);
  std::vector<std::string> sorted = first;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(std::unique(sorted.begin(), sorted.end()), sorted.end());
  // Conv4 contributes per-stage weights plus batch-norm buffers.
  EXPECT_NE(std::find(first.begin(), first.end(), "backbone.stage3.bn_var"), first.end());
  EXPECT_NE(std::find(first.begin(), first.end(), "proto.theta"), first.end());
}

TEST(ModelState, FrozenPrototypeWeightsStayOutOfTheTrainableSet) {
  ModelConfig cfg;
  cfg.input = SampleDims{.features = 8};
  cfg.num_heads = 2;
  cfg.prototype = PrototypeMode::kUniform;
  Rng rng(derive_seed(8, Stream::kInit));
  ModelState state(cfg, rng);
  std::vector<std::string> trainable, persisted;
  state.for_each_param([&](const std::string& n, Tensor&) { trainable.push_back(n); });
  state.for_each_array([&](const std::string& n, Tensor&) { persisted.push_back(n); });
  EXPECT_EQ(std::find(trainable.begin(), trainable.end(), "proto.theta"), trainable.end());
  EXPECT_NE(std::find(persisted.begin(), persisted.end(), "proto.theta"), persisted.end());
}

TEST(ModelState, RejectsMismatchedEpisodes) {
  ModelConfig cfg;
  cfg.ways = 5;
  cfg.shots = 1;
  cfg.input = SampleDims{.features = 8};
  cfg.num_heads = 2;
  Rng rng(derive_seed(9, Stream::kInit));
  ModelState state(cfg, rng);
  Episode ep = make_episode(4, 1, 2, 8, 100);
  EXPECT_THROW(forward_probs(ep, state), std::invalid_argument);
  Episode ep2 = make_episode(5, 2, 2, 8, 101);
  EXPECT_THROW(forward_probs(ep2, state), std::invalid_argument);
}

TEST(Model, SingleShotLearnableAndUniformPrototypesCoincide) {
  // With one shot per category the shot-weighted mean degenerates to the
  // sample itself, so both prototype modes must give identical outputs.
  ModelConfig cfg;
  cfg.ways = 4;
  cfg.shots = 1;
  cfg.queries_per_cat = 3;
  cfg.input = SampleDims{.features = 10};
  cfg.num_heads = 2;
  ModelConfig cfg_uniform = cfg;
  cfg_uniform.prototype = PrototypeMode::kUniform;
  Rng a(derive_seed(10, Stream::kInit)), b(derive_seed(10, Stream::kInit));
  ModelState learnable(cfg, a), uniform(cfg_uniform, b);
  Episode ep = make_episode(4, 1, 3, 10, 102);
  Tensor pa = forward_probs(ep, learnable);
  Tensor pb = forward_probs(ep, uniform);
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_NEAR(pa.data()[i], pb.data()[i], 1e-15);
}

TEST(Model, QueryRowsAreIndependentOfTheRestOfTheBatch) {
  // Each query attends to the prototypes on its own, so swapping the other
  // queries in the batch must not change its probability row.
  ModelConfig cfg;
  cfg.ways = 3;
  cfg.shots = 2;
  cfg.queries_per_cat = 2;
  cfg.input = SampleDims{.features = 9};
  cfg.num_heads = 3;
  Rng rng(derive_seed(11, Stream::kInit));
  ModelState state(cfg, rng);
  Episode ep1 = make_episode(3, 2, 2, 9, 103);
  Episode ep2 = ep1;
  ep2.query = ep1.query.clone();
  // Replace every query except row 0 with unrelated data.
  Rng noise(104);
  for (std::size_t i = 9; i < ep2.query.size(); ++i) ep2.query.data()[i] = noise.normal();
  Tensor pa = forward_probs(ep1, state);
  Tensor pb = forward_probs(ep2, state);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(pa.at({0, j}), pb.at({0, j}), 1e-12);
}

TEST(Predict, TiesResolveToTheLowestCategoryIndex) {
  // Two categories with identical support samples produce identical scores;
  // the predicted label must be the lower index.
  ModelConfig cfg;
  cfg.ways = 3;
  cfg.shots = 1;
  cfg.queries_per_cat = 2;
  cfg.input = SampleDims{.features = 6};
  cfg.num_heads = 2;
  Rng rng(derive_seed(12, Stream::kInit));
  ModelState state(cfg, rng);
  Episode ep = make_episode(3, 1, 2, 6, 105);
  for (std::size_t f = 0; f < 6; ++f) ep.support.data()[2 * 6 + f] = ep.support.data()[1 * 6 + f];
  Prediction pred = predict(ep, state);
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    EXPECT_NEAR(pred.probs.at({i, 1}), pred.probs.at({i, 2}), 1e-12);
    EXPECT_NE(pred.labels[i], 2u);
  }
}

TEST(Predict, IsDeterministic) {
  ModelConfig cfg;
  cfg.ways = 4;
  cfg.shots = 2;
  cfg.queries_per_cat = 3;
  cfg.input = SampleDims{.features = 8};
  cfg.num_heads = 2;
  Rng rng(derive_seed(13, Stream::kInit));
  ModelState state(cfg, rng);
  Episode ep = make_episode(4, 2, 3, 8, 106);
  Prediction a = predict(ep, state);
  Prediction b = predict(ep, state);
  EXPECT_EQ(a.labels, b.labels);
  for (std::size_t i = 0; i < a.probs.size(); ++i)
    EXPECT_EQ(a.probs.data()[i], b.probs.data()[i]);
}

TEST(FullModel, GradientsMatchFiniteDifferencesForEveryParameterGroup) {
  ModelConfig cfg;
  cfg.ways = 3;
  cfg.shots = 2;
  cfg.queries_per_cat = 2;
  cfg.input = SampleDims{.features = 6};
  cfg.num_heads = 2;
  Rng rng(derive_seed(14, Stream::kInit));
  ModelState state(cfg, rng);
  state.set_requires_grad(true);
  Episode ep = make_episode(3, 2, 2, 6, 107);
  std::vector<std::pair<std::string, Tensor>> params;
  state.for_each_param([&](const std::string& n, Tensor& t) { params.emplace_back(n, t); });
  Rng probe(108);
  GradCheckReport rep = gradient_check(
      params, [&]() { return episode_loss(forward_probs(ep, state), ep.query_labels); }, 1e-5, 6,
      &probe);
  EXPECT_LT(rep.max_rel_err, 1e-4) << "worst: " << rep.worst;
  EXPECT_GE(rep.probes, params.size());
}

// ---- Conv backbones ------------------------------------------------------

TEST(ConvBackbone, FourStageFeatureWidthFollowsPooling) {
  // 32x32 halves four times to 2x2; features = channels * 2 * 2.
  ModelConfig cfg;
  cfg.input = SampleDims{.channels = 3, .height = 32, .width = 32};
  cfg.backbone = BackboneKind::kConv4;
  cfg.conv_channels = 6;
  Rng rng(derive_seed(15, Stream::kInit));
  Backbone bb(cfg.backbone, cfg.input, cfg.conv_channels, rng);
  EXPECT_EQ(bb.feature_dim, 6u * 2 * 2);
  EXPECT_EQ(bb.stages.size(), 4u);
  Rng data(109);
  Tensor batch = Tensor::normal({5, 3, 32, 32}, 0.0, 1.0, data);
  Tensor f = bb.forward(batch);
  EXPECT_EQ(f.shape(), (Shape{5, 24}));
}

TEST(ConvBackbone, SixStageAddsUnpooledDepthWithSameFeatureWidth) {
  SampleDims dims{.channels = 1, .height = 32, .width = 32};
  Rng a(derive_seed(16, Stream::kInit)), b(derive_seed(16, Stream::kInit));
  Backbone four(BackboneKind::kConv4, dims, 4, a);
  Backbone six(BackboneKind::kConv6, dims, 4, b);
  EXPECT_EQ(six.stages.size(), 6u);
  EXPECT_EQ(six.feature_dim, four.feature_dim);
  EXPECT_TRUE(six.stages[0].pooled);
  EXPECT_TRUE(six.stages[3].pooled);
  EXPECT_FALSE(six.stages[4].pooled);
  EXPECT_FALSE(six.stages[5].pooled);
}

TEST(ConvBackbone, RejectsImagesTooSmallToPool) {
  SampleDims dims{.channels = 1, .height = 8, .width = 8};
  Rng rng(derive_seed(17, Stream::kInit));
  EXPECT_THROW(Backbone(BackboneKind::kConv4, dims, 4, rng), std::invalid_argument);
}

TEST(ConvBackbone, IdentityRequiresFlatFeaturesAndConvRequiresImages) {
  Rng rng(derive_seed(18, Stream::kInit));
  SampleDims image{.channels = 3, .height = 32, .width = 32};
  SampleDims flat{.features = 16};
  EXPECT_THROW(Backbone(BackboneKind::kIdentity, image, 4, rng), std::invalid_argument);
  EXPECT_THROW(Backbone(BackboneKind::kConv4, flat, 4, rng), std::invalid_argument);
}

TEST(ConvBackbone, ForwardRejectsWrongInputDims) {
  SampleDims dims{.channels = 3, .height = 32, .width = 32};
  Rng rng(derive_seed(19, Stream::kInit));
  Backbone bb(BackboneKind::kConv4, dims, 4, rng);
  EXPECT_THROW(bb.forward(Tensor::zeros({2, 1, 32, 32})), std::invalid_argument);
  EXPECT_THROW(bb.forward(Tensor::zeros({2, 3, 16, 32})), std::invalid_argument);
}

TEST(ConvOps, ThreeByThreeConvolutionMatchesHandComputedValues) {
  // One 2x2 image, kernel of ones: each output pixel sums the 3x3
  // zero-padded neighborhood.
  Tensor x = Tensor::from({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
  Tensor w = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor b = Tensor::zeros({1});
  Tensor y = conv2d_3x3(x, w, b);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_NEAR(y.data()[0], 10.0, 1e-15);  // whole image visible from every pixel
  EXPECT_NEAR(y.data()[1], 10.0, 1e-15);
  EXPECT_NEAR(y.data()[2], 10.0, 1e-15);
  EXPECT_NEAR(y.data()[3], 10.0, 1e-15);
  Tensor b2 = Tensor::from({1}, {0.5});
  Tensor y2 = conv2d_3x3(x, w, b2);
  EXPECT_NEAR(y2.data()[0], 10.5, 1e-15);
}

TEST(ConvOps, CenterOnlyKernelIsIdentity) {
  Rng rng(110);
  Tensor x = Tensor::normal({2, 3, 4, 4}, 0.0, 1.0, rng);
  Tensor w = Tensor::zeros({3, 3, 3, 3});
  for (std::size_t o = 0; o < 3; ++o) w.data()[((o * 3 + o) * 3 + 1) * 3 + 1] = 1.0;
  Tensor y = conv2d_3x3(x, w, Tensor::zeros({3}));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y.data()[i], x.data()[i], 1e-15);
}

TEST(ConvOps, MaxPoolPicksWindowMaximaAndFloorsOddEdges) {
  Tensor x = Tensor::from({1, 1, 3, 4}, {1, 5, 2, 0,
                                         4, 3, 9, 8,
                                         7, 6, 1, 2});  // odd height: last row dropped
  Tensor y = max_pool2x2(x);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 2}));
  EXPECT_EQ(y.data()[0], 5.0);
  EXPECT_EQ(y.data()[1], 9.0);
}

TEST(ConvOps, BatchNormTrainingNormalizesOverTheBatch) {
  Rng rng(111);
  Tensor x = Tensor::normal({8, 2, 3, 3}, 3.0, 2.0, rng);
  Tensor gain = Tensor::ones({2}), bias = Tensor::zeros({2});
  Tensor mean = Tensor::zeros({2}), var = Tensor::ones({2});
  Tensor y = batch_norm(x, gain, bias, mean, var, /*training=*/true);
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0.0, v = 0.0;
    std::size_t count = 0;
    for (std::size_t bidx = 0; bidx < 8; ++bidx)
      for (std::size_t i = 0; i < 9; ++i) {
        m += y.data()[(bidx * 2 + c) * 9 + i];
        ++count;
      }
    m /= count;
    for (std::size_t bidx = 0; bidx < 8; ++bidx)
      for (std::size_t i = 0; i < 9; ++i) {
        double dv = y.data()[(bidx * 2 + c) * 9 + i] - m;
        v += dv * dv;
      }
    v /= count;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-4);  // eps inside the square root shrinks it slightly
    // Running buffers moved toward the batch statistics.
    EXPECT_NE(mean.data()[c], 0.0);
    EXPECT_NE(var.data()[c], 1.0);
  }
}

TEST(ConvOps, BatchNormEvalUsesRunningStatisticsOnly) {
  Rng rng(112);
  Tensor x = Tensor::normal({4, 2, 2, 2}, 0.0, 1.0, rng);
  Tensor gain = Tensor::from({2}, {2.0, 0.5}), bias = Tensor::from({2}, {1.0, -1.0});
  Tensor mean = Tensor::from({2}, {0.25, -0.5}), var = Tensor::from({2}, {4.0, 0.25});
  Tensor mean_before = mean.clone(), var_before = var.clone();
  Tensor y = batch_norm(x, gain, bias, mean, var, /*training=*/false);
  for (std::size_t b = 0; b < 4; ++b)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < 4; ++i) {
        double expect = gain.data()[c] *
                            (x.data()[(b * 2 + c) * 4 + i] - mean.data()[c]) /
                            std::sqrt(var.data()[c] + 1e-5) +
                        bias.data()[c];
        EXPECT_NEAR(y.data()[(b * 2 + c) * 4 + i], expect, 1e-12);
      }
  // Eval mode must not touch the buffers.
  for (std::size_t c = 0; c < 2; ++c) {
    EXPECT_EQ(mean.data()[c], mean_before.data()[c]);
    EXPECT_EQ(var.data()[c], var_before.data()[c]);
  }
}

TEST(ConvOps, GradientsMatchFiniteDifferencesThroughConvBnPool) {
  for (bool training : {true, false}) {
    Rng rng(113);
    Tensor x = Tensor::normal({2, 1, 4, 4}, 0.0, 1.0, rng);
    Tensor w = Tensor::normal({2, 1, 3, 3}, 0.0, 0.5, rng);
    Tensor b = Tensor::normal({2}, 0.0, 0.1, rng);
    Tensor gain = Tensor::from({2}, {1.2, 0.8});
    Tensor bias = Tensor::from({2}, {0.1, -0.2});
    Tensor mean = Tensor::zeros({2}), var = Tensor::ones({2});
    for (Tensor* t : {&x, &w, &b, &gain, &bias}) t->set_requires_grad(true);
    // Batch statistics cancel any constant channel shift, so in training mode
    // the conv bias has an exactly-zero gradient; finite differences on it
    // measure nothing but rounding noise. Check it analytically instead.
    std::vector<std::pair<std::string, Tensor>> params = {
        {"x", x}, {"w", w}, {"gain", gain}, {"bias", bias}};
    if (!training) params.emplace_back("b", b);
    auto loss_fn = [&]() {
      Tensor h = relu(batch_norm(conv2d_3x3(x, w, b), gain, bias, mean, var, training));
      return sum_all(mul(max_pool2x2(h), max_pool2x2(h)));
    };
    GradCheckReport rep = gradient_check(params, loss_fn);
    EXPECT_LT(rep.max_rel_err, 1e-4)
        << (training ? "train" : "eval") << " worst: " << rep.worst;
    if (training) {
      Tape tape;
      {
        Tape::Scope scope(tape);
        tape.backward(loss_fn());
      }
      for (double g : b.grad()) EXPECT_NEAR(g, 0.0, 1e-12);
    }
  }
}

TEST(FullModel, ConvBackboneEndToEndGradients) {
  ModelConfig cfg;
  cfg.ways = 2;
  cfg.shots = 1;
  cfg.queries_per_cat = 2;
  cfg.input = SampleDims{.channels = 1, .height = 16, .width = 16};
  cfg.backbone = BackboneKind::kConv4;
  cfg.conv_channels = 2;
  cfg.num_heads = 1;
  Rng rng(derive_seed(20, Stream::kInit));
  ModelState state(cfg, rng);
  state.set_requires_grad(true);
  Rng data(114);
  Episode ep;
  ep.ways = 2;
  ep.shots = 1;
  ep.queries_per_cat = 2;
  ep.support = Tensor::normal({2, 1, 16, 16}, 0.0, 1.0, data);
  ep.query = Tensor::normal({4, 1, 16, 16}, 0.0, 1.0, data);
  ep.query_labels = {0, 0, 1, 1};
  ep.category_ids = {0, 1};
  std::vector<std::pair<std::string, Tensor>> params;
  state.for_each_param([&](const std::string& n, Tensor& t) { params.emplace_back(n, t); });
  Rng probe(115);
  GradCheckReport rep = gradient_check(
      params, [&]() { return episode_loss(forward_probs(ep, state), ep.query_labels); }, 1e-5, 3,
      &probe);
  EXPECT_LT(rep.max_rel_err, 1e-4) << "worst: " << rep.worst;
}

TEST(BackboneKindNames, RoundTrip) {
  EXPECT_EQ(parse_backbone_kind("identity"), BackboneKind::kIdentity);
  EXPECT_EQ(parse_backbone_kind("conv4"), BackboneKind::kConv4);
  EXPECT_EQ(parse_backbone_kind("conv6"), BackboneKind::kConv6);
  EXPECT_STREQ(backbone_kind_name(BackboneKind::kConv6), "conv6");
  EXPECT_THROW(parse_backbone_kind("resnet"), std::invalid_argument);
  EXPECT_EQ(parse_prototype_mode("learnable"), PrototypeMode::kLearnable);
  EXPECT_EQ(parse_prototype_mode("uniform"), PrototypeMode::kUniform);
  EXPECT_THROW(parse_prototype_mode("fancy"), std::invalid_argument);
}

}  // namespace
