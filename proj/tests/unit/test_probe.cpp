#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "msn/data.hpp"
#include "msn/error.hpp"
#include "msn/probe.hpp"
#include "msn/vit.hpp"

using namespace msn;

namespace {

FeatureBank gaussian_clusters(std::size_t classes, std::size_t per_class, std::size_t dim, double spread,
                              std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<double>> centers(classes, std::vector<double>(dim));
  for (auto& c : centers)
    for (double& v : c) v = rng.normal();
  FeatureBank b;
  b.dim = dim;
  for (std::size_t i = 0; i < per_class; ++i)
    for (std::size_t c = 0; c < classes; ++c) {
      for (std::size_t j = 0; j < dim; ++j) b.features.push_back(centers[c][j] + spread * rng.normal());
      b.labels.push_back(static_cast<int>(c));
    }
  return b;
}

EncoderConfig small_encoder() {
  EncoderConfig c;
  c.image_size = 16;
  c.depth = 2;
  c.hidden_dim = 16;
  c.heads = 2;
  c.head_hidden_dim = 16;
  c.output_dim = 8;
  return c;
}

std::vector<ImageRecord> small_images(std::size_t classes, std::size_t per_class, std::uint64_t seed) {
  Rng rng(seed);
  return synth_dataset(classes, per_class, 16, rng);
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(ExtractFeatures, RowsDeterminismAndNormalisation) {
  Rng rng(1);
  auto enc = make_encoder(small_encoder(), rng);
  auto data = small_images(3, 4, 2);
  auto a = extract_features(enc, data);
  auto b = extract_features(enc, data, std::nullopt, 0, 3);  // thread count does not matter
  EXPECT_EQ(a.size(), data.size());
  EXPECT_EQ(a.dim, 16u);
  EXPECT_EQ(a.features, b.features);
  EXPECT_EQ(a.labels, b.labels);
  for (std::size_t i = 0; i < a.size(); ++i) {
    double n = 0;
    for (std::size_t j = 0; j < a.dim; ++j) n += a.features[i * a.dim + j] * a.features[i * a.dim + j];
    EXPECT_NEAR(n, 1.0, 1e-12);
  }
  auto zero = extract_features(enc, data, MaskSpec::random(0.0));
  EXPECT_EQ(zero.features, a.features);
  auto masked = extract_features(enc, data, MaskSpec::random(0.5), 7);
  EXPECT_NE(masked.features, a.features);
}

TEST(ExtractFeatures, HeadNeverUsed) {
  Rng rng(3);
  auto enc = make_encoder(small_encoder(), rng);
  auto data = small_images(2, 3, 4);
  auto before = extract_features(enc, data);
  for (auto& [name, t] : enc.params)
    if (name.rfind("head.", 0) == 0)
      for (double& v : t.mutable_values()) v = 1e3;
  for (auto& [name, st] : enc.norm_stats) {
    for (double& v : st.mean) v = -5.0;
    for (double& v : st.var) v = 1e-9;
  }
  EXPECT_EQ(extract_features(enc, data).features, before.features);
  const double inv = mask_invariance(enc, data, 0.5, 1);
  for (auto& [name, t] : enc.params)
    if (name.rfind("head.", 0) == 0)
      for (double& v : t.mutable_values()) v = -7.0;
  EXPECT_EQ(mask_invariance(enc, data, 0.5, 1), inv);
}

TEST(FitLogistic, SeparableClusters) {
  FeatureBank b;
  b.dim = 2;
  Rng rng(5);
  for (int i = 0; i < 40; ++i) {
    const int c = i % 2;
    b.features.push_back((c ? 2.0 : -2.0) + 0.3 * rng.normal());
    b.features.push_back(0.3 * rng.normal());
    b.labels.push_back(c);
  }
  ProbeConfig cfg;
  auto m = fit_logistic(b, cfg);
  EXPECT_TRUE(m.converged);
  EXPECT_EQ(accuracy(m, b), 1.0);
  for (double w : m.weight) EXPECT_TRUE(std::isfinite(w));
  double wn = 0;
  for (double w : m.weight) wn += w * w;
  // at the optimum (l2/2)||W||^2 cannot exceed the loss at W = 0 (ln 2)
  EXPECT_LE(0.5 * cfg.l2_strength * wn, std::log(2.0) + 1e-9);
  EXPECT_NEAR(std::accumulate(m.bias.begin(), m.bias.end(), 0.0), 0.0, 1e-12);
}

TEST(FitLogistic, DuplicatedDataSameOptimum) {
  auto b = gaussian_clusters(3, 10, 5, 1.0, 6);
  FeatureBank twice = b;
  twice.features.insert(twice.features.end(), b.features.begin(), b.features.end());
  twice.labels.insert(twice.labels.end(), b.labels.begin(), b.labels.end());
  ProbeConfig cfg;
  cfg.tolerance = 1e-9;
  cfg.max_iters = 100000;
  auto m1 = fit_logistic(b, cfg);
  auto m2 = fit_logistic(twice, cfg);
  ASSERT_TRUE(m1.converged && m2.converged);
  EXPECT_LT(max_abs_diff(m1.weight, m2.weight), 1e-5);
  EXPECT_LT(max_abs_diff(m1.bias, m2.bias), 1e-5);
  EXPECT_NEAR(m1.objective, m2.objective, 1e-12);
}

TEST(FitLogistic, StrongRegularisationGivesClassPrior) {
  // 3:1:1 class imbalance; as l2 grows the weights vanish and every prediction tends to the prior
  auto b = gaussian_clusters(3, 10, 4, 1.0, 7);
  for (std::size_t i = 0; i < 20; ++i) {
    b.features.insert(b.features.end(), b.features.begin(), b.features.begin() + 4);
    b.labels.push_back(0);
  }
  const double n = b.size();
  const std::vector<double> prior{30 / n, 10 / n, 10 / n};
  double prev_w = 1e300, prev_gap = 1e300;
  for (double l2 : {1e0, 1e2, 1e4}) {
    ProbeConfig cfg;
    cfg.l2_strength = l2;
    cfg.tolerance = 1e-10;
    cfg.max_iters = 100000;
    auto m = fit_logistic(b, cfg);
    ASSERT_TRUE(m.converged) << l2;
    double wmax = 0;
    for (double w : m.weight) wmax = std::max(wmax, std::fabs(w));
    double gap = 0;
    std::vector<double> mean_p(3, 0.0);
    for (std::size_t i = 0; i < b.size(); ++i) {
      const auto z = m.logits(b.features.data() + i * b.dim);
      const double zmax = *std::max_element(z.begin(), z.end());
      double s = 0;
      for (double v : z) s += std::exp(v - zmax);
      for (std::size_t c = 0; c < 3; ++c) {
        const double p = std::exp(z[c] - zmax) / s;
        gap = std::max(gap, std::fabs(p - prior[c]));
        mean_p[c] += p / n;
      }
    }
    // the bias is unregularised, so the mean prediction matches the label frequencies at any l2
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(mean_p[c], prior[c], 1e-8);
    EXPECT_LT(wmax, prev_w);
    EXPECT_LT(gap, prev_gap);
    prev_w = wmax;
    prev_gap = gap;
  }
  EXPECT_LT(prev_w, 1e-3);
  EXPECT_LT(prev_gap, 1e-3);
}

TEST(FitLogistic, ObjectiveDecreasesMonotonically) {
  auto b = gaussian_clusters(5, 20, 16, 1.5, 8);
  ProbeConfig cfg;
  cfg.l2_strength = 1e-4;
  auto m = fit_logistic(b, cfg);
  ASSERT_GT(m.history.size(), 5u);
  EXPECT_LT(m.history.front(), std::log(5.0) + 1e-12);
  for (std::size_t i = 1; i < m.history.size(); ++i) EXPECT_LE(m.history[i], m.history[i - 1]) << i;
  EXPECT_TRUE(m.converged);
  EXPECT_LT(m.grad_norm, cfg.tolerance);
}

TEST(FitLogistic, OrderInvariant) {
  auto b = gaussian_clusters(4, 15, 8, 1.0, 9);
  std::vector<std::size_t> perm(b.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(10);
  for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  ProbeConfig cfg;
  cfg.tolerance = 1e-9;
  cfg.max_iters = 100000;
  auto m1 = fit_logistic(b, cfg);
  auto m2 = fit_logistic(b.subset(perm), cfg);
  ASSERT_TRUE(m1.converged && m2.converged);
  EXPECT_NEAR(m1.objective, m2.objective, 1e-12);
  // compare the fitted functions: logits on every training row
  double worst = 0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    const auto z1 = m1.logits(b.features.data() + i * b.dim), z2 = m2.logits(b.features.data() + i * b.dim);
    worst = std::max(worst, max_abs_diff(z1, z2));
  }
  EXPECT_LT(worst, 1e-6);
  EXPECT_LT(max_abs_diff(m1.weight, m2.weight), 1e-5);
}

TEST(FitLogistic, UnconvergedIsFlagged) {
  auto b = gaussian_clusters(4, 15, 8, 1.0, 11);
  ProbeConfig cfg;
  cfg.max_iters = 2;
  cfg.tolerance = 1e-14;
  auto m = fit_logistic(b, cfg);
  EXPECT_FALSE(m.converged);
  EXPECT_EQ(m.iterations, 2u);
}

TEST(FitLogistic, RejectsNonPositiveL2) {
  auto b = gaussian_clusters(2, 5, 3, 1.0, 12);
  ProbeConfig cfg;
  cfg.l2_strength = 0.0;
  EXPECT_THROW(fit_logistic(b, cfg), ParameterError);
}

TEST(LowShot, RandomLabelsAreNearChance) {
  auto train = gaussian_clusters(4, 100, 16, 1.0, 13);
  auto test = gaussian_clusters(4, 100, 16, 1.0, 14);
  Rng rng(15);
  for (int& l : train.labels) l = static_cast<int>(rng.below(4));
  for (int& l : test.labels) l = static_cast<int>(rng.below(4));
  // relabel so every class has enough members for k = 20
  auto r = lowshot_eval(train, test, 20, {0, 1, 2});
  const double sigma = 100.0 * std::sqrt(0.25 * 0.75 / test.size());
  EXPECT_NEAR(r.mean, 25.0, 4 * sigma);
}

TEST(LowShot, FullSplitIsStandardProbe) {
  auto train = gaussian_clusters(3, 12, 6, 2.0, 16);
  auto test = gaussian_clusters(3, 12, 6, 2.0, 16);
  auto r = lowshot_eval(train, test, 12, {0, 5});
  auto m = fit_probe(train, default_l2_grid(), 3);
  ASSERT_EQ(r.runs.size(), 2u);
  // only the row order differs between the split and the pool
  for (const auto& run : r.runs) EXPECT_NEAR(run.top1, 100.0 * accuracy(m, test), 1e-9);
  EXPECT_NEAR(r.std, 0.0, 1e-9);
}

TEST(LowShot, MeanAndPopulationStd) {
  auto train = gaussian_clusters(3, 30, 6, 2.5, 17);
  auto test = gaussian_clusters(3, 30, 6, 2.5, 18);
  auto r = lowshot_eval(train, test, 2, {0, 1, 2});
  double mean = 0, var = 0;
  for (const auto& run : r.runs) mean += run.top1 / 3;
  for (const auto& run : r.runs) var += (run.top1 - mean) * (run.top1 - mean) / 3;
  EXPECT_NEAR(r.mean, mean, 1e-12);
  EXPECT_NEAR(r.std, std::sqrt(var), 1e-12);
  EXPECT_EQ(r.k, 2u);
}

TEST(LowShot, ReportLines) {
  LowShotResult r;
  r.k = 5;
  r.runs = {{0, 50.0, 1e-3, true}, {1, 62.5, 1e-3, true}};
  const std::string text = lowshot_report("run-a", r);
  EXPECT_EQ(text, "{\"k\":5,\"run_id\":\"run-a\",\"seed\":0,\"top1\":50.0}\n"
                  "{\"k\":5,\"run_id\":\"run-a\",\"seed\":1,\"top1\":62.5}\n");
}

TEST(LowShot, EncoderOverloadMasksOnlyTraining) {
  Rng rng(19);
  auto enc = make_encoder(small_encoder(), rng);
  auto train = small_images(2, 6, 20);
  auto test = small_images(2, 4, 21);
  auto plain = lowshot_eval(enc, train, test, 3, {0});
  auto tr = extract_features(enc, train), te = extract_features(enc, test);
  EXPECT_EQ(plain.mean, lowshot_eval(tr, te, 3, {0}).mean);
  auto masked = lowshot_eval(enc, train, test, 3, {0}, MaskSpec::random(0.5));
  auto trm = extract_features(enc, train, MaskSpec::random(0.5), 0);
  EXPECT_EQ(masked.mean, lowshot_eval(trm, te, 3, {0}).mean);
}

TEST(MaskInvariance, RatioZeroIsExactlyOne) {
  Rng rng(22);
  auto enc = make_encoder(small_encoder(), rng);
  auto data = small_images(2, 5, 23);
  EXPECT_EQ(mask_invariance(enc, data, 0.0), 1.0);
}

TEST(MaskInvariance, NonIncreasingInRatio) {
  Rng rng(24);
  auto enc = make_encoder(EncoderConfig{}, rng);
  // perturb away from the near-constant init so the sweep is informative
  Rng jitter(25);
  for (auto& [name, t] : enc.params)
    for (double& v : t.mutable_values()) v += jitter.normal(0.0, 0.1);
  Rng drng(26);
  auto data = synth_dataset(8, 32, 32, drng);
  ASSERT_GE(data.size(), 256u);
  double prev = 1.0;
  for (double ratio : {0.0, 0.3, 0.5, 0.7, 0.9}) {
    const double s = mask_invariance(enc, data, ratio, 3);
    EXPECT_LE(s, prev + 0.01) << ratio;
    EXPECT_LE(s, 1.0);
    prev = s;
  }
  EXPECT_LT(prev, 1.0);
}
