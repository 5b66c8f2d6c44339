#include <gtest/gtest.h>

#include <cmath>

#include "fd_check.hpp"
#include "msn/error.hpp"
#include "msn/objective.hpp"

using namespace msn;
using msn::testing::finite_difference_check;
using msn::testing::random_tensor;

namespace {

Tensor orthonormal_prototypes(std::size_t K, std::size_t d) {
  std::vector<double> q(K * d, 0.0);
  for (std::size_t k = 0; k < K; ++k) q[k * d + k] = 1.0;
  return Tensor::from_values({K, d}, q, true);
}

double row_sum(const Tensor& t, std::size_t row) {
  const std::size_t K = t.dim(1);
  double s = 0;
  for (std::size_t k = 0; k < K; ++k) s += t.at(row * K + k);
  return s;
}

double col_sum(const Tensor& t, std::size_t col) {
  const std::size_t B = t.dim(0), K = t.dim(1);
  double s = 0;
  for (std::size_t i = 0; i < B; ++i) s += t.at(i * K + col);
  return s;
}

std::vector<double> vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

// z in the orthogonal complement of every prototype row.
Tensor orthogonal_to(const Tensor& q, Rng& rng) {
  const std::size_t K = q.dim(0), d = q.dim(1);
  std::vector<double> z(d);
  for (double& v : z) v = rng.normal();
  std::vector<std::vector<double>> basis;
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<double> b(q.values().begin() + k * d, q.values().begin() + (k + 1) * d);
    for (const auto& e : basis) {
      double dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += b[j] * e[j];
      for (std::size_t j = 0; j < d; ++j) b[j] -= dot * e[j];
    }
    double n = 0;
    for (double v : b) n += v * v;
    n = std::sqrt(n);
    for (double& v : b) v /= n;
    basis.push_back(b);
  }
  for (int pass = 0; pass < 2; ++pass)
    for (const auto& e : basis) {
      double dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += z[j] * e[j];
      for (std::size_t j = 0; j < d; ++j) z[j] -= dot * e[j];
    }
  return Tensor::from_values({d}, z);
}

}  // namespace

TEST(Predict, Examples) {
  auto q = orthonormal_prototypes(4, 6);
  auto ortho = Tensor::from_values({6}, {0, 0, 0, 0, 1, -2});
  for (double v : predict(ortho, q, 0.1).values()) EXPECT_NEAR(v, 0.25, 1e-15);

  auto on = predict(Tensor::from_values({6}, {1, 0, 0, 0, 0, 0}), q, 0.1);
  const double expect = std::exp(10.0) / (std::exp(10.0) + 3.0);
  EXPECT_NEAR(on.at(0), expect, 1e-15);
  EXPECT_NEAR(on.at(0), 0.999864, 1e-6);

  auto zero = predict(Tensor::zeros({6}), q, 0.1);
  for (double v : zero.values()) EXPECT_EQ(v, 0.25);
}

TEST(Predict, ScaleInvariantBitIdentical) {
  // values on a coarse dyadic grid, so c * z is exact for these factors
  auto coarse = [](Tensor t) {
    for (double& v : t.mutable_values()) v = std::ldexp(std::round(std::ldexp(v, 20)), -20);
    return t;
  };
  auto q = coarse(random_tensor({8, 5}, 1));
  auto z = coarse(random_tensor({3, 5}, 2, false));
  auto base = vec(predict(z, q, 0.1));
  for (double c : {3.0, 0.5, 1024.0, 0.625, 7.0, 5.0 / 64}) {
    EXPECT_EQ(vec(predict(scale(z, c), q, 0.1)), base) << c;
    EXPECT_EQ(vec(predict(z, scale(q, c), 0.1)), base) << c;
  }
}

TEST(Predict, RowsAreDistributions) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto q = random_tensor({16, 8}, 100 + s);
    auto z = random_tensor({5, 8}, 200 + s, false);
    auto p = predict(z, q, 0.025);
    for (std::size_t r = 0; r < 5; ++r) {
      EXPECT_NEAR(row_sum(p, r), 1.0, 1e-10);
      for (std::size_t k = 0; k < 16; ++k) EXPECT_GT(p.at(r * 16 + k), 0.0);
    }
  }
}

TEST(Sinkhorn, FixedPoint) {
  auto p = Tensor::from_values({4, 2}, {0.7, 0.3, 0.3, 0.7, 0.6, 0.4, 0.4, 0.6});
  auto s = sinkhorn(p, 3);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(s.at(i), p.at(i), 1e-10);
}

TEST(Sinkhorn, RandomPositiveMatrices) {
  Rng rng(3);
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> v(8 * 4);
    for (double& x : v) x = rng.uniform(0.05, 1.0);
    double total = 0;
    auto s = sinkhorn(Tensor::from_values({8, 4}, v), 3);
    for (std::size_t i = 0; i < 8; ++i) ASSERT_NEAR(row_sum(s, i), 1.0, 1e-9);
    for (std::size_t k = 0; k < 4; ++k) {
      ASSERT_NEAR(col_sum(s, k), 2.0, 0.2) << t;
      total += col_sum(s, k);
    }
    ASSERT_NEAR(total, 8.0, 1e-9);
  }
}

TEST(SharpenTargets, PlainAndDetached) {
  auto q = random_tensor({6, 4}, 5);
  auto z = random_tensor({1, 4}, 6);
  LossConfig cfg;
  cfg.sinkhorn_enabled = false;
  auto t = sharpen_targets(z, q, cfg);
  EXPECT_FALSE(t.requires_grad());
  EXPECT_EQ(vec(t), vec(predict(z.detach(), q.detach(), cfg.tau_target)));

  cfg.sinkhorn_enabled = true;
  auto zb = random_tensor({8, 4}, 7);
  auto ts = sharpen_targets(zb, q, cfg);
  EXPECT_FALSE(ts.requires_grad());
  EXPECT_EQ(vec(ts), vec(sinkhorn(predict(zb.detach(), q.detach(), cfg.tau_target), cfg.sinkhorn_iters)));
  // nothing flows back into the target side
  auto anchor = random_tensor({8, 4}, 8);
  auto loss = msn_loss(predict(anchor, q, cfg.tau_anchor), ts, cfg).loss;
  loss.backward();
  EXPECT_FALSE(zb.has_grad());
  EXPECT_TRUE(anchor.has_grad());
}

TEST(CrossEntropy, Examples) {
  auto u = Tensor::full({4}, 0.25);
  EXPECT_NEAR(cross_entropy(u, u).item(), std::log(4.0), 1e-11);
  EXPECT_NEAR(cross_entropy(u, u).item(), 1.386294, 1e-6);
  auto onehot = Tensor::from_values({3}, {0, 1, 0});
  auto a = Tensor::from_values({3}, {0.2, 0.5, 0.3});
  EXPECT_NEAR(cross_entropy(onehot, a).item(), -std::log(0.5), 1e-11);
  auto h = cross_entropy(Tensor::from_values({2}, {0.5, 0.5}), Tensor::from_values({2}, {0.9, 0.1})).item();
  EXPECT_NEAR(h, -0.5 * (std::log(0.9) + std::log(0.1)), 1e-11);
  EXPECT_NEAR(h, 1.203973, 1e-6);
}

TEST(CrossEntropy, SelfEqualsEntropy) {
  Rng rng(9);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> p(10);
    double s = 0;
    for (double& v : p) s += (v = rng.uniform(0.001, 1.0));
    for (double& v : p) v /= s;
    auto pt = Tensor::from_values({10}, p);
    EXPECT_NEAR(cross_entropy(pt, pt).item(), entropy(pt).item(), 1e-10);
  }
}

TEST(MeMax, Examples) {
  EXPECT_NEAR(me_max(Tensor::full({3, 8}, 0.125)).item(), std::log(8.0), 1e-12);
  EXPECT_NEAR(me_max(Tensor::from_values({2, 4}, {0, 1, 0, 0, 0, 1, 0, 0})).item(), 0.0, 1e-12);
  EXPECT_NEAR(me_max(Tensor::from_values({2, 4}, {1, 0, 0, 0, 0, 1, 0, 0})).item(), std::log(2.0), 1e-12);
}

TEST(MsnLoss, Examples) {
  LossConfig cfg;
  cfg.lambda = 1.0;
  cfg.sinkhorn_enabled = false;
  auto terms = msn_loss(Tensor::from_values({1, 2}, {0.9, 0.1}), Tensor::from_values({1, 2}, {1, 0}), cfg);
  EXPECT_NEAR(terms.ce.item(), -std::log(0.9), 1e-11);
  EXPECT_NEAR(terms.ce.item(), 0.105361, 1e-6);
  EXPECT_NEAR(terms.memax.item(), 0.325083, 1e-6);
  EXPECT_NEAR(terms.loss.item(), -0.219722, 1e-6);

  // anchors equal to targets with lambda 0 give the mean target entropy (two views)
  cfg.lambda = 0.0;
  auto tg = Tensor::from_values({2, 3}, {0.2, 0.3, 0.5, 0.6, 0.3, 0.1});
  Tensor parts[] = {tg, tg};
  auto anchors = concat(parts, 0);
  const double mean_h = 0.5 * (entropy(slice(tg, 0, 0, 1)).item() + entropy(slice(tg, 0, 1, 2)).item());
  EXPECT_NEAR(msn_loss(anchors, tg, cfg).loss.item(), mean_h, 1e-11);
}

TEST(MsnLoss, BatchMismatch) {
  LossConfig cfg;
  EXPECT_THROW(msn_loss(Tensor::full({5, 4}, 0.25), Tensor::full({2, 4}, 0.25), cfg), DimensionError);
}

TEST(MsnLoss, ViewMajorPairing) {
  // row m*B + i pairs with target i
  LossConfig cfg;
  cfg.lambda = 0.0;
  auto targets = Tensor::from_values({2, 2}, {1, 0, 0, 1});
  auto anchors = Tensor::from_values({4, 2}, {0.9, 0.1, 0.2, 0.8, 0.7, 0.3, 0.4, 0.6});
  const double expect = -(std::log(0.9) + std::log(0.8) + std::log(0.7) + std::log(0.6)) / 4;
  EXPECT_NEAR(msn_loss(anchors, targets, cfg).loss.item(), expect, 1e-11);
}

TEST(MsnLoss, GradientMatchesFiniteDifferences) {
  LossConfig cfg;
  auto q = random_tensor({5, 4}, 10);
  auto z = random_tensor({6, 4}, 11);  // M = 2, B = 3
  auto zt = random_tensor({3, 4}, 12, false);
  // targets are detached, so they are held fixed while q is perturbed
  const auto targets = sharpen_targets(zt, q, cfg);
  auto loss = [&] { return msn_loss(predict(z, q, cfg.tau_anchor), targets, cfg).loss; };
  auto r = finite_difference_check(loss, {z, q}, 1e-5, {"z", "prototypes"});
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(LossConfig, Validation) {
  LossConfig c;
  EXPECT_NO_THROW(c.validate());
  c.tau_target = 0.2;
  EXPECT_THROW(c.validate(), ParameterError);
  c = LossConfig{};
  c.tau_anchor = 1.0;
  EXPECT_THROW(c.validate(), ParameterError);
  c = LossConfig{};
  c.lambda = -1;
  EXPECT_THROW(c.validate(), ParameterError);
}

TEST(Prototypes, InitShapeAndScale) {
  Rng rng(1);
  auto q = init_prototypes(64, 32, rng);
  EXPECT_EQ(q.shape(), (Shape{64, 32}));
  EXPECT_TRUE(q.requires_grad());
  double s2 = 0;
  for (double v : q.values()) s2 += v * v;
  EXPECT_NEAR(std::sqrt(s2 / q.numel()), 0.02, 0.002);
  Rng r1(1);
  EXPECT_THROW(init_prototypes(1, 4, r1), ParameterError);
}

TEST(Collapse, UniformBranch) {
  // Case 1: collapsed predictions are uniform, targets sharpened
  Rng rng(13);
  auto q = random_tensor({4, 7}, 14, false);
  auto z = orthogonal_to(q, rng);
  LossConfig cfg;
  auto p = predict(z, q, cfg.tau_anchor);
  for (double v : p.values()) ASSERT_NEAR(v, 0.25, 1e-12);
  auto targets = Tensor::from_values({2, 4}, {1, 0, 0, 0, 0, 0, 1, 0});
  auto g = collapse_gradient_check(z, q, targets, 2, cfg);
  EXPECT_GT(g.ce_norm, 1e-6);
  EXPECT_LT(g.memax_norm, 1e-9);  // H(mean p) sits at its maximum
}

TEST(Collapse, NonUniformBranch) {
  auto q = random_tensor({4, 7}, 15, false);
  auto z = random_tensor({7}, 16, false);
  auto targets = Tensor::from_values({2, 4}, {1, 0, 0, 0, 0, 0, 1, 0});
  auto g = collapse_gradient_check(z, q, targets, 3, LossConfig{});
  EXPECT_GT(g.memax_norm, 1e-6);
}

TEST(Collapse, RejectsUniformTargets) {
  auto q = random_tensor({4, 7}, 17, false);
  auto z = random_tensor({7}, 18, false);
  auto targets = Tensor::from_values({2, 4}, {1, 0, 0, 0, 0.25, 0.25, 0.25, 0.25});
  EXPECT_THROW(collapse_gradient_check(z, q, targets, 1, LossConfig{}), PreconditionError);
}

TEST(Collapse, NonCollapsedStillFinite) {
  // a generic batch: the op is only a diagnostic, norms are finite
  auto q = random_tensor({4, 7}, 19, false);
  auto z = random_tensor({7}, 20, false);
  auto targets = sharpen_targets(random_tensor({3, 7}, 21, false), q, LossConfig{});
  auto g = collapse_gradient_check(z, q, targets, 2, LossConfig{});
  EXPECT_TRUE(std::isfinite(g.ce_norm));
  EXPECT_TRUE(std::isfinite(g.memax_norm));
}

TEST(Collapse, HundredRandomConfigurations) {
  // Proposition: with sharpened, non-uniform targets some term always pushes
  // away from a collapsed representation.
  Rng rng(22);
  int uniform_cases = 0, other_cases = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t K = 2 + rng.below(15), d = K + 1 + rng.below(8), B = 1 + rng.below(6), M = 1 + rng.below(4);
    auto q = random_tensor({K, d}, 1000 + t, false);
    LossConfig cfg;
    cfg.sinkhorn_enabled = rng.bernoulli(0.5) && B >= 2;
    auto targets = sharpen_targets(random_tensor({B, d}, 2000 + t, false), q, cfg);
    const bool uniform = t % 2 == 0;
    Tensor z = uniform ? orthogonal_to(q, rng) : random_tensor({d}, 3000 + t, false);
    auto g = collapse_gradient_check(z, q, targets, M, cfg);
    EXPECT_GT(g.ce_norm + g.memax_norm, 1e-6) << "config " << t;
    if (uniform) {
      EXPECT_GT(g.ce_norm, 1e-6) << "config " << t;
      ++uniform_cases;
    } else {
      ++other_cases;
    }
  }
  EXPECT_EQ(uniform_cases, 50);
  EXPECT_EQ(other_cases, 50);
}

TEST(Training, TwoPrototypeToyConvergesMonotonically) {
  // single repeated target, sinkhorn off, lambda 0: loss - H(target) is the KL
  // gap between target and anchor prediction and must shrink every step
  LossConfig cfg;
  cfg.lambda = 0.0;
  cfg.sinkhorn_enabled = false;
  auto q = Tensor::from_values({2, 2}, {1, 0, 0, 1});
  const double a = std::atan2(1.0, 1.0) - 0.1;  // target slightly favours prototype 0
  auto zt = Tensor::from_values({1, 2}, {std::cos(a), std::sin(a)});
  auto targets = sharpen_targets(zt, q, cfg);
  const double target_h = entropy(targets).item();
  auto z = Tensor::from_values({1, 2}, {std::cos(1.2), std::sin(1.2)}, true);
  double prev = 1e300;
  for (int step = 0; step < 200; ++step) {
    z.zero_grad();
    auto loss = msn_loss(predict(z, q, cfg.tau_anchor), targets, cfg).loss;
    const double gap = loss.item() - target_h;
    ASSERT_GE(gap, -1e-12);
    ASSERT_LT(gap, prev) << "step " << step;
    prev = gap;
    loss.backward();
    auto v = z.mutable_values();
    for (std::size_t j = 0; j < 2; ++j) v[j] -= 0.05 * z.grad()[j];
  }
  EXPECT_LT(prev, 1e-6);
}
