#include <gtest/gtest.h>

#include <cmath>

#include "msn/ema.hpp"
#include "msn/error.hpp"
#include "msn/run.hpp"
#include "msn/vit.hpp"

using namespace msn;

namespace {

ParameterSet single(const std::string& name, std::vector<double> v) {
  ParameterSet ps;
  const std::size_t n = v.size();
  ps.add(name, Tensor::from_values({n}, std::move(v), true));
  return ps;
}

EncoderConfig small() {
  EncoderConfig c;
  c.image_size = 8;
  c.depth = 1;
  c.hidden_dim = 8;
  c.heads = 2;
  c.head_hidden_dim = 8;
  c.output_dim = 4;
  return c;
}

}  // namespace

TEST(Momentum, Examples) {
  EmaSchedule s{0.996, 1.0, 1000};
  EXPECT_EQ(momentum_at(0, s), 0.996);
  EXPECT_EQ(momentum_at(1000, s), 1.0);
  EXPECT_NEAR(momentum_at(500, s), 0.998, 1e-15);
  EXPECT_EQ(momentum_at(5000, s), 1.0);
}

TEST(Momentum, LinearAndMonotone) {
  EmaSchedule s{0.996, 1.0, 777};
  for (std::size_t t = 1; t <= 777; ++t) {
    EXPECT_GE(momentum_at(t, s), momentum_at(t - 1, s));
    EXPECT_NEAR(momentum_at(t, s) - momentum_at(t - 1, s), 0.004 / 777, 1e-15);
  }
}

TEST(Momentum, ScheduleValidation) {
  EXPECT_THROW((EmaSchedule{0.0, 1.0, 10}.validate()), ParameterError);
  EXPECT_THROW((EmaSchedule{0.999, 0.99, 10}.validate()), ParameterError);
  EXPECT_THROW((EmaSchedule{0.9, 1.1, 10}.validate()), ParameterError);
  EXPECT_NO_THROW((EmaSchedule{0.996, 1.0, 10}.validate()));
}

TEST(EmaUpdate, Examples) {
  auto anchor = single("w", {1.0, 1.0});
  auto target = single("w", {0.0, 0.0});
  ema_update(target, anchor, 0.996);
  EXPECT_NEAR(target.at("w").at(0), 0.004, 1e-15);

  auto t1 = single("w", {0.3, -2.0});
  ema_update(t1, anchor, 1.0);
  EXPECT_EQ(t1.at("w").at(0), 0.3);
  EXPECT_EQ(t1.at("w").at(1), -2.0);

  ema_update(t1, anchor, 0.0);
  EXPECT_EQ(t1.at("w").at(0), 1.0);
  EXPECT_EQ(t1.at("w").at(1), 1.0);
}

TEST(EmaUpdate, NameMismatchListsNames) {
  ParameterSet a = single("alpha", {1.0});
  ParameterSet t = single("beta", {1.0});
  try {
    ema_update(t, a, 0.5);
    FAIL();
  } catch (const PreconditionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("alpha"), std::string::npos) << msg;
    EXPECT_NE(msg.find("beta"), std::string::npos) << msg;
  }
  ParameterSet wide = single("alpha", {1.0, 2.0});
  ParameterSet narrow = single("alpha", {1.0});
  EXPECT_THROW(ema_update(narrow, wide, 0.5), DimensionError);
}

TEST(EmaUpdate, GeometricConvergence) {
  Rng rng(1);
  auto anchor = make_encoder(small(), rng);
  Rng rng2(2);
  auto target = make_encoder(small(), rng2).copy(false);
  auto dist = [&] {
    double s = 0;
    for (const auto& [name, t] : target.params) {
      const auto& a = anchor.params.at(name);
      for (std::size_t i = 0; i < t.numel(); ++i) s += (t.at(i) - a.at(i)) * (t.at(i) - a.at(i));
    }
    return std::sqrt(s);
  };
  const double d0 = dist();
  ASSERT_GT(d0, 0.0);
  const double m = 0.9;
  for (int t = 1; t <= 50; ++t) {
    ema_update(target.params, anchor.params, m);
    EXPECT_NEAR(dist(), std::pow(m, t) * d0, 1e-12 * d0) << t;
  }
}

TEST(EmaUpdate, TargetStaysLeafWithoutGradients) {
  Rng rng(3);
  auto anchor = make_encoder(small(), rng);
  auto target = anchor.copy(false);
  // give the anchor gradients, then average: nothing must reach the target
  for (auto& [name, t] : anchor.params) t.mutable_grad()[0] = 1.0;
  ema_update(target.params, anchor.params, 0.99);
  for (const auto& [name, t] : target.params) {
    EXPECT_TRUE(t.is_leaf()) << name;
    EXPECT_FALSE(t.requires_grad()) << name;
    EXPECT_FALSE(t.has_grad()) << name;
  }
}

TEST(EmaUpdate, RunningStatistics) {
  std::map<std::string, BatchNormStats> a, t;
  a["bn"] = BatchNormStats(2);
  a["bn"].mean = {1.0, 1.0};
  a["bn"].var = {2.0, 2.0};
  t["bn"] = BatchNormStats(2);
  ema_update(t, a, 0.75);
  EXPECT_DOUBLE_EQ(t["bn"].mean[0], 0.25);
  EXPECT_DOUBLE_EQ(t["bn"].var[1], 1.25);
  std::map<std::string, BatchNormStats> other;
  EXPECT_THROW(ema_update(t, other, 0.5), PreconditionError);
}

TEST(EmaSet, PrototypesAreNotAveraged) {
  TrainConfig cfg = desk_preset();
  cfg.encoder = small();
  cfg.prototypes = 8;
  cfg.batch_size = 4;
  cfg.steps = 10;
  cfg.warmup_steps = 1;
  cfg.anchors = {MaskSpec::random(0.5)};
  cfg.data.classes = 2;
  cfg.data.per_class = 4;
  cfg.data.test_per_class = 1;
  auto s = init_state(cfg);
  EXPECT_FALSE(s.target.params.contains("prototypes"));
  EXPECT_FALSE(s.anchor.params.contains("prototypes"));
  EXPECT_EQ(s.target.params.names(), s.anchor.params.names());
  // step-0 target is an exact copy
  for (const auto& [name, t] : s.anchor.params) {
    const auto& u = s.target.params.at(name);
    EXPECT_EQ(std::vector<double>(t.values().begin(), t.values().end()),
              std::vector<double>(u.values().begin(), u.values().end()))
        << name;
    EXPECT_FALSE(u.requires_grad()) << name;
  }
}
