#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "msn/data.hpp"
#include "msn/error.hpp"

using namespace msn;

namespace {

std::vector<double> vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

double sq_dist(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += (a.at(i) - b.at(i)) * (a.at(i) - b.at(i));
  return s;
}

std::vector<std::uint8_t> cifar_bytes(std::size_t records, std::uint64_t seed) {
  std::vector<std::uint8_t> out;
  Rng r(seed);
  for (std::size_t i = 0; i < records; ++i) {
    out.push_back(static_cast<std::uint8_t>(r.below(10)));
    for (std::size_t j = 0; j < 3072; ++j) out.push_back(static_cast<std::uint8_t>(r.below(256)));
  }
  return out;
}

ImageRecord gradient_image() {
  std::vector<double> px(3 * 16 * 16);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x) px[(c * 16 + y) * 16 + x] = (x + 2.0 * y + 5.0 * c) / 80.0;
  return {Tensor::from_values({3, 16, 16}, px), 0};
}

}  // namespace

TEST(Cifar, Examples) {
  std::vector<std::uint8_t> one(3073, 0);
  one[0] = 7;
  one[1] = 255;
  auto recs = parse_cifar10(one);
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_EQ(*recs[0].label, 7);
  EXPECT_EQ(recs[0].pixels.shape(), (Shape{3, 32, 32}));
  EXPECT_EQ(recs[0].pixels.at(0), 1.0);
  EXPECT_EQ(recs[0].pixels.at(1), 0.0);

  EXPECT_THROW(parse_cifar10(std::vector<std::uint8_t>(3072, 0)), FormatError);
  auto bad = one;
  bad[0] = 10;
  EXPECT_THROW(parse_cifar10(bad), FormatError);
}

TEST(Cifar, PlaneLayout) {
  std::vector<std::uint8_t> rec(3073, 0);
  rec[0] = 2;
  rec[1 + 0 * 1024 + 5 * 32 + 9] = 51;   // R at (5, 9)
  rec[1 + 1 * 1024 + 31 * 32 + 0] = 102; // G at (31, 0)
  rec[1 + 2 * 1024 + 0] = 204;           // B at (0, 0)
  auto r = parse_cifar10(rec)[0];
  EXPECT_DOUBLE_EQ(r.pixels.at((0 * 32 + 5) * 32 + 9), 0.2);
  EXPECT_DOUBLE_EQ(r.pixels.at((1 * 32 + 31) * 32 + 0), 0.4);
  EXPECT_DOUBLE_EQ(r.pixels.at((2 * 32 + 0) * 32 + 0), 0.8);
}

TEST(Cifar, RoundTripThroughFile) {
  const auto bytes = cifar_bytes(5, 1);
  const auto path = std::filesystem::temp_directory_path() / "msn_cifar_roundtrip.bin";
  {
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  auto recs = load_cifar10(path.string());
  std::filesystem::remove(path);
  ASSERT_EQ(recs.size(), 5u);
  std::vector<std::uint8_t> again;
  for (const auto& r : recs) {
    for (double v : r.pixels.values()) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
    auto rec = encode_cifar10_record(r);
    ASSERT_EQ(rec.size(), kCifarRecordBytes);
    again.insert(again.end(), rec.begin(), rec.end());
  }
  EXPECT_EQ(again, bytes);
  EXPECT_THROW(load_cifar10("/nonexistent/cifar.bin"), Error);
}

TEST(Synth, DeterministicAndBalanced) {
  Rng a(3), b(3), c(4);
  auto d1 = synth_dataset(8, 20, 32, a);
  auto d2 = synth_dataset(8, 20, 32, b);
  auto d3 = synth_dataset(8, 20, 32, c);
  ASSERT_EQ(d1.size(), 160u);
  std::vector<int> counts(8, 0);
  bool differs = false;
  for (std::size_t i = 0; i < d1.size(); ++i) {
    EXPECT_EQ(vec(d1[i].pixels), vec(d2[i].pixels));
    EXPECT_EQ(*d1[i].label, *d2[i].label);
    differs |= vec(d1[i].pixels) != vec(d3[i].pixels);
    counts[*d1[i].label]++;
    for (double v : d1[i].pixels.values()) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
  }
  EXPECT_TRUE(differs);
  for (int n : counts) EXPECT_EQ(n, 20);
  EXPECT_EQ(num_classes(d1), 8u);
}

TEST(Synth, AcrossClassFartherThanWithin) {
  // 100 samples per class pair: 50 of each
  Rng rng(5);
  const std::size_t C = 10, n = 50;
  auto d = synth_dataset(C, n, 32, rng);
  const std::size_t N = d.size();
  std::vector<double> dist(N * N, 0.0);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = i + 1; j < N; ++j) dist[i * N + j] = dist[j * N + i] = sq_dist(d[i].pixels, d[j].pixels);
  auto mean_dist = [&](int ca, int cb) {
    double s = 0;
    std::size_t cnt = 0;
    for (std::size_t i = 0; i < N; ++i) {
      if (*d[i].label != ca) continue;
      for (std::size_t j = 0; j < N; ++j) {
        if (*d[j].label != cb || (ca == cb && j <= i)) continue;
        s += dist[i * N + j];
        ++cnt;
      }
    }
    return s / cnt;
  };
  double within = 0, across = 0;
  for (std::size_t a = 0; a < C; ++a) {
    within += mean_dist(a, a) / C;
    for (std::size_t b = a + 1; b < C; ++b) across += mean_dist(a, b) / (C * (C - 1) / 2);
  }
  EXPECT_GT(across, within);
  // the first two signatures on their own, 100 samples
  Rng rng2(6);
  auto two = synth_dataset(2, 50, 32, rng2);
  double w = 0, x = 0;
  std::size_t nw = 0, nx = 0;
  for (std::size_t i = 0; i < two.size(); ++i)
    for (std::size_t j = i + 1; j < two.size(); ++j) {
      const double dd = sq_dist(two[i].pixels, two[j].pixels);
      if (*two[i].label == *two[j].label) {
        w += dd;
        ++nw;
      } else {
        x += dd;
        ++nx;
      }
    }
  EXPECT_GT(x / nx, w / nw);
}

TEST(Synth, Errors) {
  Rng rng(1);
  EXPECT_THROW(synth_dataset(1, 5, 32, rng), ParameterError);
  EXPECT_THROW(synth_dataset(11, 5, 32, rng), ParameterError);
}

TEST(Augment, AllOffIsIdentity) {
  auto img = gradient_image();
  Rng rng(1);
  auto v = augment(img, 3, AugmentPolicy::off(), rng);
  EXPECT_EQ(vec(v.target), vec(img.pixels));
  ASSERT_EQ(v.anchors.size(), 3u);
  for (const auto& a : v.anchors) EXPECT_EQ(vec(a), vec(img.pixels));
}

TEST(Augment, FlipTwiceIsIdentity) {
  auto img = gradient_image();
  EXPECT_EQ(vec(hflip(hflip(img.pixels))), vec(img.pixels));
  EXPECT_NE(vec(hflip(img.pixels)), vec(img.pixels));
  ViewParams p;
  p.flip = true;
  EXPECT_EQ(vec(render_view(render_view(img.pixels, p), p)), vec(img.pixels));
}

TEST(Augment, SharedViewsArePixelIdentical) {
  auto img = gradient_image();
  AugmentPolicy pol;
  pol.sharing = ViewSharing::Shared;
  for (std::uint64_t s = 0; s < 10; ++s) {
    Rng rng(s);
    auto v = augment(img, 4, pol, rng);
    for (const auto& a : v.anchors) EXPECT_EQ(vec(a), vec(v.target));
  }
}

TEST(Augment, ColorModeSharesOnlyGeometry) {
  auto img = gradient_image();
  // colour ops off: the colour mode must reproduce the target geometry exactly,
  // independent mode must not
  AugmentPolicy pol;
  pol.jitter_prob = 0.0;
  pol.grayscale_prob = 0.0;
  pol.sharing = ViewSharing::ColorJitterOnly;
  AugmentPolicy indep = pol;
  indep.sharing = ViewSharing::Independent;
  int indep_differs = 0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    Rng r1(s), r2(s);
    auto v = augment(img, 2, pol, r1);
    for (const auto& a : v.anchors) EXPECT_EQ(vec(a), vec(v.target));
    auto w = augment(img, 2, indep, r2);
    for (const auto& a : w.anchors) indep_differs += vec(a) != vec(w.target);
  }
  EXPECT_GT(indep_differs, 15);

  // colour on: anchors differ from the target, but only per-pixel colour-wise
  AugmentPolicy colour;
  colour.sharing = ViewSharing::ColorJitterOnly;
  colour.jitter_prob = 1.0;
  colour.blur_prob = 0.0;
  int colour_differs = 0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    Rng r(s);
    auto v = augment(img, 2, colour, r);
    for (const auto& a : v.anchors) colour_differs += vec(a) != vec(v.target);
  }
  EXPECT_GT(colour_differs, 15);
}

TEST(Augment, DeterministicPerKey) {
  Rng data_rng(2);
  auto ds = synth_dataset(2, 2, 32, data_rng);
  std::vector<MaskSpec> masks{MaskSpec::random(0.5), MaskSpec::focal(3, 4)};
  AugmentPolicy pol;
  auto bundle = [&](std::uint64_t step, std::uint64_t index) {
    Rng r = Rng(11).derive({4, step, index});
    return make_view_bundle(ds[index], masks, 4, pol, r);
  };
  auto a = bundle(3, 1), b = bundle(3, 1), c = bundle(4, 1);
  EXPECT_EQ(vec(a.target.tokens), vec(b.target.tokens));
  ASSERT_EQ(a.anchors.size(), 2u);
  for (std::size_t m = 0; m < 2; ++m) {
    EXPECT_EQ(a.anchors[m].positions, b.anchors[m].positions);
    EXPECT_EQ(vec(a.anchors[m].tokens), vec(b.anchors[m].tokens));
  }
  EXPECT_NE(vec(a.target.tokens), vec(c.target.tokens));
  EXPECT_EQ(a.target.length(), 64u);
  EXPECT_EQ(a.anchors[0].length(), 32u);
  EXPECT_EQ(a.anchors[1].length(), 12u);
  EXPECT_EQ(a.masks, masks);
  EXPECT_THROW(make_view_bundle(ds[0], std::span<const MaskSpec>(), 4, pol, data_rng), PreconditionError);
}

TEST(Augment, ViewsStayInRange) {
  Rng data_rng(3);
  auto ds = synth_dataset(4, 3, 32, data_rng);
  AugmentPolicy pol;
  pol.jitter_prob = 1.0;
  pol.blur_prob = 1.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Rng r(i);
    auto v = augment(ds[i], 3, pol, r);
    EXPECT_EQ(v.target.shape(), ds[i].pixels.shape());
    for (const auto& a : v.anchors)
      for (double x : a.values()) {
        ASSERT_GE(x, 0.0);
        ASSERT_LE(x, 1.0);
      }
  }
}

TEST(Augment, CropsRespectScaleRange) {
  AugmentPolicy pol;
  Rng rng(4);
  for (int t = 0; t < 2000; ++t) {
    auto p = sample_view_params(32, 32, pol, rng);
    if (p.full_frame) continue;
    const double area = p.crop.height * p.crop.width / (32.0 * 32.0);
    EXPECT_GE(area, pol.crop_scale_min - 1e-9);
    EXPECT_LE(area, pol.crop_scale_max + 1e-9);
    EXPECT_GE(p.crop.top, 0.0);
    EXPECT_GE(p.crop.left, 0.0);
    EXPECT_LE(p.crop.top + p.crop.height, 32.0 + 1e-9);
    EXPECT_LE(p.crop.left + p.crop.width, 32.0 + 1e-9);
  }
  // an impossible aspect range still yields a valid box
  AugmentPolicy odd = pol;
  odd.crop_scale_min = odd.crop_scale_max = 1.0;
  odd.aspect_min = odd.aspect_max = 5.0;
  auto p = sample_view_params(32, 32, odd, rng);
  EXPECT_GT(p.crop.height, 0.0);
  EXPECT_LE(p.crop.top + p.crop.height, 32.0 + 1e-9);
}

TEST(ViewSharing, ParseAndPrint) {
  for (auto s : {ViewSharing::Independent, ViewSharing::ColorJitterOnly, ViewSharing::Shared})
    EXPECT_EQ(parse_view_sharing(to_string(s)), s);
  EXPECT_THROW(parse_view_sharing("both"), ParameterError);
}

TEST(LowShot, Examples) {
  std::vector<int> labels;
  for (int c = 0; c < 10; ++c)
    for (int i = 0; i < 7; ++i) labels.push_back(c);
  auto one = make_lowshot_split(labels, 1, 0);
  EXPECT_EQ(one.indices().size(), 10u);
  for (std::size_t c = 0; c < 10; ++c) {
    ASSERT_EQ(one.per_class[c].size(), 1u);
    EXPECT_EQ(labels[one.per_class[c][0]], static_cast<int>(c));
  }
  auto all = make_lowshot_split(labels, 7, 3);
  auto idx = all.indices();
  std::sort(idx.begin(), idx.end());
  std::vector<std::size_t> everything(labels.size());
  std::iota(everything.begin(), everything.end(), 0);
  EXPECT_EQ(idx, everything);
}

TEST(LowShot, SeedsGiveDifferentSplits) {
  std::vector<int> labels;
  for (int c = 0; c < 8; ++c)
    for (int i = 0; i < 500; ++i) labels.push_back(c);
  auto a = make_lowshot_split(labels, 5, 0);
  auto b = make_lowshot_split(labels, 5, 1);
  auto a2 = make_lowshot_split(labels, 5, 0);
  EXPECT_NE(a.indices(), b.indices());
  EXPECT_EQ(a.indices(), a2.indices());
  const auto picked = a.indices();
  const std::set<std::size_t> unique(picked.begin(), picked.end());
  EXPECT_EQ(unique.size(), 40u);
}

TEST(LowShot, TooFewImagesNamesClass) {
  std::vector<int> labels{0, 0, 0, 1, 1, 2, 2, 2};
  try {
    make_lowshot_split(labels, 3, 0);
    FAIL();
  } catch (const PreconditionError& e) {
    EXPECT_NE(std::string(e.what()).find("class 1"), std::string::npos) << e.what();
  }
}

TEST(LowShot, UniformPicks) {
  // each of 10 members of a class is picked with probability k/10
  std::vector<int> labels(10, 0);
  std::vector<double> hits(10, 0);
  const int trials = 4000;
  for (int s = 0; s < trials; ++s)
    for (std::size_t i : make_lowshot_split(labels, 3, s).indices()) hits[i] += 1;
  const double p = 0.3, sigma = std::sqrt(trials * p * (1 - p));
  for (double h : hits) EXPECT_LT(std::fabs(h - trials * p), 5 * sigma);
}
