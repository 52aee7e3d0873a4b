#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "fedsynth/transfer.hpp"

using namespace fedsynth;
using namespace fedsynth::transfer;

namespace {

Tensor random_map(std::uint64_t seed, const ad::Shape& shape, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(ad::numel(shape));
  for (double& x : v) x = u(rng);
  return Tensor::from_data(shape, std::move(v));
}

// Loop-and-sort reference for Y on (pixels x C) data.
double naive_swd(std::span<const double> u, std::span<const double> v, std::size_t c, const ProjectionSet& p) {
  const std::size_t n = u.size() / c;
  double total = 0.0;
  for (std::size_t k = 0; k < p.count(); ++k) {
    const auto d = p.direction(k);
    std::vector<double> a(n, 0.0), b(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        a[i] += u[i * c + j] * d[j];
        b[i] += v[i * c + j] * d[j];
      }
    }
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += std::fabs(a[i] - b[i]);
    total += s / static_cast<double>(n);
  }
  return total / static_cast<double>(p.count());
}

std::span<const double> sample_span(const Tensor& t, std::size_t i) {
  const std::size_t per = t.numel() / t.shape()[0];
  return t.data().subspan(i * per, per);
}

Tensor permute_pixels(const Tensor& t, std::uint64_t seed) {
  const std::size_t c = t.shape().back(), n = t.numel() / c;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<double> out(t.numel());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = t[perm[i] * c + j];
  return Tensor::from_data(t.shape(), std::move(out));
}

double naive_ssim(const Tensor& x, const Tensor& y) {
  const auto& s = x.shape();
  const std::size_t B = s[0], H = s[1], W = s[2], C = s[3];
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i + 2 < H; ++i)
      for (std::size_t j = 0; j + 2 < W; ++j)
        for (std::size_t c = 0; c < C; ++c) {
          double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
          for (std::size_t dy = 0; dy < 3; ++dy)
            for (std::size_t dx = 0; dx < 3; ++dx) {
              const std::size_t f = ((b * H + i + dy) * W + j + dx) * C + c;
              mx += x[f];
              my += y[f];
              xx += x[f] * x[f];
              yy += y[f] * y[f];
              xy += x[f] * y[f];
            }
          mx /= 9;
          my /= 9;
          const double vx = xx / 9 - mx * mx, vy = yy / 9 - my * my, cv = xy / 9 - mx * my;
          total += ((2 * mx * my + c1) * (2 * cv + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
          ++count;
        }
  return total / static_cast<double>(count);
}

}  // namespace

TEST(Projections, UnitNormAndDeterministic) {
  auto a = ProjectionSet::random(7, 64, 11);
  auto b = ProjectionSet::random(7, 64, 11);
  EXPECT_EQ(a.count(), 64u);
  for (std::size_t k = 0; k < a.count(); ++k) {
    const auto d = a.direction(k);
    double n = 0.0;
    for (double v : d) n += v * v;
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-9);
    EXPECT_EQ(d, b.direction(k));
  }
}

TEST(Projections, NonUnitVectorRejected) {
  EXPECT_THROW(ProjectionSet::from_vectors({{1.0, 1.0}}), std::invalid_argument);
}

TEST(SlicedWasserstein, SingleChannelMatchesSortedL1) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Tensor u = random_map(seed, {5, 6, 1}), v = random_map(seed + 100, {5, 6, 1});
    auto p = ProjectionSet::from_vectors({{1.0}});
    std::vector<double> a(u.data().begin(), u.data().end()), b(v.data().begin(), v.data().end());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    double ref = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) ref += std::fabs(a[i] - b[i]);
    ref /= static_cast<double>(a.size());
    EXPECT_NEAR(sliced_wasserstein(u, v, p).item(), ref, 1e-12);
  }
}

TEST(SlicedWasserstein, MatchesLoopOracleOnManyChannels) {
  auto p = ProjectionSet::random(6, 16, 3);
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Tensor u = random_map(seed, {4, 4, 6}), v = random_map(seed + 50, {4, 4, 6}, -0.5, 2.0);
    EXPECT_NEAR(sliced_wasserstein(u, v, p).item(), naive_swd(u.data(), v.data(), 6, p), 1e-12);
  }
}

TEST(SlicedWasserstein, IdentityIsZeroAndSymmetric) {
  auto p = ProjectionSet::random(5, 32, 9);
  Tensor u = random_map(1, {6, 6, 5}), v = random_map(2, {6, 6, 5});
  EXPECT_EQ(sliced_wasserstein(u, u, p).item(), 0.0);
  EXPECT_NEAR(sliced_wasserstein(u, v, p).item(), sliced_wasserstein(v, u, p).item(), 1e-15);
  EXPECT_GT(sliced_wasserstein(u, v, p).item(), 0.0);
}

TEST(SlicedWasserstein, PixelPermutationInvariant) {
  auto p = ProjectionSet::random(4, 16, 5);
  Tensor u = random_map(1, {6, 6, 4}), v = random_map(2, {6, 6, 4});
  const double base = sliced_wasserstein(u, v, p).item();
  for (std::uint64_t s = 0; s < 100; ++s) {
    EXPECT_NEAR(sliced_wasserstein(permute_pixels(u, s), v, p).item(), base, 1e-12);
    EXPECT_NEAR(sliced_wasserstein(u, permute_pixels(v, s + 1000), p).item(), base, 1e-12);
  }
}

TEST(SlicedWasserstein, ShapeMismatchRejected) {
  auto p = ProjectionSet::random(3, 4, 1);
  EXPECT_THROW((void)sliced_wasserstein(random_map(1, {4, 4, 3}), random_map(1, {4, 5, 3}), p), ad::ShapeError);
  EXPECT_THROW((void)sliced_wasserstein(random_map(1, {4, 4, 2}), random_map(1, {4, 4, 2}), p), ad::ShapeError);
}

TEST(SlicedWasserstein, GradientMatchesFiniteDifferences) {
  auto p = ProjectionSet::random(3, 8, 4);
  Tensor v = random_map(77, {3, 3, 3});
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto report = ad::grad_check([&](const Tensor& x) { return sliced_wasserstein(x, v, p); },
                                 random_map(seed, {3, 3, 3}), 1e-6);
    EXPECT_TRUE(report.passed) << "seed " << seed << " err " << report.max_rel_error;
  }
}

TEST(TextureLoss, MatchesDoubleLoopOracle) {
  ProjectionBank bank(12, 5);
  ActivationMap t{{"a", random_map(1, {3, 4, 4, 5})}, {"b", random_map(2, {3, 2, 2, 7})}};
  ActivationMap s{{"a", random_map(3, {3, 4, 4, 5})}, {"b", random_map(4, {3, 2, 2, 7})}};
  double ref = 0.0;
  for (const char* name : {"a", "b"}) {
    const std::size_t c = t[name].shape()[3];
    for (std::size_t i = 0; i < 3; ++i) {
      ref += naive_swd(sample_span(t[name], i), sample_span(s[name], i), c, bank.for_channels(c));
    }
  }
  ref /= 6.0;
  EXPECT_NEAR(internal_distribution_loss(t, s, {"a", "b"}, bank).item(), ref, 1e-12);
}

TEST(TextureLoss, IdenticalActivationsGiveZero) {
  ProjectionBank bank(8, 1);
  ActivationMap t{{"a", random_map(1, {2, 4, 4, 3})}};
  EXPECT_EQ(internal_distribution_loss(t, t, {"a"}, bank).item(), 0.0);
}

TEST(TextureLoss, SingleTermReducesToSlicedWasserstein) {
  ProjectionBank bank(8, 1);
  Tensor a = random_map(1, {1, 4, 4, 3}), b = random_map(2, {1, 4, 4, 3});
  const double y = sliced_wasserstein(ad::reshape(a, {4, 4, 3}), ad::reshape(b, {4, 4, 3}), bank.for_channels(3)).item();
  EXPECT_EQ(internal_distribution_loss({{"x", a}}, {{"x", b}}, {"x"}, bank).item(), y);
}

TEST(TextureLoss, UnknownLayerRejected) {
  ProjectionBank bank(8, 1);
  ActivationMap t{{"a", random_map(1, {1, 2, 2, 3})}};
  EXPECT_THROW((void)internal_distribution_loss(t, t, {"nope"}, bank), std::invalid_argument);
  EXPECT_THROW((void)internal_distribution_loss(t, t, {}, bank), std::invalid_argument);
}

TEST(GeometryLoss, OnesMaskEqualsTextureLoss) {
  ProjectionBank bank(8, 2);
  ActivationMap t{{"g", random_map(1, {2, 4, 4, 6})}}, s{{"g", random_map(2, {2, 4, 4, 6})}};
  Tensor ones = Tensor::ones({2, 4, 4, 1});
  EXPECT_NEAR(geometry_loss(t, s, {"g"}, ones, ones, bank).item(),
              internal_distribution_loss(t, s, {"g"}, bank).item(), 1e-15);
}

TEST(GeometryLoss, ZeroMaskGivesZero) {
  ProjectionBank bank(8, 2);
  ActivationMap t{{"g", random_map(1, {2, 4, 4, 6})}}, s{{"g", random_map(2, {2, 4, 4, 6})}};
  Tensor zeros = Tensor::zeros({2, 4, 4, 1});
  EXPECT_EQ(geometry_loss(t, s, {"g"}, zeros, zeros, bank).item(), 0.0);
}

TEST(GeometryLoss, HalfMaskMatchesNaiveMaskedOracle) {
  ProjectionBank bank(8, 2);
  Tensor a = random_map(1, {2, 4, 4, 3}), b = random_map(2, {2, 4, 4, 3});
  std::vector<double> m(32, 0.0), big(32, 0.0);
  for (std::size_t i = 0; i < 32; ++i) {
    m[i] = (i % 4) < 2 ? 1.0 : 0.0;
    big[i] = (i / 4) % 2 == 0 ? 0.7 : 0.0;
  }
  Tensor mt = Tensor::from_data({2, 4, 4, 1}, m), ms = Tensor::from_data({2, 4, 4, 1}, big);
  std::vector<double> ga(a.numel()), gb(b.numel());
  for (std::size_t p = 0; p < 32; ++p)
    for (std::size_t c = 0; c < 3; ++c) {
      ga[p * 3 + c] = a[p * 3 + c] * m[p];
      gb[p * 3 + c] = b[p * 3 + c] * big[p];
    }
  double ref = 0.0;
  for (std::size_t i = 0; i < 2; ++i) {
    ref += naive_swd(std::span<const double>(ga).subspan(i * 48, 48), std::span<const double>(gb).subspan(i * 48, 48),
                     3, bank.for_channels(3));
  }
  ref /= 2.0;
  EXPECT_NEAR(geometry_loss({{"g", a}}, {{"g", b}}, {"g"}, mt, ms, bank).item(), ref, 1e-12);
}

TEST(GeometryLoss, MaskIsUpsampledToLayerResolution) {
  Tensor m = random_map(3, {2, 2, 2, 1}, 0.0, 1.0);
  EXPECT_EQ(alpha_mask(m, 8, 8).shape(), (ad::Shape{2, 8, 8, 1}));
  EXPECT_EQ(alpha_mask(m, 2, 2).data()[0], m[0]);
  EXPECT_THROW((void)alpha_mask(m, 6, 6), ad::ShapeError);
}

TEST(GeometryLoss, MaskShapeMismatchRejected) {
  ProjectionBank bank(8, 2);
  ActivationMap t{{"g", random_map(1, {2, 4, 4, 6})}};
  EXPECT_THROW((void)geometry_loss(t, t, {"g"}, Tensor::ones({2, 3, 3, 1}), Tensor::ones({2, 3, 3, 1}), bank),
               ad::ShapeError);
  EXPECT_THROW((void)geometry_loss(t, t, {"g"}, Tensor::ones({3, 4, 4, 1}), Tensor::ones({3, 4, 4, 1}), bank),
               ad::ShapeError);
}

TEST(Ssim, SelfSimilarityIsOne) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Tensor x = random_map(seed, {2, 6, 5, 3}, 0.0, 1.0);
    EXPECT_NEAR(ssim(x, x).item(), 1.0, 1e-9);
  }
  Tensor c = Tensor::full({1, 5, 5, 3}, 0.37);
  EXPECT_NEAR(ssim(c, c).item(), 1.0, 1e-12);
}

TEST(Ssim, MatchesWindowLoopOracle) {
  Tensor x = random_map(1, {2, 5, 6, 3}, 0.0, 1.0), y = random_map(2, {2, 5, 6, 3}, 0.0, 1.0);
  EXPECT_NEAR(ssim(x, y).item(), naive_ssim(x, y), 1e-12);
}

TEST(ImageQuality, IdenticalImagesGiveMinusOne) {
  Tensor x = random_map(4, {2, 8, 8, 3}, 0.0, 1.0);
  auto q = image_quality_loss(x, x);
  EXPECT_NEAR(q.total.item(), -1.0, 1e-12);
  EXPECT_EQ(q.perceptual.item(), 0.0);
  EXPECT_EQ(q.mse.item(), 0.0);
  Tensor c = Tensor::full({1, 8, 8, 3}, 0.6);
  EXPECT_NEAR(image_quality_loss(c, c).total.item(), -1.0, 1e-12);
}

TEST(ImageQuality, MseTermMatchesPixelLoop) {
  Tensor x = random_map(5, {2, 8, 8, 3}, 0.0, 1.0), y = random_map(6, {2, 8, 8, 3}, 0.0, 1.0);
  double ref = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) ref += (x[i] - y[i]) * (x[i] - y[i]);
  ref /= static_cast<double>(x.numel());
  auto q = image_quality_loss(x, y);
  EXPECT_NEAR(q.mse.item(), ref, 1e-15);
  EXPECT_GT(q.perceptual.item(), 0.0);
  EXPECT_NEAR(q.total.item(), -q.ssim.item() + q.perceptual.item() + q.mse.item(), 1e-15);
}

TEST(ImageQuality, RangeAndShapeViolationsRejected) {
  Tensor ok = Tensor::full({1, 8, 8, 3}, 0.5);
  EXPECT_THROW((void)image_quality_loss(Tensor::full({1, 8, 8, 3}, 1.2), ok), std::invalid_argument);
  EXPECT_THROW((void)image_quality_loss(ok, Tensor::full({1, 8, 8, 3}, -0.1)), std::invalid_argument);
  EXPECT_THROW((void)image_quality_loss(ok, Tensor::full({1, 8, 9, 3}, 0.5)), ad::ShapeError);
}

TEST(TransferTotal, WeightedSum) {
  TransferCfg cfg;
  const Tensor one = Tensor::scalar(1.0);
  EXPECT_NEAR(transfer_total(one, one, one, cfg).item(), 6.2, 1e-15);
  const Tensor zero = Tensor::scalar(0.0);
  EXPECT_EQ(transfer_total(zero, zero, zero, cfg).item(), 0.0);
  cfg.lambda_geometry = 0.0;
  EXPECT_EQ(transfer_total(Tensor::scalar(0.3), Tensor::scalar(1e9), Tensor::scalar(0.7), cfg).item(),
            5.0 * 0.3 + 0.7);
}

TEST(TransferTotal, LinearInEachTerm) {
  TransferCfg cfg;
  auto f = [&](double s, double g, double i) {
    return transfer_total(Tensor::scalar(s), Tensor::scalar(g), Tensor::scalar(i), cfg).item();
  };
  EXPECT_NEAR(f(2.0, 0.5, -1.0) + f(1.0, 3.0, 4.0), f(3.0, 3.5, 3.0), 1e-12);
  EXPECT_NEAR(f(4.0, 0.0, 0.0), 2.0 * f(2.0, 0.0, 0.0), 1e-12);
}

TEST(TransferCfg, NegativeWeightRejected) {
  TransferCfg cfg;
  cfg.lambda_texture = -1.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(FreezePlan, Boundaries) {
  auto early = freeze_plan(1, 10);
  EXPECT_FALSE(early.count(LayerTag::geometry));
  EXPECT_FALSE(early.count(LayerTag::viewpoint));
  EXPECT_TRUE(early.count(LayerTag::render));
  EXPECT_TRUE(early.count(LayerTag::color));
  EXPECT_TRUE(early.count(LayerTag::mapping));
  EXPECT_EQ(freeze_plan(9, 10).size(), all_tags().size() - 2);
  EXPECT_EQ(freeze_plan(10, 10), all_tags());
  EXPECT_EQ(freeze_plan(11, 10), all_tags());
  EXPECT_THROW((void)freeze_plan(0, 10), std::invalid_argument);
}

TEST(TransferTerms, SameModelGivesZeroDistributionTerms) {
  render::GeneratorConfig gc;
  gc.trunk_width = 16;
  gc.base_resolution = 4;
  gc.samples_per_ray = 6;
  render::Generator g(gc);
  auto params = g.init_params(3);
  Tensor z = random_map(9, {2, gc.z_dim});
  const render::CameraPose poses[2] = {{0.1, 0.2, {}}, {-0.2, -0.4, {}}};
  TransferCfg cfg;
  cfg.projections = 8;
  ProjectionBank bank(cfg.projections, 1);
  Tensor images = Tensor::full({2, 8, 8, 3}, 0.5);
  auto terms = transfer_terms(g, params, params, z, poses, images, cfg, bank);
  EXPECT_EQ(terms.texture.item(), 0.0);
  EXPECT_EQ(terms.geometry.item(), 0.0);
  EXPECT_NEAR(terms.total.item(), terms.image.total.item(), 1e-15);

  auto other = g.init_params(4);
  auto shifted = transfer_terms(g, params, other, z, poses, images, cfg, bank);
  EXPECT_GT(shifted.texture.item(), 0.0);
  EXPECT_GT(shifted.geometry.item(), 0.0);
}

TEST(TransferTerms, FrozenTagsReceiveNoGradient) {
  render::GeneratorConfig gc;
  gc.trunk_width = 16;
  gc.base_resolution = 4;
  gc.samples_per_ray = 6;
  render::Generator g(gc);
  auto source = g.init_params(3);
  auto target = source.clone();
  target.set_trainable(freeze_plan(1, 5));
  Tensor z = random_map(9, {2, gc.z_dim});
  const render::CameraPose poses[2] = {{0.1, 0.2, {}}, {-0.2, -0.4, {}}};
  TransferCfg cfg;
  cfg.projections = 8;
  ProjectionBank bank(cfg.projections, 1);
  auto terms = transfer_terms(g, target, source, z, poses, Tensor::full({2, 8, 8, 3}, 0.2), cfg, bank);
  terms.total.backward();
  for (const auto& e : target.entries()) {
    const bool frozen = e.tag == LayerTag::geometry || e.tag == LayerTag::viewpoint;
    EXPECT_EQ(e.value.has_grad(), !frozen) << e.name;
  }
}
