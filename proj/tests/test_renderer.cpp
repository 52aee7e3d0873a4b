#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "fedsynth/renderer.hpp"

using namespace fedsynth;
using namespace fedsynth::render;
using ad::Tensor;

namespace {

constexpr double kPi = std::numbers::pi;

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

GeneratorConfig small_generator() {
  GeneratorConfig cfg;
  cfg.trunk_layers = 2;
  cfg.trunk_width = 16;
  cfg.color_hidden = 16;
  cfg.feature_channels = 6;
  cfg.samples_per_ray = 8;
  cfg.encoding.levels = 4;
  return cfg;
}

Tensor latent(std::uint64_t seed, std::size_t rows, std::size_t dim) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(rows * dim);
  for (double& x : v) x = n(rng);
  return Tensor::from_data({rows, dim}, std::move(v));
}

// Kolmogorov-Smirnov statistic of samples against U(lo, hi).
double ks_uniform(std::vector<double> xs, double lo, double hi) {
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double f = (xs[i] - lo) / (hi - lo);
    d = std::max({d, f - static_cast<double>(i) / n, static_cast<double>(i + 1) / n - f});
  }
  return d;
}

}  // namespace

// ---------------------------------------------------------------------------
// Encoding and rays

TEST(PositionalEncode, ZeroInput) {
  const double x[1] = {0.0};
  auto e = positional_encode(x, {3});
  ASSERT_EQ(e.size(), 6u);
  const double expected[6] = {0, 1, 0, 1, 0, 1};
  for (int i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(e[i], expected[i]);
}

TEST(PositionalEncode, HalfPiInput) {
  const double x[1] = {kPi / 2.0};
  auto e = positional_encode(x, {2});
  ASSERT_EQ(e.size(), 4u);
  EXPECT_NEAR(e[0], 1.0, 1e-15);
  EXPECT_NEAR(e[1], 0.0, 1e-15);
  EXPECT_NEAR(e[2], 0.0, 1e-15);
  EXPECT_NEAR(e[3], -1.0, 1e-15);
}

TEST(PositionalEncode, TenLevelsOverFiveScalarsGivesHundredFeatures) {
  const double x[5] = {0.1, -0.2, 0.3, 0.4, -0.5};
  EXPECT_EQ(positional_encode(x, {10}).size(), 100u);
}

TEST(PositionalEncode, ValuesBoundedForRandomInputs) {
  Rng rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const double x[3] = {u(rng), u(rng), u(rng)};
    for (double v : positional_encode(x, {10})) {
      EXPECT_LE(v, 1.0);
      EXPECT_GE(v, -1.0);
    }
  }
}

TEST(CastRay, PointAlongRay) {
  Ray r;
  r.origin = {0, 0, 0};
  r.direction = {0, 0, 1};
  const Vec3 p = r.point(2.0);
  EXPECT_EQ(p, (Vec3{0, 0, 2}));
}

TEST(CastRay, CentrePixelFollowsOpticalAxis) {
  for (double yaw : {0.0, 0.7, -2.5}) {
    for (double pitch : {0.0, 0.4, -1.1}) {
      const CameraPose pose = orbit_pose(pitch, yaw, 1.5);
      const Ray r = cast_ray(pose, 2, 2, 5, 5, 0.6);
      const Vec3 f = optical_axis(pose);
      for (int k = 0; k < 3; ++k) EXPECT_NEAR(r.direction[k], f[k], 1e-12);
      EXPECT_NEAR(dot(r.direction, r.direction), 1.0, 1e-12);
    }
  }
}

TEST(CastRay, CornerDirectionsMirrorAboutAxis) {
  const CameraPose pose = orbit_pose(0.3, -0.8, 1.5);
  const Vec3 f = optical_axis(pose);
  const std::size_t n = 6;
  const Ray tl = cast_ray(pose, 0, 0, n, n, 0.6);
  const Ray tr = cast_ray(pose, 0, n - 1, n, n, 0.6);
  const Ray bl = cast_ray(pose, n - 1, 0, n, n, 0.6);
  const Ray br = cast_ray(pose, n - 1, n - 1, n, n, 0.6);
  // Opposite corners sum to a vector along the axis; all make the same angle.
  for (const auto& [a, b] : {std::pair{tl, br}, std::pair{tr, bl}}) {
    Vec3 s{a.direction[0] + b.direction[0], a.direction[1] + b.direction[1], a.direction[2] + b.direction[2]};
    const double along = dot(s, f);
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(s[k], along * f[k], 1e-12);
  }
  EXPECT_NEAR(dot(tl.direction, f), dot(br.direction, f), 1e-12);
  EXPECT_NEAR(dot(tr.direction, f), dot(tl.direction, f), 1e-12);
}

TEST(CastRay, PixelOutsideImageRejected) {
  EXPECT_THROW((void)cast_ray(orbit_pose(0, 0, 1.5), 4, 0, 4, 4, 0.6), std::out_of_range);
}

TEST(CameraPose, OutOfRangeAnglesRejected) {
  EXPECT_THROW((void)orbit_pose(2.0, 0.0, 1.5), std::invalid_argument);
  EXPECT_THROW((void)orbit_pose(0.0, 3.5, 1.5), std::invalid_argument);
}

TEST(SampleDepths, DeterministicMidpoints) {
  auto q = sample_depths(0.0, 1.0, 2, false);
  ASSERT_EQ(q.size(), 2u);
  EXPECT_DOUBLE_EQ(q[0], 0.25);
  EXPECT_DOUBLE_EQ(q[1], 0.75);
}

TEST(SampleDepths, StratifiedDrawsStayInTheirBins) {
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    auto q = sample_depths(0.5, 2.5, 16, true, &rng);
    for (std::size_t i = 0; i < q.size(); ++i) {
      EXPECT_GE(q[i], 0.5 + 0.125 * static_cast<double>(i));
      EXPECT_LE(q[i], 0.5 + 0.125 * static_cast<double>(i + 1));
      if (i) EXPECT_GT(q[i], q[i - 1]);
    }
  }
}

TEST(SampleDepths, StratifiedDistributionIsUniform) {
  Rng rng(21);
  std::vector<double> pooled;
  for (int trial = 0; trial < 50; ++trial) {
    auto q = sample_depths(0.5, 2.5, 64, true, &rng);
    pooled.insert(pooled.end(), q.begin(), q.end());
  }
  // 5% critical value of the one-sample KS statistic.
  EXPECT_LT(ks_uniform(pooled, 0.5, 2.5), 1.36 / std::sqrt(static_cast<double>(pooled.size())));
}

TEST(SampleDepths, InvalidArgumentsRejected) {
  EXPECT_THROW((void)sample_depths(1.0, 1.0, 4, false), std::invalid_argument);
  EXPECT_THROW((void)sample_depths(0.0, 1.0, 1, false), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Quadrature

TEST(RenderRay, ZeroDensityIsBlack) {
  const std::vector<double> q = sample_depths(0.5, 2.5, 16, false);
  const std::vector<double> rho(16, 0.0);
  const std::vector<Rgb> col(16, Rgb{0.8, 0.5, 0.1});
  EXPECT_EQ(render_ray(rho, col, q, 2.5), (Rgb{0.0, 0.0, 0.0}));
}

TEST(RenderRay, NegativeDensityRejected) {
  const std::vector<double> q = {0.5, 1.0};
  const std::vector<double> rho = {1.0, -0.1};
  const std::vector<Rgb> col(2, Rgb{0.5, 0.5, 0.5});
  EXPECT_THROW((void)render_ray(rho, col, q, 2.0), std::invalid_argument);
}

TEST(RenderRay, ConstantDensityConvergesAtFirstOrder) {
  const double xi = 1.3, qmax = 2.0;
  const Rgb c0{0.9, 0.4, 0.2};
  const double exact = c0[0] * (1.0 - std::exp(-xi * qmax));
  std::vector<double> errors;
  for (std::size_t n = 8; n <= 128; n *= 2) {
    const auto q = sample_depths(0.0, qmax, n, false);
    const std::vector<double> rho(n, xi);
    const std::vector<Rgb> col(n, c0);
    errors.push_back(std::fabs(render_ray(rho, col, q, qmax)[0] - exact));
  }
  for (std::size_t i = 1; i < errors.size(); ++i) {
    EXPECT_LT(errors[i], errors[i - 1]);
    EXPECT_GE(std::log2(errors[i - 1] / errors[i]), 1.0);
  }
  EXPECT_LT(errors.back(), 1e-2);
}

TEST(RenderRay, LinearDensityMatchesFineReference) {
  // Reference: direct left-to-right integration of T(q) xi(q) c(q) dq with
  // 1e5 midpoint steps.
  const double near = 0.5, far = 2.5;
  auto xi = [](double q) { return 0.8 * q; };
  auto color = [](double q) { return Rgb{0.2 + 0.3 * q, 0.5, 0.9 - 0.3 * q}; };
  Rgb ref{0, 0, 0};
  const int steps = 100000;
  const double h = (far - near) / steps;
  double optical = 0.0;
  for (int i = 0; i < steps; ++i) {
    const double q = near + (i + 0.5) * h;
    const double w = std::exp(-optical) * xi(q) * h;
    const Rgb c = color(q);
    for (int k = 0; k < 3; ++k) ref[k] += w * c[k];
    optical += xi(q) * h;
  }
  const auto q = sample_depths(near, far, 64, false);
  std::vector<double> rho;
  std::vector<Rgb> col;
  for (double d : q) {
    rho.push_back(xi(d));
    col.push_back(color(d));
  }
  const Rgb got = render_ray(rho, col, q, far);
  for (int k = 0; k < 3; ++k) EXPECT_LT(std::fabs(got[k] - ref[k]), 0.01 * ref[k]) << "channel " << k;
}

TEST(RenderRay, PixelsAlwaysInUnitCube) {
  Rng rng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::exponential_distribution<double> e(0.2);
  for (int trial = 0; trial < 500; ++trial) {
    const auto q = sample_depths(0.5, 2.5, 12, true, &rng);
    std::vector<double> rho(12);
    std::vector<Rgb> col(12);
    for (std::size_t i = 0; i < 12; ++i) {
      rho[i] = e(rng);
      col[i] = {u(rng), u(rng), u(rng)};
    }
    for (double v : render_ray(rho, col, q, 2.5)) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(SceneOracle, FieldsSatisfyRanges) {
  const SceneOracle s = SceneOracle::source_scene();
  Rng rng(4);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int i = 0; i < 1000; ++i) {
    const Vec3 p{u(rng), u(rng), u(rng)};
    EXPECT_GE(s.density(p), 0.0);
    for (double c : s.color(p)) {
      EXPECT_GE(c, 0.0);
      EXPECT_LE(c, 1.0);
    }
  }
}

TEST(SceneOracle, RenderShowsObjectAtCentreAndBlackCorners) {
  const SceneOracle s = SceneOracle::source_scene();
  const auto img = s.render(orbit_pose(0.0, 0.0, 1.5), 9, 9, CameraCfg{}, 64);
  double centre = 0.0, corner = 0.0;
  for (int k = 0; k < 3; ++k) {
    centre += img[(4 * 9 + 4) * 3 + k];
    corner += img[k];
  }
  EXPECT_GT(centre, 0.3);
  EXPECT_LT(corner, 0.25 * centre);
}

// ---------------------------------------------------------------------------
// Generator

TEST(Generator, ProducesSixteenSquareRgbFromEightSquareFeatures) {
  Generator g(small_generator());
  auto params = g.init_params(1);
  const CameraPose poses[2] = {orbit_pose(0.1, 0.2, 1.5), orbit_pose(-0.1, -0.3, 1.5)};
  auto out = g.forward(latent(2, 2, 8), poses, params);
  EXPECT_EQ(out.features.shape(), (ad::Shape{2, 8, 8, 6}));
  EXPECT_EQ(out.low_res_rgb.shape(), (ad::Shape{2, 8, 8, 3}));
  EXPECT_EQ(out.image.shape(), (ad::Shape{2, 16, 16, 3}));
  for (double v : out.image.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(Generator, TwoUpsampleStagesGiveThirtyTwo) {
  auto cfg = small_generator();
  cfg.upsample_stages = 2;
  Generator g(cfg);
  const CameraPose poses[1] = {orbit_pose(0.0, 0.0, 1.5)};
  auto out = g.forward(latent(2, 1, 8), poses, g.init_params(1));
  EXPECT_EQ(out.image.shape(), (ad::Shape{1, 32, 32, 3}));
}

TEST(Generator, BitIdenticalAcrossRuns) {
  auto run = [] {
    Generator g(small_generator());
    const CameraPose poses[1] = {orbit_pose(0.2, -0.4, 1.5)};
    auto out = g.forward(latent(5, 1, 8), poses, g.init_params(42));
    return std::vector<double>(out.image.data().begin(), out.image.data().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Generator, ContinuousInYaw) {
  Generator g(small_generator());
  auto params = g.init_params(3);
  const Tensor z = latent(6, 1, 8);
  const CameraPose a[1] = {orbit_pose(0.1, 0.5, 1.5)};
  const CameraPose b[1] = {orbit_pose(0.1, 0.5 + 1e-6, 1.5)};
  auto ia = g.forward(z, a, params).image;
  auto ib = g.forward(z, b, params).image;
  for (std::size_t p = 0; p < 16 * 16; ++p) {
    double d2 = 0.0;
    for (int k = 0; k < 3; ++k) d2 += std::pow(ia[p * 3 + k] - ib[p * 3 + k], 2);
    EXPECT_LT(std::sqrt(d2), 1e-3);
  }
}

TEST(Generator, MissingTagIsNamed) {
  Generator g(small_generator());
  auto full = g.init_params(1);
  TagSet without_upsample = all_tags();
  without_upsample.erase(LayerTag::upsample);
  auto partial = full.subset(without_upsample);
  const CameraPose poses[1] = {orbit_pose(0.0, 0.0, 1.5)};
  try {
    (void)g.forward(latent(1, 1, 8), poses, partial);
    FAIL() << "expected MissingParameterError";
  } catch (const MissingParameterError& e) {
    EXPECT_EQ(e.tag(), LayerTag::upsample);
    EXPECT_NE(std::string(e.what()).find("upsample"), std::string::npos);
  }
}

TEST(Generator, ParamsCarryExactlyTheSixTags) {
  Generator g(small_generator());
  EXPECT_EQ(g.init_params(1).tags(), all_tags());
}

TEST(Generator, ActivationsCollectedOnRequest) {
  Generator g(small_generator());
  const CameraPose poses[1] = {orbit_pose(0.0, 0.0, 1.5)};
  ForwardOptions opts;
  opts.collect_activations = true;
  auto out = g.forward(latent(1, 1, 8), poses, g.init_params(1), opts);
  for (const char* name : {"render.0", "render.1", "geometry", "color", "upsample.0"}) {
    EXPECT_TRUE(out.activations.count(name)) << name;
  }
  EXPECT_EQ(out.activations.at("geometry").shape(), (ad::Shape{1, 8, 8, 8}));
}

TEST(FeaturePlane, ZeroDensityGivesZeroMap) {
  Generator g(small_generator());
  auto params = g.init_params(1);
  ForwardOptions opts;
  opts.density_override = [](const Vec3&) { return 0.0; };
  auto rays = g.make_rays(orbit_pose(0.2, 0.1, 1.5));
  Tensor map = g.render_feature_plane(latent(1, 1, 16), rays, params, opts);
  EXPECT_EQ(map.shape(), (ad::Shape{8, 8, 6}));
  for (double v : map.data()) EXPECT_EQ(v, 0.0);
}

TEST(FeaturePlane, IdenticalLatentsGiveIdenticalMaps) {
  Generator g(small_generator());
  auto params = g.init_params(1);
  auto rays = g.make_rays(orbit_pose(0.2, 0.1, 1.5));
  Tensor a = g.render_feature_plane(latent(4, 1, 16), rays, params);
  Tensor b = g.render_feature_plane(latent(4, 1, 16), rays, params);
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST(FeaturePlane, InvariantToRayOrder) {
  Generator g(small_generator());
  auto params = g.init_params(1);
  auto rays = g.make_rays(orbit_pose(-0.2, 0.4, 1.5));
  auto shuffled = rays;
  Rng rng(8);
  std::shuffle(shuffled.rays.begin(), shuffled.rays.end(), rng);
  const Tensor w = latent(4, 1, 16);
  Tensor a = g.render_feature_plane(w, rays, params);
  Tensor b = g.render_feature_plane(w, shuffled, params);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(FeaturePlane, MixedPosesRejected) {
  Generator g(small_generator());
  auto rays = g.make_rays(orbit_pose(0.0, 0.0, 1.5));
  auto other = g.make_rays(orbit_pose(0.0, 1.0, 1.5));
  rays.rays[5] = other.rays[5];
  EXPECT_THROW((void)g.render_feature_plane(latent(1, 1, 16), rays, g.init_params(1)), std::invalid_argument);
}

TEST(FeaturePlane, CloseToPerSampleRenderingOnSingleBlob) {
  Generator g(small_generator());
  const SceneOracle blob({{{0.0, 0.0, 0.0}, 0.4, 6.0, {1.0, 1.0, 1.0}}});
  ForwardOptions opts;
  opts.density_override = [&](const Vec3& p) { return blob.density(p); };
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto params = g.init_params(seed);
    auto rays = g.make_rays(orbit_pose(0.1, 0.3, 1.5));
    const Tensor w = latent(seed + 10, 1, 16);
    Tensor approx = g.render_feature_plane(w, rays, params, opts);
    Tensor full = g.render_full(w, rays, params, opts);
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < approx.numel(); ++i) {
      ab += approx[i] * full[i];
      aa += approx[i] * approx[i];
      bb += full[i] * full[i];
    }
    EXPECT_GT(ab / std::sqrt(aa * bb), 0.9) << "seed " << seed;
  }
}

// ---------------------------------------------------------------------------
// Discriminator

TEST(Discriminator, ZeroWeightsReturnFinalBias) {
  Discriminator d({4, {8}});
  auto p = d.init_params(1);
  for (auto& w : p.weights) w = Tensor::zeros(w.shape());
  p.biases.back() = Tensor::full({1, 1}, 0.37);
  Tensor img = Tensor::full({2, 4, 4, 3}, 0.5);
  Tensor out = d.forward(img, p);
  ASSERT_EQ(out.shape(), (ad::Shape{2, 1}));
  EXPECT_DOUBLE_EQ(out[0], 0.37);
  EXPECT_DOUBLE_EQ(out[1], 0.37);
}

TEST(Discriminator, ShapeMismatchRejected) {
  Discriminator d({4, {8}});
  EXPECT_THROW((void)d.forward(Tensor::zeros({1, 8, 8, 3}), d.init_params(1)), ad::ShapeError);
}

TEST(Discriminator, BatchPermutationPermutesLogits) {
  Discriminator d({4, {8}});
  auto p = d.init_params(2);
  Rng rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(3 * 48);
  for (double& x : v) x = u(rng);
  Tensor out = d.forward(Tensor::from_data({3, 4, 4, 3}, v), p);
  std::vector<double> swapped(v.begin() + 96, v.end());
  swapped.insert(swapped.end(), v.begin(), v.begin() + 96);
  Tensor out2 = d.forward(Tensor::from_data({3, 4, 4, 3}, swapped), p);
  EXPECT_DOUBLE_EQ(out2[0], out[2]);
  EXPECT_DOUBLE_EQ(out2[1], out[0]);
  EXPECT_DOUBLE_EQ(out2[2], out[1]);
}

TEST(Discriminator, LogitDifferentiableInTheImage) {
  Discriminator d({3, {6}});
  auto p = d.init_params(5);
  Rng rng(6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(27);
  for (double& x : v) x = u(rng);
  auto report = ad::grad_check([&](const Tensor& img) { return ad::sum(d.forward(img, p)); },
                               Tensor::from_data({1, 3, 3, 3}, v));
  EXPECT_TRUE(report.passed) << report.max_rel_error;
}

// ---------------------------------------------------------------------------

TEST(Flops, DirectSubstitution) {
  ArchDescription a;
  a.blocks = 1;
  a.channels = 1;
  a.kernel = 1;
  a.height = 2;
  a.width = 1;
  EXPECT_DOUBLE_EQ(flops_estimate(a).generator, 6.0);
  EXPECT_DOUBLE_EQ(flops_estimate(a).discriminator, 3.0);
}

TEST(Flops, DoublingChannelsQuadruplesTheKernelTerm) {
  ArchDescription a{3, 2, 8, 3, 16, 16, 8};
  ArchDescription b = a;
  b.channels = 16;
  // Remove the linear HWC terms and compare the quadratic remainder.
  auto quadratic = [](const ArchDescription& x) {
    return flops_estimate(x).generator / (x.blocks * std::log2(x.height)) - 2.0 * x.height * x.width * x.channels;
  };
  EXPECT_DOUBLE_EQ(quadratic(b), 4.0 * quadratic(a));
}

TEST(Ppm, HeaderIsExact) {
  std::vector<double> px(2 * 3 * 3, 1.0);
  px[0] = 0.0;
  const std::string ppm = encode_ppm(px, 2, 3);
  const std::string header = "P6\n3 2\n255\n";
  EXPECT_EQ(ppm.substr(0, header.size()), header);
  EXPECT_EQ(ppm.size(), header.size() + 18);
  EXPECT_EQ(static_cast<unsigned char>(ppm[header.size()]), 0);
  EXPECT_EQ(static_cast<unsigned char>(ppm[header.size() + 1]), 255);
}
