#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>
#include <sstream>

#include "fedsynth/netmodel.hpp"

using namespace fedsynth;
using namespace fedsynth::net;

namespace {

UserLink link_with_snr(double snr, double bandwidth = 1e6, std::size_t id = 0) {
  UserLink u;
  u.id = id;
  u.gain = snr;
  u.power = 1.0;
  u.noise = 1.0;
  u.bandwidth = bandwidth;
  return u;
}

std::vector<UserLink> symmetric_links(std::size_t k, double snr, double bandwidth) {
  std::vector<UserLink> v;
  for (std::size_t i = 0; i < k; ++i) v.push_back(link_with_snr(snr, bandwidth, i));
  return v;
}

GroupPlan one_group(std::size_t k) {
  GroupPlan p;
  p.groups.emplace_back();
  for (std::size_t i = 0; i < k; ++i) p.groups[0].push_back(i);
  return p;
}

}  // namespace

TEST(Rate, ShannonExamples) {
  EXPECT_DOUBLE_EQ(rate(link_with_snr(1.0)), 1.0);
  EXPECT_DOUBLE_EQ(rate(link_with_snr(3.0)), 2.0);
  EXPECT_LT(rate(link_with_snr(1e-300)), 1e-299);
}

TEST(Rate, StrictlyIncreasingInSnr) {
  Rng rng(4);
  std::uniform_real_distribution<double> u(-6.0, 6.0);
  for (int i = 0; i < 1000; ++i) {
    const double a = std::pow(10.0, u(rng)), b = a * (1.0 + 1e-6 + std::fabs(u(rng)));
    EXPECT_LT(rate(link_with_snr(a)), rate(link_with_snr(b)));
  }
}

TEST(Rate, InvalidLinkRejected) {
  UserLink u = link_with_snr(0.0);
  EXPECT_THROW(u.validate(), std::invalid_argument);
}

TEST(Individual, ArithmeticExamples) {
  ContentItem c{1e6, 1.0};
  ServerCfg s{1e9};
  const UserLink u = link_with_snr(1.0, 1e6);
  auto l = individual_latency(std::span(&u, 1), c, s, 0.0);
  EXPECT_DOUBLE_EQ(l.render, 1e-3);
  EXPECT_DOUBLE_EQ(l.transmit, 1.0);
  EXPECT_DOUBLE_EQ(l.total, l.render + l.transmit + l.post_process);
}

TEST(Individual, ScalesLinearlyWithUsers) {
  ContentItem c;
  ServerCfg s;
  auto one = individual_latency(symmetric_links(1, 50.0, 1e7), c, s, 0.01);
  for (std::size_t k : {2u, 5u, 20u}) {
    auto many = individual_latency(symmetric_links(k, 50.0, 1e7), c, s, 0.01);
    EXPECT_NEAR(many.render, static_cast<double>(k) * one.render, 1e-12);
    EXPECT_NEAR(many.transmit, static_cast<double>(k) * one.transmit, 1e-12);
    EXPECT_EQ(many.post_process, 0.01);
  }
}

TEST(Multicast, OneGroupRendersOnce) {
  ContentItem c;
  ServerCfg s;
  const auto users = symmetric_links(6, 20.0, 1e7);
  auto ind = individual_latency(users, c, s, 0.01);
  auto mc = multicast_latency(one_group(6), users, c, s, 0.01, 0.08);
  EXPECT_NEAR(mc.render, ind.render / 6.0, 1e-15);
  EXPECT_NEAR(mc.transmit, ind.transmit / 6.0, 1e-15);
  EXPECT_DOUBLE_EQ(mc.post_process, 0.09);
}

TEST(Multicast, WorstMemberGovernsItsGroupOnly) {
  ContentItem c;
  ServerCfg s;
  auto users = symmetric_links(4, 30.0, 1e7);
  GroupPlan plan;
  plan.groups = {{0, 1}, {2, 3}};
  auto base = multicast_latency(plan, users, c, s, 0.0, 0.0);
  users[3].gain = 3.0;
  auto worse = multicast_latency(plan, users, c, s, 0.0, 0.0);
  const double group_term = c.bits / (1e7 * rate(link_with_snr(30.0)));
  EXPECT_NEAR(worse.transmit - base.transmit, c.bits / (1e7 * 2.0) - group_term, 1e-12);
  EXPECT_EQ(worse.render, base.render);
}

TEST(Multicast, BetterMemberDoesNotChangeLatency) {
  ContentItem c;
  ServerCfg s;
  auto users = symmetric_links(3, 10.0, 1e7);
  auto base = multicast_latency(one_group(3), users, c, s, 0.0, 0.0);
  users.push_back(link_with_snr(500.0, 1e7, 3));
  auto more = multicast_latency(one_group(4), users, c, s, 0.0, 0.0);
  EXPECT_EQ(more.transmit, base.transmit);
}

TEST(Multicast, EmptyGroupRejected) {
  auto users = symmetric_links(2, 10.0, 1e7);
  GroupPlan plan;
  plan.groups = {{0, 1}, {}};
  EXPECT_THROW((void)multicast_latency(plan, users, ContentItem{}, ServerCfg{}, 0.0, 0.0), std::invalid_argument);
}

TEST(Multicast, SynthesisLatencyDefaults) {
  EXPECT_EQ(synthesis_latency_for(512), 0.080);
  EXPECT_EQ(synthesis_latency_for(1024), 0.120);
  EXPECT_THROW((void)synthesis_latency_for(300), std::invalid_argument);
}

TEST(Tile, BoundariesMatchIndividualAndMulticast) {
  Rng rng(3);
  ContentItem c;
  ServerCfg s;
  const auto users = draw_links(12, ChannelCfg{}, rng);
  auto t0 = tile_latency(users, c, 0.0, s, 0.01);
  auto ind = individual_latency(users, c, s, 0.01);
  EXPECT_NEAR(t0.render, ind.render, 1e-12);
  EXPECT_NEAR(t0.transmit, ind.transmit, 1e-12);
  EXPECT_NEAR(t0.total, ind.total, 1e-12);
  auto t1 = tile_latency(users, c, 1.0, s, 0.01);
  auto mc = multicast_latency(one_group(12), users, c, s, 0.01, 0.0);
  EXPECT_NEAR(t1.render, mc.render, 1e-12);
  EXPECT_NEAR(t1.transmit, mc.transmit, 1e-12);
  EXPECT_NEAR(t1.total, mc.total, 1e-12);
}

TEST(Tile, SymmetricClosedForm) {
  const double snr = 40.0, b = 1e7, x = 8e6, lambda = 10.0, rc = 1e10, s = 0.2;
  const std::size_t k = 20;
  const double r = std::log2(1.0 + snr);
  const double expect_render = lambda * (s * x + k * (1 - s) * x) / rc;
  const double expect_transmit = s * x / (b * r) + k * (1 - s) * x / (b * r);
  auto t = tile_latency(symmetric_links(k, snr, b), ContentItem{x, lambda}, s, ServerCfg{rc}, 0.01);
  EXPECT_NEAR(t.render, expect_render, 1e-12);
  EXPECT_NEAR(t.transmit, expect_transmit, 1e-12);
  EXPECT_NEAR(t.total, expect_render + expect_transmit + 0.01, 1e-12);
}

TEST(Tile, DecreasingInSharedFraction) {
  const auto users = symmetric_links(8, 25.0, 1e7);
  double prev = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= 20; ++i) {
    const double t = tile_latency(users, ContentItem{}, i / 20.0, ServerCfg{}, 0.01).total;
    EXPECT_LT(t, prev);
    prev = t;
  }
  EXPECT_THROW((void)tile_latency(users, ContentItem{}, 1.5, ServerCfg{}, 0.01), std::invalid_argument);
}

TEST(Grouping, IdenticalViewportsFormOneGroup) {
  std::vector<Viewport> v(7, Viewport{0.1, 0.3, 0.0});
  EXPECT_EQ(group_users(v, 0.01).groups.size(), 1u);
}

TEST(Grouping, TinyThresholdSeparatesEveryone) {
  std::vector<Viewport> v;
  for (int i = 0; i < 9; ++i) v.push_back({0.0, 0.1 * i, 0.0});
  EXPECT_EQ(group_users(v, 1e-9).groups.size(), 9u);
  EXPECT_THROW((void)group_users(v, 0.0), std::invalid_argument);
}

TEST(Grouping, AlwaysAPartition) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const auto v = draw_viewports(1 + seed % 23, 0.3, rng);
    for (double th : {0.05, 0.3, 1.0}) {
      std::vector<int> seen(v.size(), 0);
      for (const auto& g : group_users(v, th).groups) {
        EXPECT_FALSE(g.empty());
        for (std::size_t k : g) ++seen[k];
      }
      for (int s : seen) EXPECT_EQ(s, 1);
    }
    for (std::size_t g = 1; g <= v.size(); ++g) {
      std::size_t total = 0;
      for (const auto& grp : contiguous_groups(v, g).groups) total += grp.size();
      EXPECT_EQ(total, v.size());
    }
  }
}

TEST(Grouping, GaussianViewportsMostlyShareOneGroup) {
  int majority = 0;
  const int seeds = 200;
  for (int seed = 0; seed < seeds; ++seed) {
    Rng rng(static_cast<std::uint64_t>(seed));
    const auto v = draw_viewports(20, 0.05, rng);
    std::size_t largest = 0;
    for (const auto& g : group_users(v, kFovOverlapThreshold).groups) largest = std::max(largest, g.size());
    majority += largest > 10;
  }
  EXPECT_GE(majority, seeds * 95 / 100);
}

TEST(Degrade, HugeSnrLeavesImageUnchanged) {
  Rng rng(1);
  std::vector<double> img(500);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (double& v : img) v = u(rng);
  auto out = degrade_image(img, 300.0, rng);
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(out.image[i], img[i], 1e-12);
}

TEST(Degrade, EmpiricalSnrMatchesTarget) {
  Rng rng(2);
  std::vector<double> img(10000);
  std::uniform_real_distribution<double> u(0.2, 0.8);
  for (double& v : img) v = u(rng);
  for (double snr : {30.0, 20.0, 10.0, 0.0}) {
    auto out = degrade_image(img, snr, rng);
    EXPECT_NEAR(out.measured_snr_db, snr, 0.5);
    for (double v : out.image) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Degrade, ZeroImageBecomesNoiseOfConfiguredPower) {
  Rng rng(3);
  std::vector<double> img(20000, 0.0);
  auto out = degrade_image(img, 10.0, rng, 0.25);
  EXPECT_DOUBLE_EQ(out.noise_power, 0.025);
  EXPECT_NEAR(out.measured_snr_db, 10.0, 0.2);
  // Clamping keeps the positive half: E[max(n, 0)^2] = power / 2.
  double p = 0.0;
  for (double v : out.image) p += v * v;
  EXPECT_NEAR(p / static_cast<double>(img.size()), 0.0125, 0.0015);
}

TEST(Degrade, RejectsInvalidInput) {
  Rng rng(3);
  std::vector<double> img(4, 0.5);
  EXPECT_THROW((void)degrade_image(img, std::nan(""), rng), std::invalid_argument);
  img[0] = 1.5;
  EXPECT_THROW((void)degrade_image(img, 10.0, rng), std::invalid_argument);
}

TEST(Sweep, GroupCountEqualUsersIsIndividualPlusSynthesis) {
  ScenarioCfg cfg;
  cfg.trials = 20;
  const auto rows = sweep_groups(cfg, 12);
  const SweepRow* ind = nullptr;
  const SweepRow* prop = nullptr;
  for (const auto& r : rows) {
    if (r.sweep_var != 12.0) continue;
    if (r.latency.scheme == "individual") ind = &r;
    if (r.latency.scheme == "proposed") prop = &r;
  }
  ASSERT_TRUE(ind && prop);
  EXPECT_NEAR(prop->latency.total, ind->latency.total + cfg.synthesis(), 1e-12);
}

TEST(Sweep, ProposedBeatsTileFromFourUsers) {
  ScenarioCfg cfg;
  const auto rows = sweep_users(cfg, 4, 20, 2);
  std::map<double, std::map<std::string, double>> total;
  for (const auto& r : rows) total[r.sweep_var][r.latency.scheme] = r.latency.total;
  for (const auto& [k, t] : total) EXPECT_LT(t.at("proposed"), t.at("tile")) << "K=" << k;
}

TEST(Sweep, ProposedGrowsWithGroupCount) {
  ScenarioCfg cfg;
  double prev = 0.0;
  for (const auto& r : sweep_groups(cfg, 20)) {
    if (r.latency.scheme != "proposed") continue;
    EXPECT_GE(r.latency.total, prev) << "G=" << r.sweep_var;
    prev = r.latency.total;
  }
}

TEST(Sweep, CsvLayout) {
  ScenarioCfg cfg;
  cfg.trials = 2;
  std::ostringstream os;
  write_sweep_csv(os, sweep_users(cfg, 2, 3, 1));
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "sweep_var,scheme,L_r,L_t,L_p,total");
  std::size_t rows = 0;
  while (std::getline(is, line)) ++rows;
  EXPECT_EQ(rows, 6u);
}
