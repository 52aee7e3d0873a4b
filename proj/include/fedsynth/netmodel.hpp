#pragma once

// Wireless VR delivery model: Shannon rates, block-fading channel draws, FoV
// grouping, and the latency of individual, tile-based and grouped multicast
// synthesis delivery. Also the additive-noise image channel.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "fedsynth/rng.hpp"

namespace fedsynth::net {

struct UserLink {
  std::size_t id = 0;
  double gain = 1.0;       // h_k, linear power gain
  double power = 1.0;      // P_k, W
  double bandwidth = 1e7;  // B_k, Hz
  double noise = 1.0;      // sigma^2, W
  double distance = 1.0;   // m
  double angle = 0.0;      // rad, position inside the half disc

  void validate() const;
};

/// log2(1 + P h / sigma^2) in bits/s/Hz.
double rate(const UserLink& link);

struct Viewport {
  double pitch = 0.0;
  double yaw = 0.0;
  double variance = 0.0;  // e(t)
};

struct ContentItem {
  double bits = 8e6;            // n^x
  double cycles_per_bit = 10.0;  // lambda
  void validate() const;
};

struct ServerCfg {
  double cpu_rate = 1e10;  // R_c, cycles/s
  void validate() const;
};

struct GroupPlan {
  std::vector<std::vector<std::size_t>> groups;  // indices into the user list
  double threshold = 0.0;
};

struct LatencyBreakdown {
  std::string scheme;
  double render = 0.0;        // L_r
  double transmit = 0.0;      // L_t
  double post_process = 0.0;  // L_p
  double total = 0.0;
};

struct DegradeResult {
  std::vector<double> image;  // clamped to [0, 1]
  double signal_power = 0.0;
  double noise_power = 0.0;
  /// 10 log10(signal / empirical noise), measured before clamping.
  double measured_snr_db = 0.0;
};

/// Adds white Gaussian noise of power signal / 10^(snr/10). The signal power
/// is the mean squared pixel value unless `signal_power` is given.
DegradeResult degrade_image(std::span<const double> image, double snr_db, Rng& rng,
                            std::optional<double> signal_power = std::nullopt);

/// Every user renders and receives its own frame.
LatencyBreakdown individual_latency(std::span<const UserLink> users, const ContentItem& content,
                                    const ServerCfg& server, double post_process);

/// One frame per group, multicast at the group's worst member rate and
/// bandwidth; the client adds the synthesis latency.
LatencyBreakdown multicast_latency(const GroupPlan& plan, std::span<const UserLink> users, const ContentItem& content,
                                   const ServerCfg& server, double post_process, double synthesis_latency);

/// A fraction `shared` of each frame is rendered once and multicast to all
/// users, the rest is rendered and unicast per user.
LatencyBreakdown tile_latency(std::span<const UserLink> users, const ContentItem& content, double shared,
                              const ServerCfg& server, double post_process);

/// Angle between the viewing directions of two viewports.
double angular_distance(const Viewport& a, const Viewport& b);

/// Two 90 degree fields of view overlap while their centres are within pi/2.
inline constexpr double kFovOverlapThreshold = 1.5707963267948966;

/// Greedy clustering in yaw order: a user joins the current group while its
/// angular distance to the group's first member is within `threshold`.
GroupPlan group_users(std::span<const Viewport> viewports, double threshold);

/// Users sorted by yaw and cut into `groups` contiguous runs of near-equal size.
GroupPlan contiguous_groups(std::span<const Viewport> viewports, std::size_t groups);

/// Default synthesis latency: 80 ms at 512^2, 120 ms at 1024^2.
double synthesis_latency_for(std::size_t resolution);

struct ChannelCfg {
  double power = 1.0;           // W
  double noise = 4e-14;         // W, thermal noise over 10 MHz
  double bandwidth = 1e7;       // Hz per user
  double reference_gain = 5e-5;  // path gain at 1 m
  double path_loss_exponent = 3.0;
  double min_distance = 10.0;   // m
  double max_distance = 100.0;  // m
  void validate() const;
};

/// Users placed uniformly in a half disc; gains are exponential (Rayleigh
/// power) fading times distance path loss.
std::vector<UserLink> draw_links(std::size_t users, const ChannelCfg& cfg, Rng& rng);

/// Gaussian viewports around a common centre with per-angle variance.
std::vector<Viewport> draw_viewports(std::size_t users, double variance, Rng& rng);

struct ScenarioCfg {
  ChannelCfg channel{};
  ContentItem content{};
  ServerCfg server{};
  double post_process = 0.010;  // L_p, s
  std::size_t resolution = 512;
  std::optional<double> synthesis_latency;  // overrides the resolution default
  double shared_fraction = 0.2;
  double fov_variance = 0.05;
  std::size_t trials = 200;
  std::uint64_t seed = 0;

  double synthesis() const;
  void validate() const;
};

struct SweepRow {
  double sweep_var = 0.0;
  LatencyBreakdown latency;
};

/// For K in [k_min, k_max] with `groups` groups (capped at K): the three
/// schemes, averaged over channel trials.
std::vector<SweepRow> sweep_users(const ScenarioCfg& cfg, std::size_t k_min, std::size_t k_max, std::size_t groups);
/// For G in [1, users].
std::vector<SweepRow> sweep_groups(const ScenarioCfg& cfg, std::size_t users);

/// sweep_var,scheme,L_r,L_t,L_p,total
void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows);

}  // namespace fedsynth::net
