#include "fedsynth/netmodel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <stdexcept>

namespace fedsynth::net {

namespace {

constexpr double kPi = 3.14159265358979323846;

LatencyBreakdown make(std::string scheme, double r, double t, double p) {
  return {std::move(scheme), r, t, p, r + t + p};
}

std::string fmt9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::vector<std::size_t> yaw_order(std::span<const Viewport> viewports) {
  std::vector<std::size_t> order(viewports.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return viewports[a].yaw < viewports[b].yaw; });
  return order;
}

void accumulate(LatencyBreakdown& acc, const LatencyBreakdown& x) {
  acc.render += x.render;
  acc.transmit += x.transmit;
  acc.post_process += x.post_process;
}

LatencyBreakdown averaged(LatencyBreakdown acc, std::size_t n) {
  const double k = static_cast<double>(n);
  return make(acc.scheme, acc.render / k, acc.transmit / k, acc.post_process / k);
}

}  // namespace

void UserLink::validate() const {
  if (!(gain > 0.0) || !(power > 0.0) || !(bandwidth > 0.0) || !(noise > 0.0)) {
    throw std::invalid_argument("user " + std::to_string(id) + ": gain, power, bandwidth and noise must be > 0");
  }
}

double rate(const UserLink& link) { return std::log2(1.0 + link.power * link.gain / link.noise); }

void ContentItem::validate() const {
  if (!(bits > 0.0) || !(cycles_per_bit > 0.0)) {
    throw std::invalid_argument("content bits and cycles_per_bit must be > 0");
  }
}

void ServerCfg::validate() const {
  if (!(cpu_rate > 0.0)) throw std::invalid_argument("server cpu_rate must be > 0");
}

DegradeResult degrade_image(std::span<const double> image, double snr_db, Rng& rng,
                            std::optional<double> signal_power) {
  if (!std::isfinite(snr_db)) throw std::invalid_argument("snr_db must be finite");
  if (image.empty()) throw std::invalid_argument("cannot degrade an empty image");
  DegradeResult out;
  if (signal_power) {
    if (!(*signal_power >= 0.0)) throw std::invalid_argument("signal power must be >= 0");
    out.signal_power = *signal_power;
  } else {
    for (double v : image) {
      if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("image values must lie in [0, 1]");
      out.signal_power += v * v;
    }
    out.signal_power /= static_cast<double>(image.size());
  }
  out.noise_power = out.signal_power / std::pow(10.0, snr_db / 10.0);
  std::normal_distribution<double> normal(0.0, std::sqrt(out.noise_power));
  out.image.resize(image.size());
  double measured = 0.0;
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double n = normal(rng);
    measured += n * n;
    out.image[i] = std::clamp(image[i] + n, 0.0, 1.0);
  }
  measured /= static_cast<double>(image.size());
  out.measured_snr_db = measured > 0.0 ? 10.0 * std::log10(out.signal_power / measured)
                                       : std::numeric_limits<double>::infinity();
  return out;
}

LatencyBreakdown individual_latency(std::span<const UserLink> users, const ContentItem& content,
                                    const ServerCfg& server, double post_process) {
  if (users.empty()) throw std::invalid_argument("individual latency needs at least one user");
  content.validate();
  server.validate();
  double r = 0.0, t = 0.0;
  for (const auto& u : users) {
    u.validate();
    r += content.cycles_per_bit * content.bits / server.cpu_rate;
    t += content.bits / (u.bandwidth * rate(u));
  }
  return make("individual", r, t, post_process);
}

LatencyBreakdown multicast_latency(const GroupPlan& plan, std::span<const UserLink> users, const ContentItem& content,
                                   const ServerCfg& server, double post_process, double synthesis_latency) {
  content.validate();
  server.validate();
  if (plan.groups.empty()) throw std::invalid_argument("multicast latency needs at least one group");
  double r = 0.0, t = 0.0;
  for (std::size_t g = 0; g < plan.groups.size(); ++g) {
    const auto& members = plan.groups[g];
    if (members.empty()) throw std::invalid_argument("group " + std::to_string(g) + " is empty");
    double worst_rate = std::numeric_limits<double>::infinity();
    double bandwidth = std::numeric_limits<double>::infinity();
    for (std::size_t k : members) {
      if (k >= users.size()) throw std::out_of_range("group member index out of range");
      users[k].validate();
      worst_rate = std::min(worst_rate, rate(users[k]));
      bandwidth = std::min(bandwidth, users[k].bandwidth);
    }
    r += content.cycles_per_bit * content.bits / server.cpu_rate;
    t += content.bits / (bandwidth * worst_rate);
  }
  return make("proposed", r, t, post_process + synthesis_latency);
}

LatencyBreakdown tile_latency(std::span<const UserLink> users, const ContentItem& content, double shared,
                              const ServerCfg& server, double post_process) {
  if (users.empty()) throw std::invalid_argument("tile latency needs at least one user");
  if (!(shared >= 0.0 && shared <= 1.0)) throw std::invalid_argument("shared tile fraction must be in [0, 1]");
  content.validate();
  server.validate();
  const double x = content.bits, lambda = content.cycles_per_bit;
  double worst_rate = std::numeric_limits<double>::infinity();
  double bandwidth = std::numeric_limits<double>::infinity();
  double unique = 0.0;
  for (const auto& u : users) {
    u.validate();
    worst_rate = std::min(worst_rate, rate(u));
    bandwidth = std::min(bandwidth, u.bandwidth);
    unique += (1.0 - shared) * x / (u.bandwidth * rate(u));
  }
  const double k = static_cast<double>(users.size());
  const double r = lambda * (shared * x + k * (1.0 - shared) * x) / server.cpu_rate;
  const double t = shared * x / (bandwidth * worst_rate) + unique;
  return make("tile", r, t, post_process);
}

double angular_distance(const Viewport& a, const Viewport& b) {
  auto dir = [](const Viewport& v) {
    return std::array<double, 3>{std::cos(v.pitch) * std::sin(v.yaw), std::sin(v.pitch),
                                 std::cos(v.pitch) * std::cos(v.yaw)};
  };
  const auto x = dir(a), y = dir(b);
  const double c = std::clamp(x[0] * y[0] + x[1] * y[1] + x[2] * y[2], -1.0, 1.0);
  return std::acos(c);
}

GroupPlan group_users(std::span<const Viewport> viewports, double threshold) {
  if (!(threshold > 0.0)) throw std::invalid_argument("grouping threshold must be > 0");
  GroupPlan plan;
  plan.threshold = threshold;
  std::size_t seed = 0;
  for (std::size_t k : yaw_order(viewports)) {
    if (plan.groups.empty() || angular_distance(viewports[seed], viewports[k]) > threshold) {
      plan.groups.push_back({});
      seed = k;
    }
    plan.groups.back().push_back(k);
  }
  return plan;
}

GroupPlan contiguous_groups(std::span<const Viewport> viewports, std::size_t groups) {
  const std::size_t k = viewports.size();
  if (groups < 1 || groups > k) throw std::invalid_argument("group count must be in [1, users]");
  const auto order = yaw_order(viewports);
  GroupPlan plan;
  std::size_t start = 0;
  for (std::size_t g = 0; g < groups; ++g) {
    const std::size_t size = k / groups + (g < k % groups ? 1 : 0);
    plan.groups.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(start + size));
    start += size;
  }
  return plan;
}

double synthesis_latency_for(std::size_t resolution) {
  if (resolution == 512) return 0.080;
  if (resolution == 1024) return 0.120;
  throw std::invalid_argument("no default synthesis latency for resolution " + std::to_string(resolution));
}

void ChannelCfg::validate() const {
  if (!(power > 0.0) || !(noise > 0.0) || !(bandwidth > 0.0) || !(reference_gain > 0.0)) {
    throw std::invalid_argument("channel power, noise, bandwidth and reference_gain must be > 0");
  }
  if (!(path_loss_exponent >= 0.0)) throw std::invalid_argument("channel path_loss_exponent must be >= 0");
  if (!(min_distance > 0.0 && max_distance >= min_distance)) {
    throw std::invalid_argument("channel distances must satisfy 0 < min_distance <= max_distance");
  }
}

std::vector<UserLink> draw_links(std::size_t users, const ChannelCfg& cfg, Rng& rng) {
  cfg.validate();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::exponential_distribution<double> fading(1.0);
  std::vector<UserLink> links;
  const double r0 = cfg.min_distance * cfg.min_distance, r1 = cfg.max_distance * cfg.max_distance;
  for (std::size_t k = 0; k < users; ++k) {
    UserLink u;
    u.id = k;
    u.distance = std::sqrt(r0 + (r1 - r0) * unit(rng));  // uniform over the annulus area
    u.angle = kPi * unit(rng);
    double h = 0.0;
    while (!(h > 0.0)) h = fading(rng);
    u.gain = cfg.reference_gain * std::pow(u.distance, -cfg.path_loss_exponent) * h;
    u.power = cfg.power;
    u.bandwidth = cfg.bandwidth;
    u.noise = cfg.noise;
    links.push_back(u);
  }
  return links;
}

std::vector<Viewport> draw_viewports(std::size_t users, double variance, Rng& rng) {
  if (!(variance >= 0.0)) throw std::invalid_argument("viewport variance must be >= 0");
  std::normal_distribution<double> normal(0.0, std::sqrt(variance));
  std::vector<Viewport> out;
  for (std::size_t k = 0; k < users; ++k) {
    const double pitch = normal(rng), yaw = normal(rng);
    out.push_back({pitch, yaw, variance});
  }
  return out;
}

double ScenarioCfg::synthesis() const { return synthesis_latency ? *synthesis_latency : synthesis_latency_for(resolution); }

void ScenarioCfg::validate() const {
  channel.validate();
  content.validate();
  server.validate();
  if (!(post_process >= 0.0)) throw std::invalid_argument("network.post_process must be >= 0");
  if (synthesis_latency && !(*synthesis_latency >= 0.0)) {
    throw std::invalid_argument("network.synthesis_latency must be >= 0");
  }
  if (!synthesis_latency) (void)synthesis_latency_for(resolution);
  if (!(shared_fraction >= 0.0 && shared_fraction <= 1.0)) {
    throw std::invalid_argument("network.shared_fraction must be in [0, 1]");
  }
  if (!(fov_variance >= 0.0)) throw std::invalid_argument("network.fov_variance must be >= 0");
  if (trials < 1) throw std::invalid_argument("network.trials must be >= 1");
}

namespace {

// Per trial: one draw of links and viewports shared by every scheme.
std::vector<SweepRow> evaluate_point(const ScenarioCfg& cfg, std::size_t users, std::size_t groups, double var,
                                     std::uint64_t point) {
  LatencyBreakdown ind{"individual"}, tile{"tile"}, prop{"proposed"};
  for (std::size_t t = 0; t < cfg.trials; ++t) {
    Rng rng = make_rng(cfg.seed, {point, t});
    const auto links = draw_links(users, cfg.channel, rng);
    const auto views = draw_viewports(users, cfg.fov_variance, rng);
    accumulate(ind, individual_latency(links, cfg.content, cfg.server, cfg.post_process));
    accumulate(tile, tile_latency(links, cfg.content, cfg.shared_fraction, cfg.server, cfg.post_process));
    accumulate(prop, multicast_latency(contiguous_groups(views, std::min(groups, users)), links, cfg.content,
                                       cfg.server, cfg.post_process, cfg.synthesis()));
  }
  return {{var, averaged(ind, cfg.trials)}, {var, averaged(tile, cfg.trials)}, {var, averaged(prop, cfg.trials)}};
}

}  // namespace

std::vector<SweepRow> sweep_users(const ScenarioCfg& cfg, std::size_t k_min, std::size_t k_max, std::size_t groups) {
  cfg.validate();
  if (k_min < 1 || k_max < k_min) throw std::invalid_argument("user sweep range must satisfy 1 <= k_min <= k_max");
  if (groups < 1) throw std::invalid_argument("group count must be >= 1");
  std::vector<SweepRow> rows;
  for (std::size_t k = k_min; k <= k_max; ++k) {
    // Channel draws depend on K only, so every scheme sees the same users.
    auto point = evaluate_point(cfg, k, groups, static_cast<double>(k), hash_string("users") ^ k);
    rows.insert(rows.end(), point.begin(), point.end());
  }
  return rows;
}

std::vector<SweepRow> sweep_groups(const ScenarioCfg& cfg, std::size_t users) {
  cfg.validate();
  if (users < 1) throw std::invalid_argument("group sweep needs at least one user");
  std::vector<SweepRow> rows;
  for (std::size_t g = 1; g <= users; ++g) {
    // Same draws for every G so the curve reflects grouping alone.
    auto point = evaluate_point(cfg, users, g, static_cast<double>(g), hash_string("groups") ^ users);
    rows.insert(rows.end(), point.begin(), point.end());
  }
  return rows;
}

void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
  out << "sweep_var,scheme,L_r,L_t,L_p,total\n";
  for (const auto& r : rows) {
    out << fmt9(r.sweep_var) << ',' << r.latency.scheme << ',' << fmt9(r.latency.render) << ','
        << fmt9(r.latency.transmit) << ',' << fmt9(r.latency.post_process) << ',' << fmt9(r.latency.total) << '\n';
  }
}

}  // namespace fedsynth::net
