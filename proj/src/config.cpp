#include "fedsynth/config.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <vector>

namespace fedsynth::cli {
namespace {

using nlohmann::json;

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Bound {
  double lo = -kInf;
  bool lo_open = false;
  double hi = kInf;
  bool hi_open = false;

  bool ok(double v) const {
    if (!std::isfinite(v)) return false;
    if (lo_open ? !(v > lo) : !(v >= lo)) return false;
    if (hi_open ? !(v < hi) : !(v <= hi)) return false;
    return true;
  }
  std::string describe() const {
    auto num = [](double x) {
      std::ostringstream os;
      os << x;
      return os.str();
    };
    if (hi == kInf) return std::string("must be ") + (lo_open ? "> " : ">= ") + num(lo);
    return "must be in " + std::string(lo_open ? "(" : "[") + num(lo) + ", " + num(hi) + (hi_open ? ")" : "]");
  }
};

Bound any() { return {}; }
Bound at_least(double lo) { return {lo, false, kInf, false}; }
Bound positive() { return {0.0, true, kInf, false}; }
Bound decay() { return {0.0, false, 1.0, true}; }          // [0, 1)
Bound fraction() { return {0.0, true, 1.0, false}; }       // (0, 1]
Bound unit_interval() { return {0.0, false, 1.0, false}; }  // [0, 1]

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

class Loader {
 public:
  explicit Loader(const json& root) {
    if (!root.is_object()) throw ConfigError("<root>", "config must be a single JSON object");
    frames_.push_back({&root, ""});
  }

  template <class Body>
  void object(const char* key, Body&& body) {
    const json* child = lookup(key);
    if (!child) return;
    const std::string path = join(top().path, key);
    if (!child->is_object()) throw ConfigError(path, "must be an object");
    frames_.push_back({child, path});
    body();
    finish();
    frames_.pop_back();
  }

  void field(const char* key, double& value, Bound bound) {
    const json* j = lookup(key);
    if (!j) return;
    if (!j->is_number()) throw ConfigError(path_of(key), "must be a number");
    const double v = j->get<double>();
    if (!bound.ok(v)) throw ConfigError(path_of(key), bound.describe());
    value = v;
  }
  void field(const char* key, std::size_t& value, Bound bound) { value = unsigned_value(key, value, bound); }
  void field(const char* key, int& value, Bound bound) {
    value = static_cast<int>(unsigned_value(key, static_cast<std::uint64_t>(value), bound));
  }
  void field(const char* key, std::uint64_t& value) { value = unsigned_value(key, value, any()); }
  void field(const char* key, bool& value) {
    const json* j = lookup(key);
    if (!j) return;
    if (!j->is_boolean()) throw ConfigError(path_of(key), "must be true or false");
    value = j->get<bool>();
  }
  void field(const char* key, std::string& value) {
    const json* j = lookup(key);
    if (!j) return;
    if (!j->is_string()) throw ConfigError(path_of(key), "must be a string");
    value = j->get<std::string>();
  }
  void field(const char* key, std::optional<double>& value, Bound bound) {
    const json* j = lookup(key);
    if (!j) return;
    if (j->is_null()) {
      value.reset();
      return;
    }
    double v = 0.0;
    field(key, v, bound);
    value = v;
  }
  void field(const char* key, std::vector<std::size_t>& value, Bound bound) {
    const json* j = lookup(key);
    if (!j) return;
    if (!j->is_array()) throw ConfigError(path_of(key), "must be an array of integers");
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < j->size(); ++i) {
      const json& e = (*j)[i];
      const std::string p = path_of(key) + "[" + std::to_string(i) + "]";
      if (!e.is_number_integer() || e.get<std::int64_t>() < 0) throw ConfigError(p, "must be a non-negative integer");
      const auto v = e.get<std::uint64_t>();
      if (!bound.ok(static_cast<double>(v))) throw ConfigError(p, bound.describe());
      out.push_back(static_cast<std::size_t>(v));
    }
    value = std::move(out);
  }
  void field(const char* key, std::vector<double>& value, Bound bound) {
    const json* j = lookup(key);
    if (!j) return;
    if (!j->is_array()) throw ConfigError(path_of(key), "must be an array of numbers");
    std::vector<double> out;
    for (std::size_t i = 0; i < j->size(); ++i) {
      const json& e = (*j)[i];
      const std::string p = path_of(key) + "[" + std::to_string(i) + "]";
      if (!e.is_number()) throw ConfigError(p, "must be a number");
      const double v = e.get<double>();
      if (!bound.ok(v)) throw ConfigError(p, bound.describe());
      out.push_back(v);
    }
    value = std::move(out);
  }
  void field(const char* key, std::vector<std::string>& value) {
    const json* j = lookup(key);
    if (!j) return;
    value = strings(*j, path_of(key));
  }
  void field(const char* key, std::set<std::string>& value) {
    const json* j = lookup(key);
    if (!j) return;
    auto v = strings(*j, path_of(key));
    value = std::set<std::string>(v.begin(), v.end());
  }

  void clients(const char* key, std::vector<fed::ClientSpec>& value) {
    const json* j = lookup(key);
    if (!j) return;
    const std::string path = path_of(key);
    if (!j->is_array()) throw ConfigError(path, "must be an array of client objects");
    std::vector<fed::ClientSpec> out;
    for (std::size_t i = 0; i < j->size(); ++i) {
      const std::string p = path + "[" + std::to_string(i) + "]";
      const json& e = (*j)[i];
      if (!e.is_object()) throw ConfigError(p, "must be an object");
      frames_.push_back({&e, p});
      fed::ClientSpec spec;
      field("id", spec.id);
      field("features", spec.features);
      field("ids", spec.ids);
      finish();
      frames_.pop_back();
      if (spec.id.empty()) throw ConfigError(p + ".id", "is required");
      if (spec.features.empty()) throw ConfigError(p + ".features", "must be a nonempty array");
      if (spec.ids.empty()) throw ConfigError(p + ".ids", "must be a nonempty array");
      out.push_back(std::move(spec));
    }
    value = std::move(out);
  }

  void finish() {
    for (const auto& item : top().node->items()) {
      if (!top().seen.count(item.key())) throw ConfigError(join(top().path, item.key()), "unknown key");
    }
  }

 private:
  struct Frame {
    const json* node;
    std::string path;
    std::set<std::string> seen{};
  };
  Frame& top() { return frames_.back(); }
  std::string path_of(const char* key) { return join(top().path, key); }

  const json* lookup(const char* key) {
    top().seen.insert(key);
    auto it = top().node->find(key);
    return it == top().node->end() ? nullptr : &*it;
  }

  std::uint64_t unsigned_value(const char* key, std::uint64_t current, Bound bound) {
    const json* j = lookup(key);
    if (!j) return current;
    if (!j->is_number_integer() || (j->is_number_integer() && !j->is_number_unsigned() && j->get<std::int64_t>() < 0)) {
      throw ConfigError(path_of(key), "must be a non-negative integer");
    }
    const auto v = j->get<std::uint64_t>();
    if (!bound.ok(static_cast<double>(v))) throw ConfigError(path_of(key), bound.describe());
    return v;
  }

  static std::vector<std::string> strings(const json& j, const std::string& path) {
    if (!j.is_array()) throw ConfigError(path, "must be an array of strings");
    std::vector<std::string> out;
    for (std::size_t i = 0; i < j.size(); ++i) {
      if (!j[i].is_string()) throw ConfigError(path + "[" + std::to_string(i) + "]", "must be a string");
      out.push_back(j[i].get<std::string>());
    }
    return out;
  }

  std::vector<Frame> frames_;
};

class Dumper {
 public:
  json result = json::object();

  Dumper() { stack_.push_back(&result); }

  template <class Body>
  void object(const char* key, Body&& body) {
    json child = json::object();
    stack_.push_back(&child);
    body();
    stack_.pop_back();
    (*stack_.back())[key] = std::move(child);
  }

  template <class T>
  void field(const char* key, const T& value, Bound = {}) {
    (*stack_.back())[key] = value;
  }
  void field(const char* key, const std::optional<double>& value, Bound) {
    (*stack_.back())[key] = value ? json(*value) : json(nullptr);
  }
  void clients(const char* key, const std::vector<fed::ClientSpec>& value) {
    json arr = json::array();
    for (const auto& c : value) arr.push_back({{"id", c.id}, {"features", c.features}, {"ids", c.ids}});
    (*stack_.back())[key] = std::move(arr);
  }

 private:
  std::vector<json*> stack_;
};

template <class V>
void visit(V& v, RunConfig& c) {
  v.field("seed", c.seed);
  v.field("out", c.out);
  v.object("generator", [&] {
    auto& g = c.generator;
    v.field("z_dim", g.z_dim, at_least(1));
    v.field("w_dim", g.w_dim, at_least(1));
    v.field("encoding_levels", g.encoding.levels, at_least(1));
    v.field("trunk_layers", g.trunk_layers, at_least(1));
    v.field("trunk_width", g.trunk_width, at_least(1));
    v.field("color_hidden", g.color_hidden, at_least(1));
    v.field("feature_channels", g.feature_channels, at_least(3));
    v.field("base_resolution", g.base_resolution, at_least(2));
    v.field("upsample_stages", g.upsample_stages, at_least(1));
    v.field("samples_per_ray", g.samples_per_ray, at_least(2));
    v.field("stratified", g.stratified);
    v.field("leaky_slope", g.leaky_slope, decay());
    v.object("camera", [&] {
      v.field("tan_half_fov", g.camera.tan_half_fov, positive());
      v.field("near", g.camera.near, positive());
      v.field("far", g.camera.far, positive());
      v.field("radius", g.camera.radius, positive());
    });
  });
  v.object("discriminator", [&] { v.field("hidden", c.discriminator_hidden, at_least(1)); });
  v.object("train", [&] {
    auto& t = c.federation.train;
    v.field("lr_g", t.lr_g, at_least(0));
    v.field("lr_d", t.lr_d, at_least(0));
    v.field("batch", t.batch, at_least(1));
    v.field("threads", t.threads, at_least(1));
    v.field("r1_weight", t.gan.r1_weight, at_least(0));
    v.field("consistency_weight", t.gan.reg_weight, at_least(0));
    v.field("vertical_pixels", t.vertical.pixel_subsample, at_least(1));
    v.field("hyper_decay", t.vertical.hyper_decay, decay());
    v.field("vertical_period", t.vertical.period, at_least(1));
  });
  v.object("schedule", [&] {
    auto& s = c.federation.schedule;
    v.field("rounds", s.rounds, at_least(1));
    v.field("freeze_round", s.freeze_round, at_least(0));
    v.field("local_epochs", s.local_epochs, at_least(1));
    v.field("fraction", s.fraction, fraction());
  });
  v.object("ema", [&] { v.field("decay", c.federation.ema_decay, decay()); });
  v.object("roster", [&] {
    auto& r = c.roster;
    v.clients("clients", r.clients);
    v.field("horizontal", r.horizontal, at_least(0));
    v.field("vertical", r.vertical, at_least(0));
    v.field("images_per_client", r.images_per_client, at_least(1));
    v.field("render_samples", r.render_samples, at_least(2));
    v.field("feature_threshold", r.thresholds.feature, fraction());
    v.field("id_threshold", r.thresholds.id, fraction());
    v.object("horizontal_poses", [&] {
      v.field("pitch_sd", r.horizontal_poses.pitch_sd, at_least(0));
      v.field("yaw_sd", r.horizontal_poses.yaw_sd, at_least(0));
    });
    v.object("vertical_poses", [&] {
      v.field("pitch_sd", r.vertical_poses.pitch_sd, at_least(0));
      v.field("yaw_sd", r.vertical_poses.yaw_sd, at_least(0));
    });
  });
  v.object("transfer", [&] {
    auto& t = c.transfer;
    v.field("lambda_texture", t.losses.lambda_texture, at_least(0));
    v.field("lambda_geometry", t.losses.lambda_geometry, at_least(0));
    v.field("lambda_image", t.losses.lambda_image, at_least(0));
    v.field("latent_batch", t.losses.latent_batch, at_least(1));
    v.field("projections", t.losses.projections, at_least(1));
    v.field("texture_layers", t.losses.texture_layers);
    v.field("geometry_layers", t.losses.geometry_layers);
    v.field("lr_g", t.lr_g, at_least(0));
    v.field("local_epochs", t.local_epochs, at_least(1));
    v.field("source_rounds", t.source_rounds, at_least(1));
    v.field("rounds", t.rounds, at_least(1));
    v.field("threshold_window", t.threshold_window, at_least(1));
    v.field("variant", t.variant);
  });
  v.object("network", [&] {
    auto& n = c.network;
    v.field("power", n.channel.power, positive());
    v.field("noise", n.channel.noise, positive());
    v.field("bandwidth", n.channel.bandwidth, positive());
    v.field("reference_gain", n.channel.reference_gain, positive());
    v.field("path_loss_exponent", n.channel.path_loss_exponent, at_least(0));
    v.field("min_distance", n.channel.min_distance, positive());
    v.field("max_distance", n.channel.max_distance, positive());
    v.field("bits", n.content.bits, positive());
    v.field("cycles_per_bit", n.content.cycles_per_bit, positive());
    v.field("cpu_rate", n.server.cpu_rate, positive());
    v.field("post_process", n.post_process, at_least(0));
    v.field("resolution", n.resolution, at_least(1));
    v.field("synthesis_latency", n.synthesis_latency, at_least(0));
    v.field("shared_fraction", n.shared_fraction, unit_interval());
    v.field("fov_variance", n.fov_variance, at_least(0));
    v.field("trials", n.trials, at_least(1));
  });
  v.object("sweep", [&] {
    auto& s = c.sweep;
    v.field("users_min", s.users_min, at_least(1));
    v.field("users_max", s.users_max, at_least(1));
    v.field("groups", s.groups, at_least(1));
    v.field("group_sweep_users", s.group_sweep_users, at_least(1));
    v.field("grouping_threshold", s.grouping_threshold, positive());
  });
  v.object("render", [&] {
    v.field("views", c.render.views, at_least(1));
    v.field("oracle_samples", c.render.oracle_samples, at_least(2));
    v.field("snr_db", c.render.snr_db, any());
    v.field("snr_resolution", c.render.snr_resolution, at_least(1));
  });
  v.object("evaluation", [&] {
    v.field("views", c.evaluation_views, at_least(1));
    v.field("smoothing_window", c.smoothing_window, at_least(1));
  });
  v.object("flops", [&] {
    v.field("trunk_widths", c.flops.trunk_widths, at_least(1));
    v.field("base_resolutions", c.flops.base_resolutions, at_least(2));
  });
  v.object("grad_check", [&] { v.field("seeds", c.grad_check_seeds, at_least(1)); });
}

}  // namespace

render::DiscriminatorConfig RunConfig::discriminator() const {
  return {generator.output_resolution(), discriminator_hidden, generator.leaky_slope};
}

void RunConfig::validate() const {
  if (!(generator.camera.far > generator.camera.near)) throw ConfigError("generator.camera.far", "must be > near");
  if (generator.camera.radius <= generator.camera.near) {
    throw ConfigError("generator.camera.radius", "must be > near so the origin lies inside the ray interval");
  }
  if (network.channel.max_distance < network.channel.min_distance) {
    throw ConfigError("network.max_distance", "must be >= network.min_distance");
  }
  if (!network.synthesis_latency && network.resolution != 512 && network.resolution != 1024) {
    throw ConfigError("network.resolution", "must be 512 or 1024 unless network.synthesis_latency is given");
  }
  if (sweep.users_max < sweep.users_min) throw ConfigError("sweep.users_max", "must be >= sweep.users_min");
  if (discriminator_hidden.empty()) throw ConfigError("discriminator.hidden", "must list at least one layer");
  if (flops.trunk_widths.empty() || flops.trunk_widths.size() != flops.base_resolutions.size()) {
    throw ConfigError("flops.base_resolutions", "must be nonempty and as long as flops.trunk_widths");
  }
  if (render.snr_db.empty()) throw ConfigError("render.snr_db", "must list at least one level");
  if (transfer.variant != "full" && transfer.variant != "no_geometry_loss" && transfer.variant != "no_frozen_phase" &&
      transfer.variant != "from_scratch") {
    throw ConfigError("transfer.variant", "must be one of full, no_geometry_loss, no_frozen_phase, from_scratch");
  }
  if (federation.schedule.freeze_round > transfer.rounds + 1) {
    throw ConfigError("schedule.freeze_round", "must be <= transfer.rounds + 1");
  }
  if (roster.clients.empty() && roster.horizontal + roster.vertical == 0) {
    throw ConfigError("roster", "needs at least one client");
  }
  federation.validate();
  transfer.losses.validate();
  network.validate();
}

RunConfig config_from_json(const json& j) {
  RunConfig cfg;
  Loader loader(j);
  visit(loader, cfg);
  loader.finish();
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("--config", "cannot open '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("--config", std::string("invalid JSON: ") + e.what());
  }
  return config_from_json(j);
}

json to_json(const RunConfig& cfg) {
  RunConfig copy = cfg;
  Dumper dumper;
  visit(dumper, copy);
  return dumper.result;
}

}  // namespace fedsynth::cli
