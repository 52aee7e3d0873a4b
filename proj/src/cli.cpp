#include "fedsynth/cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fedsynth/config.hpp"
#include "fedsynth/experiments.hpp"
#include "fedsynth/gradcheck.hpp"
#include "fedsynth/netmodel.hpp"
#include "fedsynth/rng.hpp"

namespace fedsynth::cli {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

struct Options {
  std::string config;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> rounds;
  bool baseline = false;
  std::string variant;
};

class Output {
 public:
  explicit Output(const std::string& dir) : dir_(dir) { fs::create_directories(dir_); }

  void write(const std::string& name, const std::string& content) const {
    std::ofstream f(dir_ / name, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write '" + (dir_ / name).string() + "'");
    f << content;
    if (!f) throw std::runtime_error("write failed for '" + (dir_ / name).string() + "'");
  }

  void summary(const std::string& command, const RunConfig& cfg, json metrics) const {
    json j;
    j["command"] = command;
    j["config"] = to_json(cfg);
    j["metrics"] = std::move(metrics);
    write("summary.json", j.dump(2) + "\n");
  }

 private:
  fs::path dir_;
};

std::ostringstream csv() {
  std::ostringstream os;
  os << std::setprecision(12);
  return os;
}

RunConfig resolve(const Options& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : load_config(o.config);
  if (o.out) cfg.out = *o.out;
  if (o.seed) cfg.seed = *o.seed;
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------

int train_federated(const Options& o, std::ostream& out) {
  RunConfig cfg = resolve(o);
  if (o.rounds) cfg.federation.schedule.rounds = *o.rounds;
  cfg.validate();
  Output dir(cfg.out);
  World world(cfg);
  auto clients = source_clients(cfg, world);
  const auto fed_run = run_federated(cfg, world, clients);
  const auto smoothed = fed::smoothed_generator_loss(fed_run.logs, cfg.smoothing_window);

  std::ostringstream rounds;
  fed::write_round_csv(rounds, fed_run.logs, false);
  dir.write("rounds.csv", rounds.str());
  std::ostringstream timing;
  fed::write_timing_csv(timing, fed_run.logs);
  dir.write("timing.csv", timing.str());

  json metrics;
  std::optional<fed::TrainingResult> central;
  std::vector<double> central_smoothed;
  if (o.baseline) {
    central = run_centralized(cfg, world, clients);
    central_smoothed = fed::smoothed_generator_loss(central->logs, cfg.smoothing_window);
  }

  auto g = csv();
  g << "round,loss_g,loss_g_smoothed,proxy";
  if (central) g << ",central_loss_g,central_loss_g_smoothed,central_proxy";
  g << "\n";
  for (std::size_t i = 0; i < fed_run.logs.size(); ++i) {
    const auto& l = fed_run.logs[i];
    g << l.round << ',' << l.aggregate.loss_g << ',' << smoothed[i] << ',' << l.proxy;
    if (central) {
      const auto& c = central->logs[i];
      g << ',' << c.aggregate.loss_g << ',' << central_smoothed[i] << ',' << c.proxy;
    }
    g << "\n";
  }
  dir.write("generator_loss.csv", g.str());

  std::size_t bytes = 0;
  for (const auto& l : fed_run.logs) {
    for (const auto& c : l.clients) bytes += c.bytes_up;
  }
  metrics["rounds"] = fed_run.logs.size();
  metrics["clients"] = clients.size();
  metrics["bytes_uploaded"] = bytes;
  metrics["final_proxy"] = fed_run.logs.back().proxy;
  metrics["final_smoothed_loss_g"] = smoothed.back();
  if (central) {
    metrics["centralized_final_smoothed_loss_g"] = central_smoothed.back();
    metrics["centralized_final_proxy"] = central->logs.back().proxy;
    metrics["smoothed_loss_g_ratio"] = smoothed.back() / central_smoothed.back();
  }
  dir.summary("train-federated", cfg, metrics);
  out << "train-federated: " << fed_run.logs.size() << " rounds, smoothed loss_g " << smoothed.back() << ", proxy "
      << fed_run.logs.back().proxy << "\n";
  return 0;
}

int transfer_study(const Options& o, std::ostream& out) {
  RunConfig cfg = resolve(o);
  if (o.rounds) cfg.transfer.rounds = *o.rounds;
  if (!o.variant.empty() && o.variant != "all") cfg.transfer.variant = o.variant;
  cfg.validate();
  std::vector<TransferVariant> variants;
  if (o.variant == "all") {
    variants = {TransferVariant::full, TransferVariant::no_geometry_loss, TransferVariant::no_frozen_phase,
                TransferVariant::from_scratch};
  } else {
    variants = {parse_transfer_variant(cfg.transfer.variant)};
  }
  Output dir(cfg.out);
  World world(cfg);
  const SourceModel source = pretrain_source(cfg, world);
  const double threshold = transfer_threshold(source);

  auto t = csv();
  t << "phase,round,proxy\n";
  for (const auto& l : source.pretraining.logs) t << "source_pretraining," << l.round << ',' << l.proxy << "\n";
  json reached = json::object();
  json final_proxy = json::object();
  for (auto v : variants) {
    const auto run = run_transfer_variant(cfg, world, source, v);
    const std::string name(to_string(v));
    for (const auto& l : run.logs) t << name << ',' << l.round << ',' << l.proxy << "\n";
    reached[name] = transfer_rounds_to_threshold(cfg, run, threshold);
    final_proxy[name] = run.logs.back().proxy;
    out << "transfer " << name << ": rounds to threshold " << reached[name].get<std::size_t>() << " of "
        << cfg.transfer.rounds << "\n";
  }
  dir.write("transfer.csv", t.str());
  json metrics;
  metrics["threshold"] = threshold;
  metrics["source_proxy"] = source.source_proxy;
  metrics["rounds_to_threshold"] = reached;
  metrics["final_proxy"] = final_proxy;
  dir.summary("transfer", cfg, metrics);
  return 0;
}

int latency_sweep(const Options& o, std::ostream& out) {
  RunConfig cfg = resolve(o);
  Output dir(cfg.out);
  net::ScenarioCfg scenario = cfg.network;
  scenario.seed = stream_seed(cfg, "network");
  const auto users = net::sweep_users(scenario, cfg.sweep.users_min, cfg.sweep.users_max, cfg.sweep.groups);
  const auto groups = net::sweep_groups(scenario, cfg.sweep.group_sweep_users);
  std::ostringstream u, g;
  net::write_sweep_csv(u, users);
  net::write_sweep_csv(g, groups);
  dir.write("latency_users.csv", u.str());
  dir.write("latency_groups.csv", g.str());

  json totals = json::object();
  const double k_last = users.back().sweep_var;
  for (const auto& r : users) {
    if (r.sweep_var == k_last) totals[r.latency.scheme] = r.latency.total;
  }
  json metrics;
  metrics["users"] = static_cast<std::size_t>(k_last);
  metrics["groups"] = cfg.sweep.groups;
  metrics["totals_at_max_users"] = totals;
  metrics["synthesis_latency"] = scenario.synthesis();
  dir.summary("latency-sweep", cfg, metrics);
  out << "latency-sweep: K=" << k_last;
  for (const auto& [scheme, total] : totals.items()) out << ' ' << scheme << '=' << total.get<double>() << "s";
  out << "\n";
  return 0;
}

int render_views(const Options& o, std::ostream& out) {
  RunConfig cfg = resolve(o);
  Output dir(cfg.out);
  World world(cfg);
  const auto& gc = world.generator.config();
  const std::size_t res = gc.output_resolution();
  const auto scene = render::SceneOracle::source_scene();

  Rng pose_rng = make_rng(stream_seed(cfg, "render-poses"));
  std::vector<render::CameraPose> poses;
  fed::PosePrior prior;
  for (std::size_t i = 0; i < cfg.render.views; ++i) poses.push_back(prior.sample(pose_rng));

  Rng latent_rng = make_rng(stream_seed(cfg, "render-latents"));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> z(cfg.render.views * gc.z_dim);
  for (double& v : z) v = normal(latent_rng);
  render::GeneratorOutput generated;
  {
    ad::NoGradGuard no_grad;
    generated = world.generator.forward(ad::Tensor::from_data({cfg.render.views, gc.z_dim}, std::move(z)), poses,
                                        world.initial);
  }
  const auto gen = generated.image.data();
  const std::size_t frame = res * res * 3;

  Rng noise_rng = make_rng(stream_seed(cfg, "render-noise"));
  auto s = csv();
  s << "view,snr_db,measured_snr_db,mse\n";
  std::vector<double> mse_sum(cfg.render.snr_db.size(), 0.0);
  double worst_snr_error = 0.0;
  for (std::size_t v = 0; v < poses.size(); ++v) {
    const auto pose = render::orbit_pose(poses[v].pitch, poses[v].yaw, gc.camera.radius);
    const auto view = scene.render(pose, res, res, gc.camera, cfg.render.oracle_samples);
    dir.write("oracle_" + std::to_string(v) + ".ppm", render::encode_ppm(view, res, res));
    dir.write("generator_" + std::to_string(v) + ".ppm",
              render::encode_ppm(gen.subspan(v * frame, frame), res, res));
    const std::size_t sres = cfg.render.snr_resolution;
    const auto clean = scene.render(pose, sres, sres, gc.camera, cfg.render.oracle_samples);
    for (std::size_t k = 0; k < cfg.render.snr_db.size(); ++k) {
      const double snr = cfg.render.snr_db[k];
      const auto noisy = net::degrade_image(clean, snr, noise_rng);
      double mse = 0.0;
      for (std::size_t i = 0; i < clean.size(); ++i) mse += (noisy.image[i] - clean[i]) * (noisy.image[i] - clean[i]);
      mse /= static_cast<double>(clean.size());
      mse_sum[k] += mse;
      worst_snr_error = std::max(worst_snr_error, std::abs(noisy.measured_snr_db - snr));
      s << v << ',' << snr << ',' << noisy.measured_snr_db << ',' << mse << "\n";
      if (v == 0) {
        std::ostringstream name;
        name << "oracle_0_snr" << snr << ".ppm";
        dir.write(name.str(), render::encode_ppm(noisy.image, sres, sres));
      }
    }
  }
  dir.write("snr.csv", s.str());

  json per_level = json::array();
  for (std::size_t k = 0; k < mse_sum.size(); ++k) {
    per_level.push_back({{"snr_db", cfg.render.snr_db[k]}, {"mean_mse", mse_sum[k] / poses.size()}});
  }
  json metrics;
  metrics["views"] = poses.size();
  metrics["resolution"] = res;
  metrics["snr"] = per_level;
  metrics["max_snr_error_db"] = worst_snr_error;
  dir.summary("render", cfg, metrics);
  out << "render: " << poses.size() << " views at " << res << "x" << res << ", max SNR error " << worst_snr_error
      << " dB\n";
  return 0;
}

int grad_check(const Options& o, std::ostream& out) {
  RunConfig cfg = resolve(o);
  Output dir(cfg.out);
  const auto suite = ad::run_grad_check_suite(cfg.grad_check_seeds, stream_seed(cfg, "grad-check"));
  auto c = csv();
  c << "case,checked,max_rel_error,passed\n";
  for (const auto& k : suite.cases) c << k.name << ',' << k.checked << ',' << k.max_rel_error << ',' << k.passed << "\n";
  dir.write("grad_check.csv", c.str());
  json metrics;
  metrics["cases"] = suite.cases.size();
  metrics["seeds"] = suite.seeds;
  metrics["tolerance"] = suite.tolerance;
  metrics["max_rel_error"] = suite.max_rel_error;
  metrics["passed"] = suite.passed;
  dir.summary("grad-check", cfg, metrics);
  out << "grad-check: " << suite.cases.size() << " cases x " << suite.seeds << " seeds, max relative error "
      << suite.max_rel_error << (suite.passed ? ", passed" : ", FAILED") << "\n";
  return suite.passed ? 0 : 1;
}

int flops_report(const Options& o, std::ostream& out) {
  RunConfig cfg = resolve(o);
  Output dir(cfg.out);
  auto c = csv();
  c << "trunk_width,base_resolution,blocks,channels,height,latent,flops_generator,flops_discriminator,"
       "multiplies,multiplies_per_flop\n";
  json sizes = json::array();
  double lo = 0.0, hi = 0.0;
  for (std::size_t i = 0; i < cfg.flops.trunk_widths.size(); ++i) {
    render::GeneratorConfig gc = cfg.generator;
    gc.trunk_width = cfg.flops.trunk_widths[i];
    gc.color_hidden = gc.trunk_width;
    gc.base_resolution = cfg.flops.base_resolutions[i];
    render::Generator g(gc);
    const auto params = g.init_params(stream_seed(cfg, "flops"));
    const auto arch = g.arch(cfg.discriminator_hidden.size());
    const auto est = render::flops_estimate(arch);
    const std::vector<render::CameraPose> pose{render::CameraPose{}};
    std::uint64_t mults = 0;
    {
      ad::NoGradGuard no_grad;
      ad::reset_multiply_count();
      g.forward(ad::Tensor::zeros({1, gc.z_dim}), pose, params);
      mults = ad::multiply_count();
    }
    const double ratio = static_cast<double>(mults) / est.generator;
    lo = i == 0 ? ratio : std::min(lo, ratio);
    hi = i == 0 ? ratio : std::max(hi, ratio);
    c << gc.trunk_width << ',' << gc.base_resolution << ',' << arch.blocks << ',' << arch.channels << ','
      << arch.height << ',' << arch.latent << ',' << est.generator << ',' << est.discriminator << ',' << mults
      << ',' << ratio << "\n";
    sizes.push_back({{"trunk_width", gc.trunk_width},
                     {"flops_generator", est.generator},
                     {"multiplies", mults},
                     {"multiplies_per_flop", ratio}});
  }
  dir.write("flops.csv", c.str());
  json metrics;
  metrics["sizes"] = sizes;
  metrics["ratio_spread"] = hi / lo;
  dir.summary("flops", cfg, metrics);
  out << "flops: multiplies per estimated flop spread " << hi / lo << " across " << sizes.size() << " sizes\n";
  return 0;
}

void report(std::ostream& err, const std::string& kind, const std::string& message,
            const std::string& field = std::string()) {
  json j;
  j["error"] = kind;
  j["message"] = message;
  if (!field.empty()) j["field"] = field;
  err << j.dump() << "\n";
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Federated 3D-aware synthesis experiments", "fedsynth"};
  app.require_subcommand(1);
  Options o;
  int (*action)(const Options&, std::ostream&) = nullptr;

  auto add = [&](const std::string& name, const std::string& help, int (*fn)(const Options&, std::ostream&)) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "JSON config file");
    sub->add_option("--out", o.out, "output directory (overrides config 'out')");
    sub->add_option("--seed", o.seed, "global seed (overrides config 'seed')");
    sub->callback([&action, fn] { action = fn; });
    return sub;
  };
  auto* train = add("train-federated", "federated GAN training on the toy source scene", train_federated);
  train->add_option("--rounds", o.rounds, "rounds T (overrides schedule.rounds)");
  train->add_flag("--baseline", o.baseline, "also train the centralized baseline");
  auto* tr = add("transfer", "source pretraining, then transfer to the shifted scene", transfer_study);
  tr->add_option("--rounds", o.rounds, "transfer rounds (overrides transfer.rounds)");
  tr->add_option("--variant", o.variant, "full, no_geometry_loss, no_frozen_phase, from_scratch or all");
  add("latency-sweep", "delivery latency of the three schemes over users and groups", latency_sweep);
  add("render", "oracle and generator views, and oracle views under channel noise", render_views);
  add("grad-check", "finite-difference gradient checks of every op and loss", grad_check);
  add("flops", "flops estimate against instrumented multiply counts", flops_report);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    report(err, "usage", e.what());
    return 2;
  }

  try {
    return action(o, out);
  } catch (const ConfigError& e) {
    report(err, "config", e.what(), e.field());
    return 2;
  } catch (const std::invalid_argument& e) {
    report(err, "config", e.what());
    return 2;
  } catch (const std::exception& e) {
    report(err, "runtime", e.what());
    return 1;
  }
}

}  // namespace fedsynth::cli
