#include "fedsynth/experiments.hpp"

#include <algorithm>
#include <stdexcept>

#include "fedsynth/rng.hpp"

namespace fedsynth::cli {

std::uint64_t stream_seed(const RunConfig& cfg, std::string_view purpose) {
  return derive_seed(cfg.seed, {hash_string(purpose)});
}

World::World(const RunConfig& cfg)
    : generator(cfg.generator),
      discriminator(cfg.discriminator()),
      initial(generator.init_params(stream_seed(cfg, "generator"))) {}

fed::Evaluator scene_evaluator(const RunConfig& cfg, const World& world, const render::SceneOracle& scene) {
  const std::size_t views = cfg.evaluation_views;
  const std::uint64_t seed = stream_seed(cfg, "evaluation");
  const render::Generator* g = &world.generator;
  return [g, scene, views, seed](const TaggedParamSet& p) { return fed::reconstruction_proxy(*g, p, scene, views, seed); };
}

std::vector<fed::Client> source_clients(const RunConfig& cfg, const World& world) {
  return fed::make_toy_clients(cfg.roster, render::SceneOracle::source_scene(), world.generator, world.discriminator,
                               world.initial, stream_seed(cfg, "source-roster"));
}

std::vector<fed::Client> target_clients(const RunConfig& cfg, const World& world) {
  return fed::make_toy_clients(cfg.roster, render::SceneOracle::target_scene(), world.generator, world.discriminator,
                               world.initial, stream_seed(cfg, "target-roster"));
}

namespace {

fed::FederationCfg federation_for(const RunConfig& cfg, std::string_view purpose) {
  fed::FederationCfg f = cfg.federation;
  f.schedule.seed = stream_seed(cfg, purpose);
  return f;
}

fed::TransferRunCfg transfer_for(const RunConfig& cfg, std::size_t rounds, std::string_view purpose) {
  fed::TransferRunCfg t;
  t.federation = federation_for(cfg, purpose);
  t.federation.train.lr_g = cfg.transfer.lr_g;
  t.federation.schedule.local_epochs = cfg.transfer.local_epochs;
  t.federation.schedule.rounds = rounds;
  t.transfer = cfg.transfer.losses;
  return t;
}

}  // namespace

fed::TrainingResult run_federated(const RunConfig& cfg, const World& world, std::vector<fed::Client>& clients) {
  return fed::run_training(clients, world.initial, world.models(), federation_for(cfg, "federated"),
                           scene_evaluator(cfg, world, render::SceneOracle::source_scene()));
}

fed::TrainingResult run_centralized(const RunConfig& cfg, const World& world, const std::vector<fed::Client>& clients) {
  return fed::run_centralized(clients, world.initial, world.models(), federation_for(cfg, "centralized"),
                              scene_evaluator(cfg, world, render::SceneOracle::source_scene()));
}

std::string_view to_string(TransferVariant v) {
  switch (v) {
    case TransferVariant::full: return "full";
    case TransferVariant::no_geometry_loss: return "no_geometry_loss";
    case TransferVariant::no_frozen_phase: return "no_frozen_phase";
    case TransferVariant::from_scratch: return "from_scratch";
  }
  return "full";
}

TransferVariant parse_transfer_variant(std::string_view name) {
  for (auto v : {TransferVariant::full, TransferVariant::no_geometry_loss, TransferVariant::no_frozen_phase,
                 TransferVariant::from_scratch}) {
    if (to_string(v) == name) return v;
  }
  throw ConfigError("transfer.variant", "unknown variant '" + std::string(name) + "'");
}

SourceModel pretrain_source(const RunConfig& cfg, const World& world) {
  auto clients = source_clients(cfg, world);
  fed::TransferRunCfg t = transfer_for(cfg, cfg.transfer.source_rounds, "pretrain");
  t.federation.schedule.freeze_round = 1;
  t.transfer.lambda_texture = 0.0;
  t.transfer.lambda_geometry = 0.0;
  const auto evaluate = scene_evaluator(cfg, world, render::SceneOracle::source_scene());
  SourceModel out;
  out.pretraining = fed::run_transfer(clients, world.initial, world.initial, world.generator, t, evaluate);
  out.params = out.pretraining.model.clone();
  out.source_proxy = evaluate(out.params);
  return out;
}

fed::TrainingResult run_transfer_variant(const RunConfig& cfg, const World& world, const SourceModel& source,
                                         TransferVariant variant) {
  auto clients = target_clients(cfg, world);
  fed::TransferRunCfg t = transfer_for(cfg, cfg.transfer.rounds, "transfer");
  const TaggedParamSet* start = &source.params;
  switch (variant) {
    case TransferVariant::full: break;
    case TransferVariant::no_geometry_loss: t.transfer.lambda_geometry = 0.0; break;
    case TransferVariant::no_frozen_phase: t.federation.schedule.freeze_round = 1; break;
    case TransferVariant::from_scratch:
      start = &world.initial;
      t.federation.schedule.freeze_round = 1;
      t.transfer.lambda_texture = 0.0;
      t.transfer.lambda_geometry = 0.0;
      break;
  }
  return fed::run_transfer(clients, *start, source.params, world.generator, t,
                           scene_evaluator(cfg, world, render::SceneOracle::target_scene()));
}

double transfer_threshold(const SourceModel& source) { return source.source_proxy; }

std::size_t transfer_rounds_to_threshold(const RunConfig& cfg, const fed::TrainingResult& run, double threshold) {
  const std::size_t window = std::max<std::size_t>(1, cfg.transfer.threshold_window);
  std::vector<fed::RoundLog> smoothed = run.logs;
  double sum = 0.0;
  for (std::size_t i = 0; i < run.logs.size(); ++i) {
    sum += run.logs[i].proxy;
    if (i >= window) sum -= run.logs[i - window].proxy;
    smoothed[i].proxy = sum / static_cast<double>(std::min(i + 1, window));
  }
  return fed::rounds_to_threshold(smoothed, threshold);
}

}  // namespace fedsynth::cli
