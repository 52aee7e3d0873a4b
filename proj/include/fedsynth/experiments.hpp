#pragma once

// Experiment drivers shared by the command line and the acceptance suite:
// model construction from a RunConfig, federated and centralized runs on the
// toy source scene, and the transfer study with its ablations.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "fedsynth/config.hpp"
#include "fedsynth/federation.hpp"

namespace fedsynth::cli {

/// Stream seed for one purpose ("generator", "roster", ...) of a run.
std::uint64_t stream_seed(const RunConfig& cfg, std::string_view purpose);

struct World {
  render::Generator generator;
  render::Discriminator discriminator;
  TaggedParamSet initial;

  explicit World(const RunConfig& cfg);
  fed::Models models() const { return {&generator, &discriminator}; }
};

/// Reconstruction proxy of a model against `scene` at the configured
/// evaluation views.
fed::Evaluator scene_evaluator(const RunConfig& cfg, const World& world, const render::SceneOracle& scene);

std::vector<fed::Client> source_clients(const RunConfig& cfg, const World& world);
std::vector<fed::Client> target_clients(const RunConfig& cfg, const World& world);

fed::TrainingResult run_federated(const RunConfig& cfg, const World& world, std::vector<fed::Client>& clients);
fed::TrainingResult run_centralized(const RunConfig& cfg, const World& world, const std::vector<fed::Client>& clients);

// ---------------------------------------------------------------------------
// Transfer study

enum class TransferVariant { full, no_geometry_loss, no_frozen_phase, from_scratch };

std::string_view to_string(TransferVariant v);
TransferVariant parse_transfer_variant(std::string_view name);

struct SourceModel {
  TaggedParamSet params;
  fed::TrainingResult pretraining;
  double source_proxy = 0.0;  // on the source scene
};

/// Supervised federated pretraining on the source scene: the image term of
/// the transfer objective only, every shared tag trainable from round 1.
SourceModel pretrain_source(const RunConfig& cfg, const World& world);

/// Transfer rounds on the target scene.
///   full: start from the source, all three loss terms, freeze before T_0.
///   no_geometry_loss: lambda_geometry = 0.
///   no_frozen_phase: T_0 = 1.
///   from_scratch: start from the initialization with the image term only.
fed::TrainingResult run_transfer_variant(const RunConfig& cfg, const World& world, const SourceModel& source,
                                         TransferVariant variant);

/// Proxy level that counts as adapted on the target scene: the source
/// model's own proxy on the source scene.
double transfer_threshold(const SourceModel& source);

/// First round whose trailing-mean proxy (transfer.threshold_window rounds)
/// is <= threshold, or rounds + 1.
std::size_t transfer_rounds_to_threshold(const RunConfig& cfg, const fed::TrainingResult& run, double threshold);

}  // namespace fedsynth::cli
