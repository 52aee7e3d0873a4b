#pragma once

// Run configuration: one JSON object, every field optional, unknown keys
// rejected, ranges validated at load. `to_json` echoes the resolved values.

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedsynth/federation.hpp"
#include "fedsynth/netmodel.hpp"
#include "fedsynth/renderer.hpp"
#include "fedsynth/transfer.hpp"

namespace fedsynth::cli {

class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::invalid_argument(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

struct TransferRunSettings {
  transfer::TransferCfg losses{};
  double lr_g = 0.05;  // supervised image term needs a larger step than the GAN
  std::size_t local_epochs = 3;
  std::size_t source_rounds = 40;  // supervised pretraining on the source scene
  std::size_t rounds = 60;         // transfer rounds T; T_0 comes from schedule.freeze_round
  std::size_t threshold_window = 3;  // trailing mean of the proxy before thresholding
  std::string variant = "full";
};

struct SweepSettings {
  std::size_t users_min = 2;
  std::size_t users_max = 20;
  std::size_t groups = 2;
  std::size_t group_sweep_users = 20;
  double grouping_threshold = net::kFovOverlapThreshold;
};

struct RenderSettings {
  std::size_t views = 4;
  std::size_t oracle_samples = 64;
  std::vector<double> snr_db{30.0, 20.0, 10.0, 0.0};
  std::size_t snr_resolution = 64;  // oracle renders degraded by channel noise
};

/// Architecture ladder for the flops report: trunk width and base resolution
/// per size, colour hidden width equal to the trunk width.
struct FlopsSettings {
  std::vector<std::size_t> trunk_widths{16, 32, 64};
  std::vector<std::size_t> base_resolutions{4, 8, 16};
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out = "out";
  render::GeneratorConfig generator{};
  std::vector<std::size_t> discriminator_hidden{64};
  fed::FederationCfg federation{};
  fed::RosterCfg roster{};
  TransferRunSettings transfer{};
  net::ScenarioCfg network{};
  SweepSettings sweep{};
  RenderSettings render{};
  FlopsSettings flops{};
  std::size_t evaluation_views = 8;
  std::size_t smoothing_window = 15;
  std::size_t grad_check_seeds = 20;

  render::DiscriminatorConfig discriminator() const;
  /// Cross-field checks plus every module's own validation.
  void validate() const;
};

RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::string& path);
nlohmann::json to_json(const RunConfig& cfg);

}  // namespace fedsynth::cli
