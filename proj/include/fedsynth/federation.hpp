#pragma once

// Federated training: client classification and selection, local GAN and
// transfer training, layer-tagged partial uploads, size-weighted aggregation,
// EMA smoothing of the global model, and per-round logs.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedsynth/losses.hpp"
#include "fedsynth/params.hpp"
#include "fedsynth/renderer.hpp"
#include "fedsynth/transfer.hpp"

namespace fedsynth::fed {

using ad::Tensor;

// ---------------------------------------------------------------------------
// Datasets and classification

struct DatasetDescriptor {
  std::set<std::string> features;  // H_k
  std::set<std::string> ids;       // V_k
  std::size_t size = 1;            // |S_k|
};

double jaccard(const std::set<std::string>& a, const std::set<std::string>& b);

struct ClassifyThresholds {
  double feature = 0.5;  // tau_f
  double id = 0.5;       // tau_v
};

class UnclassifiableError : public std::invalid_argument {
 public:
  UnclassifiableError(double feature_score, double id_score);
  double feature_score() const noexcept { return feature_score_; }
  double id_score() const noexcept { return id_score_; }

 private:
  double feature_score_;
  double id_score_;
};

ClientKind classify_dataset(const DatasetDescriptor& dataset, const std::set<std::string>& reference_features,
                            const std::set<std::string>& reference_ids, const ClassifyThresholds& thresholds = {});

// ---------------------------------------------------------------------------
// Upload policy and aggregation

struct UploadPolicy {
  TagSet horizontal{LayerTag::geometry, LayerTag::render, LayerTag::color};
  TagSet vertical{LayerTag::mapping, LayerTag::viewpoint};

  const TagSet& tags_for(ClientKind kind) const { return kind == ClientKind::horizontal ? horizontal : vertical; }
  /// Tags some cohort uploads; everything else stays at its initial value.
  TagSet shared_tags() const;
  /// Cohort that owns `tag`; nullopt for tags nobody uploads.
  std::optional<ClientKind> owner(LayerTag tag) const;
  /// Rejects overlapping cohorts.
  void validate() const;
};

/// The cohort's tagged subset of `params`, restricted to `allowed`. Throws
/// when a cohort tag is missing from `params`.
TaggedParamSet partial_upload(const TaggedParamSet& params, ClientKind kind, const UploadPolicy& policy,
                              const TagSet& allowed = all_tags());

struct Upload {
  std::string client_id;
  ClientKind kind = ClientKind::horizontal;
  std::size_t size = 1;
  TaggedParamSet params;
};

class UncoveredTagError : public std::runtime_error {
 public:
  UncoveredTagError(LayerTag tag, std::size_t round);
  LayerTag tag() const noexcept { return tag_; }
  std::size_t round() const noexcept { return round_; }

 private:
  LayerTag tag_;
  std::size_t round_;
};

/// Per tag in `tags`, the |S|-weighted mean over the owning cohort's uploads,
/// consumed in ascending client-id order.
TaggedParamSet aggregate_weighted(std::vector<Upload> uploads, const UploadPolicy& policy, const TagSet& tags);

struct EmaState {
  double decay = 0.95;  // gamma
  TaggedParamSet params;
};

/// theta_ema <- gamma theta_ema + (1 - gamma) theta for every tensor in
/// `aggregated`; elements that did not change are left untouched.
void apply_ema(EmaState& state, const TaggedParamSet& aggregated);

// ---------------------------------------------------------------------------
// Clients

struct PosePrior {
  double pitch_sd = 0.15;
  double yaw_sd = 0.3;
  render::CameraPose sample(Rng& rng) const;
};

struct Client {
  std::string id;
  DatasetDescriptor dataset;
  ClientKind kind = ClientKind::horizontal;
  std::vector<render::CameraPose> poses;
  Tensor images;  // (N, H, W, 3) local real images at `poses`
  render::DiscriminatorParams discriminator;
  std::optional<TaggedParamSet> hyper;  // vertical clients only
};

/// Uniform sample without replacement of ceil(fraction * K) indices,
/// ascending, determined by (seed, round).
std::vector<std::size_t> select_clients(std::size_t client_count, double fraction, std::size_t round,
                                        std::uint64_t seed);

struct TrainCfg {
  double lr_g = 1e-3;
  double lr_d = 2e-3;
  std::size_t batch = 4;
  loss::GanLossCfg gan{};
  loss::VerticalLossCfg vertical{};
  /// Worker threads for the clients of one round; results do not depend on it.
  std::size_t threads = 1;
  void validate() const;
};

struct RoundSchedule {
  std::size_t rounds = 10;        // T
  std::size_t freeze_round = 0;   // T_0, transfer only; 0 means T / 2
  std::size_t local_epochs = 1;   // e
  double fraction = 1.0;
  std::uint64_t seed = 0;
  void validate() const;
  std::size_t resolved_freeze_round() const { return freeze_round == 0 ? std::max<std::size_t>(1, rounds / 2) : freeze_round; }
};

struct LocalMetrics {
  double loss_d = 0.0;
  double loss_g = 0.0;
  double loss_aux = 0.0;
  std::size_t steps = 0;
};

struct Models {
  const render::Generator* generator = nullptr;
  const render::Discriminator* discriminator = nullptr;
};

/// e epochs of alternating discriminator and generator steps over the
/// client's images in minibatches. Only tensors tagged in `trainable` move.
/// Updates the client's discriminator and hyper-network in place.
LocalMetrics local_train(Client& client, TaggedParamSet& params, const Models& models, std::size_t epochs,
                         const TrainCfg& cfg, const TagSet& trainable, Rng& rng);

/// Local transfer objective L_tr against the client's target-domain images.
LocalMetrics local_transfer(Client& client, TaggedParamSet& params, const TaggedParamSet& source,
                            const render::Generator& generator, std::size_t epochs, const TrainCfg& cfg,
                            const transfer::TransferCfg& tcfg, const TagSet& trainable, Rng& rng,
                            transfer::ProjectionBank& bank);

// ---------------------------------------------------------------------------
// Rounds

struct ClientRecord {
  std::string client_id;
  ClientKind kind = ClientKind::horizontal;
  LocalMetrics metrics;
  std::size_t bytes_up = 0;
  std::vector<std::string> uploaded;  // tensor names
};

struct RoundLog {
  std::size_t round = 0;
  std::vector<ClientRecord> clients;
  LocalMetrics aggregate;  // mean over clients
  double proxy = 0.0;      // evaluation metric of the global model, if any
  double wall_ms = 0.0;
};

struct FederationCfg {
  TrainCfg train{};
  RoundSchedule schedule{};
  UploadPolicy policy{};
  double ema_decay = 0.95;
  void validate() const;
};

/// Scores the global model after each round (lower is better).
using Evaluator = std::function<double(const TaggedParamSet&)>;

struct TrainingResult {
  TaggedParamSet model;
  std::vector<RoundLog> logs;
};

/// Algorithm 1 loop. `initial` must be a complete generator parameter set.
TrainingResult run_training(std::vector<Client>& clients, const TaggedParamSet& initial, const Models& models,
                            const FederationCfg& cfg, const Evaluator& evaluate = {});

/// Single model and discriminator trained on the pooled client data for the
/// same number of gradient steps a federated run with `cfg` would take. One
/// log entry per federated-round equivalent.
TrainingResult run_centralized(const std::vector<Client>& clients, const TaggedParamSet& initial,
                               const Models& models, const FederationCfg& cfg, const Evaluator& evaluate = {});

struct TransferRunCfg {
  FederationCfg federation{};
  transfer::TransferCfg transfer{};
};

/// Algorithm 2 loop: geometry and viewpoint stay frozen before T_0, then all
/// shared tags train. `source` is the frozen reference model.
TrainingResult run_transfer(std::vector<Client>& clients, const TaggedParamSet& initial,
                            const TaggedParamSet& source, const render::Generator& generator,
                            const TransferRunCfg& cfg, const Evaluator& evaluate = {});

/// First round whose proxy is <= threshold, or rounds + 1.
std::size_t rounds_to_threshold(const std::vector<RoundLog>& logs, double threshold);

/// Trailing mean of the aggregate generator loss over `window` rounds.
std::vector<double> smoothed_generator_loss(const std::vector<RoundLog>& logs, std::size_t window);

/// round,client_id,kind,loss_d,loss_g,loss_aux,bytes_up,wall_ms. With
/// `with_timing` false the wall_ms column holds "-".
void write_round_csv(std::ostream& out, const std::vector<RoundLog>& logs, bool with_timing);
/// round,wall_ms
void write_timing_csv(std::ostream& out, const std::vector<RoundLog>& logs);

// ---------------------------------------------------------------------------
// Toy rosters

/// A client declared by its dataset keys; the kind comes from classification.
struct ClientSpec {
  std::string id;
  std::set<std::string> features;
  std::set<std::string> ids;
};

struct RosterCfg {
  /// When empty, `horizontal` and `vertical` generated clients are used.
  std::vector<ClientSpec> clients;
  std::size_t horizontal = 5;
  std::size_t vertical = 3;
  std::size_t images_per_client = 8;
  std::size_t render_samples = 48;
  PosePrior horizontal_poses{};
  PosePrior vertical_poses{0.15, 0.6};
  ClassifyThresholds thresholds{};
};

/// Feature and id keys of the global dataset the descriptors are scored
/// against.
std::set<std::string> reference_features();
std::set<std::string> reference_ids();

/// Clients holding oracle renders of `scene` at poses from their cohort's
/// prior; kinds come from classify_dataset on their descriptors. Generated
/// horizontal clients are "h0", "h1", ... and vertical ones "v0", "v1", ...
std::vector<Client> make_toy_clients(const RosterCfg& roster, const render::SceneOracle& scene,
                                     const render::Generator& generator, const render::Discriminator& discriminator,
                                     const TaggedParamSet& initial, std::uint64_t seed);

/// Mean squared error of the model's renders against oracle renders at fixed
/// evaluation poses and latents derived from `seed`.
double reconstruction_proxy(const render::Generator& generator, const TaggedParamSet& params,
                            const render::SceneOracle& scene, std::size_t views, std::uint64_t seed);

/// Mean squared difference between two oracle scenes over the same
/// evaluation poses reconstruction_proxy uses.
double scene_gap(const render::SceneOracle& a, const render::SceneOracle& b, const render::GeneratorConfig& cfg,
                 std::size_t views, std::uint64_t seed);

}  // namespace fedsynth::fed
