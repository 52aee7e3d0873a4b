#include "fedsynth/federation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <future>
#include <map>
#include <numeric>
#include <random>

namespace fedsynth::fed {

namespace {

std::string format_score(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string fmt9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

Tensor normal_latents(Rng& rng, std::size_t rows, std::size_t cols) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(rows * cols);
  for (double& x : v) x = normal(rng);
  return Tensor::from_data({rows, cols}, std::move(v));
}

// Rows `idx` of a (N, ...) tensor, as a constant.
Tensor gather_rows(const Tensor& t, std::span<const std::size_t> idx) {
  const auto& s = t.shape();
  const std::size_t per = t.numel() / s[0];
  std::vector<double> out;
  out.reserve(idx.size() * per);
  auto d = t.data();
  for (std::size_t i : idx) out.insert(out.end(), d.begin() + static_cast<std::ptrdiff_t>(i * per),
                                       d.begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
  ad::Shape shape = s;
  shape[0] = idx.size();
  return Tensor::from_data(shape, std::move(out));
}

// dst <- decay dst + (1 - decay) src, elementwise over matching names.
void blend_into(TaggedParamSet& dst, const TaggedParamSet& src, double decay) {
  TaggedParamSet mixed;
  for (const auto& e : dst.entries()) {
    auto a = e.value.data();
    auto b = src.at(e.name).data();
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] == b[i] ? a[i] : decay * a[i] + (1.0 - decay) * b[i];
    mixed.add(e.name, e.tag, Tensor::from_data(e.value.shape(), std::move(v)));
  }
  dst.assign_from(mixed);
}

void accumulate(LocalMetrics& m, double d, double g, double aux) {
  m.loss_d += d;
  m.loss_g += g;
  m.loss_aux += aux;
  ++m.steps;
}

void finish(LocalMetrics& m) {
  if (m.steps == 0) return;
  const double n = static_cast<double>(m.steps);
  m.loss_d /= n;
  m.loss_g /= n;
  m.loss_aux /= n;
}

// One discriminator step then one generator step on a real minibatch.
void gan_step(Client& client, TaggedParamSet& params, const Models& models, const TrainCfg& cfg,
              std::span<const std::size_t> batch, Rng& rng, std::size_t step, LocalMetrics& metrics) {
  const render::Generator& g = *models.generator;
  const render::Discriminator& d = *models.discriminator;
  Tensor real = gather_rows(client.images, batch);
  std::vector<render::CameraPose> poses;
  for (std::size_t i : batch) poses.push_back(client.poses[i]);
  Tensor z = normal_latents(rng, batch.size(), g.config().z_dim);

  auto out = g.forward(z, poses, params);

  client.discriminator.set_trainable(true);
  client.discriminator.zero_grad();
  auto dl = loss::discriminator_loss(real, out.image, d, client.discriminator, cfg.gan.r1_weight);
  dl.total.backward();
  client.discriminator.sgd_step(cfg.lr_d);
  client.discriminator.set_trainable(false);

  Tensor gl = client.kind == ClientKind::horizontal
                  ? loss::horizontal_generator_objective(client.kind, out.image, d, client.discriminator)
                  : loss::generator_loss(out.image, d, client.discriminator);
  Tensor aux = loss::consistency_reg(out.low_res_rgb, out.image);
  if (client.kind == ClientKind::vertical && client.hyper && step % cfg.vertical.period == 0) {
    Tensor w = out.w.detach();
    Tensor hyper_render;
    {
      ad::NoGradGuard no_grad;
      auto h = g.forward_from_latent(w, poses, *client.hyper);
      hyper_render = ad::bilinear_upsample_2x(h.half_rgb);
    }
    const std::size_t pixels = out.image.shape()[1] * out.image.shape()[2];
    auto subset = loss::sample_pixel_subset(pixels, std::min(cfg.vertical.pixel_subsample, pixels), rng);
    aux = aux + loss::vertical_generator_loss(out.image, hyper_render, subset, out.w, w);
  }
  Tensor total = loss::total_gan_loss(gl, aux, cfg.gan.reg_weight);
  params.zero_grad();
  total.backward();
  params.sgd_step(cfg.lr_g);
  if (client.hyper) blend_into(*client.hyper, params, cfg.vertical.hyper_decay);

  accumulate(metrics, dl.total.item(), gl.item(), aux.item());
}

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

std::size_t steps_per_epoch(const Client& c, std::size_t batch) {
  const std::size_t n = c.images.shape()[0];
  return (n + batch - 1) / batch;
}

template <typename Fn>
void for_each_parallel(std::size_t count, std::size_t threads, Fn&& fn) {
  if (threads <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::future<void>> running;
  std::size_t next = 0;
  while (next < count || !running.empty()) {
    while (next < count && running.size() < threads) {
      const std::size_t i = next++;
      running.push_back(std::async(std::launch::async, [&fn, i] { fn(i); }));
    }
    running.front().get();
    running.erase(running.begin());
  }
}

LocalMetrics mean_metrics(const std::vector<ClientRecord>& records) {
  LocalMetrics m;
  for (const auto& r : records) {
    m.loss_d += r.metrics.loss_d;
    m.loss_g += r.metrics.loss_g;
    m.loss_aux += r.metrics.loss_aux;
    m.steps += r.metrics.steps;
  }
  if (!records.empty()) {
    const double n = static_cast<double>(records.size());
    m.loss_d /= n;
    m.loss_g /= n;
    m.loss_aux /= n;
  }
  return m;
}

std::vector<render::CameraPose> evaluation_poses(std::size_t views, std::uint64_t seed) {
  Rng rng = make_rng(seed, {hash_string("evaluation-poses")});
  PosePrior prior;
  std::vector<render::CameraPose> poses;
  for (std::size_t i = 0; i < views; ++i) poses.push_back(prior.sample(rng));
  return poses;
}

std::vector<double> oracle_images(const render::SceneOracle& scene, const render::GeneratorConfig& cfg,
                                  std::span<const render::CameraPose> poses, std::size_t samples) {
  const std::size_t res = cfg.output_resolution();
  std::vector<double> out;
  for (const auto& p : poses) {
    auto img = scene.render(render::orbit_pose(p.pitch, p.yaw, cfg.camera.radius), res, res, cfg.camera, samples);
    out.insert(out.end(), img.begin(), img.end());
  }
  return out;
}

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

}  // namespace

// ---------------------------------------------------------------------------

double jaccard(const std::set<std::string>& a, const std::set<std::string>& b) {
  if (a.empty() && b.empty()) return 1.0;
  std::size_t common = 0;
  for (const auto& x : a) common += b.count(x);
  return static_cast<double>(common) / static_cast<double>(a.size() + b.size() - common);
}

UnclassifiableError::UnclassifiableError(double feature_score, double id_score)
    : std::invalid_argument("unclassifiable dataset: feature Jaccard " + format_score(feature_score) +
                            ", sample-id Jaccard " + format_score(id_score)),
      feature_score_(feature_score),
      id_score_(id_score) {}

ClientKind classify_dataset(const DatasetDescriptor& dataset, const std::set<std::string>& reference_features,
                            const std::set<std::string>& reference_ids, const ClassifyThresholds& thresholds) {
  if (dataset.features.empty() || dataset.ids.empty() || reference_features.empty() || reference_ids.empty()) {
    throw std::invalid_argument("classification needs nonempty feature and id key sets");
  }
  const double jf = jaccard(dataset.features, reference_features);
  const double jv = jaccard(dataset.ids, reference_ids);
  const bool same_features = jf >= thresholds.feature;
  const bool same_ids = jv >= thresholds.id;
  if (same_features && !same_ids) return ClientKind::horizontal;
  if (same_ids && !same_features) return ClientKind::vertical;
  throw UnclassifiableError(jf, jv);
}

TagSet UploadPolicy::shared_tags() const {
  TagSet out = horizontal;
  out.insert(vertical.begin(), vertical.end());
  return out;
}

std::optional<ClientKind> UploadPolicy::owner(LayerTag tag) const {
  if (horizontal.count(tag)) return ClientKind::horizontal;
  if (vertical.count(tag)) return ClientKind::vertical;
  return std::nullopt;
}

void UploadPolicy::validate() const {
  for (LayerTag t : horizontal) {
    if (vertical.count(t)) {
      throw std::invalid_argument("upload policy assigns tag '" + std::string(to_string(t)) + "' to both cohorts");
    }
  }
}

TaggedParamSet partial_upload(const TaggedParamSet& params, ClientKind kind, const UploadPolicy& policy,
                              const TagSet& allowed) {
  TagSet tags;
  for (LayerTag t : policy.tags_for(kind)) {
    if (!params.has_tag(t)) {
      throw std::invalid_argument("cannot upload tag '" + std::string(to_string(t)) + "': no such tensors");
    }
    if (allowed.count(t)) tags.insert(t);
  }
  if (tags.empty()) return {};
  return params.subset(tags);
}

UncoveredTagError::UncoveredTagError(LayerTag tag, std::size_t round)
    : std::runtime_error("uncovered tag '" + std::string(to_string(tag)) + "': no upload from the " +
                         "cohort that owns it" + (round > 0 ? " in round " + std::to_string(round) : std::string())),
      tag_(tag),
      round_(round) {}

TaggedParamSet aggregate_weighted(std::vector<Upload> uploads, const UploadPolicy& policy, const TagSet& tags) {
  std::stable_sort(uploads.begin(), uploads.end(),
                   [](const Upload& a, const Upload& b) { return a.client_id < b.client_id; });
  TaggedParamSet out;
  for (LayerTag tag : tags) {
    const auto owner = policy.owner(tag);
    std::vector<const Upload*> cohort;
    if (owner) {
      for (const auto& u : uploads) {
        if (u.kind == *owner && u.params.has_tag(tag)) cohort.push_back(&u);
      }
    }
    if (cohort.empty()) throw UncoveredTagError(tag, 0);
    double total_size = 0.0;
    for (const Upload* u : cohort) {
      if (u->size < 1) throw std::invalid_argument("client '" + u->client_id + "' reports an empty dataset");
      total_size += static_cast<double>(u->size);
    }
    for (const auto& e : cohort.front()->params.entries()) {
      if (e.tag != tag) continue;
      std::vector<double> acc(e.value.numel(), 0.0);
      for (const Upload* u : cohort) {
        const Tensor& t = u->params.at(e.name);
        if (t.shape() != e.value.shape()) {
          throw ad::ShapeError("upload from '" + u->client_id + "' has a mismatched '" + e.name + "'");
        }
        const double w = static_cast<double>(u->size);
        auto d = t.data();
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * d[i];
      }
      for (double& v : acc) v /= total_size;
      out.add(e.name, tag, Tensor::from_data(e.value.shape(), std::move(acc)));
    }
  }
  return out;
}

void apply_ema(EmaState& state, const TaggedParamSet& aggregated) {
  if (!(state.decay >= 0.0 && state.decay < 1.0)) throw std::invalid_argument("ema.decay must be in [0, 1)");
  TaggedParamSet current;
  for (const auto& e : aggregated.entries()) current.add(e.name, e.tag, state.params.at(e.name));
  blend_into(current, aggregated, state.decay);
  state.params.assign_from(current);
}

// ---------------------------------------------------------------------------

render::CameraPose PosePrior::sample(Rng& rng) const {
  std::normal_distribution<double> pitch(0.0, pitch_sd), yaw(0.0, yaw_sd);
  const double half_pi = std::acos(0.0);
  render::CameraPose p;
  p.pitch = std::clamp(pitch(rng), -0.9 * half_pi, 0.9 * half_pi);
  p.yaw = std::clamp(yaw(rng), -0.9 * 2.0 * half_pi, 0.9 * 2.0 * half_pi);
  return p;
}

std::vector<std::size_t> select_clients(std::size_t client_count, double fraction, std::size_t round,
                                        std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("schedule.fraction must be in (0, 1]");
  const auto want = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(client_count) - 1e-12));
  std::vector<std::size_t> all(client_count);
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (want >= client_count) return all;
  Rng rng = make_rng(seed, {hash_string("select"), round});
  for (std::size_t i = 0; i < want; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, client_count - 1);
    std::swap(all[i], all[pick(rng)]);
  }
  all.resize(want);
  std::sort(all.begin(), all.end());
  return all;
}

void TrainCfg::validate() const {
  if (!(lr_g >= 0.0)) throw std::invalid_argument("train.lr_g must be >= 0");
  if (!(lr_d >= 0.0)) throw std::invalid_argument("train.lr_d must be >= 0");
  if (batch < 1) throw std::invalid_argument("train.batch must be >= 1");
  gan.validate();
  vertical.validate();
}

void RoundSchedule::validate() const {
  if (rounds < 1) throw std::invalid_argument("schedule.rounds must be >= 1");
  if (local_epochs < 1) throw std::invalid_argument("schedule.local_epochs must be >= 1");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("schedule.fraction must be in (0, 1]");
}

void FederationCfg::validate() const {
  train.validate();
  schedule.validate();
  policy.validate();
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw std::invalid_argument("ema.decay must be in [0, 1)");
}

LocalMetrics local_train(Client& client, TaggedParamSet& params, const Models& models, std::size_t epochs,
                         const TrainCfg& cfg, const TagSet& trainable, Rng& rng) {
  LocalMetrics metrics;
  if (epochs == 0) return metrics;
  if (!client.images.defined() || client.images.shape()[0] == 0) {
    throw std::invalid_argument("client '" + client.id + "' has no local images");
  }
  params.set_trainable(trainable);
  const std::size_t n = client.images.shape()[0];
  std::size_t step = 0;
  for (std::size_t e = 0; e < epochs; ++e) {
    const auto order = shuffled(n, rng);
    for (std::size_t start = 0; start < n; start += cfg.batch) {
      const std::size_t len = std::min(cfg.batch, n - start);
      gan_step(client, params, models, cfg, std::span<const std::size_t>(order).subspan(start, len), rng, step++,
               metrics);
    }
  }
  params.set_trainable({});
  finish(metrics);
  return metrics;
}

LocalMetrics local_transfer(Client& client, TaggedParamSet& params, const TaggedParamSet& source,
                            const render::Generator& generator, std::size_t epochs, const TrainCfg& cfg,
                            const transfer::TransferCfg& tcfg, const TagSet& trainable, Rng& rng,
                            transfer::ProjectionBank& bank) {
  LocalMetrics metrics;
  if (epochs == 0) return metrics;
  params.set_trainable(trainable);
  const std::size_t n = client.images.shape()[0];
  for (std::size_t e = 0; e < epochs; ++e) {
    const auto order = shuffled(n, rng);
    for (std::size_t start = 0; start < n; start += cfg.batch) {
      const std::size_t len = std::min(cfg.batch, n - start);
      std::span<const std::size_t> batch(order.data() + start, len);
      Tensor real = gather_rows(client.images, batch);
      std::vector<render::CameraPose> poses;
      for (std::size_t i : batch) poses.push_back(client.poses[i]);
      Tensor z = normal_latents(rng, len, generator.config().z_dim);
      auto terms = transfer::transfer_terms(generator, params, source, z, poses, real, tcfg, bank);
      params.zero_grad();
      terms.total.backward();
      params.sgd_step(cfg.lr_g);
      accumulate(metrics, 0.0, terms.total.item(), terms.image.total.item());
    }
  }
  params.set_trainable({});
  finish(metrics);
  return metrics;
}

// ---------------------------------------------------------------------------

namespace {

struct ClientOutcome {
  LocalMetrics metrics;
  TaggedParamSet upload;
};

// Trains one client starting from the multicast model and returns its upload.
using LocalFn = std::function<ClientOutcome(Client&, const TaggedParamSet& global, std::size_t round,
                                            const TagSet& trainable)>;

TrainingResult federated_loop(std::vector<Client>& clients, const TaggedParamSet& initial, const FederationCfg& cfg,
                              const std::function<TagSet(std::size_t)>& trainable_for, const LocalFn& local,
                              const Evaluator& evaluate) {
  cfg.validate();
  if (clients.empty()) throw std::invalid_argument("federated training needs at least one client");
  TrainingResult result;
  EmaState ema{cfg.ema_decay, initial.clone()};
  TaggedParamSet global = initial.clone();
  for (std::size_t round = 1; round <= cfg.schedule.rounds; ++round) {
    const auto start = Clock::now();
    const TagSet trainable = trainable_for(round);
    const auto selected = select_clients(clients.size(), cfg.schedule.fraction, round, cfg.schedule.seed);
    std::vector<ClientOutcome> outcomes(selected.size());
    for_each_parallel(selected.size(), cfg.train.threads, [&](std::size_t i) {
      outcomes[i] = local(clients[selected[i]], global, round, trainable);
    });

    RoundLog log;
    log.round = round;
    std::vector<Upload> uploads;
    for (std::size_t i = 0; i < selected.size(); ++i) {
      const Client& c = clients[selected[i]];
      ClientRecord rec;
      rec.client_id = c.id;
      rec.kind = c.kind;
      rec.metrics = outcomes[i].metrics;
      rec.bytes_up = outcomes[i].upload.element_count() * 8;
      for (const auto& e : outcomes[i].upload.entries()) rec.uploaded.push_back(e.name);
      log.clients.push_back(std::move(rec));
      uploads.push_back({c.id, c.kind, c.dataset.size, std::move(outcomes[i].upload)});
    }
    std::sort(log.clients.begin(), log.clients.end(),
              [](const ClientRecord& a, const ClientRecord& b) { return a.client_id < b.client_id; });

    TaggedParamSet aggregated;
    try {
      aggregated = aggregate_weighted(std::move(uploads), cfg.policy, trainable);
    } catch (const UncoveredTagError& e) {
      throw UncoveredTagError(e.tag(), round);
    }
    apply_ema(ema, aggregated);
    global = ema.params.clone();

    log.aggregate = mean_metrics(log.clients);
    if (evaluate) log.proxy = evaluate(global);
    log.wall_ms = elapsed_ms(start);
    result.logs.push_back(std::move(log));
  }
  result.model = std::move(global);
  return result;
}

Rng client_rng(std::uint64_t seed, std::size_t round, const std::string& id) {
  return Rng(derive_seed(seed, {round, hash_string(id)}));
}

TagSet intersect(const TagSet& a, const TagSet& b) {
  TagSet out;
  for (LayerTag t : a) {
    if (b.count(t)) out.insert(t);
  }
  return out;
}

}  // namespace

TrainingResult run_training(std::vector<Client>& clients, const TaggedParamSet& initial, const Models& models,
                            const FederationCfg& cfg, const Evaluator& evaluate) {
  if (!models.generator || !models.discriminator) throw std::invalid_argument("models are not set");
  models.generator->validate(initial);
  for (const auto& c : clients) {
    if ((c.kind == ClientKind::vertical) != c.hyper.has_value()) {
      throw std::invalid_argument("client '" + c.id + "': hyper-network must exist iff the client is vertical");
    }
  }
  const TagSet shared = cfg.policy.shared_tags();
  auto local = [&](Client& c, const TaggedParamSet& global, std::size_t round, const TagSet& trainable) {
    TaggedParamSet params = global.clone();
    Rng rng = client_rng(cfg.schedule.seed, round, c.id);
    ClientOutcome out;
    out.metrics = local_train(c, params, models, cfg.schedule.local_epochs, cfg.train, trainable, rng);
    out.upload = partial_upload(params, c.kind, cfg.policy, trainable);
    return out;
  };
  return federated_loop(clients, initial, cfg, [&](std::size_t) { return shared; }, local, evaluate);
}

TrainingResult run_centralized(const std::vector<Client>& clients, const TaggedParamSet& initial,
                               const Models& models, const FederationCfg& cfg, const Evaluator& evaluate) {
  cfg.validate();
  if (!models.generator || !models.discriminator) throw std::invalid_argument("models are not set");
  if (clients.empty()) throw std::invalid_argument("centralized training needs client data to pool");
  models.generator->validate(initial);

  Client pooled;
  pooled.id = "centralized";
  pooled.kind = ClientKind::horizontal;
  std::vector<Tensor> parts;
  for (const auto& c : clients) {
    parts.push_back(c.images);
    pooled.poses.insert(pooled.poses.end(), c.poses.begin(), c.poses.end());
  }
  pooled.images = ad::concat(parts, 0);
  pooled.discriminator = clients.front().discriminator.clone();
  const std::size_t n = pooled.poses.size();

  TrainingResult result;
  TaggedParamSet params = initial.clone();
  params.set_trainable(cfg.policy.shared_tags());
  Rng rng = make_rng(cfg.schedule.seed, {hash_string("centralized")});
  std::vector<std::size_t> order;
  std::size_t cursor = n, step = 0;
  for (std::size_t round = 1; round <= cfg.schedule.rounds; ++round) {
    const auto start = Clock::now();
    std::size_t steps = 0;
    for (std::size_t i : select_clients(clients.size(), cfg.schedule.fraction, round, cfg.schedule.seed)) {
      steps += cfg.schedule.local_epochs * steps_per_epoch(clients[i], cfg.train.batch);
    }
    LocalMetrics m;
    for (std::size_t s = 0; s < steps; ++s) {
      if (cursor + cfg.train.batch > n) {
        order = shuffled(n, rng);
        cursor = 0;
      }
      const std::size_t len = std::min(cfg.train.batch, n);
      gan_step(pooled, params, models, cfg.train, std::span<const std::size_t>(order).subspan(cursor, len), rng,
               step++, m);
      cursor += len;
    }
    finish(m);
    RoundLog log;
    log.round = round;
    log.aggregate = m;
    log.clients.push_back({pooled.id, pooled.kind, m, 0, {}});
    if (evaluate) log.proxy = evaluate(params.clone());
    log.wall_ms = elapsed_ms(start);
    result.logs.push_back(std::move(log));
  }
  params.set_trainable({});
  result.model = params.clone();
  return result;
}

TrainingResult run_transfer(std::vector<Client>& clients, const TaggedParamSet& initial,
                            const TaggedParamSet& source, const render::Generator& generator,
                            const TransferRunCfg& cfg, const Evaluator& evaluate) {
  cfg.transfer.validate();
  generator.validate(initial);
  const bool needs_source = cfg.transfer.lambda_texture > 0.0 || cfg.transfer.lambda_geometry > 0.0;
  if (needs_source) generator.validate(source);
  const auto& fcfg = cfg.federation;
  const std::size_t t0 = fcfg.schedule.resolved_freeze_round();
  const TagSet shared = fcfg.policy.shared_tags();

  std::map<std::string, transfer::ProjectionBank> banks;
  for (const auto& c : clients) {
    banks.emplace(c.id, transfer::ProjectionBank(cfg.transfer.projections,
                                                 derive_seed(fcfg.schedule.seed, {hash_string("projections"),
                                                                                  hash_string(c.id)})));
  }
  const TaggedParamSet frozen_source = needs_source ? source.clone() : TaggedParamSet{};
  auto local = [&](Client& c, const TaggedParamSet& global, std::size_t round, const TagSet& trainable) {
    TaggedParamSet params = global.clone();
    Rng rng = client_rng(fcfg.schedule.seed, round, c.id);
    ClientOutcome out;
    out.metrics = local_transfer(c, params, frozen_source, generator, fcfg.schedule.local_epochs, fcfg.train,
                                 cfg.transfer, trainable, rng, banks.at(c.id));
    out.upload = partial_upload(params, c.kind, fcfg.policy, trainable);
    return out;
  };
  auto trainable_for = [&](std::size_t round) { return intersect(transfer::freeze_plan(round, t0), shared); };
  return federated_loop(clients, initial, fcfg, trainable_for, local, evaluate);
}

std::size_t rounds_to_threshold(const std::vector<RoundLog>& logs, double threshold) {
  for (const auto& l : logs) {
    if (l.proxy <= threshold) return l.round;
  }
  return logs.size() + 1;
}

std::vector<double> smoothed_generator_loss(const std::vector<RoundLog>& logs, std::size_t window) {
  if (window < 1) throw std::invalid_argument("smoothing window must be >= 1");
  std::vector<double> out;
  double sum = 0.0;
  for (std::size_t i = 0; i < logs.size(); ++i) {
    sum += logs[i].aggregate.loss_g;
    if (i >= window) sum -= logs[i - window].aggregate.loss_g;
    out.push_back(sum / static_cast<double>(std::min(window, i + 1)));
  }
  return out;
}

void write_round_csv(std::ostream& out, const std::vector<RoundLog>& logs, bool with_timing) {
  out << "round,client_id,kind,loss_d,loss_g,loss_aux,bytes_up,wall_ms\n";
  const std::string no_time = "-";
  for (const auto& l : logs) {
    std::size_t bytes = 0;
    for (const auto& c : l.clients) {
      out << l.round << ',' << c.client_id << ',' << to_string(c.kind) << ',' << fmt9(c.metrics.loss_d) << ','
          << fmt9(c.metrics.loss_g) << ',' << fmt9(c.metrics.loss_aux) << ',' << c.bytes_up << ',' << no_time << '\n';
      bytes += c.bytes_up;
    }
    out << l.round << ",-,-," << fmt9(l.aggregate.loss_d) << ',' << fmt9(l.aggregate.loss_g) << ','
        << fmt9(l.aggregate.loss_aux) << ',' << bytes << ',' << (with_timing ? fmt9(l.wall_ms) : no_time) << '\n';
  }
}

void write_timing_csv(std::ostream& out, const std::vector<RoundLog>& logs) {
  out << "round,wall_ms\n";
  for (const auto& l : logs) out << l.round << ',' << fmt9(l.wall_ms) << '\n';
}

// ---------------------------------------------------------------------------

std::set<std::string> reference_features() { return {"rgb", "density", "appearance", "pose"}; }

std::set<std::string> reference_ids() {
  std::set<std::string> ids;
  for (int i = 0; i < 16; ++i) ids.insert("subject-" + std::to_string(i));
  return ids;
}

std::vector<Client> make_toy_clients(const RosterCfg& roster, const render::SceneOracle& scene,
                                     const render::Generator& generator, const render::Discriminator& discriminator,
                                     const TaggedParamSet& initial, std::uint64_t seed) {
  if (roster.images_per_client < 1) throw std::invalid_argument("roster.images_per_client must be >= 1");
  const auto& gc = generator.config();
  const std::size_t res = gc.output_resolution();
  std::vector<Client> clients;
  auto build = [&](const std::string& id, DatasetDescriptor desc) {
    Client c;
    c.id = id;
    c.dataset = std::move(desc);
    c.dataset.size = roster.images_per_client;
    c.kind = classify_dataset(c.dataset, reference_features(), reference_ids(), roster.thresholds);
    const PosePrior& prior = c.kind == ClientKind::horizontal ? roster.horizontal_poses : roster.vertical_poses;
    Rng rng = make_rng(seed, {hash_string(id), hash_string("data")});
    std::vector<double> pixels;
    for (std::size_t i = 0; i < roster.images_per_client; ++i) {
      const auto pose = prior.sample(rng);
      c.poses.push_back(pose);
      auto img = scene.render(render::orbit_pose(pose.pitch, pose.yaw, gc.camera.radius), res, res, gc.camera,
                              roster.render_samples);
      pixels.insert(pixels.end(), img.begin(), img.end());
    }
    c.images = Tensor::from_data({roster.images_per_client, res, res, 3}, std::move(pixels));
    c.discriminator = discriminator.init_params(derive_seed(seed, {hash_string(id), hash_string("disc")}));
    if (c.kind == ClientKind::vertical) c.hyper = initial.clone();
    clients.push_back(std::move(c));
  };
  if (!roster.clients.empty()) {
    std::set<std::string> seen;
    for (const auto& spec : roster.clients) {
      if (spec.id.empty() || !seen.insert(spec.id).second) {
        throw std::invalid_argument("roster.clients: ids must be nonempty and unique ('" + spec.id + "')");
      }
      build(spec.id, DatasetDescriptor{spec.features, spec.ids, roster.images_per_client});
    }
    return clients;
  }
  for (std::size_t k = 0; k < roster.horizontal; ++k) {
    const std::string id = "h" + std::to_string(k);
    DatasetDescriptor d;
    d.features = reference_features();
    for (std::size_t i = 0; i < roster.images_per_client; ++i) d.ids.insert(id + "-sample-" + std::to_string(i));
    build(id, std::move(d));
  }
  for (std::size_t k = 0; k < roster.vertical; ++k) {
    const std::string id = "v" + std::to_string(k);
    DatasetDescriptor d;
    d.ids = reference_ids();
    d.features = {"viewpoint-" + id, "camera-" + id};
    build(id, std::move(d));
  }
  return clients;
}

double reconstruction_proxy(const render::Generator& generator, const TaggedParamSet& params,
                            const render::SceneOracle& scene, std::size_t views, std::uint64_t seed) {
  const auto poses = evaluation_poses(views, seed);
  const auto truth = oracle_images(scene, generator.config(), poses, 64);
  Rng rng = make_rng(seed, {hash_string("evaluation-latents")});
  Tensor z = normal_latents(rng, views, generator.config().z_dim);
  ad::NoGradGuard no_grad;
  auto out = generator.forward(z, poses, params.detached());
  auto img = out.image.data();
  double s = 0.0;
  for (std::size_t i = 0; i < img.size(); ++i) s += (img[i] - truth[i]) * (img[i] - truth[i]);
  return s / static_cast<double>(img.size());
}

double scene_gap(const render::SceneOracle& a, const render::SceneOracle& b, const render::GeneratorConfig& cfg,
                 std::size_t views, std::uint64_t seed) {
  const auto poses = evaluation_poses(views, seed);
  const auto x = oracle_images(a, cfg, poses, 64);
  const auto y = oracle_images(b, cfg, poses, 64);
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  return s / static_cast<double>(x.size());
}

}  // namespace fedsynth::fed
