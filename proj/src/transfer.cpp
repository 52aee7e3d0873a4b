#include "fedsynth/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <random>
#include <stdexcept>

#include "fedsynth/rng.hpp"

namespace fedsynth::transfer {

namespace {

using Indices = std::shared_ptr<std::vector<std::size_t>>;

std::size_t channels_of(const Tensor& t) { return t.shape().back(); }

// (..., C) -> (pixels, C)
Tensor as_rows(const Tensor& t) {
  if (t.rank() < 1 || t.numel() == 0) throw ad::ShapeError("activation map is empty");
  const std::size_t c = channels_of(t);
  return ad::reshape(t, {t.numel() / c, c});
}

// Flat indices that gather each column of an (n x p) matrix in ascending order.
Indices column_sort_order(std::span<const double> values, std::size_t n, std::size_t p) {
  auto idx = std::make_shared<std::vector<std::size_t>>(n * p);
  std::vector<std::size_t> order(n);
  for (std::size_t k = 0; k < p; ++k) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return values[a * p + k] < values[b * p + k]; });
    for (std::size_t r = 0; r < n; ++r) (*idx)[r * p + k] = order[r] * p + k;
  }
  return idx;
}

const Tensor& find_layer(const ActivationMap& acts, const std::string& name, const char* branch) {
  auto it = acts.find(name);
  if (it == acts.end()) {
    throw std::invalid_argument(std::string("unknown activation layer '") + name + "' in " + branch + " branch");
  }
  return it->second;
}

void require_batched_pair(const Tensor& a, const Tensor& b, const std::string& name) {
  if (a.rank() != 4 || a.shape() != b.shape()) {
    throw ad::ShapeError("layer '" + name + "': target " + ad::to_string(a.shape()) + " and source " +
                         ad::to_string(b.shape()) + " must be equal (n, H, W, C) maps");
  }
}

Tensor sample_of(const Tensor& t, std::size_t i) {
  const auto& s = t.shape();
  return ad::reshape(ad::slice(t, 0, i, 1), {s[1], s[2], s[3]});
}

// Broadcasts a (..., 1) mask across C channels.
Tensor widen_mask(const Tensor& mask, std::size_t channels) {
  return ad::conv1x1(mask, Tensor::ones({1, channels}));
}

// (B, H, W, C) -> (B * (H-k+1) * (W-k+1), k*k*C) valid-window patches, taps
// ordered (dy, dx, c).
Tensor im2col(const Tensor& x, std::size_t k) {
  const auto& s = x.shape();
  if (s.size() != 4 || s[1] < k || s[2] < k) {
    throw ad::ShapeError("image " + ad::to_string(s) + " is too small for a " + std::to_string(k) + "x" +
                         std::to_string(k) + " window");
  }
  const std::size_t B = s[0], H = s[1], W = s[2], C = s[3];
  const std::size_t oh = H - k + 1, ow = W - k + 1, cols = k * k * C;
  auto idx = std::make_shared<std::vector<std::size_t>>();
  idx->reserve(B * oh * ow * cols);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j)
        for (std::size_t dy = 0; dy < k; ++dy)
          for (std::size_t dx = 0; dx < k; ++dx)
            for (std::size_t c = 0; c < C; ++c) idx->push_back(((b * H + i + dy) * W + j + dx) * C + c);
  return ad::take(x, idx, {B * oh * ow, cols});
}

struct PerceptualNet {
  static constexpr std::size_t kWidth = 8;
  std::vector<Tensor> weights;  // (9 * Cin, Cout)

  PerceptualNet() {
    Rng rng = make_rng(0x9e7ce97ULL);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::size_t in = 3;
    for (int l = 0; l < 3; ++l) {
      const std::size_t rows = 9 * in;
      std::vector<double> w(rows * kWidth);
      const double sd = std::sqrt(2.0 / static_cast<double>(rows));
      for (double& v : w) v = sd * normal(rng);
      weights.push_back(Tensor::from_data({rows, kWidth}, std::move(w)));
      in = kWidth;
    }
  }

  std::vector<Tensor> features(const Tensor& x) const {
    std::vector<Tensor> out;
    Tensor h = x;
    for (const auto& w : weights) {
      const auto& s = h.shape();
      Tensor y = ad::leaky_relu(ad::matmul(im2col(h, 3), w), 0.2);
      h = ad::reshape(y, {s[0], s[1] - 2, s[2] - 2, kWidth});
      out.push_back(h);
    }
    return out;
  }
};

const PerceptualNet& perceptual_net() {
  static const PerceptualNet net;
  return net;
}

void require_images(const Tensor& a, const Tensor& b, const char* what) {
  if (a.rank() != 4 || a.shape() != b.shape()) {
    throw ad::ShapeError(std::string(what) + ": images " + ad::to_string(a.shape()) + " and " +
                         ad::to_string(b.shape()) + " must be equal (B, H, W, C)");
  }
}

}  // namespace

// ---------------------------------------------------------------------------

ProjectionSet ProjectionSet::random(std::size_t channels, std::size_t count, std::uint64_t seed) {
  if (channels == 0 || count == 0) throw std::invalid_argument("projection set needs channels and count >= 1");
  Rng rng = make_rng(seed, {channels, count});
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> dirs(count, std::vector<double>(channels));
  for (auto& d : dirs) {
    double norm = 0.0;
    do {
      norm = 0.0;
      for (double& v : d) {
        v = normal(rng);
        norm += v * v;
      }
    } while (norm < 1e-24);
    norm = std::sqrt(norm);
    for (double& v : d) v /= norm;
  }
  return from_vectors(dirs);
}

ProjectionSet ProjectionSet::from_vectors(const std::vector<std::vector<double>>& directions) {
  if (directions.empty() || directions.front().empty()) throw std::invalid_argument("empty projection set");
  ProjectionSet p;
  p.channels_ = directions.front().size();
  p.count_ = directions.size();
  std::vector<double> m(p.channels_ * p.count_);
  for (std::size_t k = 0; k < p.count_; ++k) {
    if (directions[k].size() != p.channels_) throw ad::ShapeError("projection directions differ in length");
    for (std::size_t c = 0; c < p.channels_; ++c) m[c * p.count_ + k] = directions[k][c];
  }
  p.matrix_ = Tensor::from_data({p.channels_, p.count_}, std::move(m));
  p.validate();
  return p;
}

std::vector<double> ProjectionSet::direction(std::size_t k) const {
  if (k >= count_) throw std::out_of_range("projection index out of range");
  std::vector<double> d(channels_);
  auto m = matrix_.data();
  for (std::size_t c = 0; c < channels_; ++c) d[c] = m[c * count_ + k];
  return d;
}

void ProjectionSet::validate() const {
  for (std::size_t k = 0; k < count_; ++k) {
    double norm = 0.0;
    for (double v : direction(k)) norm += v * v;
    if (std::fabs(std::sqrt(norm) - 1.0) > 1e-9) {
      throw std::invalid_argument("projection " + std::to_string(k) + " is not a unit vector");
    }
  }
}

const ProjectionSet& ProjectionBank::for_channels(std::size_t channels) {
  auto it = sets_.find(channels);
  if (it == sets_.end()) it = sets_.emplace(channels, ProjectionSet::random(channels, count_, seed_)).first;
  return it->second;
}

Tensor sliced_wasserstein(const Tensor& u, const Tensor& v, const ProjectionSet& projections) {
  if (u.shape() != v.shape()) {
    throw ad::ShapeError("sliced Wasserstein needs equal shapes, got " + ad::to_string(u.shape()) + " and " +
                         ad::to_string(v.shape()));
  }
  if (channels_of(u) != projections.channels()) {
    throw ad::ShapeError("maps have " + std::to_string(channels_of(u)) + " channels, projections expect " +
                         std::to_string(projections.channels()));
  }
  Tensor pu = ad::matmul(as_rows(u), projections.matrix());
  Tensor pv = ad::matmul(as_rows(v), projections.matrix());
  const std::size_t n = pu.shape()[0], p = pu.shape()[1];
  Tensor su = ad::take(pu, column_sort_order(pu.data(), n, p), {n, p});
  Tensor sv = ad::take(pv, column_sort_order(pv.data(), n, p), {n, p});
  return ad::mean(ad::abs(su - sv));
}

Tensor internal_distribution_loss(const ActivationMap& target, const ActivationMap& source,
                                  const std::vector<std::string>& layers, ProjectionBank& bank) {
  if (layers.empty()) throw std::invalid_argument("texture layer list is empty");
  Tensor total;
  std::size_t terms = 0;
  for (const auto& name : layers) {
    const Tensor& a = find_layer(target, name, "target");
    const Tensor& b = find_layer(source, name, "source");
    require_batched_pair(a, b, name);
    const auto& proj = bank.for_channels(channels_of(a));
    for (std::size_t i = 0; i < a.shape()[0]; ++i) {
      Tensor y = sliced_wasserstein(sample_of(a, i), sample_of(b, i), proj);
      total = total.defined() ? total + y : y;
      ++terms;
    }
  }
  return ad::scale(total, 1.0 / static_cast<double>(terms));
}

Tensor alpha_mask(const Tensor& opacity, std::size_t height, std::size_t width) {
  if (opacity.rank() != 4 || opacity.shape()[3] != 1) {
    throw ad::ShapeError("opacity mask must be (n, h, w, 1), got " + ad::to_string(opacity.shape()));
  }
  Tensor m = opacity;
  while (m.shape()[1] < height && m.shape()[2] < width) m = ad::bilinear_upsample_2x(m);
  if (m.shape()[1] != height || m.shape()[2] != width) {
    throw ad::ShapeError("mask " + ad::to_string(opacity.shape()) + " cannot be resized to " +
                         std::to_string(height) + "x" + std::to_string(width));
  }
  return m;
}

Tensor geometry_loss(const ActivationMap& target, const ActivationMap& source, const std::vector<std::string>& layers,
                     const Tensor& mask_target, const Tensor& mask_source, ProjectionBank& bank) {
  if (layers.empty()) throw std::invalid_argument("geometry layer list is empty");
  Tensor total;
  std::size_t terms = 0;
  for (const auto& name : layers) {
    const Tensor& a = find_layer(target, name, "target");
    const Tensor& b = find_layer(source, name, "source");
    require_batched_pair(a, b, name);
    const auto& s = a.shape();
    Tensor mt = alpha_mask(mask_target, s[1], s[2]);
    Tensor ms = alpha_mask(mask_source, s[1], s[2]);
    if (mt.shape()[0] != s[0] || ms.shape()[0] != s[0]) {
      throw ad::ShapeError("layer '" + name + "': mask batch does not match activation batch " + ad::to_string(s));
    }
    Tensor ga = a * widen_mask(mt, s[3]);
    Tensor gb = b * widen_mask(ms, s[3]);
    const auto& proj = bank.for_channels(s[3]);
    for (std::size_t i = 0; i < s[0]; ++i) {
      Tensor y = sliced_wasserstein(sample_of(ga, i), sample_of(gb, i), proj);
      total = total.defined() ? total + y : y;
      ++terms;
    }
  }
  return ad::scale(total, 1.0 / static_cast<double>(terms));
}

Tensor ssim(const Tensor& x, const Tensor& y) {
  require_images(x, y, "ssim");
  constexpr double c1 = 0.01 * 0.01;
  constexpr double c2 = 0.03 * 0.03;
  const std::size_t C = x.shape()[3];
  // Rows of (windows * C, 9): one 3x3 window of one channel.
  auto windows = [&](const Tensor& t) {
    Tensor p = im2col(t, 3);
    const std::size_t n = p.shape()[0];
    auto idx = std::make_shared<std::vector<std::size_t>>();
    idx->reserve(n * 9 * C);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t tap = 0; tap < 9; ++tap) idx->push_back(r * 9 * C + tap * C + c);
    return ad::take(p, idx, {n * C, 9});
  };
  Tensor px = windows(x), py = windows(y);
  Tensor avg = Tensor::full({9, 1}, 1.0 / 9.0);
  Tensor mx = ad::matmul(px, avg), my = ad::matmul(py, avg);
  Tensor vx = ad::matmul(px * px, avg) - mx * mx;
  Tensor vy = ad::matmul(py * py, avg) - my * my;
  Tensor cov = ad::matmul(px * py, avg) - mx * my;
  Tensor num = ad::add_scalar(ad::scale(mx * my, 2.0), c1) * ad::add_scalar(ad::scale(cov, 2.0), c2);
  Tensor den = ad::add_scalar(mx * mx + my * my, c1) * ad::add_scalar(vx + vy, c2);
  return ad::mean(num / den);
}

Tensor perceptual_loss(const Tensor& x, const Tensor& y) {
  require_images(x, y, "perceptual loss");
  if (x.shape()[3] != 3) throw ad::ShapeError("perceptual loss expects RGB images");
  const auto fx = perceptual_net().features(x);
  const auto fy = perceptual_net().features(y);
  Tensor total = ad::mean(ad::square(fx[0] - fy[0]));
  for (std::size_t l = 1; l < fx.size(); ++l) total = total + ad::mean(ad::square(fx[l] - fy[l]));
  return total;
}

ImageQuality image_quality_loss(const Tensor& rendered, const Tensor& reference) {
  require_images(rendered, reference, "image quality loss");
  for (const Tensor* t : {&rendered, &reference}) {
    for (double v : t->data()) {
      if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("image values must lie in [0, 1]");
    }
  }
  ImageQuality q;
  q.ssim = ssim(rendered, reference);
  q.perceptual = perceptual_loss(rendered, reference);
  q.mse = ad::mean(ad::square(rendered - reference));
  q.total = q.perceptual + q.mse - q.ssim;
  return q;
}

void TransferCfg::validate() const {
  if (!(lambda_texture >= 0.0)) throw std::invalid_argument("transfer.lambda_texture must be >= 0");
  if (!(lambda_geometry >= 0.0)) throw std::invalid_argument("transfer.lambda_geometry must be >= 0");
  if (!(lambda_image >= 0.0)) throw std::invalid_argument("transfer.lambda_image must be >= 0");
  if (latent_batch < 1) throw std::invalid_argument("transfer.latent_batch must be >= 1");
  if (projections < 1) throw std::invalid_argument("transfer.projections must be >= 1");
}

std::vector<std::string> default_texture_layers(const render::GeneratorConfig& cfg) {
  std::vector<std::string> out;
  const std::size_t first = cfg.trunk_layers >= 2 ? cfg.trunk_layers - 2 : 0;
  for (std::size_t l = first; l < cfg.trunk_layers; ++l) out.push_back("render." + std::to_string(l));
  return out;
}

std::vector<std::string> default_geometry_layers() { return {"geometry"}; }

Tensor transfer_total(const Tensor& l_s, const Tensor& l_g, const Tensor& l_i, const TransferCfg& cfg) {
  cfg.validate();
  return ad::scale(l_s, cfg.lambda_texture) + ad::scale(l_g, cfg.lambda_geometry) + ad::scale(l_i, cfg.lambda_image);
}

TagSet freeze_plan(std::size_t round, std::size_t freeze_round) {
  if (round < 1) throw std::invalid_argument("rounds are numbered from 1");
  TagSet tags = all_tags();
  if (round < freeze_round) {
    tags.erase(LayerTag::geometry);
    tags.erase(LayerTag::viewpoint);
  }
  return tags;
}

TransferTerms transfer_terms(const render::Generator& generator, const TaggedParamSet& target,
                             const TaggedParamSet& source, const Tensor& z,
                             std::span<const render::CameraPose> poses, const Tensor& target_images,
                             const TransferCfg& cfg, ProjectionBank& bank, const Tensor& target_mask) {
  cfg.validate();
  const bool distribution = cfg.lambda_texture > 0.0 || cfg.lambda_geometry > 0.0;
  render::ForwardOptions opts;
  opts.collect_activations = distribution;

  TransferTerms out;
  out.output = generator.forward(z, poses, target, opts);
  out.image = image_quality_loss(out.output.image, target_images);
  out.texture = Tensor::scalar(0.0);
  out.geometry = Tensor::scalar(0.0);

  if (distribution) {
    render::GeneratorOutput src;
    {
      ad::NoGradGuard no_grad;
      src = generator.forward(z, poses, source.detached(), opts);
    }
    const auto texture_layers =
        cfg.texture_layers.empty() ? default_texture_layers(generator.config()) : cfg.texture_layers;
    const auto geometry_layers = cfg.geometry_layers.empty() ? default_geometry_layers() : cfg.geometry_layers;
    if (cfg.lambda_texture > 0.0) {
      out.texture = internal_distribution_loss(out.output.activations, src.activations, texture_layers, bank);
    }
    if (cfg.lambda_geometry > 0.0) {
      out.geometry = geometry_loss(out.output.activations, src.activations, geometry_layers,
                                   target_mask.defined() ? target_mask : out.output.opacity.detach(), src.opacity,
                                   bank);
    }
  }
  out.total = transfer_total(out.texture, out.geometry, out.image.total, cfg);
  return out;
}

}  // namespace fedsynth::transfer
