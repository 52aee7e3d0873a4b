#include "fedsynth/losses.hpp"

#include <algorithm>
#include <cstring>
#include <memory>
#include <numeric>
#include <stdexcept>

namespace fedsynth {

std::string_view to_string(ClientKind kind) { return kind == ClientKind::horizontal ? "horizontal" : "vertical"; }

}  // namespace fedsynth

namespace fedsynth::loss {

namespace {

void require_nonempty(const Tensor& t, const char* what) {
  if (!t.defined() || t.numel() == 0) throw std::invalid_argument(std::string(what) + " batch is empty");
}

using Indices = std::shared_ptr<std::vector<std::size_t>>;

}  // namespace

void GanLossCfg::validate() const {
  if (!(r1_weight >= 0.0)) throw std::invalid_argument("loss.r1_weight must be >= 0");
  if (!(reg_weight >= 0.0)) throw std::invalid_argument("loss.reg_weight must be >= 0");
}

void VerticalLossCfg::validate() const {
  if (pixel_subsample < 1) throw std::invalid_argument("loss.vertical.pixel_subsample must be >= 1");
  if (!(hyper_decay >= 0.0 && hyper_decay < 1.0)) {
    throw std::invalid_argument("loss.vertical.hyper_decay must be in [0, 1)");
  }
  if (period < 1) throw std::invalid_argument("loss.vertical.period must be >= 1");
}

Tensor minimax_gan_loss(const Tensor& real_logits, const Tensor& fake_logits) {
  require_nonempty(real_logits, "real");
  require_nonempty(fake_logits, "fake");
  // log sigmoid(x) = -softplus(-x), log(1 - sigmoid(x)) = -softplus(x)
  return -ad::mean(ad::softplus(-real_logits)) - ad::mean(ad::softplus(fake_logits));
}

Tensor r1_penalty(const Tensor& real_images, const render::Discriminator& d,
                  const render::DiscriminatorParams& params) {
  require_nonempty(real_images, "real");
  ad::EnableGradGuard enable;
  Tensor input = real_images.detach();
  input.requires_grad_();
  Tensor logits = d.forward(input, params);
  Tensor g = ad::grad(ad::sum(logits), {input}, true)[0];
  return ad::scale(ad::sum(ad::square(g)), 1.0 / static_cast<double>(real_images.shape()[0]));
}

DiscriminatorLoss discriminator_loss(const Tensor& real_images, const Tensor& fake_images,
                                     const render::Discriminator& d, const render::DiscriminatorParams& params,
                                     double r1_weight) {
  if (!(r1_weight >= 0.0)) throw std::invalid_argument("R1 weight must be >= 0");
  require_nonempty(real_images, "real");
  require_nonempty(fake_images, "fake");
  const auto& rs = real_images.shape();
  const auto& fs = fake_images.shape();
  if (rs.size() != 4 || fs.size() != 4 || rs[1] != fs[1] || rs[2] != fs[2] || rs[3] != fs[3]) {
    throw ad::ShapeError("real " + ad::to_string(rs) + " and fake " + ad::to_string(fs) + " resolutions differ");
  }
  DiscriminatorLoss out;
  Tensor fake_logits = d.forward(fake_images.detach(), params);
  Tensor real_logits = d.forward(real_images.detach(), params);
  out.adversarial = ad::mean(ad::softplus(fake_logits)) + ad::mean(ad::softplus(-real_logits));
  out.r1 = r1_weight > 0.0 ? r1_penalty(real_images, d, params) : Tensor::scalar(0.0);
  out.total = r1_weight > 0.0 ? out.adversarial + ad::scale(out.r1, r1_weight) : out.adversarial;
  return out;
}

Tensor generator_loss(const Tensor& fake_images, const render::Discriminator& d,
                      const render::DiscriminatorParams& params) {
  require_nonempty(fake_images, "fake");
  return ad::mean(ad::softplus(-d.forward(fake_images, params.detached())));
}

NonSatLosses nonsat_losses(const Tensor& real_images, const Tensor& fake_images, const render::Discriminator& d,
                           const render::DiscriminatorParams& params, const GanLossCfg& cfg) {
  cfg.validate();
  return {discriminator_loss(real_images, fake_images, d, params, cfg.r1_weight).total,
          generator_loss(fake_images, d, params)};
}

Tensor bilinear_downsample(const Tensor& images, std::size_t factor) {
  const auto& s = images.shape();
  if (s.size() != 4) throw ad::ShapeError("bilinear_downsample expects (B, H, W, C), got " + ad::to_string(s));
  if (factor == 0 || s[1] % factor != 0 || s[2] % factor != 0) {
    throw std::invalid_argument("downsample factor " + std::to_string(factor) + " does not divide " +
                                ad::to_string(s));
  }
  if (factor == 1) return images;
  const std::size_t B = s[0], H = s[1], W = s[2], C = s[3], h = H / factor, w = W / factor;
  // Sample position (i + 0.5) k - 0.5 sits on a pixel for odd k and halfway
  // between two pixels for even k.
  const bool even = factor % 2 == 0;
  const std::size_t offset = even ? factor / 2 - 1 : (factor - 1) / 2;
  std::vector<Tensor> taps;
  for (std::size_t dy = 0; dy < (even ? 2u : 1u); ++dy) {
    for (std::size_t dx = 0; dx < (even ? 2u : 1u); ++dx) {
      auto idx = std::make_shared<std::vector<std::size_t>>();
      idx->reserve(B * h * w * C);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < w; ++j)
            for (std::size_t c = 0; c < C; ++c) {
              const std::size_t y = i * factor + offset + dy, x = j * factor + offset + dx;
              idx->push_back(((b * H + y) * W + x) * C + c);
            }
      taps.push_back(ad::take(images, idx, {B, h, w, C}));
    }
  }
  if (!even) return taps[0];
  return ad::scale(taps[0] + taps[1] + taps[2] + taps[3], 0.25);
}

Tensor consistency_reg(const Tensor& low_res, const Tensor& high_res) {
  const auto& l = low_res.shape();
  const auto& h = high_res.shape();
  if (l.size() != 4 || h.size() != 4 || l[0] != h[0] || l[3] != h[3]) {
    throw ad::ShapeError("consistency_reg: low " + ad::to_string(l) + " vs high " + ad::to_string(h));
  }
  if (h[1] % l[1] != 0 || h[2] % l[2] != 0 || h[1] / l[1] != h[2] / l[2]) {
    throw std::invalid_argument("consistency_reg: high resolution " + ad::to_string(h) +
                                " is not an integer multiple of " + ad::to_string(l));
  }
  return ad::mean(ad::square(low_res - bilinear_downsample(high_res, h[1] / l[1])));
}

Tensor total_gan_loss(const Tensor& l_gan, const Tensor& reg, double beta) {
  if (!(beta >= 0.0)) throw std::invalid_argument("regularization weight must be >= 0");
  return l_gan + ad::scale(reg, beta);
}

Tensor horizontal_generator_objective(ClientKind kind, const Tensor& fake_images, const render::Discriminator& d,
                                      const render::DiscriminatorParams& params) {
  if (kind != ClientKind::horizontal) {
    throw std::invalid_argument("horizontal generator objective requested for a vertical client");
  }
  return generator_loss(fake_images, d, params);
}

std::vector<std::size_t> sample_pixel_subset(std::size_t pixels, std::size_t count, Rng& rng) {
  if (count == 0 || count > pixels) {
    throw std::invalid_argument("pixel subsample of " + std::to_string(count) + " from " + std::to_string(pixels) +
                                " pixels");
  }
  std::vector<std::size_t> all(pixels);
  std::iota(all.begin(), all.end(), 0);
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pixels - 1);
    std::swap(all[i], all[pick(rng)]);
  }
  all.resize(count);
  std::sort(all.begin(), all.end());
  return all;
}

Tensor vertical_generator_loss(const Tensor& render, const Tensor& hyper_render,
                               const std::vector<std::size_t>& pixels, const Tensor& latent,
                               const Tensor& hyper_latent) {
  if (latent.shape() != hyper_latent.shape() ||
      std::memcmp(latent.data().data(), hyper_latent.data().data(), latent.numel() * sizeof(double)) != 0) {
    throw std::invalid_argument("vertical loss: renders come from different latents");
  }
  const auto& s = render.shape();
  if (s.size() != 4 || s != hyper_render.shape()) {
    throw ad::ShapeError("vertical loss: render " + ad::to_string(s) + " vs hyper-network render " +
                         ad::to_string(hyper_render.shape()));
  }
  if (pixels.empty()) throw std::invalid_argument("vertical loss: empty pixel subsample");
  const std::size_t B = s[0], P = s[1] * s[2], C = s[3];
  auto idx = std::make_shared<std::vector<std::size_t>>();
  idx->reserve(B * pixels.size() * C);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t p : pixels) {
      if (p >= P) throw std::out_of_range("vertical loss: pixel index " + std::to_string(p) + " out of range");
      for (std::size_t c = 0; c < C; ++c) idx->push_back((b * P + p) * C + c);
    }
  }
  const ad::Shape picked{idx->size()};
  return ad::mean(ad::square(ad::take(render, idx, picked) - ad::take(hyper_render, idx, picked)));
}

}  // namespace fedsynth::loss
