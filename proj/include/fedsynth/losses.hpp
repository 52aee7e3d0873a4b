#pragma once

// GAN objectives: minimax reference loss, non-saturating loss with R1,
// low/high resolution consistency, and the vertical hyper-network loss.

#include <cstddef>
#include <string_view>
#include <vector>

#include "fedsynth/renderer.hpp"
#include "fedsynth/rng.hpp"
#include "fedsynth/tensor.hpp"

namespace fedsynth {

enum class ClientKind { horizontal, vertical };

std::string_view to_string(ClientKind kind);

}  // namespace fedsynth

namespace fedsynth::loss {

using ad::Tensor;

struct GanLossCfg {
  double r1_weight = 1.0;   // lambda
  double reg_weight = 1.0;  // beta
  void validate() const;
};

struct VerticalLossCfg {
  std::size_t pixel_subsample = 64;
  double hyper_decay = 0.9;
  /// Apply the vertical term every `period` generator steps.
  std::size_t period = 1;
  void validate() const;
};

/// mean log sigmoid(real) + mean log(1 - sigmoid(fake)). Reference only.
Tensor minimax_gan_loss(const Tensor& real_logits, const Tensor& fake_logits);

/// mean over the batch of ||grad_I sum D(I)||^2, differentiable in D's
/// parameters.
Tensor r1_penalty(const Tensor& real_images, const render::Discriminator& d, const render::DiscriminatorParams& params);

struct DiscriminatorLoss {
  Tensor total;  // adversarial + lambda * r1
  Tensor adversarial;
  Tensor r1;
};

/// mean softplus(D(fake)) + mean softplus(-D(real)) + lambda * R1(real).
/// Fakes are detached so the generator receives nothing.
DiscriminatorLoss discriminator_loss(const Tensor& real_images, const Tensor& fake_images,
                                     const render::Discriminator& d, const render::DiscriminatorParams& params,
                                     double r1_weight);

/// mean softplus(-D(fake)); the discriminator parameters are used detached.
Tensor generator_loss(const Tensor& fake_images, const render::Discriminator& d,
                      const render::DiscriminatorParams& params);

struct NonSatLosses {
  Tensor loss_d;
  Tensor loss_g;
};

NonSatLosses nonsat_losses(const Tensor& real_images, const Tensor& fake_images, const render::Discriminator& d,
                           const render::DiscriminatorParams& params, const GanLossCfg& cfg);

/// Bilinear resampling of (B, H, W, C) at pixel centres (i + 0.5) k - 0.5.
Tensor bilinear_downsample(const Tensor& images, std::size_t factor);

/// MSE between the low-resolution render and the downsampled high-res output.
Tensor consistency_reg(const Tensor& low_res, const Tensor& high_res);

/// l_gan + beta * reg.
Tensor total_gan_loss(const Tensor& l_gan, const Tensor& reg, double beta);

/// The generator term for horizontal clients; rejects vertical clients.
Tensor horizontal_generator_objective(ClientKind kind, const Tensor& fake_images, const render::Discriminator& d,
                                      const render::DiscriminatorParams& params);

/// `count` distinct pixel indices in [0, pixels), ascending.
std::vector<std::size_t> sample_pixel_subset(std::size_t pixels, std::size_t count, Rng& rng);

/// Mean over the subsampled pixels (of every image) and channels of the
/// squared difference between the two renders. The latents the renders were
/// produced from must be identical.
Tensor vertical_generator_loss(const Tensor& render, const Tensor& hyper_render,
                               const std::vector<std::size_t>& pixels, const Tensor& latent,
                               const Tensor& hyper_latent);

}  // namespace fedsynth::loss
