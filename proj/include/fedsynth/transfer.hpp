#pragma once

// Domain-transfer objectives: sliced Wasserstein distance between activation
// maps, the texture (internal distribution) and masked geometry terms, the
// image-quality loss, their weighted sum, and the layer freeze schedule.

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fedsynth/params.hpp"
#include "fedsynth/renderer.hpp"
#include "fedsynth/tensor.hpp"

namespace fedsynth::transfer {

using ad::Tensor;

/// Unit directions on the sphere in R^C, stored as the columns of a
/// (C x count) matrix so one matmul projects every pixel on every direction.
class ProjectionSet {
 public:
  static ProjectionSet random(std::size_t channels, std::size_t count, std::uint64_t seed);
  /// Each inner vector is one direction; all must have the same length.
  static ProjectionSet from_vectors(const std::vector<std::vector<double>>& directions);

  std::size_t channels() const noexcept { return channels_; }
  std::size_t count() const noexcept { return count_; }
  const Tensor& matrix() const noexcept { return matrix_; }
  std::vector<double> direction(std::size_t k) const;
  /// Throws unless every direction has norm 1 within 1e-9.
  void validate() const;

 private:
  std::size_t channels_ = 0;
  std::size_t count_ = 0;
  Tensor matrix_;
};

/// Lazily built projection sets, one per channel count, all derived from one
/// seed. Not thread-safe; give each client its own bank.
class ProjectionBank {
 public:
  ProjectionBank(std::size_t count, std::uint64_t seed) : count_(count), seed_(seed) {}
  const ProjectionSet& for_channels(std::size_t channels);
  std::size_t count() const noexcept { return count_; }

 private:
  std::size_t count_;
  std::uint64_t seed_;
  std::map<std::size_t, ProjectionSet> sets_;
};

/// Y(U, V): both maps are (..., C) with identical shapes. Every pixel is
/// projected on each direction, both lists are sorted, and the mean absolute
/// difference is averaged over directions.
Tensor sliced_wasserstein(const Tensor& u, const Tensor& v, const ProjectionSet& projections);

using ActivationMap = std::map<std::string, Tensor>;

/// Mean over `layers` and over the batch of Y between per-sample target and
/// source activations. Activations are (n_s, H, W, C).
Tensor internal_distribution_loss(const ActivationMap& target, const ActivationMap& source,
                                  const std::vector<std::string>& layers, ProjectionBank& bank);

/// Opacity maps (n, h, w, 1) resized to (n, height, width, 1) by repeated
/// bilinear 2x upsampling. Throws ShapeError when the size is not reachable.
Tensor alpha_mask(const Tensor& opacity, std::size_t height, std::size_t width);

/// Like internal_distribution_loss with each activation gated by its alpha
/// mask first. Masks are given at any resolution reachable by 2x steps.
Tensor geometry_loss(const ActivationMap& target, const ActivationMap& source, const std::vector<std::string>& layers,
                     const Tensor& mask_target, const Tensor& mask_source, ProjectionBank& bank);

/// Mean SSIM over 3x3 uniform windows (valid positions) and channels, for
/// (B, H, W, C) images in [0, 1].
Tensor ssim(const Tensor& x, const Tensor& y);

/// Sum over the three layers of a fixed random 3x3 conv stack (3 -> 8 -> 8 -> 8,
/// leaky ReLU, valid padding) of the mean squared activation difference.
Tensor perceptual_loss(const Tensor& x, const Tensor& y);

struct ImageQuality {
  Tensor total;  // -ssim + perceptual + mse
  Tensor ssim;
  Tensor perceptual;
  Tensor mse;
};

/// Rejects shape mismatches and values outside [0, 1].
ImageQuality image_quality_loss(const Tensor& rendered, const Tensor& reference);

struct TransferCfg {
  double lambda_texture = 5.0;    // lambda_1
  double lambda_geometry = 0.2;   // lambda_2
  double lambda_image = 1.0;      // lambda_3
  std::size_t latent_batch = 4;   // n_s
  std::size_t freeze_round = 0;   // T_0; 0 means half the rounds
  std::size_t projections = 64;
  /// Empty means the last two render layers.
  std::vector<std::string> texture_layers;
  /// Empty means {"geometry"}.
  std::vector<std::string> geometry_layers;

  void validate() const;
};

std::vector<std::string> default_texture_layers(const render::GeneratorConfig& cfg);
std::vector<std::string> default_geometry_layers();

Tensor transfer_total(const Tensor& l_s, const Tensor& l_g, const Tensor& l_i, const TransferCfg& cfg);

/// Tags that may change in round `round` (1-based): everything except
/// geometry and viewpoint before T_0, everything from T_0 on.
TagSet freeze_plan(std::size_t round, std::size_t freeze_round);

struct TransferTerms {
  Tensor texture;   // L_s
  Tensor geometry;  // L_g
  ImageQuality image;
  Tensor total;
  render::GeneratorOutput output;
};

/// Evaluates L_tr for one batch. The target branch renders latents z through
/// `target` (W_tr); the source branch renders the same z and poses through
/// the frozen `source` model (W_s). The image term compares the target render
/// with `target_images`. The source branch is skipped when both distribution
/// weights are zero, in which case `source` may be empty. The geometry mask
/// of the target branch is its detached opacity unless `target_mask` is given.
TransferTerms transfer_terms(const render::Generator& generator, const TaggedParamSet& target,
                             const TaggedParamSet& source, const Tensor& z,
                             std::span<const render::CameraPose> poses, const Tensor& target_images,
                             const TransferCfg& cfg, ProjectionBank& bank, const Tensor& target_mask = Tensor());

}  // namespace fedsynth::transfer
