#pragma once

// NeRF-lite 3D-aware generator: positional encoding, pinhole ray casting,
// alpha-compositing quadrature, the feature-plane ray-set approximation and
// progressive bilinear upsampling. Also the small discriminator, the analytic
// toy scene used as ground truth, and the forward-cost estimator.

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fedsynth/params.hpp"
#include "fedsynth/rng.hpp"
#include "fedsynth/tensor.hpp"

namespace fedsynth::render {

using Vec3 = std::array<double, 3>;
using Rgb = std::array<double, 3>;

struct CameraPose {
  double pitch = 0.0;  // [-pi/2, pi/2]
  double yaw = 0.0;    // [-pi, pi]
  Vec3 origin{0.0, 0.0, 0.0};
};

/// Camera on a sphere of `radius` around the origin, looking at the origin.
CameraPose orbit_pose(double pitch, double yaw, double radius);
/// Unit viewing direction for the pose angles.
Vec3 optical_axis(const CameraPose& pose);
void validate_pose(const CameraPose& pose);

struct Ray {
  Vec3 origin{};
  Vec3 direction{};
  std::vector<double> depths;
  std::size_t row = 0;
  std::size_t col = 0;

  Vec3 point(double depth) const;
};

struct EncodingCfg {
  int levels = 10;
};

/// [sin(2^0 x), cos(2^0 x), ..., sin(2^{L-1} x), cos(2^{L-1} x)] per input
/// scalar, inputs expected in [-1, 1].
std::vector<double> positional_encode(std::span<const double> x, const EncodingCfg& cfg);

struct CameraCfg {
  double tan_half_fov = 0.6;
  double near = 0.5;
  double far = 2.5;
  double radius = 1.5;
  /// Sample positions are divided by this before encoding.
  double position_scale = 4.0;
};

/// Pinhole ray through the centre of pixel (row, col). Depths are left empty.
Ray cast_ray(const CameraPose& pose, std::size_t row, std::size_t col, std::size_t height, std::size_t width,
             double tan_half_fov);

/// n increasing depths in [near, far]: bin midpoints, or one uniform draw per
/// bin when `stratified`.
std::vector<double> sample_depths(double near, double far, std::size_t n, bool stratified, Rng* rng = nullptr);

/// Compositing weights T_i (1 - exp(-xi_i delta_i)); delta_i is the gap to the
/// next depth and the last sample's gap runs to `far`.
std::vector<double> compositing_weights(std::span<const double> densities, std::span<const double> depths, double far);

Rgb render_ray(std::span<const double> densities, std::span<const Rgb> colors, std::span<const double> depths,
               double far);

// ---------------------------------------------------------------------------
// Toy ground truth

struct Blob {
  Vec3 center{};
  double radius = 0.3;
  double peak_density = 8.0;
  Rgb color{1.0, 1.0, 1.0};
};

class SceneOracle {
 public:
  explicit SceneOracle(std::vector<Blob> blobs);

  /// Two coloured blobs inside the unit sphere.
  static SceneOracle source_scene();
  /// Same geometry as source_scene() with shifted colours.
  static SceneOracle target_scene();

  double density(const Vec3& p) const;
  Rgb color(const Vec3& p) const;
  const std::vector<Blob>& blobs() const noexcept { return blobs_; }

  /// H x W x 3 image in [0, 1] on a black background.
  std::vector<double> render(const CameraPose& pose, std::size_t height, std::size_t width, const CameraCfg& camera,
                             std::size_t samples = 64) const;

 private:
  std::vector<Blob> blobs_;
};

// ---------------------------------------------------------------------------
// Generator

struct GeneratorConfig {
  std::size_t z_dim = 8;
  std::size_t w_dim = 16;
  EncodingCfg encoding{};
  std::size_t trunk_layers = 4;
  std::size_t trunk_width = 64;
  std::size_t color_hidden = 32;
  std::size_t feature_channels = 16;
  std::size_t base_resolution = 8;
  std::size_t upsample_stages = 1;
  std::size_t samples_per_ray = 12;
  bool stratified = false;
  CameraCfg camera{};
  double leaky_slope = 0.2;

  std::size_t output_resolution() const { return base_resolution << upsample_stages; }
};

struct RaySet {
  CameraPose pose;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Ray> rays;
};

struct ForwardOptions {
  /// Record named activation maps (render.k, geometry, color, upsample.k).
  bool collect_activations = false;
  /// Source for stratified depth sampling; midpoints when null.
  Rng* rng = nullptr;
  /// Replaces the geometry head with an analytic density (oracle paths).
  std::function<double(const Vec3&)> density_override;
};

struct GeneratorOutput {
  ad::Tensor w;            // (B, w_dim)
  ad::Tensor features;     // (B, h0, w0, C)
  ad::Tensor low_res_rgb;  // (B, h0, w0, 3)
  ad::Tensor image;        // (B, H, W, 3)
  ad::Tensor half_rgb;     // (B, H/2, W/2, 3), RGB before the last upsample stage
  ad::Tensor opacity;      // (B, h0, w0, 1)
  std::map<std::string, ad::Tensor> activations;
};

class MissingParameterError : public std::invalid_argument {
 public:
  MissingParameterError(std::string name, LayerTag tag)
      : std::invalid_argument("generator parameter '" + name + "' (tag '" + std::string(to_string(tag)) +
                              "') is missing"),
        name_(std::move(name)),
        tag_(tag) {}
  const std::string& name() const noexcept { return name_; }
  LayerTag tag() const noexcept { return tag_; }

 private:
  std::string name_;
  LayerTag tag_;
};

struct ArchDescription {
  double blocks = 1;        // N
  double disc_blocks = 1;   // N*
  double channels = 1;      // C
  double kernel = 1;        // s_k
  double height = 1;        // H
  double width = 1;         // W
  double latent = 1;        // Z
};

class Generator {
 public:
  explicit Generator(GeneratorConfig cfg);

  const GeneratorConfig& config() const noexcept { return cfg_; }

  TaggedParamSet init_params(std::uint64_t seed) const;
  /// Throws MissingParameterError naming the first absent tensor and its tag.
  void validate(const TaggedParamSet& params) const;

  /// Mapping network z (B, z_dim) -> w (B, w_dim).
  ad::Tensor map_latent(const ad::Tensor& z, const TaggedParamSet& params) const;

  GeneratorOutput forward(const ad::Tensor& z, std::span<const CameraPose> poses, const TaggedParamSet& params,
                          const ForwardOptions& options = {}) const;
  GeneratorOutput forward_from_latent(const ad::Tensor& w, std::span<const CameraPose> poses,
                                      const TaggedParamSet& params, const ForwardOptions& options = {}) const;

  /// Base-resolution rays for one pose in row-major pixel order.
  RaySet make_rays(const CameraPose& pose, Rng* rng = nullptr) const;

  /// Feature map (h0, w0, C) from the ray-set approximation: transmittance
  /// integrates trunk features and the direction encoding once per ray, then
  /// the w-modulated colour MLP runs once per ray. Ray order is free but the
  /// set must cover every pixel once.
  ad::Tensor render_feature_plane(const ad::Tensor& w, const RaySet& rays, const TaggedParamSet& params,
                                  const ForwardOptions& options = {}) const;
  /// Reference path: the colour MLP runs at every sample and the outputs are
  /// composited.
  ad::Tensor render_full(const ad::Tensor& w, const RaySet& rays, const TaggedParamSet& params,
                         const ForwardOptions& options = {}) const;

  ArchDescription arch(std::size_t disc_blocks = 1) const;

 private:
  struct Traced;
  Traced trace(const ad::Tensor& w_pose, const std::vector<const RaySet*>& sets, const TaggedParamSet& params,
               const ForwardOptions& options, bool per_sample_color) const;
  ad::Tensor condition_on_pose(const ad::Tensor& w, std::span<const CameraPose> poses,
                               const TaggedParamSet& params) const;

  GeneratorConfig cfg_;
};

// ---------------------------------------------------------------------------
// Discriminator

struct DiscriminatorConfig {
  std::size_t resolution = 16;
  std::vector<std::size_t> hidden{64};
  double leaky_slope = 0.2;
};

struct DiscriminatorParams {
  std::vector<ad::Tensor> weights;
  std::vector<ad::Tensor> biases;

  DiscriminatorParams clone() const;
  DiscriminatorParams detached() const;
  void set_trainable(bool on);
  void zero_grad();
  void sgd_step(double learning_rate);
  std::size_t element_count() const;
};

class Discriminator {
 public:
  explicit Discriminator(DiscriminatorConfig cfg);
  const DiscriminatorConfig& config() const noexcept { return cfg_; }

  DiscriminatorParams init_params(std::uint64_t seed) const;
  /// images (B, H, W, 3) -> logits (B, 1).
  ad::Tensor forward(const ad::Tensor& images, const DiscriminatorParams& params) const;

 private:
  DiscriminatorConfig cfg_;
};

// ---------------------------------------------------------------------------

struct FlopsEstimate {
  double generator = 0.0;
  double discriminator = 0.0;
};

/// O_G = N (C^2 s_k^2 + 2HWC + C^2) log2(H), O_D = N* (C^2 s_k^2 + HWC) log2(H).
FlopsEstimate flops_estimate(const ArchDescription& arch);

/// Binary PPM (P6) of an H x W x 3 image in [0, 1].
std::string encode_ppm(std::span<const double> rgb, std::size_t height, std::size_t width);

}  // namespace fedsynth::render
