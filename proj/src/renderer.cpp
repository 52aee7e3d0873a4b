#include "fedsynth/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace fedsynth::render {

using ad::Tensor;

namespace {

constexpr double kPi = std::numbers::pi;

Vec3 normalize(const Vec3& v) {
  const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  return {v[0] / n, v[1] / n, v[2] / n};
}

Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

void append_encoding(std::vector<double>& out, double x, int levels) {
  double f = 1.0;
  for (int l = 0; l < levels; ++l) {
    out.push_back(std::sin(f * x));
    out.push_back(std::cos(f * x));
    f *= 2.0;
  }
}

// Direction as two scalars in [-1, 1]: elevation and azimuth.
std::array<double, 2> direction_angles(const Vec3& d) {
  return {std::asin(std::clamp(d[1], -1.0, 1.0)) / (kPi / 2.0), std::atan2(d[0], d[2]) / kPi};
}

Tensor gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  std::normal_distribution<double> normal(0.0, stddev);
  std::vector<double> v(rows * cols);
  for (double& x : v) x = normal(rng);
  return Tensor::from_data({rows, cols}, std::move(v));
}

Tensor he_matrix(Rng& rng, std::size_t rows, std::size_t cols, double gain = std::sqrt(2.0)) {
  return gaussian_matrix(rng, rows, cols, gain / std::sqrt(static_cast<double>(rows)));
}

// Strictly upper-triangular ones: (x U)_i = sum_{j<i} x_j.
Tensor exclusive_cumsum_matrix(std::size_t n) {
  std::vector<double> u(n * n, 0.0);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = j + 1; i < n; ++i) u[j * n + i] = 1.0;
  return Tensor::from_data({n, n}, std::move(u));
}

// Row permutation of an (n x m) tensor: out row r = in row src[r].
Tensor permute_rows(const Tensor& t, const std::vector<std::size_t>& src) {
  const std::size_t m = t.shape()[1];
  auto idx = std::make_shared<std::vector<std::size_t>>(src.size() * m);
  for (std::size_t r = 0; r < src.size(); ++r)
    for (std::size_t k = 0; k < m; ++k) (*idx)[r * m + k] = src[r] * m + k;
  return ad::take(t, idx, t.shape());
}

}  // namespace

// ---------------------------------------------------------------------------
// Geometry

CameraPose orbit_pose(double pitch, double yaw, double radius) {
  CameraPose pose{pitch, yaw, {}};
  validate_pose(pose);
  const Vec3 f = optical_axis(pose);
  pose.origin = {-radius * f[0], -radius * f[1], -radius * f[2]};
  return pose;
}

Vec3 optical_axis(const CameraPose& pose) {
  return {std::sin(pose.yaw) * std::cos(pose.pitch), std::sin(pose.pitch), std::cos(pose.yaw) * std::cos(pose.pitch)};
}

void validate_pose(const CameraPose& pose) {
  if (!(std::fabs(pose.pitch) <= kPi / 2.0)) {
    throw std::invalid_argument("pose pitch " + std::to_string(pose.pitch) + " outside [-pi/2, pi/2]");
  }
  if (!(std::fabs(pose.yaw) <= kPi)) {
    throw std::invalid_argument("pose yaw " + std::to_string(pose.yaw) + " outside [-pi, pi]");
  }
}

Vec3 Ray::point(double depth) const {
  return {origin[0] + depth * direction[0], origin[1] + depth * direction[1], origin[2] + depth * direction[2]};
}

std::vector<double> positional_encode(std::span<const double> x, const EncodingCfg& cfg) {
  if (cfg.levels < 1) throw std::invalid_argument("encoding levels must be >= 1");
  std::vector<double> out;
  out.reserve(2 * static_cast<std::size_t>(cfg.levels) * x.size());
  for (double v : x) append_encoding(out, v, cfg.levels);
  return out;
}

Ray cast_ray(const CameraPose& pose, std::size_t row, std::size_t col, std::size_t height, std::size_t width,
             double tan_half_fov) {
  if (row >= height || col >= width) {
    throw std::out_of_range("pixel (" + std::to_string(row) + ", " + std::to_string(col) + ") outside " +
                            std::to_string(height) + "x" + std::to_string(width) + " image");
  }
  const Vec3 f = optical_axis(pose);
  // Near the poles the world up vector degenerates; fall back to +z.
  const Vec3 up = std::fabs(f[1]) > 1.0 - 1e-9 ? Vec3{0.0, 0.0, 1.0} : Vec3{0.0, 1.0, 0.0};
  const Vec3 right = normalize(cross(up, f));
  const Vec3 true_up = cross(f, right);
  const double aspect = static_cast<double>(width) / static_cast<double>(height);
  const double u = ((static_cast<double>(col) + 0.5) / static_cast<double>(width) * 2.0 - 1.0) * tan_half_fov * aspect;
  const double v = (1.0 - (static_cast<double>(row) + 0.5) / static_cast<double>(height) * 2.0) * tan_half_fov;
  Ray ray;
  ray.origin = pose.origin;
  ray.direction = normalize({f[0] + u * right[0] + v * true_up[0], f[1] + u * right[1] + v * true_up[1],
                             f[2] + u * right[2] + v * true_up[2]});
  ray.row = row;
  ray.col = col;
  return ray;
}

std::vector<double> sample_depths(double near, double far, std::size_t n, bool stratified, Rng* rng) {
  if (!(near >= 0.0 && near < far)) throw std::invalid_argument("sample_depths needs 0 <= near < far");
  if (n < 2) throw std::invalid_argument("sample_depths needs n >= 2");
  if (stratified && rng == nullptr) throw std::invalid_argument("stratified sampling needs an rng");
  const double bin = (far - near) / static_cast<double>(n);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> q(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double lo = near + bin * static_cast<double>(i);
    q[i] = lo + bin * (stratified ? unit(*rng) : 0.5);
  }
  // A draw landing exactly on a shared bin edge would break strict ordering.
  for (std::size_t i = 1; i < n; ++i) {
    if (q[i] <= q[i - 1]) q[i] = std::nextafter(q[i - 1], far);
  }
  return q;
}

std::vector<double> compositing_weights(std::span<const double> densities, std::span<const double> depths,
                                        double far) {
  if (densities.size() != depths.size()) throw std::invalid_argument("densities and depths differ in length");
  const std::size_t n = depths.size();
  std::vector<double> w(n);
  double accumulated = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(densities[i] >= 0.0)) throw std::invalid_argument("negative density at sample " + std::to_string(i));
    const double next = i + 1 < n ? depths[i + 1] : far;
    const double delta = next - depths[i];
    if (!(delta >= 0.0)) throw std::invalid_argument("depths must increase and stay below far");
    const double tau = densities[i] * delta;
    w[i] = std::exp(-accumulated) * -std::expm1(-tau);
    accumulated += tau;
  }
  return w;
}

Rgb render_ray(std::span<const double> densities, std::span<const Rgb> colors, std::span<const double> depths,
               double far) {
  if (colors.size() != depths.size()) throw std::invalid_argument("colors and depths differ in length");
  const auto w = compositing_weights(densities, depths, far);
  Rgb out{0.0, 0.0, 0.0};
  for (std::size_t i = 0; i < w.size(); ++i)
    for (int k = 0; k < 3; ++k) out[k] += w[i] * colors[i][k];
  for (double& v : out) v = std::clamp(v, 0.0, 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Scene oracle

SceneOracle::SceneOracle(std::vector<Blob> blobs) : blobs_(std::move(blobs)) {
  for (const auto& b : blobs_) {
    if (!(b.radius > 0.0) || !(b.peak_density >= 0.0)) throw std::invalid_argument("blob needs radius > 0, density >= 0");
    for (double c : b.color) {
      if (!(c >= 0.0 && c <= 1.0)) throw std::invalid_argument("blob colour outside [0, 1]");
    }
  }
}

SceneOracle SceneOracle::source_scene() {
  return SceneOracle({{{0.3, 0.0, 0.05}, 0.25, 12.0, {0.9, 0.35, 0.2}},
                      {{-0.3, 0.15, -0.1}, 0.22, 12.0, {0.2, 0.45, 0.9}}});
}

SceneOracle SceneOracle::target_scene() {
  return SceneOracle({{{0.3, 0.0, 0.05}, 0.25, 12.0, {0.3, 0.85, 0.35}},
                      {{-0.3, 0.15, -0.1}, 0.22, 12.0, {0.95, 0.8, 0.25}}});
}

double SceneOracle::density(const Vec3& p) const {
  double rho = 0.0;
  for (const auto& b : blobs_) {
    double d2 = 0.0;
    for (int k = 0; k < 3; ++k) d2 += (p[k] - b.center[k]) * (p[k] - b.center[k]);
    rho += b.peak_density * std::exp(-d2 / (2.0 * b.radius * b.radius));
  }
  return rho;
}

Rgb SceneOracle::color(const Vec3& p) const {
  Rgb c{0.0, 0.0, 0.0};
  double total = 0.0;
  for (const auto& b : blobs_) {
    double d2 = 0.0;
    for (int k = 0; k < 3; ++k) d2 += (p[k] - b.center[k]) * (p[k] - b.center[k]);
    // Weights are relative, so a floor keeps far-away points well defined.
    const double w = std::exp(-d2 / (2.0 * b.radius * b.radius)) + 1e-300;
    for (int k = 0; k < 3; ++k) c[k] += w * b.color[k];
    total += w;
  }
  if (total > 0.0)
    for (double& v : c) v = std::clamp(v / total, 0.0, 1.0);
  return c;
}

std::vector<double> SceneOracle::render(const CameraPose& pose, std::size_t height, std::size_t width,
                                        const CameraCfg& camera, std::size_t samples) const {
  const auto q = sample_depths(camera.near, camera.far, samples, false);
  std::vector<double> image(height * width * 3);
  std::vector<double> rho(samples);
  std::vector<Rgb> col(samples);
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      const Ray ray = cast_ray(pose, r, c, height, width, camera.tan_half_fov);
      for (std::size_t i = 0; i < samples; ++i) {
        const Vec3 p = ray.point(q[i]);
        rho[i] = density(p);
        col[i] = color(p);
      }
      const Rgb px = render_ray(rho, col, q, camera.far);
      for (int k = 0; k < 3; ++k) image[(r * width + c) * 3 + k] = px[k];
    }
  }
  return image;
}

// ---------------------------------------------------------------------------
// Generator

struct Generator::Traced {
  Tensor features;                  // (B*R, C), pixel order
  Tensor opacity;                   // (B*R, 1)
  Tensor density;                   // (B*R, S)
  std::vector<Tensor> integrated;   // per trunk layer, (B*R, width)
};

Generator::Generator(GeneratorConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.feature_channels < 3) throw std::invalid_argument("generator.feature_channels must be >= 3");
  if (cfg_.trunk_layers < 1) throw std::invalid_argument("generator.trunk_layers must be >= 1");
  if (cfg_.samples_per_ray < 2) throw std::invalid_argument("generator.samples_per_ray must be >= 2");
  if (cfg_.upsample_stages < 1) throw std::invalid_argument("generator.upsample_stages must be >= 1");
  if (cfg_.base_resolution < 1) throw std::invalid_argument("generator.base_resolution must be >= 1");
  if (cfg_.encoding.levels < 1) throw std::invalid_argument("encoding.levels must be >= 1");
  if (cfg_.z_dim < 1 || cfg_.w_dim < 1 || cfg_.trunk_width < 1 || cfg_.color_hidden < 1) {
    throw std::invalid_argument("generator widths must be positive");
  }
}

TaggedParamSet Generator::init_params(std::uint64_t seed) const {
  Rng rng = make_rng(seed, {hash_string("generator-init")});
  const std::size_t L = static_cast<std::size_t>(cfg_.encoding.levels);
  const std::size_t wd = cfg_.w_dim, width = cfg_.trunk_width, C = cfg_.feature_channels;
  TaggedParamSet p;
  p.add("mapping.w1", LayerTag::mapping, he_matrix(rng, cfg_.z_dim, wd));
  p.add("mapping.b1", LayerTag::mapping, Tensor::zeros({1, wd}));
  p.add("mapping.w2", LayerTag::mapping, he_matrix(rng, wd, wd, 1.0));
  p.add("mapping.b2", LayerTag::mapping, Tensor::zeros({1, wd}));

  p.add("viewpoint.w1", LayerTag::viewpoint, he_matrix(rng, wd + 4 * L, wd));
  p.add("viewpoint.b1", LayerTag::viewpoint, Tensor::zeros({1, wd}));
  p.add("viewpoint.w2", LayerTag::viewpoint, gaussian_matrix(rng, wd, wd, 0.1 / std::sqrt(static_cast<double>(wd))));

  p.add("render.p0", LayerTag::render, he_matrix(rng, 6 * L, width));
  p.add("render.w0", LayerTag::render, he_matrix(rng, wd, width, 1.0));
  p.add("render.b0", LayerTag::render, Tensor::zeros({1, width}));
  for (std::size_t l = 1; l < cfg_.trunk_layers; ++l) {
    p.add("render.w" + std::to_string(l), LayerTag::render, he_matrix(rng, width, width));
    p.add("render.b" + std::to_string(l), LayerTag::render, Tensor::zeros({1, width}));
  }

  p.add("geometry.w", LayerTag::geometry, he_matrix(rng, width, 1, 1.0));
  p.add("geometry.b", LayerTag::geometry, Tensor::full({1, 1}, -1.0));

  p.add("color.w1", LayerTag::color, he_matrix(rng, width + 4 * L, cfg_.color_hidden));
  p.add("color.style", LayerTag::color,
        gaussian_matrix(rng, wd, cfg_.color_hidden, 0.3 / std::sqrt(static_cast<double>(wd))));
  p.add("color.w2", LayerTag::color, he_matrix(rng, cfg_.color_hidden, C, 1.0));

  for (std::size_t s = 0; s < cfg_.upsample_stages; ++s) {
    p.add("upsample.w" + std::to_string(s), LayerTag::upsample, he_matrix(rng, C, C, 0.3));
    p.add("upsample.b" + std::to_string(s), LayerTag::upsample, Tensor::zeros({1, C}));
  }
  return p;
}

void Generator::validate(const TaggedParamSet& params) const {
  auto need = [&](const std::string& name, LayerTag tag) {
    if (!params.contains(name) || params.entry(name).tag != tag) throw MissingParameterError(name, tag);
  };
  for (const char* n : {"mapping.w1", "mapping.b1", "mapping.w2", "mapping.b2"}) need(n, LayerTag::mapping);
  for (const char* n : {"viewpoint.w1", "viewpoint.b1", "viewpoint.w2"}) need(n, LayerTag::viewpoint);
  for (const char* n : {"render.p0", "render.w0", "render.b0"}) need(n, LayerTag::render);
  for (std::size_t l = 1; l < cfg_.trunk_layers; ++l) {
    need("render.w" + std::to_string(l), LayerTag::render);
    need("render.b" + std::to_string(l), LayerTag::render);
  }
  for (const char* n : {"geometry.w", "geometry.b"}) need(n, LayerTag::geometry);
  for (const char* n : {"color.w1", "color.style", "color.w2"}) need(n, LayerTag::color);
  for (std::size_t s = 0; s < cfg_.upsample_stages; ++s) {
    need("upsample.w" + std::to_string(s), LayerTag::upsample);
    need("upsample.b" + std::to_string(s), LayerTag::upsample);
  }
}

Tensor Generator::map_latent(const Tensor& z, const TaggedParamSet& params) const {
  if (z.rank() != 2 || z.shape()[1] != cfg_.z_dim) {
    throw ad::ShapeError("latent z must be (B, " + std::to_string(cfg_.z_dim) + "), got " + ad::to_string(z.shape()));
  }
  Tensor h = ad::leaky_relu(ad::linear(z, params.at("mapping.w1"), params.at("mapping.b1")), cfg_.leaky_slope);
  return ad::linear(h, params.at("mapping.w2"), params.at("mapping.b2"));
}

Tensor Generator::condition_on_pose(const Tensor& w, std::span<const CameraPose> poses,
                                    const TaggedParamSet& params) const {
  if (w.rank() != 2 || w.shape()[1] != cfg_.w_dim || w.shape()[0] != poses.size()) {
    throw ad::ShapeError("latent w must be (" + std::to_string(poses.size()) + ", " + std::to_string(cfg_.w_dim) +
                         "), got " + ad::to_string(w.shape()));
  }
  const std::size_t enc = 4 * static_cast<std::size_t>(cfg_.encoding.levels);
  std::vector<double> pe;
  pe.reserve(poses.size() * enc);
  for (const auto& pose : poses) {
    validate_pose(pose);
    append_encoding(pe, pose.pitch / (kPi / 2.0), cfg_.encoding.levels);
    append_encoding(pe, pose.yaw / kPi, cfg_.encoding.levels);
  }
  Tensor pose_enc = Tensor::from_data({poses.size(), enc}, std::move(pe));
  Tensor hidden = ad::leaky_relu(
      ad::linear(ad::concat({w, pose_enc}, 1), params.at("viewpoint.w1"), params.at("viewpoint.b1")),
      cfg_.leaky_slope);
  return w + ad::matmul(hidden, params.at("viewpoint.w2"));
}

RaySet Generator::make_rays(const CameraPose& pose, Rng* rng) const {
  validate_pose(pose);
  const std::size_t n = cfg_.base_resolution;
  const bool stratified = cfg_.stratified && rng != nullptr;
  RaySet set{pose, n, n, {}};
  set.rays.reserve(n * n);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      Ray ray = cast_ray(pose, r, c, n, n, cfg_.camera.tan_half_fov);
      ray.depths = sample_depths(cfg_.camera.near, cfg_.camera.far, cfg_.samples_per_ray, stratified, rng);
      set.rays.push_back(std::move(ray));
    }
  }
  return set;
}

Generator::Traced Generator::trace(const Tensor& w_pose, const std::vector<const RaySet*>& sets,
                                   const TaggedParamSet& params, const ForwardOptions& options,
                                   bool per_sample_color) const {
  const std::size_t B = sets.size();
  const std::size_t S = cfg_.samples_per_ray;
  const std::size_t L = static_cast<std::size_t>(cfg_.encoding.levels);
  const std::size_t n = cfg_.base_resolution;
  const std::size_t R = n * n;
  const std::size_t width = cfg_.trunk_width;
  const std::size_t C = cfg_.feature_channels;
  const double slope = cfg_.leaky_slope;

  std::vector<double> penc, denc, delta, override_density;
  penc.reserve(B * R * S * 6 * L);
  denc.reserve(B * R * 4 * L);
  delta.reserve(B * R * S);
  std::vector<std::size_t> source_row(B * R, B * R);
  bool canonical = true;

  for (std::size_t b = 0; b < B; ++b) {
    const RaySet& set = *sets[b];
    if (set.height != n || set.width != n || set.rays.size() != R) {
      throw std::invalid_argument("ray set must cover the " + std::to_string(n) + "x" + std::to_string(n) +
                                  " base grid exactly once");
    }
    for (std::size_t j = 0; j < R; ++j) {
      const Ray& ray = set.rays[j];
      for (int k = 0; k < 3; ++k) {
        if (std::fabs(ray.origin[k] - set.pose.origin[k]) > 1e-9) {
          throw std::invalid_argument("ray set mixes camera poses (ray " + std::to_string(j) + ")");
        }
      }
      if (ray.depths.size() != S) {
        throw std::invalid_argument("ray " + std::to_string(j) + " has " + std::to_string(ray.depths.size()) +
                                    " samples, expected " + std::to_string(S));
      }
      if (ray.row >= n || ray.col >= n) throw std::invalid_argument("ray pixel outside the base grid");
      const std::size_t pixel = ray.row * n + ray.col;
      if (source_row[b * R + pixel] != B * R) {
        throw std::invalid_argument("ray set covers pixel " + std::to_string(pixel) + " twice");
      }
      source_row[b * R + pixel] = b * R + j;
      canonical = canonical && pixel == j;

      for (std::size_t i = 0; i < S; ++i) {
        const double q = ray.depths[i];
        const double next = i + 1 < S ? ray.depths[i + 1] : cfg_.camera.far;
        if (!(next > q) && i + 1 < S) throw std::invalid_argument("ray depths must be strictly increasing");
        delta.push_back(std::max(next - q, 0.0));
        const Vec3 p = ray.point(q);
        for (int k = 0; k < 3; ++k) append_encoding(penc, p[k] / cfg_.camera.position_scale, cfg_.encoding.levels);
        if (options.density_override) override_density.push_back(options.density_override(p));
      }
      const auto ang = direction_angles(ray.direction);
      append_encoding(denc, ang[0], cfg_.encoding.levels);
      append_encoding(denc, ang[1], cfg_.encoding.levels);
    }
  }

  const std::size_t rays = B * R, samples = rays * S;
  Tensor P = Tensor::from_data({samples, 6 * L}, std::move(penc));
  Tensor Dn = Tensor::from_data({rays, 4 * L}, std::move(denc));
  Tensor Delta = Tensor::from_data({rays, S}, std::move(delta));

  Tensor cond = ad::linear(w_pose, params.at("render.w0"), params.at("render.b0"));
  Tensor h = ad::leaky_relu(ad::matmul(P, params.at("render.p0")) + ad::repeat_rows(cond, R * S), slope);
  std::vector<Tensor> layers{h};
  for (std::size_t l = 1; l < cfg_.trunk_layers; ++l) {
    h = ad::leaky_relu(
        ad::linear(h, params.at("render.w" + std::to_string(l)), params.at("render.b" + std::to_string(l))), slope);
    layers.push_back(h);
  }

  Tensor sigma;
  if (options.density_override) {
    for (double v : override_density) {
      if (!(v >= 0.0)) throw std::invalid_argument("density override returned a negative density");
    }
    sigma = Tensor::from_data({rays, S}, std::move(override_density));
  } else {
    sigma = ad::reshape(ad::softplus(ad::linear(h, params.at("geometry.w"), params.at("geometry.b"))), {rays, S});
  }

  Tensor sd = sigma * Delta;
  Tensor transmittance = ad::exp(-ad::matmul(sd, exclusive_cumsum_matrix(S)));
  Tensor alpha = ad::add_scalar(-ad::exp(-sd), 1.0);
  Tensor Q = transmittance * alpha;
  Tensor opacity = ad::matmul(Q, Tensor::ones({S, 1}));
  Tensor q_col = ad::reshape(Q, {samples, 1});
  Tensor q_wide = ad::matmul(q_col, Tensor::ones({1, width}));
  auto integrate = [&](const Tensor& x) { return ad::sum_row_groups(q_wide * x, S); };

  Tensor style = ad::add_scalar(ad::matmul(w_pose, params.at("color.style")), 1.0);
  Tensor features;
  if (!per_sample_color) {
    Tensor dir_integrated = ad::matmul(opacity, Tensor::ones({1, 4 * L})) * Dn;
    Tensor x = ad::concat({integrate(h), dir_integrated}, 1);
    Tensor a = ad::leaky_relu(ad::matmul(x, params.at("color.w1")) * ad::repeat_rows(style, R), slope);
    features = ad::matmul(a, params.at("color.w2"));
  } else {
    Tensor x = ad::concat({h, ad::repeat_rows(Dn, S)}, 1);
    Tensor a = ad::leaky_relu(ad::matmul(x, params.at("color.w1")) * ad::repeat_rows(style, R * S), slope);
    Tensor per_sample = ad::matmul(a, params.at("color.w2"));
    features = ad::sum_row_groups(ad::matmul(q_col, Tensor::ones({1, C})) * per_sample, S);
  }

  Traced out;
  auto to_pixels = [&](const Tensor& t) { return canonical ? t : permute_rows(t, source_row); };
  out.features = to_pixels(features);
  out.opacity = to_pixels(opacity);
  out.density = to_pixels(sigma);
  if (options.collect_activations) {
    for (const auto& layer : layers) out.integrated.push_back(to_pixels(integrate(layer)));
  }
  return out;
}

GeneratorOutput Generator::forward(const Tensor& z, std::span<const CameraPose> poses, const TaggedParamSet& params,
                                   const ForwardOptions& options) const {
  validate(params);
  return forward_from_latent(map_latent(z, params), poses, params, options);
}

GeneratorOutput Generator::forward_from_latent(const Tensor& w, std::span<const CameraPose> poses,
                                               const TaggedParamSet& params, const ForwardOptions& options) const {
  validate(params);
  const std::size_t B = poses.size();
  if (B == 0) throw std::invalid_argument("generator forward needs at least one pose");
  const std::size_t n = cfg_.base_resolution, C = cfg_.feature_channels;

  std::vector<RaySet> sets;
  sets.reserve(B);
  for (const auto& pose : poses) {
    sets.push_back(make_rays(orbit_pose(pose.pitch, pose.yaw, cfg_.camera.radius), options.rng));
  }
  std::vector<const RaySet*> ptrs;
  for (const auto& s : sets) ptrs.push_back(&s);

  Tensor w_pose = condition_on_pose(w, poses, params);
  Traced t = trace(w_pose, ptrs, params, options, false);

  GeneratorOutput out;
  out.w = w;
  out.features = ad::reshape(t.features, {B, n, n, C});
  out.low_res_rgb = ad::sigmoid(ad::slice(out.features, 3, 0, 3));
  out.opacity = ad::reshape(t.opacity, {B, n, n, 1});
  Tensor map = out.features;
  out.half_rgb = out.low_res_rgb;
  for (std::size_t s = 0; s < cfg_.upsample_stages; ++s) {
    if (s > 0 && s + 1 == cfg_.upsample_stages) out.half_rgb = ad::sigmoid(ad::slice(map, 3, 0, 3));
    Tensor up = ad::bilinear_upsample_2x(map);
    const std::size_t pixels = up.numel() / C;
    Tensor refine = ad::linear(ad::reshape(up, {pixels, C}), params.at("upsample.w" + std::to_string(s)),
                               params.at("upsample.b" + std::to_string(s)));
    map = up + ad::reshape(ad::leaky_relu(refine, cfg_.leaky_slope), up.shape());
    if (options.collect_activations) out.activations["upsample." + std::to_string(s)] = map;
  }
  out.image = ad::sigmoid(ad::slice(map, 3, 0, 3));
  if (options.collect_activations) {
    for (std::size_t k = 0; k < t.integrated.size(); ++k) {
      out.activations["render." + std::to_string(k)] = ad::reshape(t.integrated[k], {B, n, n, cfg_.trunk_width});
    }
    out.activations["geometry"] = ad::reshape(t.density, {B, n, n, cfg_.samples_per_ray});
    out.activations["color"] = out.features;
  }
  return out;
}

Tensor Generator::render_feature_plane(const Tensor& w, const RaySet& rays, const TaggedParamSet& params,
                                       const ForwardOptions& options) const {
  validate(params);
  const CameraPose poses[1] = {rays.pose};
  Tensor w_pose = condition_on_pose(w, poses, params);
  Traced t = trace(w_pose, {&rays}, params, options, false);
  return ad::reshape(t.features, {cfg_.base_resolution, cfg_.base_resolution, cfg_.feature_channels});
}

Tensor Generator::render_full(const Tensor& w, const RaySet& rays, const TaggedParamSet& params,
                              const ForwardOptions& options) const {
  validate(params);
  const CameraPose poses[1] = {rays.pose};
  Tensor w_pose = condition_on_pose(w, poses, params);
  Traced t = trace(w_pose, {&rays}, params, options, true);
  return ad::reshape(t.features, {cfg_.base_resolution, cfg_.base_resolution, cfg_.feature_channels});
}

ArchDescription Generator::arch(std::size_t disc_blocks) const {
  ArchDescription a;
  a.blocks = static_cast<double>(cfg_.trunk_layers + cfg_.upsample_stages);
  a.disc_blocks = static_cast<double>(disc_blocks);
  a.channels = static_cast<double>(cfg_.trunk_width);
  a.kernel = 1.0;
  a.height = static_cast<double>(cfg_.output_resolution());
  a.width = static_cast<double>(cfg_.output_resolution());
  a.latent = static_cast<double>(cfg_.z_dim);
  return a;
}

// ---------------------------------------------------------------------------
// Discriminator

DiscriminatorParams DiscriminatorParams::clone() const {
  DiscriminatorParams out;
  for (const auto& w : weights) out.weights.push_back(w.clone());
  for (const auto& b : biases) out.biases.push_back(b.clone());
  return out;
}

DiscriminatorParams DiscriminatorParams::detached() const {
  DiscriminatorParams out;
  for (const auto& w : weights) out.weights.push_back(w.detach());
  for (const auto& b : biases) out.biases.push_back(b.detach());
  return out;
}

void DiscriminatorParams::set_trainable(bool on) {
  for (auto& w : weights) w.requires_grad_(on);
  for (auto& b : biases) b.requires_grad_(on);
}

void DiscriminatorParams::zero_grad() {
  for (auto& w : weights) w.zero_grad();
  for (auto& b : biases) b.zero_grad();
}

void DiscriminatorParams::sgd_step(double learning_rate) {
  auto step = [&](Tensor& t) {
    if (!t.requires_grad() || !t.has_grad()) return;
    auto g = t.grad();
    auto p = t.mutable_data();
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= learning_rate * g[i];
  };
  for (auto& w : weights) step(w);
  for (auto& b : biases) step(b);
}

std::size_t DiscriminatorParams::element_count() const {
  std::size_t n = 0;
  for (const auto& w : weights) n += w.numel();
  for (const auto& b : biases) n += b.numel();
  return n;
}

Discriminator::Discriminator(DiscriminatorConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.resolution < 1) throw std::invalid_argument("discriminator.resolution must be >= 1");
  for (std::size_t h : cfg_.hidden) {
    if (h < 1) throw std::invalid_argument("discriminator.hidden widths must be positive");
  }
}

DiscriminatorParams Discriminator::init_params(std::uint64_t seed) const {
  Rng rng = make_rng(seed, {hash_string("discriminator-init")});
  DiscriminatorParams p;
  std::size_t in = cfg_.resolution * cfg_.resolution * 3;
  for (std::size_t h : cfg_.hidden) {
    p.weights.push_back(he_matrix(rng, in, h));
    p.biases.push_back(Tensor::zeros({1, h}));
    in = h;
  }
  p.weights.push_back(he_matrix(rng, in, 1, 1.0));
  p.biases.push_back(Tensor::zeros({1, 1}));
  return p;
}

Tensor Discriminator::forward(const Tensor& images, const DiscriminatorParams& params) const {
  const std::size_t r = cfg_.resolution;
  const auto& s = images.shape();
  if (s.size() != 4 || s[1] != r || s[2] != r || s[3] != 3) {
    throw ad::ShapeError("discriminator expects (B, " + std::to_string(r) + ", " + std::to_string(r) +
                         ", 3) images, got " + ad::to_string(s));
  }
  if (params.weights.size() != cfg_.hidden.size() + 1 || params.biases.size() != params.weights.size()) {
    throw std::invalid_argument("discriminator parameters do not match the configured layer count");
  }
  Tensor h = ad::reshape(images, {s[0], r * r * 3});
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    h = ad::linear(h, params.weights[l], params.biases[l]);
    if (l + 1 < params.weights.size()) h = ad::leaky_relu(h, cfg_.leaky_slope);
  }
  return h;
}

// ---------------------------------------------------------------------------

FlopsEstimate flops_estimate(const ArchDescription& a) {
  for (double v : {a.blocks, a.disc_blocks, a.channels, a.kernel, a.height, a.width, a.latent}) {
    if (!(v > 0.0)) throw std::invalid_argument("flops_estimate needs positive architecture sizes");
  }
  const double c2k2 = a.channels * a.channels * a.kernel * a.kernel;
  const double hwc = a.height * a.width * a.channels;
  const double depth = std::log2(a.height);
  return {a.blocks * (c2k2 + 2.0 * hwc + a.channels * a.channels) * depth, a.disc_blocks * (c2k2 + hwc) * depth};
}

std::string encode_ppm(std::span<const double> rgb, std::size_t height, std::size_t width) {
  if (rgb.size() != height * width * 3) throw std::invalid_argument("PPM data does not match H x W x 3");
  std::string out = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out.reserve(out.size() + rgb.size());
  for (double v : rgb) {
    const double c = std::clamp(std::isfinite(v) ? v : 0.0, 0.0, 1.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
  }
  return out;
}

}  // namespace fedsynth::render
