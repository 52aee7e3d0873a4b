#include "fedsynth/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <random>

#include "fedsynth/losses.hpp"
#include "fedsynth/renderer.hpp"
#include "fedsynth/rng.hpp"
#include "fedsynth/tensor.hpp"
#include "fedsynth/transfer.hpp"

namespace fedsynth::ad {
namespace {

constexpr double kStep = 1e-6;
// Central differences at this step resolve a gradient to about 1e-9
// absolute for O(1) losses, so smaller components are compared absolutely.
constexpr double kFloor = 1e-5;

using Fn = std::function<Tensor(const Tensor&)>;

Tensor uniform(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = u(rng);
  return Tensor::from_data(std::move(shape), std::move(v));
}

// Contracts any output with a fixed non-uniform pattern so every element of
// the gradient matters.
Tensor weighted_sum(const Tensor& y) {
  std::vector<double> w(y.numel());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(0.7 * static_cast<double>(i) + 0.3);
  return sum(y * Tensor::from_data(y.shape(), w));
}

TaggedParamSet with_replaced(const TaggedParamSet& params, const std::string& name, const Tensor& value) {
  TaggedParamSet out;
  for (const auto& e : params.entries()) out.add(e.name, e.tag, e.name == name ? value : e.value);
  return out;
}

render::DiscriminatorParams with_first_weight(const render::DiscriminatorParams& p, const Tensor& w) {
  render::DiscriminatorParams out = p;
  out.weights[0] = w;
  return out;
}

render::GeneratorConfig tiny_generator() {
  render::GeneratorConfig gc;
  gc.z_dim = 2;
  gc.w_dim = 4;
  gc.encoding.levels = 2;
  gc.trunk_layers = 2;
  gc.trunk_width = 4;
  gc.color_hidden = 4;
  gc.feature_channels = 4;
  gc.base_resolution = 2;
  gc.upsample_stages = 2;
  gc.samples_per_ray = 4;
  return gc;
}

class Recorder {
 public:
  explicit Recorder(double tolerance) : tolerance_(tolerance) {}

  void check(const std::string& name, const Fn& f, const Tensor& x) {
    const auto report = grad_check(f, x, kStep, tolerance_, kFloor);
    auto it = index_.find(name);
    if (it == index_.end()) {
      it = index_.emplace(name, cases_.size()).first;
      cases_.push_back({name, 0.0, 0, true});
    }
    auto& c = cases_[it->second];
    c.max_rel_error = std::max(c.max_rel_error, report.max_rel_error);
    c.checked += report.checked;
    c.passed = c.passed && report.passed;
  }

  std::vector<GradCheckCase> take() { return std::move(cases_); }

 private:
  double tolerance_;
  std::vector<GradCheckCase> cases_;
  std::map<std::string, std::size_t> index_;
};

void op_cases(Recorder& rec, Rng& rng) {
  struct Unary {
    const char* name;
    Fn op;
    double lo, hi;
  };
  const std::vector<Unary> unary = {
      {"neg", [](const Tensor& a) { return neg(a); }, -1, 1},
      {"scale", [](const Tensor& a) { return scale(a, -1.7); }, -1, 1},
      {"add_scalar", [](const Tensor& a) { return add_scalar(a, 0.3); }, -1, 1},
      {"sin", [](const Tensor& a) { return sin(a); }, -2, 2},
      {"cos", [](const Tensor& a) { return cos(a); }, -2, 2},
      {"exp", [](const Tensor& a) { return exp(a); }, -2, 2},
      {"log", [](const Tensor& a) { return log(a); }, 0.2, 3},
      {"softplus", [](const Tensor& a) { return softplus(a); }, -3, 3},
      {"sigmoid", [](const Tensor& a) { return sigmoid(a); }, -3, 3},
      {"leaky_relu", [](const Tensor& a) { return leaky_relu(a, 0.2); }, -2, 2},
      {"abs", [](const Tensor& a) { return abs(a); }, -2, 2},
      {"square", [](const Tensor& a) { return square(a); }, -2, 2},
      {"sqrt", [](const Tensor& a) { return sqrt(a); }, 0.2, 3},
  };
  for (const auto& u : unary) {
    Tensor x = uniform(rng, {3, 4}, u.lo, u.hi);
    // keep kinked ops away from their kink
    if (std::string(u.name) == "leaky_relu" || std::string(u.name) == "abs") {
      for (double& v : x.mutable_data()) v = v < 0 ? std::min(v, -0.05) : std::max(v, 0.05);
    }
    rec.check(u.name, [&](const Tensor& t) { return weighted_sum(u.op(t)); }, x);
  }

  Tensor other = uniform(rng, {3, 4}, 0.5, 1.5);
  Tensor x = uniform(rng, {3, 4});
  rec.check("add", [&](const Tensor& t) { return weighted_sum(add(t, other)); }, x);
  rec.check("sub", [&](const Tensor& t) { return weighted_sum(sub(other, t)); }, x);
  rec.check("mul", [&](const Tensor& t) { return weighted_sum(mul(t, other)); }, x);
  rec.check("div", [&](const Tensor& t) { return weighted_sum(div(x, add_scalar(square(t), 0.5))); }, other);
  rec.check("mul_scalar_broadcast", [&](const Tensor& s) { return weighted_sum(mul(x, s)); }, Tensor::scalar(0.4));
  rec.check("sum", [&](const Tensor& t) { return square(sum(t)); }, x);
  rec.check("mean", [&](const Tensor& t) { return mean(square(t)); }, x);

  Tensor m = uniform(rng, {4, 3});
  Tensor sq = uniform(rng, {3, 3});
  Tensor bias = uniform(rng, {1, 3});
  auto idx = std::make_shared<std::vector<std::size_t>>(std::vector<std::size_t>{5, 0, 5, 11, 2, 7});
  auto structural = [&](const char* name, Fn op, Shape shape) {
    rec.check(name, [&](const Tensor& t) { return weighted_sum(op(t)); }, uniform(rng, shape));
  };
  structural("matmul", [&](const Tensor& t) { return matmul(t, m); }, {3, 4});
  structural("matmul_right", [&](const Tensor& t) { return matmul(sq, t); }, {3, 4});
  structural("transpose", [](const Tensor& t) { return transpose(t); }, {4, 3});
  structural("reshape", [](const Tensor& t) { return reshape(t, {3, 4}); }, {2, 6});
  structural("concat", [&](const Tensor& t) { return concat({t, other, t}, 1); }, {3, 2});
  structural("slice", [](const Tensor& t) { return slice(t, 1, 1, 2); }, {3, 4});
  structural("embed", [](const Tensor& t) { return embed(t, 0, 1, 5); }, {3, 4});
  structural("repeat_rows", [](const Tensor& t) { return repeat_rows(t, 3); }, {2, 4});
  structural("sum_row_groups", [](const Tensor& t) { return sum_row_groups(t, 2); }, {6, 3});
  structural("take", [&](const Tensor& t) { return take(t, idx, {2, 3}); }, {3, 4});
  structural("scatter_add", [&](const Tensor& t) { return scatter_add(t, idx, {12}); }, {6});
  structural("bilinear_upsample_2x", [](const Tensor& t) { return bilinear_upsample_2x(t); }, {2, 3, 2, 2});
  structural("bilinear_upsample_2x_adjoint", [](const Tensor& t) { return bilinear_upsample_2x_adjoint(t); },
             {4, 6, 2});
  structural("project_1x1", [](const Tensor& t) { return project_1x1(t, Tensor::from_data({3}, {0.6, 0.0, 0.8})); },
             {2, 2, 3});
  structural("conv1x1", [&](const Tensor& t) { return conv1x1(t, sq); }, {2, 2, 3});
  structural("linear", [&](const Tensor& t) { return linear(m, t, bias); }, {3, 3});

  // Gradient of a gradient: d/dx of sum((d/dx sum(sin(x) x))^2).
  rec.check("double_backward", [](const Tensor& t) {
    EnableGradGuard enable;
    Tensor leaf = t.requires_grad() ? t : t.clone().requires_grad_();
    auto g = grad(sum(sin(leaf) * leaf), {leaf}, true).front();
    return sum(square(g));
  }, uniform(rng, {2, 3}));
}

void loss_cases(Recorder& rec, Rng& rng, std::uint64_t seed) {
  const render::Discriminator disc({4, {3}, 0.2});
  const auto dparams = disc.init_params(seed);
  const Tensor real = uniform(rng, {2, 4, 4, 3}, 0.1, 0.9);
  const Tensor fake = uniform(rng, {2, 4, 4, 3}, 0.1, 0.9);
  const loss::GanLossCfg gan{};

  rec.check("nonsat_r1_discriminator", [&](const Tensor& w) {
    return loss::nonsat_losses(real, fake, disc, with_first_weight(dparams, w), gan).loss_d;
  }, dparams.weights[0].detach());
  rec.check("r1_penalty", [&](const Tensor& w) {
    return loss::r1_penalty(real, disc, with_first_weight(dparams, w));
  }, dparams.weights[0].detach());
  rec.check("nonsat_generator", [&](const Tensor& f) {
    return loss::nonsat_losses(real, f, disc, dparams, gan).loss_g;
  }, fake);

  const Tensor low = uniform(rng, {2, 2, 2, 3}, 0.1, 0.9);
  rec.check("consistency_reg", [&](const Tensor& hi) { return loss::consistency_reg(low, hi); }, fake);
  rec.check("consistency_reg_low", [&](const Tensor& lo) { return loss::consistency_reg(lo, fake); }, low);

  const Tensor latent = uniform(rng, {2, 4});
  const std::vector<std::size_t> pixels{0, 3, 6, 9, 15};
  rec.check("vertical_loss", [&](const Tensor& r) {
    return loss::vertical_generator_loss(r, real, pixels, latent, latent);
  }, fake);

  const auto proj = transfer::ProjectionSet::random(5, 6, seed);
  const Tensor v = uniform(rng, {2, 3, 3, 5});
  rec.check("swd", [&](const Tensor& u) { return transfer::sliced_wasserstein(u, v, proj); },
            uniform(rng, {2, 3, 3, 5}));

  transfer::ProjectionBank bank(6, seed);
  const transfer::ActivationMap source{{"a", uniform(rng, {2, 3, 3, 4})}, {"b", uniform(rng, {2, 2, 2, 3})}};
  const Tensor ta = uniform(rng, {2, 3, 3, 4});
  const Tensor tb = uniform(rng, {2, 2, 2, 3});
  rec.check("texture_loss", [&](const Tensor& a) {
    return transfer::internal_distribution_loss({{"a", a}, {"b", tb}}, source, {"a", "b"}, bank);
  }, ta);
  const Tensor mask_t = uniform(rng, {2, 3, 3, 1}, 0.0, 1.0);
  const Tensor mask_s = uniform(rng, {2, 3, 3, 1}, 0.0, 1.0);
  rec.check("geometry_loss", [&](const Tensor& a) {
    return transfer::geometry_loss({{"a", a}}, source, {"a"}, mask_t, mask_s, bank);
  }, ta);

  const Tensor ref = uniform(rng, {1, 8, 8, 3}, 0.05, 0.95);
  const Tensor img = uniform(rng, {1, 8, 8, 3}, 0.05, 0.95);
  rec.check("ssim", [&](const Tensor& x) { return transfer::ssim(x, ref); }, img);
  rec.check("perceptual", [&](const Tensor& x) { return transfer::perceptual_loss(x, ref); }, img);
  rec.check("image_quality", [&](const Tensor& x) { return transfer::image_quality_loss(x, ref).total; }, img);
}

void model_cases(Recorder& rec, Rng& rng, std::uint64_t seed) {
  const render::Generator gen(tiny_generator());
  const auto& gc = gen.config();
  const auto params = gen.init_params(seed);
  const auto source = gen.init_params(seed + 1000);
  const Tensor z = uniform(rng, {2, gc.z_dim});
  std::uniform_real_distribution<double> angle(-0.4, 0.4);
  const std::vector<render::CameraPose> poses{{angle(rng), angle(rng)}, {angle(rng), angle(rng)}};
  const std::size_t res = gc.output_resolution();
  const Tensor target = uniform(rng, {2, res, res, 3}, 0.05, 0.95);
  const render::Discriminator disc({res, {3}, 0.2});
  const auto dparams = disc.init_params(seed);

  for (const char* name : {"mapping.w1", "viewpoint.w1", "render.w1", "geometry.w", "color.w2", "upsample.w0"}) {
    const Tensor x0 = params.at(name).detach();
    rec.check(std::string("generator_objective:") + name, [&](const Tensor& x) {
      auto out = gen.forward(z, poses, with_replaced(params, name, x));
      return loss::total_gan_loss(loss::generator_loss(out.image, disc, dparams),
                                  loss::consistency_reg(out.low_res_rgb, out.image), 1.0);
    }, x0);
    // The geometry mask is a detached input of L_tr, so it is held at its
    // value for the unperturbed parameters.
    transfer::TransferCfg tcfg;
    tcfg.projections = 6;
    Tensor mask;
    {
      NoGradGuard no_grad;
      mask = gen.forward(z, poses, params).opacity;
    }
    rec.check(std::string("transfer_objective:") + name, [&](const Tensor& x) {
      transfer::ProjectionBank bank(tcfg.projections, seed);
      return transfer::transfer_terms(gen, with_replaced(params, name, x), source, z, poses, target, tcfg, bank,
                                      mask)
          .total;
    }, x0);
  }

  // Vertical term against a hyper-network render from the same latent.
  const auto hyper = gen.init_params(seed + 2000);
  Tensor hyper_render;
  {
    NoGradGuard no_grad;
    auto h = gen.forward(z, poses, hyper);
    hyper_render = bilinear_upsample_2x(h.half_rgb);
  }
  const std::vector<std::size_t> pixels{1, 4, 7, 10, 13};
  rec.check("vertical_objective:viewpoint.w1", [&](const Tensor& x) {
    auto p = with_replaced(params, "viewpoint.w1", x);
    auto out = gen.forward(z, poses, p);
    return loss::vertical_generator_loss(out.image, hyper_render, pixels, z, z);
  }, params.at("viewpoint.w1").detach());
}

}  // namespace

GradCheckSuite run_grad_check_suite(std::size_t seeds, std::uint64_t base_seed, double tolerance) {
  if (seeds < 1) throw std::invalid_argument("grad check needs at least one seed");
  Recorder rec(tolerance);
  for (std::size_t s = 0; s < seeds; ++s) {
    const std::uint64_t seed = base_seed + s;
    Rng rng = make_rng(seed, {hash_string("grad-check")});
    op_cases(rec, rng);
    loss_cases(rec, rng, seed);
    model_cases(rec, rng, seed);
  }
  GradCheckSuite suite;
  suite.cases = rec.take();
  suite.seeds = seeds;
  suite.tolerance = tolerance;
  for (const auto& c : suite.cases) {
    suite.max_rel_error = std::max(suite.max_rel_error, c.max_rel_error);
    suite.passed = suite.passed && c.passed;
  }
  return suite;
}

}  // namespace fedsynth::ad
