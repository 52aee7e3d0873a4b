#include "fedsynth/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <optional>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace fedsynth::ad {

using BackwardFn = std::function<std::vector<Tensor>(const Tensor& out, const Tensor& grad_out)>;

namespace detail {

struct Node {
  Shape shape;
  std::shared_ptr<std::vector<double>> data;
  bool requires_grad = false;
  bool has_grad = false;
  bool consumed = false;
  std::vector<double> grad;
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<Tensor> inputs;
  BackwardFn backward;
};

struct Access {
  static const std::shared_ptr<Node>& node(const Tensor& t) { return t.node_; }
  static Tensor wrap(std::shared_ptr<Node> n) { return Tensor(std::move(n)); }
};

}  // namespace detail

namespace {

using detail::Access;
using detail::Node;

std::atomic<std::uint64_t> g_sequence{0};
thread_local bool t_grad_enabled = true;
thread_local std::uint64_t t_multiplies = 0;

std::shared_ptr<Node> new_node(Shape shape, std::vector<double> data) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::make_shared<std::vector<double>>(std::move(data));
  node->seq = g_sequence.fetch_add(1, std::memory_order_relaxed);
  return node;
}

const Node& N(const Tensor& t) {
  const auto& n = Access::node(t);
  if (!n) throw std::logic_error("use of an undefined tensor");
  return *n;
}

const std::vector<double>& D(const Tensor& t) { return *N(t).data; }

void check_finite(const char* op, const std::vector<double>& values) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NonFiniteError(op);
  }
}

Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                   std::vector<Tensor> inputs, BackwardFn backward) {
  check_finite(op, values);
  auto node = new_node(std::move(shape), std::move(values));
  node->op = op;
  bool track = t_grad_enabled &&
               std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (track) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Access::wrap(std::move(node));
}

[[noreturn]] void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

// Reduces a broadcast gradient back onto a single-element operand.
Tensor unbroadcast(const Tensor& g, const Shape& target) {
  if (g.shape() == target) return g;
  return reshape(sum(g), target);
}

enum class Broadcast { none, left, right };

Broadcast broadcast_kind(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Broadcast::none;
  if (a.numel() == 1) return Broadcast::left;
  if (b.numel() == 1) return Broadcast::right;
  shape_mismatch(op, a.shape(), b.shape());
}

template <typename F>
std::vector<double> binary_values(const Tensor& a, const Tensor& b, Broadcast kind, F&& f) {
  const auto& x = D(a);
  const auto& y = D(b);
  std::vector<double> out;
  switch (kind) {
    case Broadcast::none:
      out.resize(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i], y[i]);
      break;
    case Broadcast::left:
      out.resize(y.size());
      for (std::size_t i = 0; i < y.size(); ++i) out[i] = f(x[0], y[i]);
      break;
    case Broadcast::right:
      out.resize(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i], y[0]);
      break;
  }
  return out;
}

Shape binary_shape(const Tensor& a, const Tensor& b, Broadcast kind) {
  return kind == Broadcast::left ? b.shape() : a.shape();
}

template <typename F>
std::vector<double> unary_values(const Tensor& a, F&& f) {
  const auto& x = D(a);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

Tensor constant_like(const Tensor& a, std::vector<double> values) {
  return Tensor::from_data(a.shape(), std::move(values));
}

// Splits a shape around `axis` into (outer, axis length, inner).
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t length = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.length = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

struct Tap {
  std::size_t i0;
  std::size_t i1;
  double w0;
  double w1;
};

std::vector<Tap> upsample_taps(std::size_t n) {
  std::vector<Tap> taps(2 * n);
  for (std::size_t o = 0; o < 2 * n; ++o) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > n - 1) i0 = n - 1;
    std::size_t i1 = std::min(i0 + 1, n - 1);
    double frac = src - static_cast<double>(i0);
    taps[o] = {i0, i1, 1.0 - frac, frac};
  }
  return taps;
}

// Applies the separable upsampling operator (adjoint=false) or its transpose.
std::vector<double> upsample_apply(const std::vector<double>& in, std::size_t batch, std::size_t h,
                                   std::size_t w, std::size_t c, bool adjoint) {
  auto ty = upsample_taps(h);
  auto tx = upsample_taps(w);
  std::size_t oh = 2 * h;
  std::size_t ow = 2 * w;
  std::vector<double> out(adjoint ? batch * h * w * c : batch * oh * ow * c, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t lo = b * h * w * c;
    const std::size_t hi = b * oh * ow * c;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const Tap& y = ty[oy];
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const Tap& x = tx[ox];
        const double w00 = y.w0 * x.w0, w01 = y.w0 * x.w1, w10 = y.w1 * x.w0, w11 = y.w1 * x.w1;
        const std::size_t p00 = lo + (y.i0 * w + x.i0) * c;
        const std::size_t p01 = lo + (y.i0 * w + x.i1) * c;
        const std::size_t p10 = lo + (y.i1 * w + x.i0) * c;
        const std::size_t p11 = lo + (y.i1 * w + x.i1) * c;
        const std::size_t q = hi + (oy * ow + ox) * c;
        for (std::size_t k = 0; k < c; ++k) {
          if (!adjoint) {
            out[q + k] = w00 * in[p00 + k] + w01 * in[p01 + k] + w10 * in[p10 + k] + w11 * in[p11 + k];
          } else {
            const double g = in[q + k];
            out[p00 + k] += w00 * g;
            out[p01 + k] += w01 * g;
            out[p10 + k] += w10 * g;
            out[p11 + k] += w11 * g;
          }
        }
      }
    }
  }
  return out;
}

struct MapDims {
  std::size_t batch = 1;
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t c = 0;
};

MapDims map_dims(const char* op, const Shape& s) {
  if (s.size() < 3) throw ShapeError(std::string(op) + ": expected (..., H, W, C), got " + to_string(s));
  MapDims d;
  for (std::size_t i = 0; i + 3 < s.size(); ++i) d.batch *= s[i];
  d.h = s[s.size() - 3];
  d.w = s[s.size() - 2];
  d.c = s[s.size() - 1];
  if (d.h == 0 || d.w == 0) throw ShapeError(std::string(op) + ": empty map " + to_string(s));
  return d;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }
Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value) {
  std::size_t n = ad::numel(shape);
  return Tensor(new_node(std::move(shape), std::vector<double>(n, value)));
}

Tensor Tensor::scalar(double value) { return Tensor(new_node({}, {value})); }

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
  if (ad::numel(shape) != data.size()) {
    throw ShapeError("from_data: shape " + to_string(shape) + " holds " + std::to_string(ad::numel(shape)) +
                     " values, got " + std::to_string(data.size()));
  }
  return Tensor(new_node(std::move(shape), std::move(data)));
}

const Shape& Tensor::shape() const { return N(*this).shape; }
std::size_t Tensor::numel() const { return D(*this).size(); }
std::span<const double> Tensor::data() const { return D(*this); }

std::span<double> Tensor::mutable_data() {
  if (!is_leaf()) throw std::logic_error("mutable_data() on the result of op '" + std::string(op_name()) + "'");
  return *node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return D(*this)[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::requires_grad_(bool on) {
  if (!is_leaf()) throw std::logic_error("requires_grad_() on a non-leaf tensor");
  node_->requires_grad = on;
  return *this;
}

bool Tensor::is_leaf() const { return !N(*this).backward; }
bool Tensor::has_grad() const { return N(*this).has_grad; }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw std::logic_error("tensor has no gradient");
  return node_->grad;
}

void Tensor::zero_grad() {
  auto& n = *Access::node(*this);
  n.has_grad = false;
  n.grad.clear();
}

Tensor Tensor::detach() const {
  const auto& n = N(*this);
  auto node = std::make_shared<Node>();
  node->shape = n.shape;
  node->data = n.data;
  node->seq = g_sequence.fetch_add(1, std::memory_order_relaxed);
  return Tensor(std::move(node));
}

Tensor Tensor::clone() const { return from_data(shape(), std::vector<double>(D(*this))); }

const char* Tensor::op_name() const { return N(*this).op; }
std::uint64_t Tensor::sequence() const { return N(*this).seq; }

bool grad_enabled() noexcept { return t_grad_enabled; }
NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
EnableGradGuard::EnableGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = true; }
EnableGradGuard::~EnableGradGuard() { t_grad_enabled = previous_; }

std::uint64_t multiply_count() noexcept { return t_multiplies; }
void reset_multiply_count() noexcept { t_multiplies = 0; }

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  auto kind = broadcast_kind("add", a, b);
  auto values = binary_values(a, b, kind, [](double x, double y) { return x + y; });
  Shape sa = a.shape(), sb = b.shape();
  return make_result("add", binary_shape(a, b, kind), std::move(values), {a, b},
                     [sa, sb](const Tensor&, const Tensor& g) {
                       return std::vector<Tensor>{unbroadcast(g, sa), unbroadcast(g, sb)};
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  auto kind = broadcast_kind("sub", a, b);
  auto values = binary_values(a, b, kind, [](double x, double y) { return x - y; });
  Shape sa = a.shape(), sb = b.shape();
  return make_result("sub", binary_shape(a, b, kind), std::move(values), {a, b},
                     [sa, sb](const Tensor&, const Tensor& g) {
                       return std::vector<Tensor>{unbroadcast(g, sa), unbroadcast(neg(g), sb)};
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  auto kind = broadcast_kind("mul", a, b);
  auto values = binary_values(a, b, kind, [](double x, double y) { return x * y; });
  t_multiplies += values.size();
  return make_result("mul", binary_shape(a, b, kind), std::move(values), {a, b},
                     [a, b](const Tensor&, const Tensor& g) {
                       return std::vector<Tensor>{
                           a.requires_grad() ? unbroadcast(mul(g, b), a.shape()) : Tensor(),
                           b.requires_grad() ? unbroadcast(mul(g, a), b.shape()) : Tensor()};
                     });
}

Tensor div(const Tensor& a, const Tensor& b) {
  auto kind = broadcast_kind("div", a, b);
  auto values = binary_values(a, b, kind, [](double x, double y) { return x / y; });
  return make_result("div", binary_shape(a, b, kind), std::move(values), {a, b},
                     [a, b](const Tensor& out, const Tensor& g) {
                       Tensor ga = div(g, b);
                       Tensor gb = neg(div(mul(g, out), b));
                       return std::vector<Tensor>{unbroadcast(ga, a.shape()), unbroadcast(gb, b.shape())};
                     });
}

Tensor neg(const Tensor& a) {
  return make_result("neg", a.shape(), unary_values(a, [](double x) { return -x; }), {a},
                     [](const Tensor&, const Tensor& g) { return std::vector<Tensor>{neg(g)}; });
}

Tensor scale(const Tensor& a, double factor) {
  return make_result("scale", a.shape(), unary_values(a, [factor](double x) { return x * factor; }), {a},
                     [factor](const Tensor&, const Tensor& g) { return std::vector<Tensor>{scale(g, factor)}; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return make_result("add_scalar", a.shape(), unary_values(a, [value](double x) { return x + value; }), {a},
                     [](const Tensor&, const Tensor& g) { return std::vector<Tensor>{g}; });
}

Tensor sin(const Tensor& a) {
  return make_result("sin", a.shape(), unary_values(a, [](double x) { return std::sin(x); }), {a},
                     [a](const Tensor&, const Tensor& g) { return std::vector<Tensor>{mul(g, cos(a))}; });
}

Tensor cos(const Tensor& a) {
  return make_result("cos", a.shape(), unary_values(a, [](double x) { return std::cos(x); }), {a},
                     [a](const Tensor&, const Tensor& g) { return std::vector<Tensor>{neg(mul(g, sin(a)))}; });
}

Tensor exp(const Tensor& a) {
  return make_result("exp", a.shape(), unary_values(a, [](double x) { return std::exp(x); }), {a},
                     [](const Tensor& out, const Tensor& g) { return std::vector<Tensor>{mul(g, out)}; });
}

Tensor log(const Tensor& a) {
  return make_result("log", a.shape(), unary_values(a, [](double x) { return std::log(x); }), {a},
                     [a](const Tensor&, const Tensor& g) { return std::vector<Tensor>{div(g, a)}; });
}

Tensor softplus(const Tensor& a) {
  auto f = [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); };
  return make_result("softplus", a.shape(), unary_values(a, f), {a},
                     [a](const Tensor&, const Tensor& g) { return std::vector<Tensor>{mul(g, sigmoid(a))}; });
}

Tensor sigmoid(const Tensor& a) {
  auto f = [](double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
  };
  return make_result("sigmoid", a.shape(), unary_values(a, f), {a},
                     [](const Tensor& out, const Tensor& g) {
                       // g * s * (1 - s)
                       Tensor one_minus = add_scalar(neg(out), 1.0);
                       return std::vector<Tensor>{mul(g, mul(out, one_minus))};
                     });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  auto values = unary_values(a, [slope](double x) { return x > 0.0 ? x : slope * x; });
  return make_result("leaky_relu", a.shape(), std::move(values), {a},
                     [a, slope](const Tensor&, const Tensor& g) {
                       Tensor mask = constant_like(a, unary_values(a, [slope](double x) { return x > 0.0 ? 1.0 : slope; }));
                       return std::vector<Tensor>{mul(g, mask)};
                     });
}

Tensor abs(const Tensor& a) {
  return make_result("abs", a.shape(), unary_values(a, [](double x) { return std::fabs(x); }), {a},
                     [a](const Tensor&, const Tensor& g) {
                       Tensor sign = constant_like(
                           a, unary_values(a, [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }));
                       return std::vector<Tensor>{mul(g, sign)};
                     });
}

Tensor square(const Tensor& a) {
  t_multiplies += a.numel();
  return make_result("square", a.shape(), unary_values(a, [](double x) { return x * x; }), {a},
                     [a](const Tensor&, const Tensor& g) { return std::vector<Tensor>{mul(g, scale(a, 2.0))}; });
}

Tensor sqrt(const Tensor& a) {
  return make_result("sqrt", a.shape(), unary_values(a, [](double x) { return std::sqrt(x); }), {a},
                     [](const Tensor& out, const Tensor& g) {
                       return std::vector<Tensor>{div(g, scale(out, 2.0))};
                     });
}

// ---------------------------------------------------------------------------
// Reductions and shape ops

Tensor sum(const Tensor& a) {
  const auto& x = D(a);
  double total = 0.0;
  for (double v : x) total += v;
  Shape sa = a.shape();
  return make_result("sum", {}, {total}, {a}, [sa](const Tensor&, const Tensor& g) {
    return std::vector<Tensor>{mul(Tensor::ones(sa), g)};
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) shape_mismatch("matmul", a.shape(), b.shape());
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  const auto& x = D(a);
  const auto& y = D(b);
  std::vector<double> out(m * n, 0.0);
  std::size_t i = 0;
  // Four output rows per pass share each load of b.
  for (; i + 4 <= m; i += 4) {
    double* r0 = out.data() + i * n;
    double* r1 = r0 + n;
    double* r2 = r1 + n;
    double* r3 = r2 + n;
    for (std::size_t p = 0; p < k; ++p) {
      const double a0 = x[i * k + p], a1 = x[(i + 1) * k + p], a2 = x[(i + 2) * k + p], a3 = x[(i + 3) * k + p];
      const double* col = y.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double b = col[j];
        r0[j] += a0 * b;
        r1[j] += a1 * b;
        r2[j] += a2 * b;
        r3[j] += a3 * b;
      }
    }
  }
  for (; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = x[i * k + p];
      const double* col = y.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += s * col[j];
    }
  }
  t_multiplies += m * k * n;
  return make_result("matmul", {m, n}, std::move(out), {a, b}, [a, b](const Tensor&, const Tensor& g) {
    return std::vector<Tensor>{a.requires_grad() ? matmul(g, transpose(b)) : Tensor(),
                               b.requires_grad() ? matmul(transpose(a), g) : Tensor()};
  });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expected a matrix, got " + to_string(a.shape()));
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  const auto& x = D(a);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  return make_result("transpose", {n, m}, std::move(out), {a},
                     [](const Tensor&, const Tensor& g) { return std::vector<Tensor>{transpose(g)}; });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (ad::numel(shape) != a.numel()) shape_mismatch("reshape", a.shape(), shape);
  Shape sa = a.shape();
  return make_result("reshape", std::move(shape), std::vector<double>(D(a)), {a},
                     [sa](const Tensor&, const Tensor& g) { return std::vector<Tensor>{reshape(g, sa)}; });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + to_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) shape_mismatch("concat", first, s);
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) shape_mismatch("concat", first, s);
    }
    out_shape[axis] += s[axis];
  }
  auto split = split_axis(out_shape, axis);
  std::vector<double> out(ad::numel(out_shape));
  std::size_t offset = 0;
  std::vector<std::size_t> starts;
  for (const auto& p : parts) {
    starts.push_back(offset);
    const auto& x = D(p);
    const std::size_t len = p.shape()[axis];
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(o * len * split.inner), len * split.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * split.length + offset) * split.inner));
    }
    offset += len;
  }
  std::vector<std::size_t> lengths;
  for (const auto& p : parts) lengths.push_back(p.shape()[axis]);
  return make_result("concat", std::move(out_shape), std::move(out), parts,
                     [axis, starts, lengths](const Tensor&, const Tensor& g) {
                       std::vector<Tensor> grads;
                       for (std::size_t i = 0; i < starts.size(); ++i) grads.push_back(slice(g, axis, starts[i], lengths[i]));
                       return grads;
                     });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& s = a.shape();
  if (axis >= s.size() || start + length > s[axis]) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") on axis " + std::to_string(axis) + " of " + to_string(s));
  }
  auto split = split_axis(s, axis);
  Shape out_shape = s;
  out_shape[axis] = length;
  std::vector<double> out(ad::numel(out_shape));
  const auto& x = D(a);
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>((o * split.length + start) * split.inner),
                length * split.inner, out.begin() + static_cast<std::ptrdiff_t>(o * length * split.inner));
  }
  std::size_t full = s[axis];
  return make_result("slice", std::move(out_shape), std::move(out), {a},
                     [axis, start, full](const Tensor&, const Tensor& g) {
                       return std::vector<Tensor>{embed(g, axis, start, full)};
                     });
}

Tensor embed(const Tensor& a, std::size_t axis, std::size_t start, std::size_t full_length) {
  const Shape& s = a.shape();
  if (axis >= s.size() || start + s[axis] > full_length) {
    throw ShapeError("embed: block of " + to_string(s) + " at " + std::to_string(start) + " exceeds length " +
                     std::to_string(full_length));
  }
  Shape out_shape = s;
  out_shape[axis] = full_length;
  auto split = split_axis(out_shape, axis);
  const std::size_t len = s[axis];
  std::vector<double> out(ad::numel(out_shape), 0.0);
  const auto& x = D(a);
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(o * len * split.inner), len * split.inner,
                out.begin() + static_cast<std::ptrdiff_t>((o * full_length + start) * split.inner));
  }
  return make_result("embed", std::move(out_shape), std::move(out), {a},
                     [axis, start, len](const Tensor&, const Tensor& g) {
                       return std::vector<Tensor>{slice(g, axis, start, len)};
                     });
}

Tensor repeat_rows(const Tensor& a, std::size_t k) {
  if (a.rank() != 2 || k == 0) throw ShapeError("repeat_rows: expected a matrix and k > 0, got " + to_string(a.shape()));
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  const auto& x = D(a);
  std::vector<double> out(n * k * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t r = 0; r < k; ++r)
      std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(i * m), m,
                  out.begin() + static_cast<std::ptrdiff_t>((i * k + r) * m));
  return make_result("repeat_rows", {n * k, m}, std::move(out), {a},
                     [k](const Tensor&, const Tensor& g) { return std::vector<Tensor>{sum_row_groups(g, k)}; });
}

Tensor sum_row_groups(const Tensor& a, std::size_t k) {
  if (a.rank() != 2 || k == 0 || a.shape()[0] % k != 0) {
    throw ShapeError("sum_row_groups: rows of " + to_string(a.shape()) + " not divisible by " + std::to_string(k));
  }
  const std::size_t n = a.shape()[0] / k, m = a.shape()[1];
  const auto& x = D(a);
  std::vector<double> out(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t r = 0; r < k; ++r)
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] += x[(i * k + r) * m + j];
  return make_result("sum_row_groups", {n, m}, std::move(out), {a},
                     [k](const Tensor&, const Tensor& g) { return std::vector<Tensor>{repeat_rows(g, k)}; });
}

Tensor take(const Tensor& a, std::shared_ptr<const std::vector<std::size_t>> indices, Shape out_shape) {
  if (ad::numel(out_shape) != indices->size()) shape_mismatch("take", {indices->size()}, out_shape);
  const auto& x = D(a);
  std::vector<double> out(indices->size());
  for (std::size_t i = 0; i < indices->size(); ++i) {
    const std::size_t j = (*indices)[i];
    if (j >= x.size()) throw ShapeError("take: index " + std::to_string(j) + " out of range for " + to_string(a.shape()));
    out[i] = x[j];
  }
  Shape sa = a.shape();
  return make_result("take", std::move(out_shape), std::move(out), {a},
                     [indices, sa](const Tensor&, const Tensor& g) {
                       return std::vector<Tensor>{scatter_add(g, indices, sa)};
                     });
}

Tensor scatter_add(const Tensor& a, std::shared_ptr<const std::vector<std::size_t>> indices, Shape out_shape) {
  if (a.numel() != indices->size()) shape_mismatch("scatter_add", a.shape(), {indices->size()});
  const auto& x = D(a);
  std::vector<double> out(ad::numel(out_shape), 0.0);
  for (std::size_t i = 0; i < indices->size(); ++i) {
    const std::size_t j = (*indices)[i];
    if (j >= out.size()) throw ShapeError("scatter_add: index " + std::to_string(j) + " out of range for " + to_string(out_shape));
    out[j] += x[i];
  }
  Shape sa = a.shape();
  return make_result("scatter_add", std::move(out_shape), std::move(out), {a},
                     [indices, sa](const Tensor&, const Tensor& g) {
                       return std::vector<Tensor>{take(g, indices, sa)};
                     });
}

Tensor bilinear_upsample_2x(const Tensor& map) {
  auto d = map_dims("bilinear_upsample_2x", map.shape());
  Shape out_shape = map.shape();
  out_shape[out_shape.size() - 3] *= 2;
  out_shape[out_shape.size() - 2] *= 2;
  auto out = upsample_apply(D(map), d.batch, d.h, d.w, d.c, false);
  return make_result("bilinear_upsample_2x", std::move(out_shape), std::move(out), {map},
                     [](const Tensor&, const Tensor& g) {
                       return std::vector<Tensor>{bilinear_upsample_2x_adjoint(g)};
                     });
}

Tensor bilinear_upsample_2x_adjoint(const Tensor& map) {
  auto d = map_dims("bilinear_upsample_2x_adjoint", map.shape());
  if (d.h % 2 != 0 || d.w % 2 != 0) throw ShapeError("bilinear_upsample_2x_adjoint: odd map " + to_string(map.shape()));
  Shape out_shape = map.shape();
  out_shape[out_shape.size() - 3] /= 2;
  out_shape[out_shape.size() - 2] /= 2;
  auto out = upsample_apply(D(map), d.batch, d.h / 2, d.w / 2, d.c, true);
  return make_result("bilinear_upsample_2x_adjoint", std::move(out_shape), std::move(out), {map},
                     [](const Tensor&, const Tensor& g) {
                       return std::vector<Tensor>{bilinear_upsample_2x(g)};
                     });
}

Tensor project_1x1(const Tensor& map, const Tensor& delta) {
  const Shape& s = map.shape();
  if (s.empty()) throw ShapeError("project_1x1: map has no channel axis");
  const std::size_t c = s.back();
  if (delta.numel() != c) shape_mismatch("project_1x1", s, delta.shape());
  double norm2 = 0.0;
  for (double v : delta.data()) norm2 += v * v;
  if (std::fabs(std::sqrt(norm2) - 1.0) > 1e-9) {
    throw std::invalid_argument("project_1x1: projection vector is not unit length (norm " +
                                std::to_string(std::sqrt(norm2)) + ")");
  }
  Shape lead(s.begin(), s.end() - 1);
  Tensor flat = reshape(map, {map.numel() / c, c});
  Tensor out = matmul(flat, reshape(delta, {c, 1}));
  return reshape(out, lead);
}

Tensor conv1x1(const Tensor& map, const Tensor& weight) {
  const Shape& s = map.shape();
  if (weight.rank() != 2 || s.empty() || s.back() != weight.shape()[0]) shape_mismatch("conv1x1", s, weight.shape());
  Shape out_shape = s;
  out_shape.back() = weight.shape()[1];
  Tensor flat = reshape(map, {map.numel() / s.back(), s.back()});
  return reshape(matmul(flat, weight), std::move(out_shape));
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  Tensor y = matmul(x, weight);
  if (bias.numel() != y.shape()[1]) shape_mismatch("linear", y.shape(), bias.shape());
  return add(y, repeat_rows(reshape(bias, {1, y.shape()[1]}), y.shape()[0]));
}

// ---------------------------------------------------------------------------
// Backward engine

namespace {

// Reachable tracked nodes, latest first.
std::vector<std::shared_ptr<Node>> reverse_topological(const std::shared_ptr<Node>& root) {
  std::vector<std::shared_ptr<Node>> order;
  std::unordered_set<const Node*> seen;
  std::vector<std::shared_ptr<Node>> stack{root};
  while (!stack.empty()) {
    auto n = std::move(stack.back());
    stack.pop_back();
    if (!n->requires_grad || !seen.insert(n.get()).second) continue;
    for (const auto& in : n->inputs) {
      const auto& child = Access::node(in);
      if (child->requires_grad && !seen.count(child.get())) stack.push_back(child);
    }
    order.push_back(std::move(n));
  }
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a->seq > b->seq; });
  return order;
}

std::unordered_map<const Node*, Tensor> propagate(const Tensor& output, bool create_graph) {
  if (output.numel() != 1) throw ShapeError("backward: loss must be a scalar, got " + to_string(output.shape()));
  std::unordered_map<const Node*, Tensor> grads;
  const auto& root = Access::node(output);
  if (!root->requires_grad) return grads;
  auto order = reverse_topological(root);
  grads.emplace(root.get(), Tensor::ones(root->shape));

  std::optional<NoGradGuard> guard;
  if (!create_graph) guard.emplace();
  for (const auto& node : order) {
    auto it = grads.find(node.get());
    if (it == grads.end() || !node->backward) continue;
    Tensor g = it->second;
    auto input_grads = node->backward(Access::wrap(node), g);
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      const auto& in = node->inputs[i];
      if (!in.requires_grad() || !input_grads[i].defined()) continue;
      const Node* key = Access::node(in).get();
      auto found = grads.find(key);
      if (found == grads.end()) {
        grads.emplace(key, input_grads[i]);
      } else {
        found->second = add(found->second, input_grads[i]);
      }
    }
  }
  return grads;
}

}  // namespace

void Tensor::backward() {
  auto& root = *Access::node(*this);
  if (numel() != 1) throw ShapeError("backward: loss must be a scalar, got " + to_string(shape()));
  if (root.consumed) throw std::logic_error("backward: graph already consumed; rebuild the forward pass");
  root.consumed = true;
  auto grads = propagate(*this, false);
  auto order = reverse_topological(node_);
  for (const auto& node : order) {
    if (node->backward) continue;
    auto it = grads.find(node.get());
    if (it == grads.end()) continue;
    const auto& g = D(it->second);
    if (!node->has_grad) {
      node->grad.assign(g.begin(), g.end());
      node->has_grad = true;
    } else {
      for (std::size_t i = 0; i < g.size(); ++i) node->grad[i] += g[i];
    }
  }
}

std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& inputs, bool create_graph) {
  auto grads = propagate(output, create_graph);
  std::vector<Tensor> result;
  result.reserve(inputs.size());
  for (const auto& in : inputs) {
    auto it = grads.find(Access::node(in).get());
    result.push_back(it == grads.end() ? Tensor::zeros(in.shape()) : it->second);
  }
  return result;
}

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step,
                           double tolerance, double floor) {
  GradCheckReport report;
  Tensor leaf = x.clone();
  leaf.requires_grad_(true);
  Tensor y = f(leaf);
  auto analytic = grad(y, {leaf}, false).front();
  report.analytic.assign(analytic.data().begin(), analytic.data().end());

  std::vector<double> base(x.data().begin(), x.data().end());
  report.numeric.resize(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    auto probe = [&](double delta) {
      std::vector<double> shifted = base;
      shifted[i] += delta;
      return f(Tensor::from_data(x.shape(), std::move(shifted))).item();
    };
    const double numeric = (probe(step) - probe(-step)) / (2.0 * step);
    report.numeric[i] = numeric;
    const double a = report.analytic[i];
    const double abs_err = std::fabs(a - numeric);
    const double rel_err = abs_err / std::max({std::fabs(a), std::fabs(numeric), floor});
    report.max_abs_error = std::max(report.max_abs_error, abs_err);
    if (rel_err > report.max_rel_error) {
      report.max_rel_error = rel_err;
      report.worst_index = i;
    }
    ++report.checked;
  }
  report.passed = report.max_rel_error < tolerance;
  return report;
}

}  // namespace fedsynth::ad
