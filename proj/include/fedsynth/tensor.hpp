#pragma once

// Dense float64 tensors with define-by-run reverse-mode differentiation.
//
// Every op records a graph node when grad mode is enabled and at least one
// input requires a gradient. Backward rules are themselves written with the
// differentiable ops below, so gradients can be differentiated again
// (needed by the R1 penalty).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedsynth::ad {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t numel(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  explicit NonFiniteError(const std::string& op)
      : std::runtime_error("non-finite value produced by op '" + op + "'"),
        op_(op) {}
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

namespace detail {
struct Node;
struct Access;
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor from_data(Shape shape, std::vector<double> data);

  bool defined() const noexcept { return static_cast<bool>(node_); }

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::span<const double> data() const;
  /// Writable view of a leaf's storage (used by optimizers). Throws for
  /// op results.
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t flat) const { return data()[flat]; }

  bool requires_grad() const;
  /// Marks a leaf as trainable. Op results cannot be toggled.
  Tensor& requires_grad_(bool on = true);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  /// Accumulates d(this)/d(leaf) into every reachable trainable leaf.
  /// `this` must be a scalar. A graph can be consumed only once.
  void backward();

  /// Shares storage, carries no history.
  Tensor detach() const;
  /// Deep copy without history.
  Tensor clone() const;

  const char* op_name() const;
  std::uint64_t sequence() const;

  bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend struct detail::Access;
};

// ---------------------------------------------------------------------------
// Grad mode

bool grad_enabled() noexcept;

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Re-enables recording inside a NoGradGuard scope (the R1 penalty needs an
/// input gradient even when the surrounding code only evaluates).
class EnableGradGuard {
 public:
  EnableGradGuard();
  ~EnableGradGuard();
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  bool previous_;
};

/// Multiplications performed by matmul and elementwise mul on this thread.
std::uint64_t multiply_count() noexcept;
void reset_multiply_count() noexcept;

// ---------------------------------------------------------------------------
// Ops. Elementwise binary ops need equal shapes, or one operand with a single
// element (scalar broadcast). Nothing else broadcasts.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope = 0.2);
Tensor abs(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);

/// Sum of all elements, rank-0 result.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// (m x k) * (k x n)
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
/// Places `a` at [start, start + a.shape[axis]) of a zero tensor whose axis
/// has `full_length` entries. Adjoint of slice.
Tensor embed(const Tensor& a, std::size_t axis, std::size_t start, std::size_t full_length);

/// (n x m) -> (n*k x m), each row repeated k times consecutively.
Tensor repeat_rows(const Tensor& a, std::size_t k);
/// (n*k x m) -> (n x m), sums each run of k consecutive rows.
Tensor sum_row_groups(const Tensor& a, std::size_t k);

/// out.flat[i] = a.flat[indices[i]]
Tensor take(const Tensor& a, std::shared_ptr<const std::vector<std::size_t>> indices, Shape out_shape);
/// out = zeros(out_shape); out.flat[indices[i]] += a.flat[i]
Tensor scatter_add(const Tensor& a, std::shared_ptr<const std::vector<std::size_t>> indices, Shape out_shape);

/// (..., H, W, C) -> (..., 2H, 2W, C), half-pixel-centre bilinear with edge
/// clamping.
Tensor bilinear_upsample_2x(const Tensor& map);
Tensor bilinear_upsample_2x_adjoint(const Tensor& map);

/// (..., C) . delta -> (...); delta must be a unit C-vector.
Tensor project_1x1(const Tensor& map, const Tensor& delta);
/// (..., C) -> (..., C'), weight (C x C').
Tensor conv1x1(const Tensor& map, const Tensor& weight);
/// x (n x k) W (k x m) + b (1 x m) broadcast across rows.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }

// ---------------------------------------------------------------------------
// Differentiation

/// Gradients of scalar `output` with respect to `inputs`. With
/// `create_graph` the returned tensors are themselves differentiable.
/// Inputs that `output` does not depend on get zero gradients.
std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& inputs,
                         bool create_graph = false);

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  bool passed = true;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

/// Compares grad() against central differences for every element of x.
/// Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps
/// vanishing gradients from dividing by zero.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double step = 1e-4, double tolerance = 1e-4, double floor = 1e-6);

}  // namespace fedsynth::ad
