#ifndef HAT_TENSOR_HPP
#define HAT_TENSOR_HPP

// Dense row-major tensor with reverse-mode autodiff.
//
// A Tensor is a cheap shared handle onto a contiguous float buffer plus shape.
// Ops are free functions that produce fresh contiguous outputs; there are no
// lazy views.  When a Tape is active and an input requires gradients, each op
// records a backward closure on the tape.  backward() replays the closures in
// reverse and accumulates into .grad buffers.  The tape lives for exactly one
// forward/backward pair; nothing persists between iterations.
//
// Every op validates shapes up front (ShapeError carries both shapes) and
// checks its output for NaN/Inf (NumericError names the op).  Values are
// immutable after construction except through explicit mutation entry points
// (optimizer writes, gradient-check probes).

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "hat/common.hpp"

namespace hat {

namespace detail {

struct TensorImpl {
  std::vector<std::int64_t> shape;
  std::vector<real> data;
  std::vector<real> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (std::int64_t d : shape) n *= d;
    return n;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;  // undefined handle
  explicit Tensor(std::vector<std::int64_t> shape, bool requires_grad = false);

  static Tensor zeros(std::vector<std::int64_t> shape);
  static Tensor full(std::vector<std::int64_t> shape, real value);
  static Tensor from_data(std::vector<std::int64_t> shape,
                          std::vector<real> values);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<std::int64_t>& shape() const;
  int ndim() const;
  std::int64_t dim(int axis) const;  // negative axis counts from the back
  std::int64_t numel() const;

  real* data();
  const real* data() const;
  real item() const;  // requires numel() == 1

  bool requires_grad() const;
  void set_requires_grad(bool v);

  // Gradient buffer, allocated zero-filled on first touch.
  real* grad_data();
  const std::vector<real>& grad() const;  // empty vector if never touched
  bool has_grad() const;
  void zero_grad();

  // Value copy that does not require gradients and is off every tape.
  Tensor detach_copy() const;

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// ====== Tape ======
//
// RAII activation: constructing a Tape makes it the active tape for the
// current thread, destroying it deactivates it.  One tape per forward pass;
// nesting is an InternalError.  Independent tapes on different threads are
// fine, recording into one tape from several threads is not supported.

class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Runs all recorded closures in reverse order, seeding d(loss)/d(loss) = 1.
  // The loss must be a scalar recorded on this tape.  Callable once.
  void backward(const Tensor& loss);

  std::size_t node_count() const { return nodes_.size(); }

  static Tape* active();

  // Internal: ops call this to register their backward closure.
  void record(std::shared_ptr<detail::TensorImpl> output,
              std::function<void()> backward_fn);

 private:
  struct Node {
    std::shared_ptr<detail::TensorImpl> output;
    std::function<void()> backward_fn;
  };
  std::vector<Node> nodes_;
  bool used_ = false;
};

namespace detail {

// Gradient buffer of an impl, allocated zero-filled on first touch.
inline std::vector<real>& ensure_grad(const std::shared_ptr<TensorImpl>& im) {
  if (im->grad.empty()) im->grad.assign(static_cast<std::size_t>(im->numel()), real(0));
  return im->grad;
}

// True when a tape is active and at least one input wants gradients.
inline bool wants_grad(std::initializer_list<const Tensor*> ins) {
  if (Tape::active() == nullptr) return false;
  for (const Tensor* t : ins) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

}  // namespace detail

// ====== Ops ======
//
// Binary elementwise ops broadcast trailing-aligned shapes (a size-1 dim
// stretches); backward sum-reduces over stretched dims.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double negative_slope);
Tensor sigmoid(const Tensor& a);
Tensor gelu(const Tensor& a);  // exact erf form

// Batched matrix product [..., m, k] x [..., k, n] -> [..., m, n] with
// broadcasting over the leading batch dims.
Tensor matmul(const Tensor& a, const Tensor& b);

// Softmax over the last dim, max-subtracted for stability.
Tensor softmax_lastdim(const Tensor& a);

// Mean over the given axes.  keepdim keeps reduced axes as size 1.
Tensor mean_over(const Tensor& a, std::vector<int> axes, bool keepdim);

// Sum of all elements -> shape [1].
Tensor sum_all(const Tensor& a);

// Mean absolute difference -> shape [1].  Subgradient 0 at exact ties.
Tensor l1_loss(const Tensor& pred, const Tensor& target);

// Per-dim (before, after) zero padding / right-open slicing.
Tensor pad_zero(const Tensor& a,
                const std::vector<std::pair<std::int64_t, std::int64_t>>& pads);
Tensor slice(const Tensor& a, const std::vector<std::int64_t>& starts,
             const std::vector<std::int64_t>& stops);

Tensor permute(const Tensor& a, const std::vector<int>& order);
Tensor reshape(const Tensor& a, std::vector<std::int64_t> shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);

// out[i] = a.flat[idx[i]], idx entry -1 reads 0.  Backward scatter-adds.
// The index vector is shared by pointer; builders hand over ownership.
Tensor take(const Tensor& a,
            std::shared_ptr<const std::vector<std::int64_t>> idx,
            std::vector<std::int64_t> out_shape);

// Swap the last two dims (copying). Convenience over permute for matmul.
Tensor transpose_last2(const Tensor& a);

// Throws NumericError naming `op` if t contains NaN or Inf.
void ensure_finite(const Tensor& t, const char* op);

// Gather-by-function op: out.flat[i] = a.flat[fn(i)], and fn(i) == -1 reads 0.
// fn must be pure: it is re-evaluated by the backward pass (scatter-add, -1
// entries dropped).  Layers build their data-movement ops (im2col, window
// unfold, pixel shuffle, cyclic shift, reflect pad) on top of this.
template <class Fn>
Tensor map_index(const Tensor& a, std::vector<std::int64_t> out_shape,
                 const char* name, Fn fn) {
  if (!a.defined()) throw InternalError(std::string(name) + ": undefined tensor");
  Tensor out(std::move(out_shape));
  const real* x = a.data();
  real* y = out.data();
  const std::int64_t n = out.numel();
  const std::int64_t in_n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t s = fn(i);
    if (s < -1 || s >= in_n) {
      throw InternalError(std::string(name) + ": map index " +
                          std::to_string(s) + " out of range");
    }
    y[i] = s < 0 ? real(0) : x[s];
  }
  ensure_finite(out, name);
  if (detail::wants_grad({&a})) {
    auto ia = a.impl();
    auto io = out.impl();
    out.set_requires_grad(true);
    Tape::active()->record(io, [ia, io, fn]() {
      if (io->grad.empty()) return;
      const real* dy = io->grad.data();
      real* da = detail::ensure_grad(ia).data();
      const std::int64_t n = io->numel();
      for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t s = fn(i);
        if (s >= 0) da[s] += dy[i];
      }
    });
  }
  return out;
}

// ====== Gradient checking ======
//
// Central finite differences against the tape gradient.  `forward` must be a
// deterministic scalar-valued function of the current contents of `leaf`
// (typically a closure over a model whose parameter `leaf` is).  Perturbs
// every component of `leaf`, or a random subset if max_components > 0.

struct GradCheckResult {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::int64_t checked = 0;
};

GradCheckResult grad_check(const std::function<Tensor()>& forward, Tensor leaf,
                           double eps, std::int64_t max_components = 0,
                           Rng* rng = nullptr);

// Shape formatted as e.g. [2, 3, 4] for error messages.
std::string shape_str(const std::vector<std::int64_t>& shape);

}  // namespace hat

#endif  // HAT_TENSOR_HPP
