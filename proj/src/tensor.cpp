#include "hat/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace hat {

namespace {

using std::int64_t;

thread_local Tape* g_active_tape = nullptr;

// ====== small helpers ======

bool tape_wants(std::initializer_list<const Tensor*> ins) {
  return detail::wants_grad(ins);
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw InternalError(std::string(op) + ": undefined tensor");
}

std::vector<int64_t> contiguous_strides(const std::vector<int64_t>& shape) {
  std::vector<int64_t> s(shape.size());
  int64_t acc = 1;
  for (int d = static_cast<int>(shape.size()) - 1; d >= 0; --d) {
    s[static_cast<std::size_t>(d)] = acc;
    acc *= shape[static_cast<std::size_t>(d)];
  }
  return s;
}

// ====== broadcasting ======
//
// Shapes align from the trailing dim; a size-1 dim (or a missing leading dim)
// stretches.  stride 0 marks stretched dims so one odometer walk visits every
// output element with both input offsets in lockstep.

struct BcPlan {
  std::vector<int64_t> out_shape;
  std::vector<int64_t> stride_a;
  std::vector<int64_t> stride_b;
  int64_t out_numel = 1;
};

BcPlan make_bc(const std::vector<int64_t>& a, const std::vector<int64_t>& b,
               const char* op) {
  const int nd = static_cast<int>(std::max(a.size(), b.size()));
  BcPlan p;
  p.out_shape.assign(static_cast<std::size_t>(nd), 1);
  for (int d = 0; d < nd; ++d) {
    const int da = static_cast<int>(a.size()) - nd + d;
    const int db = static_cast<int>(b.size()) - nd + d;
    const int64_t sa = da >= 0 ? a[static_cast<std::size_t>(da)] : 1;
    const int64_t sb = db >= 0 ? b[static_cast<std::size_t>(db)] : 1;
    if (sa != sb && sa != 1 && sb != 1) {
      throw ShapeError(std::string(op) + ": shapes not broadcastable: " +
                       shape_str(a) + " vs " + shape_str(b));
    }
    p.out_shape[static_cast<std::size_t>(d)] = std::max(sa, sb);
  }
  const auto ca = contiguous_strides(a);
  const auto cb = contiguous_strides(b);
  p.stride_a.assign(static_cast<std::size_t>(nd), 0);
  p.stride_b.assign(static_cast<std::size_t>(nd), 0);
  for (int d = 0; d < nd; ++d) {
    const int da = static_cast<int>(a.size()) - nd + d;
    const int db = static_cast<int>(b.size()) - nd + d;
    if (da >= 0 && a[static_cast<std::size_t>(da)] != 1) {
      p.stride_a[static_cast<std::size_t>(d)] = ca[static_cast<std::size_t>(da)];
    }
    if (db >= 0 && b[static_cast<std::size_t>(db)] != 1) {
      p.stride_b[static_cast<std::size_t>(d)] = cb[static_cast<std::size_t>(db)];
    }
    p.out_numel *= p.out_shape[static_cast<std::size_t>(d)];
  }
  return p;
}

// Calls f(out_linear_index, offset_a, offset_b) for every output element.
template <class F>
void bc_iterate(const BcPlan& p, F&& f) {
  const int nd = static_cast<int>(p.out_shape.size());
  std::vector<int64_t> idx(static_cast<std::size_t>(nd), 0);
  int64_t offa = 0, offb = 0;
  for (int64_t o = 0; o < p.out_numel; ++o) {
    f(o, offa, offb);
    for (int d = nd - 1; d >= 0; --d) {
      const auto du = static_cast<std::size_t>(d);
      ++idx[du];
      offa += p.stride_a[du];
      offb += p.stride_b[du];
      if (idx[du] < p.out_shape[du]) break;
      offa -= p.stride_a[du] * p.out_shape[du];
      offb -= p.stride_b[du] * p.out_shape[du];
      idx[du] = 0;
    }
  }
}

// ====== gemm kernels ======
//
// All kernels accumulate (C +=).  (M, K, N): C is M x N, contraction over K.
// Full tiles run through register-blocked bodies with compile-time bounds so
// the accumulators never touch memory inside the K loop; ragged edges use
// plain loops with the same per-element contraction order, so tiling never
// changes which result a given build computes.

namespace {

constexpr int64_t kTileI = 4;

#if defined(__GNUC__) || defined(__clang__)
#define HAT_VEC_TILES 1
// One hardware vector of reals (32 bytes: 8 floats or 4 doubles).  The lane
// subscripts below compile to broadcast/load/store instructions; arithmetic
// stays lane-wise, so each output element keeps its scalar contraction order.
typedef real vreal __attribute__((vector_size(32)));
constexpr int64_t kLanes = 32 / sizeof(real);
constexpr int64_t kTileJ = 2 * kLanes;

inline vreal vload(const real* p) {
  vreal v;
  __builtin_memcpy(&v, p, sizeof(v));
  return v;
}
inline void vstore(real* p, vreal v) { __builtin_memcpy(p, &v, sizeof(v)); }
inline vreal vsplat(real x) {
  vreal v;
  for (int64_t l = 0; l < kLanes; ++l) v[l] = x;
  return v;
}

// C tile += A rows (stride lda) * B(K,N) columns j0..j0+kTileJ-1.
inline void mm_tile(int64_t K, int64_t N, const real* A, int64_t lda,
                    const real* B, real* C) {
  vreal acc[kTileI][2];
  for (int64_t i = 0; i < kTileI; ++i) {
    acc[i][0] = vload(C + i * N);
    acc[i][1] = vload(C + i * N + kLanes);
  }
  for (int64_t p = 0; p < K; ++p) {
    const vreal b0 = vload(B + p * N);
    const vreal b1 = vload(B + p * N + kLanes);
    for (int64_t i = 0; i < kTileI; ++i) {
      const vreal av = vsplat(A[i * lda + p]);
      acc[i][0] += av * b0;
      acc[i][1] += av * b1;
    }
  }
  for (int64_t i = 0; i < kTileI; ++i) {
    vstore(C + i * N, acc[i][0]);
    vstore(C + i * N + kLanes, acc[i][1]);
  }
}

// Same tile with the left operand transposed: values A[p * lda + i].
inline void mTm_tile(int64_t K, int64_t N, const real* A, int64_t lda,
                     const real* B, real* C) {
  vreal acc[kTileI][2];
  for (int64_t i = 0; i < kTileI; ++i) {
    acc[i][0] = vload(C + i * N);
    acc[i][1] = vload(C + i * N + kLanes);
  }
  for (int64_t p = 0; p < K; ++p) {
    const real* a = A + p * lda;
    const vreal b0 = vload(B + p * N);
    const vreal b1 = vload(B + p * N + kLanes);
    for (int64_t i = 0; i < kTileI; ++i) {
      const vreal av = vsplat(a[i]);
      acc[i][0] += av * b0;
      acc[i][1] += av * b1;
    }
  }
  for (int64_t i = 0; i < kTileI; ++i) {
    vstore(C + i * N, acc[i][0]);
    vstore(C + i * N + kLanes, acc[i][1]);
  }
}
#else
#define HAT_VEC_TILES 0
constexpr int64_t kTileJ = 64 / sizeof(real);
#endif

}  // namespace

void mm_acc(int64_t M, int64_t K, int64_t N, const real* A, const real* B,
            real* C) {
#if HAT_VEC_TILES
  const int64_t mfull = M - M % kTileI;
  const int64_t nfull = N - N % kTileJ;
  for (int64_t i0 = 0; i0 < mfull; i0 += kTileI)
    for (int64_t j0 = 0; j0 < nfull; j0 += kTileJ)
      mm_tile(K, N, A + i0 * K, K, B + j0, C + i0 * N + j0);
#else
  const int64_t mfull = 0, nfull = 0;
#endif
  for (int64_t i = 0; i < M; ++i) {
    const int64_t j_from = i < mfull ? nfull : 0;
    const real* a = A + i * K;
    real* c = C + i * N;
    for (int64_t p = 0; p < K; ++p) {
      const real av = a[p];
      const real* b = B + p * N;
      for (int64_t j = j_from; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C(M,N) += A(M,K) * B(N,K)^T.  Row-by-row dot products defeat wide loads,
// so for real work B is transposed once into a scratch buffer and the tiled
// kernel runs on the copy; the transposition cost is K*N against M*K*N saved.
void mmT_acc(int64_t M, int64_t K, int64_t N, const real* A, const real* B,
             real* C) {
#if HAT_VEC_TILES
  if (M >= kTileI && N >= kTileJ) {
    thread_local std::vector<real> scratch;
    scratch.resize(static_cast<std::size_t>(K) * static_cast<std::size_t>(N));
    real* bt = scratch.data();
    constexpr int64_t kBlk = 16;  // cache-blocked transpose
    for (int64_t j0 = 0; j0 < N; j0 += kBlk) {
      const int64_t jl = std::min(j0 + kBlk, N);
      for (int64_t p0 = 0; p0 < K; p0 += kBlk) {
        const int64_t pl = std::min(p0 + kBlk, K);
        for (int64_t j = j0; j < jl; ++j)
          for (int64_t p = p0; p < pl; ++p) bt[p * N + j] = B[j * K + p];
      }
    }
    mm_acc(M, K, N, A, bt, C);
    return;
  }
#endif
  for (int64_t i = 0; i < M; ++i) {
    const real* a = A + i * K;
    real* c = C + i * N;
    for (int64_t j = 0; j < N; ++j) {
      const real* b = B + j * K;
      real s = 0;
      for (int64_t p = 0; p < K; ++p) s += a[p] * b[p];
      c[j] += s;
    }
  }
}

// C(M,N) += A(K,M)^T * B(K,N)
void mTm_acc(int64_t M, int64_t K, int64_t N, const real* A, const real* B,
             real* C) {
#if HAT_VEC_TILES
  const int64_t mfull = M - M % kTileI;
  const int64_t nfull = N - N % kTileJ;
  for (int64_t i0 = 0; i0 < mfull; i0 += kTileI)
    for (int64_t j0 = 0; j0 < nfull; j0 += kTileJ)
      mTm_tile(K, N, A + i0, M, B + j0, C + i0 * N + j0);
#else
  const int64_t mfull = 0, nfull = 0;
#endif
  for (int64_t p = 0; p < K; ++p) {
    const real* a = A + p * M;
    const real* b = B + p * N;
    for (int64_t i = 0; i < M; ++i) {
      const int64_t j_from = i < mfull ? nfull : 0;
      const real av = a[i];
      real* c = C + i * N;
      for (int64_t j = j_from; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// Elementwise op with custom forward value and local derivative.
template <class Fwd, class Dfn>
Tensor unary_pointwise(const Tensor& a, const char* name, Fwd fwd, Dfn dfn) {
  require_defined(a, name);
  Tensor out(a.shape());
  const real* x = a.data();
  real* y = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) y[i] = fwd(x[i]);
  ensure_finite(out, name);
  if (tape_wants({&a})) {
    out.set_requires_grad(true);
    auto ia = a.impl();
    auto io = out.impl();
    g_active_tape->record(io, [ia, io, dfn]() {
      if (io->grad.empty()) return;
      auto& da = detail::ensure_grad(ia);
      const real* x = ia->data.data();
      const real* dy = io->grad.data();
      const real* yv = io->data.data();
      const int64_t n = ia->numel();
      for (int64_t i = 0; i < n; ++i) da[i] += dy[i] * dfn(x[i], yv[i]);
    });
  }
  return out;
}

}  // namespace

// ====== Tensor ======

Tensor::Tensor(std::vector<int64_t> shape, bool requires_grad) {
  if (shape.empty()) throw ShapeError("tensor rank must be at least 1");
  for (int64_t d : shape) {
    if (d < 1) {
      throw ShapeError("tensor dims must be positive, got " + shape_str(shape));
    }
  }
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data.assign(static_cast<std::size_t>(impl_->numel()), real(0));
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<int64_t> shape, real value) {
  Tensor t(std::move(shape));
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

Tensor Tensor::from_data(std::vector<int64_t> shape, std::vector<real> values) {
  Tensor t(std::move(shape));
  if (static_cast<int64_t>(values.size()) != t.numel()) {
    throw ShapeError("from_data: " + std::to_string(values.size()) +
                     " values for shape " + shape_str(t.shape()));
  }
  t.impl_->data = std::move(values);
  return t;
}

const std::vector<int64_t>& Tensor::shape() const {
  if (!impl_) throw InternalError("shape() on undefined tensor");
  return impl_->shape;
}

int Tensor::ndim() const { return static_cast<int>(shape().size()); }

int64_t Tensor::dim(int axis) const {
  const auto& s = shape();
  const int nd = static_cast<int>(s.size());
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) {
    throw ShapeError("dim(): axis out of range for " + shape_str(s));
  }
  return s[static_cast<std::size_t>(axis)];
}

int64_t Tensor::numel() const { return impl_ ? impl_->numel() : 0; }

real* Tensor::data() {
  if (!impl_) throw InternalError("data() on undefined tensor");
  return impl_->data.data();
}

const real* Tensor::data() const {
  if (!impl_) throw InternalError("data() on undefined tensor");
  return impl_->data.data();
}

real Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item() requires a single-element tensor, got " +
                     shape_str(shape()));
  }
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool v) {
  if (!impl_) throw InternalError("set_requires_grad() on undefined tensor");
  impl_->requires_grad = v;
}

real* Tensor::grad_data() {
  if (!impl_) throw InternalError("grad_data() on undefined tensor");
  return detail::ensure_grad(impl_).data();
}

const std::vector<real>& Tensor::grad() const {
  if (!impl_) throw InternalError("grad() on undefined tensor");
  return impl_->grad;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

void Tensor::zero_grad() {
  if (impl_ && !impl_->grad.empty()) {
    std::fill(impl_->grad.begin(), impl_->grad.end(), real(0));
  }
}

Tensor Tensor::detach_copy() const {
  if (!impl_) throw InternalError("detach_copy() on undefined tensor");
  Tensor t(impl_->shape);
  t.impl_->data = impl_->data;
  return t;
}

// ====== Tape ======

Tape::Tape() {
  if (g_active_tape != nullptr) {
    throw InternalError("a Tape is already active on this thread");
  }
  g_active_tape = this;
}

Tape::~Tape() {
  if (g_active_tape == this) g_active_tape = nullptr;
}

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::shared_ptr<detail::TensorImpl> output,
                  std::function<void()> backward_fn) {
  nodes_.push_back(Node{std::move(output), std::move(backward_fn)});
}

void Tape::backward(const Tensor& loss) {
  if (used_) throw InternalError("backward() called twice on one tape");
  used_ = true;
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward() requires a scalar loss");
  }
  if (!loss.requires_grad()) {
    throw InternalError("backward(): loss does not depend on tracked tensors");
  }
  detail::ensure_grad(loss.impl())[0] = real(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // dead branch
    it->backward_fn();
  }
}

// ====== elementwise ops ======

Tensor add(const Tensor& a, const Tensor& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  BcPlan plan = make_bc(a.shape(), b.shape(), "add");
  Tensor out(plan.out_shape);
  const real* pa = a.data();
  const real* pb = b.data();
  real* po = out.data();
  bc_iterate(plan, [&](int64_t o, int64_t oa, int64_t ob) { po[o] = pa[oa] + pb[ob]; });
  ensure_finite(out, "add");
  if (tape_wants({&a, &b})) {
    out.set_requires_grad(true);
    auto ia = a.impl(), ib = b.impl(), io = out.impl();
    const bool ga = a.requires_grad(), gb = b.requires_grad();
    g_active_tape->record(io, [ia, ib, io, plan, ga, gb]() {
      if (io->grad.empty()) return;
      const real* dy = io->grad.data();
      real* da = ga ? detail::ensure_grad(ia).data() : nullptr;
      real* db = gb ? detail::ensure_grad(ib).data() : nullptr;
      bc_iterate(plan, [&](int64_t o, int64_t oa, int64_t ob) {
        if (da) da[oa] += dy[o];
        if (db) db[ob] += dy[o];
      });
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_defined(a, "sub");
  require_defined(b, "sub");
  BcPlan plan = make_bc(a.shape(), b.shape(), "sub");
  Tensor out(plan.out_shape);
  const real* pa = a.data();
  const real* pb = b.data();
  real* po = out.data();
  bc_iterate(plan, [&](int64_t o, int64_t oa, int64_t ob) { po[o] = pa[oa] - pb[ob]; });
  ensure_finite(out, "sub");
  if (tape_wants({&a, &b})) {
    out.set_requires_grad(true);
    auto ia = a.impl(), ib = b.impl(), io = out.impl();
    const bool ga = a.requires_grad(), gb = b.requires_grad();
    g_active_tape->record(io, [ia, ib, io, plan, ga, gb]() {
      if (io->grad.empty()) return;
      const real* dy = io->grad.data();
      real* da = ga ? detail::ensure_grad(ia).data() : nullptr;
      real* db = gb ? detail::ensure_grad(ib).data() : nullptr;
      bc_iterate(plan, [&](int64_t o, int64_t oa, int64_t ob) {
        if (da) da[oa] += dy[o];
        if (db) db[ob] -= dy[o];
      });
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  BcPlan plan = make_bc(a.shape(), b.shape(), "mul");
  Tensor out(plan.out_shape);
  const real* pa = a.data();
  const real* pb = b.data();
  real* po = out.data();
  bc_iterate(plan, [&](int64_t o, int64_t oa, int64_t ob) { po[o] = pa[oa] * pb[ob]; });
  ensure_finite(out, "mul");
  if (tape_wants({&a, &b})) {
    out.set_requires_grad(true);
    auto ia = a.impl(), ib = b.impl(), io = out.impl();
    const bool ga = a.requires_grad(), gb = b.requires_grad();
    g_active_tape->record(io, [ia, ib, io, plan, ga, gb]() {
      if (io->grad.empty()) return;
      const real* dy = io->grad.data();
      const real* pa = ia->data.data();
      const real* pb = ib->data.data();
      real* da = ga ? detail::ensure_grad(ia).data() : nullptr;
      real* db = gb ? detail::ensure_grad(ib).data() : nullptr;
      bc_iterate(plan, [&](int64_t o, int64_t oa, int64_t ob) {
        if (da) da[oa] += dy[o] * pb[ob];
        if (db) db[ob] += dy[o] * pa[oa];
      });
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double s) {
  const real rs = static_cast<real>(s);
  return unary_pointwise(
      a, "scale", [rs](real x) { return x * rs; },
      [rs](real, real) { return rs; });
}

Tensor add_scalar(const Tensor& a, double s) {
  const real rs = static_cast<real>(s);
  return unary_pointwise(
      a, "add_scalar", [rs](real x) { return x + rs; },
      [](real, real) { return real(1); });
}

Tensor relu(const Tensor& a) {
  return unary_pointwise(
      a, "relu", [](real x) { return x > real(0) ? x : real(0); },
      [](real x, real) { return x > real(0) ? real(1) : real(0); });
}

Tensor leaky_relu(const Tensor& a, double negative_slope) {
  const real k = static_cast<real>(negative_slope);
  return unary_pointwise(
      a, "leaky_relu", [k](real x) { return x > real(0) ? x : k * x; },
      [k](real x, real) { return x > real(0) ? real(1) : k; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_pointwise(
      a, "sigmoid",
      [](real x) {
        // Evaluate from the non-overflowing side.
        if (x >= real(0)) return real(1) / (real(1) + std::exp(-x));
        const real e = std::exp(x);
        return e / (real(1) + e);
      },
      [](real, real y) { return y * (real(1) - y); });
}

Tensor gelu(const Tensor& a) {
  // Exact form: x * Phi(x) with the Gauss CDF, not the tanh approximation.
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  return unary_pointwise(
      a, "gelu",
      [](real x) {
        const double xd = static_cast<double>(x);
        return static_cast<real>(xd * 0.5 * (1.0 + std::erf(xd * kInvSqrt2)));
      },
      [](real x, real) {
        const double xd = static_cast<double>(x);
        const double cdf = 0.5 * (1.0 + std::erf(xd * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * xd * xd);
        return static_cast<real>(cdf + xd * pdf);
      });
}

// ====== matmul ======

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.ndim() < 2 || b.ndim() < 2) {
    throw ShapeError("matmul: operands must have rank >= 2, got " +
                     shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const int64_t m = a.dim(-2), ka = a.dim(-1);
  const int64_t kb = b.dim(-2), n = b.dim(-1);
  if (ka != kb) {
    throw ShapeError("matmul: inner dims differ: " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  }
  std::vector<int64_t> batch_a(a.shape().begin(), a.shape().end() - 2);
  std::vector<int64_t> batch_b(b.shape().begin(), b.shape().end() - 2);
  if (batch_a.empty()) batch_a.push_back(1);
  if (batch_b.empty()) batch_b.push_back(1);
  // Batch strides in units of one matrix.
  BcPlan plan = make_bc(batch_a, batch_b, "matmul");

  std::vector<int64_t> out_shape;
  if (a.ndim() > 2 || b.ndim() > 2) out_shape = plan.out_shape;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor out(out_shape);

  const int64_t mat_a = m * ka, mat_b = ka * n, mat_o = m * n;
  const real* pa = a.data();
  const real* pb = b.data();
  real* po = out.data();
  bc_iterate(plan, [&](int64_t o, int64_t oa, int64_t ob) {
    mm_acc(m, ka, n, pa + oa * mat_a, pb + ob * mat_b, po + o * mat_o);
  });
  ensure_finite(out, "matmul");

  if (tape_wants({&a, &b})) {
    out.set_requires_grad(true);
    auto ia = a.impl(), ib = b.impl(), io = out.impl();
    const bool ga = a.requires_grad(), gb = b.requires_grad();
    const int64_t k = ka;
    g_active_tape->record(io, [ia, ib, io, plan, ga, gb, m, k, n, mat_a, mat_b,
                               mat_o]() {
      if (io->grad.empty()) return;
      const real* dy = io->grad.data();
      const real* pa = ia->data.data();
      const real* pb = ib->data.data();
      real* da = ga ? detail::ensure_grad(ia).data() : nullptr;
      real* db = gb ? detail::ensure_grad(ib).data() : nullptr;
      bc_iterate(plan, [&](int64_t o, int64_t oa, int64_t ob) {
        if (da) mmT_acc(m, n, k, dy + o * mat_o, pb + ob * mat_b, da + oa * mat_a);
        if (db) mTm_acc(k, m, n, pa + oa * mat_a, dy + o * mat_o, db + ob * mat_b);
      });
    });
  }
  return out;
}

// ====== softmax ======

Tensor softmax_lastdim(const Tensor& a) {
  require_defined(a, "softmax_lastdim");
  const int64_t last = a.dim(-1);
  if (last < 1) throw ShapeError("softmax_lastdim: empty last dim");
  Tensor out(a.shape());
  const int64_t rows = a.numel() / last;
  const real* x = a.data();
  real* y = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const real* xr = x + r * last;
    real* yr = y + r * last;
    real mx = xr[0];
    for (int64_t j = 1; j < last; ++j) mx = std::max(mx, xr[j]);
    real s = 0;
    for (int64_t j = 0; j < last; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      s += yr[j];
    }
    const real inv = real(1) / s;
    for (int64_t j = 0; j < last; ++j) yr[j] *= inv;
  }
  ensure_finite(out, "softmax_lastdim");
  if (tape_wants({&a})) {
    out.set_requires_grad(true);
    auto ia = a.impl(), io = out.impl();
    g_active_tape->record(io, [ia, io, rows, last]() {
      if (io->grad.empty()) return;
      const real* yv = io->data.data();
      const real* dy = io->grad.data();
      real* da = detail::ensure_grad(ia).data();
      for (int64_t r = 0; r < rows; ++r) {
        const real* yr = yv + r * last;
        const real* dr = dy + r * last;
        real* ar = da + r * last;
        real dot = 0;
        for (int64_t j = 0; j < last; ++j) dot += dr[j] * yr[j];
        for (int64_t j = 0; j < last; ++j) ar[j] += yr[j] * (dr[j] - dot);
      }
    });
  }
  return out;
}

// ====== reductions ======

Tensor mean_over(const Tensor& a, std::vector<int> axes, bool keepdim) {
  require_defined(a, "mean_over");
  const int nd = a.ndim();
  std::vector<bool> reduced(static_cast<std::size_t>(nd), false);
  if (axes.empty()) throw ShapeError("mean_over: no axes given");
  for (int ax : axes) {
    if (ax < 0) ax += nd;
    if (ax < 0 || ax >= nd) {
      throw ShapeError("mean_over: axis out of range for " + shape_str(a.shape()));
    }
    reduced[static_cast<std::size_t>(ax)] = true;
  }
  int64_t count = 1;
  std::vector<int64_t> out_shape;
  for (int d = 0; d < nd; ++d) {
    if (reduced[static_cast<std::size_t>(d)]) {
      count *= a.shape()[static_cast<std::size_t>(d)];
      if (keepdim) out_shape.push_back(1);
    } else {
      out_shape.push_back(a.shape()[static_cast<std::size_t>(d)]);
    }
  }
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out(out_shape);

  // Walk the input once; the output offset simply skips reduced dims.
  const auto in_shape = a.shape();
  std::vector<int64_t> out_stride(static_cast<std::size_t>(nd), 0);
  {
    int64_t acc = 1;
    for (int d = nd - 1; d >= 0; --d) {
      const auto du = static_cast<std::size_t>(d);
      if (!reduced[du]) {
        out_stride[du] = acc;
        acc *= in_shape[du];
      }
    }
  }
  const real* x = a.data();
  real* y = out.data();
  const real inv = real(1) / static_cast<real>(count);
  {
    std::vector<int64_t> idx(static_cast<std::size_t>(nd), 0);
    int64_t off = 0;
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) {
      y[off] += x[i];
      for (int d = nd - 1; d >= 0; --d) {
        const auto du = static_cast<std::size_t>(d);
        ++idx[du];
        off += out_stride[du];
        if (idx[du] < in_shape[du]) break;
        off -= out_stride[du] * in_shape[du];
        idx[du] = 0;
      }
    }
    const int64_t on = out.numel();
    for (int64_t i = 0; i < on; ++i) y[i] *= inv;
  }
  ensure_finite(out, "mean_over");
  if (tape_wants({&a})) {
    out.set_requires_grad(true);
    auto ia = a.impl(), io = out.impl();
    g_active_tape->record(io, [ia, io, in_shape, out_stride, inv, nd]() {
      if (io->grad.empty()) return;
      const real* dy = io->grad.data();
      real* da = detail::ensure_grad(ia).data();
      std::vector<int64_t> idx(static_cast<std::size_t>(nd), 0);
      int64_t off = 0;
      const int64_t n = ia->numel();
      for (int64_t i = 0; i < n; ++i) {
        da[i] += dy[off] * inv;
        for (int d = nd - 1; d >= 0; --d) {
          const auto du = static_cast<std::size_t>(d);
          ++idx[du];
          off += out_stride[du];
          if (idx[du] < in_shape[du]) break;
          off -= out_stride[du] * in_shape[du];
          idx[du] = 0;
        }
      }
    });
  }
  return out;
}

Tensor sum_all(const Tensor& a) {
  require_defined(a, "sum_all");
  Tensor out({1});
  const real* x = a.data();
  const int64_t n = a.numel();
  double s = 0;
  for (int64_t i = 0; i < n; ++i) s += static_cast<double>(x[i]);
  out.data()[0] = static_cast<real>(s);
  ensure_finite(out, "sum_all");
  if (tape_wants({&a})) {
    out.set_requires_grad(true);
    auto ia = a.impl(), io = out.impl();
    g_active_tape->record(io, [ia, io]() {
      if (io->grad.empty()) return;
      const real dy = io->grad[0];
      real* da = detail::ensure_grad(ia).data();
      const int64_t n = ia->numel();
      for (int64_t i= 0; i < n; ++i) da[i] += dy;
    });
  }
  return out;
}

Tensor l1_loss(const Tensor& pred, const Tensor& target) {
  require_defined(pred, "l1_loss");
  require_defined(target, "l1_loss");
  if (pred.shape() != target.shape()) {
    throw ShapeError("l1_loss: shape mismatch: " + shape_str(pred.shape()) +
                     " vs " + shape_str(target.shape()));
  }
  Tensor out({1});
  const real* p = pred.data();
  const real* t = target.data();
  const int64_t n = pred.numel();
  double s = 0;
  for (int64_t i = 0; i < n; ++i) s += std::abs(static_cast<double>(p[i]) - t[i]);
  out.data()[0] = static_cast<real>(s / static_cast<double>(n));
  ensure_finite(out, "l1_loss");
  if (tape_wants({&pred, &target})) {
    out.set_requires_grad(true);
    auto ip = pred.impl(), it = target.impl(), io = out.impl();
    const bool gp = pred.requires_grad(), gt = target.requires_grad();
    g_active_tape->record(io, [ip, it, io, gp, gt]() {
      if (io->grad.empty()) return;
      const real dy = io->grad[0];
      const real* p = ip->data.data();
      const real* t = it->data.data();
      const int64_t n = ip->numel();
      const real w = dy / static_cast<real>(n);
      real* dp = gp ? detail::ensure_grad(ip).data() : nullptr;
      real* dt = gt ? detail::ensure_grad(it).data() : nullptr;
      for (int64_t i = 0; i < n; ++i) {
        // Subgradient 0 at exact ties.
        const real sgn = p[i] > t[i] ? real(1) : (p[i] < t[i] ? real(-1) : real(0));
        if (dp) dp[i] += w * sgn;
        if (dt) dt[i] -= w * sgn;
      }
    });
  }
  return out;
}

// ====== shape ops ======

Tensor pad_zero(const Tensor& a,
                const std::vector<std::pair<int64_t, int64_t>>& pads) {
  require_defined(a, "pad_zero");
  const int nd = a.ndim();
  if (static_cast<int>(pads.size()) != nd) {
    throw ShapeError("pad_zero: " + std::to_string(pads.size()) +
                     " pad pairs for " + shape_str(a.shape()));
  }
  std::vector<int64_t> out_shape(a.shape());
  for (int d = 0; d < nd; ++d) {
    if (pads[static_cast<std::size_t>(d)].first < 0 ||
        pads[static_cast<std::size_t>(d)].second < 0) {
      throw ShapeError("pad_zero: negative padding");
    }
    out_shape[static_cast<std::size_t>(d)] +=
        pads[static_cast<std::size_t>(d)].first + pads[static_cast<std::size_t>(d)].second;
  }
  Tensor out(out_shape);
  const auto in_shape = a.shape();
  const auto out_strides = contiguous_strides(out_shape);
  // Base offset of the copied block inside the padded tensor.
  int64_t base = 0;
  for (int d = 0; d < nd; ++d) {
    base += pads[static_cast<std::size_t>(d)].first * out_strides[static_cast<std::size_t>(d)];
  }
  const real* x = a.data();
  real* y = out.data();
  {
    std::vector<int64_t> idx(static_cast<std::size_t>(nd), 0);
    int64_t off = base;
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) {
      y[off] = x[i];
      for (int d = nd - 1; d >= 0; --d) {
        const auto du = static_cast<std::size_t>(d);
        ++idx[du];
        off += out_strides[du];
        if (idx[du] < in_shape[du]) break;
        off -= out_strides[du] * in_shape[du];
        idx[du] = 0;
      }
    }
  }
  ensure_finite(out, "pad_zero");
  if (tape_wants({&a})) {
    out.set_requires_grad(true);
    auto ia = a.impl(), io = out.impl();
    g_active_tape->record(io, [ia, io, in_shape, out_strides, base, nd]() {
      if (io->grad.empty()) return;
      const real* dy = io->grad.data();
      real* da = detail::ensure_grad(ia).data();
      std::vector<int64_t> idx(static_cast<std::size_t>(nd), 0);
      int64_t off = base;
      const int64_t n = ia->numel();
      for (int64_t i = 0; i < n; ++i) {
        da[i] += dy[off];
        for (int d = nd - 1; d >= 0; --d) {
          const auto du = static_cast<std::size_t>(d);
          ++idx[du];
          off += out_strides[du];
          if (idx[du] < in_shape[du]) break;
          off -= out_strides[du] * in_shape[du];
          idx[du] = 0;
        }
      }
    });
  }
  return out;
}

Tensor slice(const Tensor& a, const std::vector<int64_t>& starts,
             const std::vector<int64_t>& stops) {
  require_defined(a, "slice");
  const int nd = a.ndim();
  if (static_cast<int>(starts.size()) != nd || static_cast<int>(stops.size()) != nd) {
    throw ShapeError("slice: need one (start, stop) per dim of " +
                     shape_str(a.shape()));
  }
  std::vector<int64_t> out_shape(static_cast<std::size_t>(nd));
  for (int d = 0; d < nd; ++d) {
    const auto du = static_cast<std::size_t>(d);
    const int64_t lo = starts[du], hi = stops[du], n = a.shape()[du];
    if (lo < 0 || hi > n || lo >= hi) {
      throw ShapeError("slice: range [" + std::to_string(lo) + ", " +
                       std::to_string(hi) + ") invalid for dim " +
                       std::to_string(d) + " of " + shape_str(a.shape()));
    }
    out_shape[du] = hi - lo;
  }
  Tensor out(out_shape);
  const auto in_strides = contiguous_strides(a.shape());
  int64_t base = 0;
  for (int d = 0; d < nd; ++d) {
    base += starts[static_cast<std::size_t>(d)] * in_strides[static_cast<std::size_t>(d)];
  }
  const real* x = a.data();
  real* y = out.data();
  {
    std::vector<int64_t> idx(static_cast<std::size_t>(nd), 0);
    int64_t off = base;
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) {
      y[i] = x[off];
      for (int d = nd - 1; d >= 0; --d) {
        const auto du = static_cast<std::size_t>(d);
        ++idx[du];
        off += in_strides[du];
        if (idx[du] < out_shape[du]) break;
        off -= in_strides[du] * out_shape[du];
        idx[du] = 0;
      }
    }
  }
  ensure_finite(out, "slice");
  if (tape_wants({&a})) {
    out.set_requires_grad(true);
    auto ia = a.impl(), io = out.impl();
    g_active_tape->record(io, [ia, io, out_shape, in_strides, base, nd]() {
      if (io->grad.empty()) return;
      const real* dy = io->grad.data();
      real* da = detail::ensure_grad(ia).data();
      std::vector<int64_t> idx(static_cast<std::size_t>(nd), 0);
      int64_t off = base;
      const int64_t n = io->numel();
      for (int64_t i = 0; i < n; ++i) {
        da[off] += dy[i];
        for (int d = nd - 1; d >= 0; --d) {
          const auto du = static_cast<std::size_t>(d);
          ++idx[du];
          off += in_strides[du];
          if (idx[du] < out_shape[du]) break;
          off -= in_strides[du] * out_shape[du];
          idx[du] = 0;
        }
      }
    });
  }
  return out;
}

Tensor permute(const Tensor& a, const std::vector<int>& order) {
  require_defined(a, "permute");
  const int nd = a.ndim();
  if (static_cast<int>(order.size()) != nd) {
    throw ShapeError("permute: order size != rank of " + shape_str(a.shape()));
  }
  std::vector<bool> seen(static_cast<std::size_t>(nd), false);
  for (int o : order) {
    if (o < 0 || o >= nd || seen[static_cast<std::size_t>(o)]) {
      throw ShapeError("permute: invalid axis order");
    }
    seen[static_cast<std::size_t>(o)] = true;
  }
  std::vector<int64_t> out_shape(static_cast<std::size_t>(nd));
  for (int d = 0; d < nd; ++d) {
    out_shape[static_cast<std::size_t>(d)] = a.shape()[static_cast<std::size_t>(order[static_cast<std::size_t>(d)])];
  }
  Tensor out(out_shape);
  const auto in_strides = contiguous_strides(a.shape());
  // Stride of the input along each *output* dim.
  std::vector<int64_t> strides(static_cast<std::size_t>(nd));
  for (int d = 0; d < nd; ++d) {
    strides[static_cast<std::size_t>(d)] = in_strides[static_cast<std::size_t>(order[static_cast<std::size_t>(d)])];
  }
  const real* x = a.data();
  real* y = out.data();
  {
    std::vector<int64_t> idx(static_cast<std::size_t>(nd), 0);
    int64_t off = 0;
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) {
      y[i] = x[off];
      for (int d = nd - 1; d >= 0; --d) {
        const auto du = static_cast<std::size_t>(d);
        ++idx[du];
        off += strides[du];
        if (idx[du] < out_shape[du]) break;
        off -= strides[du] * out_shape[du];
        idx[du] = 0;
      }
    }
  }
  ensure_finite(out, "permute");
  if (tape_wants({&a})) {
    out.set_requires_grad(true);
    auto ia = a.impl(), io = out.impl();
    g_active_tape->record(io, [ia, io, out_shape, strides, nd]() {
      if (io->grad.empty()) return;
      const real* dy = io->grad.data();
      real* da = detail::ensure_grad(ia).data();
      std::vector<int64_t> idx(static_cast<std::size_t>(nd), 0);
      int64_t off = 0;
      const int64_t n = io->numel();
      for (int64_t i = 0; i < n; ++i) {
        da[off] += dy[i];
        for (int d = nd - 1; d >= 0; --d) {
          const auto du = static_cast<std::size_t>(d);
          ++idx[du];
          off += strides[du];
          if (idx[du] < out_shape[du]) break;
          off -= strides[du] * out_shape[du];
          idx[du] = 0;
        }
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, std::vector<int64_t> shape) {
  require_defined(a, "reshape");
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  if (n != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  }
  Tensor out(std::move(shape));
  std::memcpy(out.data(), a.data(), static_cast<std::size_t>(a.numel()) * sizeof(real));
  if (tape_wants({&a})) {
    out.set_requires_grad(true);
    auto ia = a.impl(), io = out.impl();
    g_active_tape->record(io, [ia, io]() {
      if (io->grad.empty()) return;
      real* da = detail::ensure_grad(ia).data();
      const real* dy = io->grad.data();
      const int64_t n = ia->numel();
      for (int64_t i = 0; i < n; ++i) da[i] += dy[i];
    });
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int nd = parts[0].ndim();
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) throw ShapeError("concat: axis out of range");
  std::vector<int64_t> out_shape = parts[0].shape();
  int64_t axis_total = 0;
  for (const Tensor& p : parts) {
    require_defined(p, "concat");
    if (p.ndim() != nd) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < nd; ++d) {
      if (d != axis && p.shape()[static_cast<std::size_t>(d)] != out_shape[static_cast<std::size_t>(d)]) {
        throw ShapeError("concat: shape mismatch: " + shape_str(out_shape) +
                         " vs " + shape_str(p.shape()));
      }
    }
    axis_total += p.dim(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = axis_total;
  Tensor out(out_shape);

  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<std::size_t>(d)];
  for (int d = axis + 1; d < nd; ++d) inner *= out_shape[static_cast<std::size_t>(d)];
  const int64_t out_row = axis_total * inner;

  real* y = out.data();
  int64_t axis_off = 0;
  std::vector<int64_t> part_offsets;
  for (const Tensor& p : parts) {
    part_offsets.push_back(axis_off);
    const int64_t pk = p.dim(axis) * inner;
    const real* x = p.data();
    for (int64_t r = 0; r < outer; ++r) {
      std::memcpy(y + r * out_row + axis_off * inner, x + r * pk,
                  static_cast<std::size_t>(pk) * sizeof(real));
    }
    axis_off += p.dim(axis);
  }
  ensure_finite(out, "concat");

  bool any_grad = false;
  for (const Tensor& p : parts) any_grad = any_grad || p.requires_grad();
  if (Tape::active() != nullptr && any_grad) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<detail::TensorImpl>> imps;
    std::vector<bool> gp;
    std::vector<int64_t> sizes;
    for (const Tensor& p : parts) {
      imps.push_back(p.impl());
      gp.push_back(p.requires_grad());
      sizes.push_back(p.dim(axis));
    }
    auto io = out.impl();
    g_active_tape->record(io, [imps, gp, sizes, part_offsets, io, outer, inner,
                               out_row]() {
      if (io->grad.empty()) return;
      const real* dy = io->grad.data();
      for (std::size_t pi = 0; pi < imps.size(); ++pi) {
        if (!gp[pi]) continue;
        real* da = detail::ensure_grad(imps[pi]).data();
        const int64_t pk = sizes[pi] * inner;
        for (int64_t r = 0; r < outer; ++r) {
          const real* src = dy + r * out_row + part_offsets[pi] * inner;
          real* dst = da + r * pk;
          for (int64_t j = 0; j < pk; ++j) dst[j] += src[j];
        }
      }
    });
  }
  return out;
}

Tensor take(const Tensor& a,
            std::shared_ptr<const std::vector<int64_t>> idx,
            std::vector<int64_t> out_shape) {
  require_defined(a, "take");
  Tensor out(std::move(out_shape));
  if (static_cast<int64_t>(idx->size()) != out.numel()) {
    throw ShapeError("take: index count " + std::to_string(idx->size()) +
                     " != output numel " + std::to_string(out.numel()));
  }
  const real* x = a.data();
  real* y = out.data();
  const int64_t n = out.numel();
  const int64_t in_n = a.numel();
  const int64_t* ix = idx->data();
  for (int64_t i = 0; i < n; ++i) {
    const int64_t s = ix[i];
    if (s < -1 || s >= in_n) {
      throw ShapeError("take: index " + std::to_string(s) + " out of range");
    }
    y[i] = s < 0 ? real(0) : x[s];
  }
  ensure_finite(out, "take");
  if (tape_wants({&a})) {
    out.set_requires_grad(true);
    auto ia = a.impl(), io = out.impl();
    g_active_tape->record(io, [ia, io, idx]() {
      if (io->grad.empty()) return;
      const real* dy = io->grad.data();
      real* da = detail::ensure_grad(ia).data();
      const int64_t* ix = idx->data();
      const int64_t n = io->numel();
      for (int64_t i = 0; i < n; ++i) {
        if (ix[i] >= 0) da[ix[i]] += dy[i];
      }
    });
  }
  return out;
}

Tensor transpose_last2(const Tensor& a) {
  const int nd = a.ndim();
  if (nd < 2) throw ShapeError("transpose_last2: rank < 2");
  std::vector<int> order(static_cast<std::size_t>(nd));
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[static_cast<std::size_t>(nd - 2)], order[static_cast<std::size_t>(nd - 1)]);
  return permute(a, order);
}

void ensure_finite(const Tensor& t, const char* op) {
  const real* x = t.data();
  const int64_t n = t.numel();
  for (int64_t i = 0; i < n; ++i) {
    if (!std::isfinite(static_cast<double>(x[i]))) {
      throw NumericError(std::string(op) + ": non-finite value at flat index " +
                         std::to_string(i));
    }
  }
}

// ====== gradient check ======

GradCheckResult grad_check(const std::function<Tensor()>& forward, Tensor leaf,
                           double eps, int64_t max_components, Rng* rng) {
  if (!leaf.defined() || !leaf.requires_grad()) {
    throw InternalError("grad_check: leaf must require gradients");
  }
  if (Tape::active() != nullptr) {
    throw InternalError("grad_check: must be called with no active tape");
  }
  std::vector<real> analytic;
  {
    Tape tape;
    leaf.zero_grad();
    Tensor y = forward();
    if (y.numel() != 1) {
      throw ShapeError("grad_check: forward() must return a scalar");
    }
    tape.backward(y);
    analytic = leaf.grad();
    if (analytic.empty()) analytic.assign(static_cast<std::size_t>(leaf.numel()), real(0));
  }

  std::vector<int64_t> which;
  const int64_t n = leaf.numel();
  if (max_components > 0 && max_components < n) {
    if (rng == nullptr) throw InternalError("grad_check: sampling needs an rng");
    std::unordered_set<int64_t> seen;
    while (static_cast<int64_t>(seen.size()) < max_components) {
      seen.insert(rng->randint(0, n));
    }
    which.assign(seen.begin(), seen.end());
    std::sort(which.begin(), which.end());
  } else {
    which.resize(static_cast<std::size_t>(n));
    std::iota(which.begin(), which.end(), 0);
  }

  GradCheckResult res;
  real* p = leaf.data();
  for (int64_t i : which) {
    const real saved = p[i];
    p[i] = saved + static_cast<real>(eps);
    const double y1 = static_cast<double>(forward().item());
    p[i] = saved - static_cast<real>(eps);
    const double y2 = static_cast<double>(forward().item());
    p[i] = saved;
    const double num = (y1 - y2) / (2.0 * eps);
    const double ana = static_cast<double>(analytic[static_cast<std::size_t>(i)]);
    const double abs_err = std::abs(ana - num);
    const double rel = abs_err / (std::abs(ana) + std::abs(num) + 1e-12);
    res.max_rel_err = std::max(res.max_rel_err, rel);
    res.max_abs_err = std::max(res.max_abs_err, abs_err);
    ++res.checked;
  }
  return res;
}

std::string shape_str(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

}  // namespace hat
