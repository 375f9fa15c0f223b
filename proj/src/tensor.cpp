#include "mia/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "mia/common.hpp"

namespace mia {

namespace {

thread_local Tape* g_active_tape = nullptr;

// Activation buffers run to a few hundred KB; with the default mmap
// threshold glibc hands them back to the kernel on every free and each step
// re-faults the pages. Keeping them on the heap lets the allocator reuse.
#if defined(__GLIBC__)
const bool g_malloc_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 64 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 64 * 1024 * 1024);
  return true;
}();
#endif

constexpr double kSqrt2 = 1.4142135623730951;
constexpr double kInvSqrt2Pi = 0.3989422804014327;

[[noreturn]] void shape_fail(const std::string& op, const std::string& detail) {
  fail(ErrorClass::shape_error, op + ": " + detail);
}

}  // namespace

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream ss;
  ss << "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) ss << ",";
    ss << shape[i];
  }
  ss << ")";
  return ss.str();
}

// ---------------------------------------------------------------- Tensor

detail::TensorData& Tensor::d() {
  if (!data_) fail(ErrorClass::internal_error, "use of undefined tensor");
  return *data_;
}

const detail::TensorData& Tensor::d() const {
  if (!data_) fail(ErrorClass::internal_error, "use of undefined tensor");
  return *data_;
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  for (int64_t d : shape) {
    if (d <= 0) shape_fail("tensor", "non-positive dimension in " + shape_str(shape));
  }
  Tensor t;
  t.data_ = std::make_shared<detail::TensorData>();
  t.data_->shape = std::move(shape);
  t.data_->values.assign(static_cast<size_t>(shape_numel(t.data_->shape)), value);
  return t;
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    shape_fail("tensor", "value count " + std::to_string(values.size()) +
                             " does not fill shape " + shape_str(shape));
  }
  Tensor t;
  t.data_ = std::make_shared<detail::TensorData>();
  t.data_->shape = std::move(shape);
  t.data_->values = std::move(values);
  return t;
}

Tensor Tensor::scalar(double value) { return from_values({1}, {value}); }

const Shape& Tensor::shape() const { return d().shape; }
int64_t Tensor::numel() const { return static_cast<int64_t>(d().values.size()); }
int64_t Tensor::dim(size_t axis) const { return d().shape.at(axis); }
size_t Tensor::rank() const { return d().shape.size(); }

std::vector<double>& Tensor::values() { return d().values; }
const std::vector<double>& Tensor::values() const { return d().values; }

bool Tensor::requires_grad() const { return data_ && data_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  d().requires_grad = on;
  if (!on) d().grad.clear();
  return *this;
}

bool Tensor::has_grad() const { return data_ && !data_->grad.empty(); }

std::vector<double>& Tensor::grad() {
  auto& dd = d();
  if (dd.grad.empty()) dd.grad.assign(dd.values.size(), 0.0);
  return dd.grad;
}

const std::vector<double>& Tensor::grad_view() const {
  const auto& dd = d();
  if (dd.grad.empty()) fail(ErrorClass::internal_error, "grad_view: no gradient present");
  return dd.grad;
}

void Tensor::zero_grad() { d().grad.clear(); }

void Tensor::accumulate_grad(std::span<const double> g) {
  auto& buf = grad();
  if (g.size() != buf.size()) {
    shape_fail("accumulate_grad", "got " + std::to_string(g.size()) + " values, want " +
                                      std::to_string(buf.size()));
  }
  for (size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

double Tensor::item() const {
  if (numel() != 1) shape_fail("item", "tensor has shape " + shape_str(shape()));
  return d().values[0];
}

// ------------------------------------------------------------------ Tape

Tape::Tape() {
  prev_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::function<void()> adjoint) {
  entries_.push_back(std::move(adjoint));
}

void Tape::clear() { entries_.clear(); }

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    fail(ErrorClass::shape_error,
         "backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    fail(ErrorClass::domain_error, "backward: loss was not produced through recorded primitives");
  }
  Tensor seed = loss;
  seed.grad()[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
}

// ------------------------------------------------------------------- ops

namespace ops {

namespace {

bool recording(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::active()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

void mark_and_record(Tensor& out, std::function<void()> adjoint) {
  out.set_requires_grad(true);
  Tape::active()->record(std::move(adjoint));
}

// Broadcast pattern for elementwise binary ops.
enum class Bcast { same, rhs_scalar, lhs_scalar, rhs_row };

Bcast resolve_bcast(const std::string& op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Bcast::same;
  if (b.numel() == 1) return Bcast::rhs_scalar;
  if (a.numel() == 1) return Bcast::lhs_scalar;
  if (b.rank() == 1 && a.rank() >= 1 && a.shape().back() == b.dim(0)) return Bcast::rhs_row;
  shape_fail(op, "incompatible shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

struct RowView {
  int64_t rows;
  int64_t cols;
};

RowView rows_lastdim(const Tensor& x) {
  const int64_t cols = x.shape().back();
  return {x.numel() / cols, cols};
}

// Runs fn(i, ai, bi) over the broadcast-resolved element pairing with the
// index arithmetic hoisted out of the hot loop per pattern.
template <typename Fn>
void for_each_pair(Bcast bc, int64_t n, int64_t row, Fn fn) {
  switch (bc) {
    case Bcast::same:
      for (int64_t i = 0; i < n; ++i) fn(i, i, i);
      break;
    case Bcast::rhs_scalar:
      for (int64_t i = 0; i < n; ++i) fn(i, i, 0);
      break;
    case Bcast::lhs_scalar:
      for (int64_t i = 0; i < n; ++i) fn(i, 0, i);
      break;
    case Bcast::rhs_row:
      for (int64_t i = 0; i < n; i += row) {
        for (int64_t j = 0; j < row; ++j) fn(i + j, i + j, j);
      }
      break;
  }
}

// f(a_i, b_i) and the two partials, evaluated elementwise with broadcast.
template <typename F, typename DA, typename DB>
Tensor binary_op(const std::string& name, const Tensor& a, const Tensor& b, F f, DA dfa, DB dfb) {
  const Bcast bc = resolve_bcast(name, a, b);
  const Tensor& big = (bc == Bcast::lhs_scalar) ? b : a;
  Tensor out = Tensor::zeros(big.shape());
  auto& ov = out.values();
  const auto& av = a.values();
  const auto& bv = b.values();
  const int64_t n = out.numel();
  const int64_t row = (bc == Bcast::rhs_row) ? b.numel() : 0;

  for_each_pair(bc, n, row,
                [&](int64_t i, int64_t ia, int64_t ib) { ov[i] = f(av[ia], bv[ib]); });

  if (recording({&a, &b})) {
    mark_and_record(out, [a = a, b = b, out = out, bc, row, dfa, dfb]() mutable {
      if (!out.has_grad()) return;
      const auto& og = out.grad_view();
      const auto& av2 = a.values();
      const auto& bv2 = b.values();
      const int64_t n2 = out.numel();
      if (a.requires_grad()) {
        auto& ga = a.grad();
        for_each_pair(bc, n2, row, [&](int64_t i, int64_t ia, int64_t ib) {
          ga[ia] += og[i] * dfa(av2[ia], bv2[ib]);
        });
      }
      if (b.requires_grad()) {
        auto& gb = b.grad();
        for_each_pair(bc, n2, row, [&](int64_t i, int64_t ia, int64_t ib) {
          gb[ib] += og[i] * dfb(av2[ia], bv2[ib]);
        });
      }
    });
  }
  return out;
}

template <typename F, typename DF>
Tensor unary_op(const std::string&, const Tensor& x, F f, DF df) {
  Tensor out = Tensor::zeros(x.shape());
  auto& ov = out.values();
  const auto& xv = x.values();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) ov[i] = f(xv[i]);

  if (recording({&x})) {
    mark_and_record(out, [x = x, out = out, df]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      const auto& og = out.grad_view();
      const auto& xv2 = x.values();
      const auto& ov2 = out.values();
      auto& gx = x.grad();
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += og[i] * df(xv2[i], ov2[i]);
    });
  }
  return out;
}

// C (M,N) = op(A) * op(B), with physical layouts A: tA ? (K,M) : (M,K),
// B: tB ? (N,K) : (K,N). Transposed operands are materialized into scratch
// so the kernel always runs the vectorizable ikj loop; every output element
// accumulates over k in a fixed order, so results are bit-identical run to
// run.
const double* transpose_into(std::vector<double>& scratch, const double* src, int64_t rows,
                             int64_t cols) {
  scratch.resize(static_cast<size_t>(rows * cols));
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t c = 0; c < cols; ++c) scratch[c * rows + r] = src[r * cols + c];
  }
  return scratch.data();
}

inline void axpy64(double a, const double* __restrict b, double* __restrict c) {
  for (int j = 0; j < 64; ++j) c[j] += a * b[j];
}

void gemm(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N,
          bool tA, bool tB, bool accumulate) {
  thread_local std::vector<double> a_scratch, b_scratch, panel_scratch;
  if (tA) A = transpose_into(a_scratch, A, K, M);
  if (tB) B = transpose_into(b_scratch, B, N, K);
  if (!accumulate) std::fill(C, C + M * N, 0.0);
  // Column panels keep the active B block L1-resident; per-element
  // accumulation order over k is unchanged by the blocking. Power-of-two
  // row strides alias L1 sets badly, so those panels are packed first.
  constexpr int64_t kPanel = 64;
  const bool pack = (N % 256 == 0);
  if (pack) panel_scratch.resize(static_cast<size_t>(K * kPanel));
  double* const pb = pack ? panel_scratch.data() : nullptr;
  for (int64_t j0 = 0; j0 < N; j0 += kPanel) {
    const int64_t j1 = std::min(N, j0 + kPanel);
    const int64_t w = j1 - j0;
    const double* bbase = B + j0;
    int64_t bstride = N;
    if (pack) {
      for (int64_t k = 0; k < K; ++k) {
        const double* src = B + k * N + j0;
        double* dst = pb + k * kPanel;
        for (int64_t j = 0; j < w; ++j) dst[j] = src[j];
      }
      bbase = pb;
      bstride = kPanel;
    }
    if (w == kPanel) {
      for (int64_t i = 0; i < M; ++i) {
        double* ci = C + i * N + j0;
        const double* ai = A + i * K;
        for (int64_t k = 0; k < K; ++k) axpy64(ai[k], bbase + k * bstride, ci);
      }
    } else {
      for (int64_t i = 0; i < M; ++i) {
        double* ci = C + i * N + j0;
        const double* ai = A + i * K;
        for (int64_t k = 0; k < K; ++k) {
          const double a = ai[k];
          const double* bk = bbase + k * bstride;
          for (int64_t j = 0; j < w; ++j) ci[j] += a * bk[j];
        }
      }
    }
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double y : b.values()) {
    if (y == 0.0) fail(ErrorClass::domain_error, "div: division by zero");
  }
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor neg(const Tensor& x) {
  return unary_op(
      "neg", x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      "exp", x, [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  for (double v : x.values()) {
    if (v <= 0.0) {
      fail(ErrorClass::domain_error, "log: non-positive input " + std::to_string(v));
    }
  }
  return unary_op(
      "log", x, [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

Tensor abs(const Tensor& x) {
  return unary_op(
      "abs", x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor clamp_min(const Tensor& x, double lo) {
  return unary_op(
      "clamp_min", x, [lo](double v) { return v < lo ? lo : v; },
      [lo](double v, double) { return v >= lo ? 1.0 : 0.0; });
}

Tensor clamp_max(const Tensor& x, double hi) {
  return unary_op(
      "clamp_max", x, [hi](double v) { return v > hi ? hi : v; },
      [hi](double v, double) { return v <= hi ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  return unary_op(
      "gelu", x,
      [](double v) { return 0.5 * v * (1.0 + std::erf(v / kSqrt2)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v / kSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        return cdf + v * pdf;
      });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  if (a.rank() != 2 || b.rank() != 2) {
    shape_fail("matmul", "rank-2 tensors required, got " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
  }
  const int64_t M = trans_a ? a.dim(1) : a.dim(0);
  const int64_t Ka = trans_a ? a.dim(0) : a.dim(1);
  const int64_t Kb = trans_b ? b.dim(1) : b.dim(0);
  const int64_t N = trans_b ? b.dim(0) : b.dim(1);
  if (Ka != Kb) {
    shape_fail("matmul", "inner dimensions " + std::to_string(Ka) + " vs " + std::to_string(Kb) +
                             " for " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros({M, N});
  gemm(a.values().data(), b.values().data(), out.values().data(), M, Ka, N, trans_a, trans_b,
       false);

  if (recording({&a, &b})) {
    const int64_t K = Ka;
    mark_and_record(out, [a = a, b = b, out = out, M, K, N, trans_a, trans_b]() mutable {
      if (!out.has_grad()) return;
      const double* dC = out.grad_view().data();
      if (a.requires_grad()) {
        double* dA = a.grad().data();
        if (!trans_a && !trans_b) gemm(dC, b.values().data(), dA, M, N, K, false, true, true);
        else if (!trans_a && trans_b) gemm(dC, b.values().data(), dA, M, N, K, false, false, true);
        else if (trans_a && !trans_b) gemm(b.values().data(), dC, dA, K, N, M, false, true, true);
        else gemm(b.values().data(), dC, dA, K, N, M, true, true, true);
      }
      if (b.requires_grad()) {
        double* dB = b.grad().data();
        if (!trans_a && !trans_b) gemm(a.values().data(), dC, dB, K, M, N, true, false, true);
        else if (!trans_a && trans_b) gemm(dC, a.values().data(), dB, N, M, K, true, false, true);
        else if (trans_a && !trans_b) gemm(a.values().data(), dC, dB, K, M, N, false, false, true);
        else gemm(dC, a.values().data(), dB, N, M, K, true, true, true);
      }
    });
  }
  return out;
}

Tensor softmax_lastdim(const Tensor& x) {
  const auto [rows, cols] = rows_lastdim(x);
  Tensor out = Tensor::zeros(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * cols;
    double* yr = ov.data() + r * cols;
    double m = xr[0];
    for (int64_t j = 1; j < cols; ++j) m = std::max(m, xr[j]);
    double z = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      yr[j] = std::exp(xr[j] - m);
      z += yr[j];
    }
    for (int64_t j = 0; j < cols; ++j) yr[j] /= z;
  }

  if (recording({&x})) {
    mark_and_record(out, [x = x, out = out, rows = rows, cols = cols]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      const auto& og = out.grad_view();
      const auto& ov2 = out.values();
      auto& gx = x.grad();
      for (int64_t r = 0; r < rows; ++r) {
        const double* y = ov2.data() + r * cols;
        const double* dy = og.data() + r * cols;
        double dot = 0.0;
        for (int64_t j = 0; j < cols; ++j) dot += dy[j] * y[j];
        double* dx = gx.data() + r * cols;
        for (int64_t j = 0; j < cols; ++j) dx[j] += y[j] * (dy[j] - dot);
      }
    });
  }
  return out;
}

Tensor log_softmax_lastdim(const Tensor& x) {
  const auto [rows, cols] = rows_lastdim(x);
  Tensor out = Tensor::zeros(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * cols;
    double* yr = ov.data() + r * cols;
    double m = xr[0];
    for (int64_t j = 1; j < cols; ++j) m = std::max(m, xr[j]);
    double z = 0.0;
    for (int64_t j = 0; j < cols; ++j) z += std::exp(xr[j] - m);
    const double logz = m + std::log(z);
    for (int64_t j = 0; j < cols; ++j) yr[j] = xr[j] - logz;
  }

  if (recording({&x})) {
    mark_and_record(out, [x = x, out = out, rows = rows, cols = cols]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      const auto& og = out.grad_view();
      const auto& ov2 = out.values();
      auto& gx = x.grad();
      for (int64_t r = 0; r < rows; ++r) {
        const double* y = ov2.data() + r * cols;
        const double* dy = og.data() + r * cols;
        double s = 0.0;
        for (int64_t j = 0; j < cols; ++j) s += dy[j];
        double* dx = gx.data() + r * cols;
        for (int64_t j = 0; j < cols; ++j) dx[j] += dy[j] - std::exp(y[j]) * s;
      }
    });
  }
  return out;
}

Tensor logsumexp_lastdim(const Tensor& x) {
  const auto [rows, cols] = rows_lastdim(x);
  Tensor out = Tensor::zeros({rows, 1});
  const auto& xv = x.values();
  auto& ov = out.values();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * cols;
    double m = xr[0];
    for (int64_t j = 1; j < cols; ++j) m = std::max(m, xr[j]);
    double z = 0.0;
    for (int64_t j = 0; j < cols; ++j) z += std::exp(xr[j] - m);
    ov[r] = m + std::log(z);
  }

  if (recording({&x})) {
    mark_and_record(out, [x = x, out = out, rows = rows, cols = cols]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      const auto& og = out.grad_view();
      const auto& ov2 = out.values();
      const auto& xv2 = x.values();
      auto& gx = x.grad();
      for (int64_t r = 0; r < rows; ++r) {
        const double g = og[r];
        if (g == 0.0) continue;
        const double* xr = xv2.data() + r * cols;
        double* dx = gx.data() + r * cols;
        for (int64_t j = 0; j < cols; ++j) dx[j] += g * std::exp(xr[j] - ov2[r]);
      }
    });
  }
  return out;
}

Tensor max_lastdim(const Tensor& x) {
  const auto [rows, cols] = rows_lastdim(x);
  Tensor out = Tensor::zeros({rows, 1});
  std::vector<int64_t> argmax(static_cast<size_t>(rows));
  const auto& xv = x.values();
  auto& ov = out.values();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * cols;
    int64_t best = 0;
    for (int64_t j = 1; j < cols; ++j) {
      if (xr[j] > xr[best]) best = j;
    }
    argmax[static_cast<size_t>(r)] = best;
    ov[r] = xr[best];
  }

  if (recording({&x})) {
    mark_and_record(out, [x = x, out = out, argmax = std::move(argmax), cols = cols]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      const auto& og = out.grad_view();
      auto& gx = x.grad();
      for (size_t r = 0; r < argmax.size(); ++r) {
        gx[static_cast<size_t>(static_cast<int64_t>(r) * cols + argmax[r])] += og[r];
      }
    });
  }
  return out;
}

Tensor layer_norm_lastdim(const Tensor& x, double eps) {
  const auto [rows, cols] = rows_lastdim(x);
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> inv_std(static_cast<size_t>(rows));
  const auto& xv = x.values();
  auto& ov = out.values();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * cols;
    double mu = 0.0;
    for (int64_t j = 0; j < cols; ++j) mu += xr[j];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      const double c = xr[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(r)] = is;
    double* yr = ov.data() + r * cols;
    for (int64_t j = 0; j < cols; ++j) yr[j] = (xr[j] - mu) * is;
  }

  if (recording({&x})) {
    mark_and_record(out,
                    [x = x, out = out, inv_std = std::move(inv_std), rows = rows, cols = cols]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      const auto& og = out.grad_view();
      const auto& ov2 = out.values();
      auto& gx = x.grad();
      const double n = static_cast<double>(cols);
      for (int64_t r = 0; r < rows; ++r) {
        const double* y = ov2.data() + r * cols;
        const double* dy = og.data() + r * cols;
        double mean_dy = 0.0, mean_dyy = 0.0;
        for (int64_t j = 0; j < cols; ++j) {
          mean_dy += dy[j];
          mean_dyy += dy[j] * y[j];
        }
        mean_dy /= n;
        mean_dyy /= n;
        const double is = inv_std[static_cast<size_t>(r)];
        double* dx = gx.data() + r * cols;
        for (int64_t j = 0; j < cols; ++j) {
          dx[j] += is * (dy[j] - mean_dy - y[j] * mean_dyy);
        }
      }
    });
  }
  return out;
}

Tensor softmax_causal(const Tensor& scores) {
  if (scores.rank() != 2 || scores.dim(0) != scores.dim(1)) {
    shape_fail("softmax_causal", "square matrix required, got " + shape_str(scores.shape()));
  }
  const int64_t L = scores.dim(0);
  Tensor out = Tensor::zeros(scores.shape());
  const auto& xv = scores.values();
  auto& ov = out.values();
  for (int64_t i = 0; i < L; ++i) {
    const double* xr = xv.data() + i * L;
    double* yr = ov.data() + i * L;
    double m = xr[0];
    for (int64_t j = 1; j <= i; ++j) m = std::max(m, xr[j]);
    double z = 0.0;
    for (int64_t j = 0; j <= i; ++j) {
      yr[j] = std::exp(xr[j] - m);
      z += yr[j];
    }
    for (int64_t j = 0; j <= i; ++j) yr[j] /= z;
    // columns j > i stay exactly zero
  }

  if (recording({&scores})) {
    mark_and_record(out, [scores = scores, out = out, L]() mutable {
      if (!out.has_grad() || !scores.requires_grad()) return;
      const auto& og = out.grad_view();
      const auto& ov2 = out.values();
      auto& gx = scores.grad();
      for (int64_t i = 0; i < L; ++i) {
        const double* y = ov2.data() + i * L;
        const double* dy = og.data() + i * L;
        double dot = 0.0;
        for (int64_t j = 0; j <= i; ++j) dot += dy[j] * y[j];
        double* dx = gx.data() + i * L;
        for (int64_t j = 0; j <= i; ++j) dx[j] += y[j] * (dy[j] - dot);
      }
    });
  }
  return out;
}

Tensor embedding_rows(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) shape_fail("embedding_gather", "table must be rank-2");
  const int64_t V = table.dim(0);
  const int64_t d = table.dim(1);
  const int64_t T = static_cast<int64_t>(ids.size());
  if (T == 0) shape_fail("embedding_gather", "empty id list");
  for (int id : ids) {
    if (id < 0 || id >= V) {
      fail(ErrorClass::domain_error,
           "embedding_gather: id " + std::to_string(id) + " outside vocabulary of " +
               std::to_string(V));
    }
  }
  Tensor out = Tensor::zeros({T, d});
  const auto& tv = table.values();
  auto& ov = out.values();
  for (int64_t t = 0; t < T; ++t) {
    const double* src = tv.data() + static_cast<int64_t>(ids[static_cast<size_t>(t)]) * d;
    std::copy(src, src + d, ov.data() + t * d);
  }

  if (recording({&table})) {
    std::vector<int> ids_copy(ids.begin(), ids.end());
    mark_and_record(out, [table = table, out = out, ids_copy = std::move(ids_copy), d]() mutable {
      if (!out.has_grad() || !table.requires_grad()) return;
      const auto& og = out.grad_view();
      auto& gt = table.grad();
      for (size_t t = 0; t < ids_copy.size(); ++t) {
        double* dst = gt.data() + static_cast<int64_t>(ids_copy[t]) * d;
        const double* src = og.data() + static_cast<int64_t>(t) * d;
        for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor select_lastdim(const Tensor& x, std::span<const int> ids) {
  const auto [rows, cols] = rows_lastdim(x);
  const int64_t k = static_cast<int64_t>(ids.size());
  if (k == 0) shape_fail("select_lastdim", "empty selection");
  for (int id : ids) {
    if (id < 0 || id >= cols) {
      shape_fail("select_lastdim",
                 "index " + std::to_string(id) + " outside last dim of " + std::to_string(cols));
    }
  }
  Shape oshape = x.shape();
  oshape.back() = k;
  Tensor out = Tensor::zeros(oshape);
  const auto& xv = x.values();
  auto& ov = out.values();
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t j = 0; j < k; ++j) {
      ov[r * k + j] = xv[r * cols + ids[static_cast<size_t>(j)]];
    }
  }

  if (recording({&x})) {
    std::vector<int> ids_copy(ids.begin(), ids.end());
    mark_and_record(out,
                    [x = x, out = out, ids_copy = std::move(ids_copy), rows = rows, cols = cols]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      const auto& og = out.grad_view();
      auto& gx = x.grad();
      const int64_t k2 = static_cast<int64_t>(ids_copy.size());
      for (int64_t r = 0; r < rows; ++r) {
        for (int64_t j = 0; j < k2; ++j) {
          gx[r * cols + ids_copy[static_cast<size_t>(j)]] += og[r * k2 + j];
        }
      }
    });
  }
  return out;
}

Tensor concat_axis(const Tensor& a, const Tensor& b, size_t axis) {
  if (a.rank() != b.rank() || a.rank() == 0 || a.rank() > 2 || axis >= a.rank()) {
    shape_fail("concat_axis", "unsupported ranks " + shape_str(a.shape()) + " / " +
                                  shape_str(b.shape()) + " axis " + std::to_string(axis));
  }
  for (size_t i = 0; i < a.rank(); ++i) {
    if (i != axis && a.dim(i) != b.dim(i)) {
      shape_fail("concat_axis", "shapes " + shape_str(a.shape()) + " and " +
                                    shape_str(b.shape()) + " disagree off-axis");
    }
  }
  Shape oshape = a.shape();
  oshape[axis] += b.dim(axis);
  Tensor out = Tensor::zeros(oshape);
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  if (axis == 0 || a.rank() == 1) {
    std::copy(av.begin(), av.end(), ov.begin());
    std::copy(bv.begin(), bv.end(), ov.begin() + static_cast<int64_t>(av.size()));
  } else {
    const int64_t rows = a.dim(0), ca = a.dim(1), cb = b.dim(1);
    for (int64_t r = 0; r < rows; ++r) {
      std::copy(av.begin() + r * ca, av.begin() + (r + 1) * ca, ov.begin() + r * (ca + cb));
      std::copy(bv.begin() + r * cb, bv.begin() + (r + 1) * cb,
                ov.begin() + r * (ca + cb) + ca);
    }
  }

  if (recording({&a, &b})) {
    mark_and_record(out, [a = a, b = b, out = out, axis]() mutable {
      if (!out.has_grad()) return;
      const auto& og = out.grad_view();
      if (axis == 0 || a.rank() == 1) {
        const int64_t na = a.numel();
        if (a.requires_grad()) {
          auto& ga = a.grad();
          for (int64_t i = 0; i < na; ++i) ga[i] += og[i];
        }
        if (b.requires_grad()) {
          auto& gb = b.grad();
          for (int64_t i = 0; i < b.numel(); ++i) gb[i] += og[na + i];
        }
      } else {
        const int64_t rows = a.dim(0), ca = a.dim(1), cb = b.dim(1);
        if (a.requires_grad()) {
          auto& ga = a.grad();
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < ca; ++j) ga[r * ca + j] += og[r * (ca + cb) + j];
        }
        if (b.requires_grad()) {
          auto& gb = b.grad();
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < cb; ++j) gb[r * cb + j] += og[r * (ca + cb) + ca + j];
        }
      }
    });
  }
  return out;
}

Tensor slice_axis(const Tensor& x, size_t axis, int64_t start, int64_t len) {
  if (x.rank() == 0 || x.rank() > 2 || axis >= x.rank()) {
    shape_fail("slice_axis", "unsupported rank for " + shape_str(x.shape()));
  }
  if (start < 0 || len <= 0 || start + len > x.dim(axis)) {
    shape_fail("slice_axis", "range [" + std::to_string(start) + "," +
                                 std::to_string(start + len) + ") outside axis of extent " +
                                 std::to_string(x.dim(axis)));
  }
  Shape oshape = x.shape();
  oshape[axis] = len;
  Tensor out = Tensor::zeros(oshape);
  const auto& xv = x.values();
  auto& ov = out.values();
  int64_t cols = (x.rank() == 2) ? x.dim(1) : 1;
  if (axis == 0) {
    std::copy(xv.begin() + start * cols, xv.begin() + (start + len) * cols, ov.begin());
  } else {
    const int64_t rows = x.dim(0);
    for (int64_t r = 0; r < rows; ++r) {
      std::copy(xv.begin() + r * cols + start, xv.begin() + r * cols + start + len,
                ov.begin() + r * len);
    }
  }

  if (recording({&x})) {
    mark_and_record(out, [x = x, out = out, axis, start, len, cols]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      const auto& og = out.grad_view();
      auto& gx = x.grad();
      if (axis == 0) {
        for (int64_t i = 0; i < out.numel(); ++i) gx[start * cols + i] += og[i];
      } else {
        const int64_t rows = x.dim(0);
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < len; ++j) gx[r * cols + start + j] += og[r * len + j];
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  Tensor out = Tensor::scalar(s);
  if (recording({&x})) {
    mark_and_record(out, [x = x, out = out]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      const double g = out.grad_view()[0];
      auto& gx = x.grad();
      for (auto& v : gx) v += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  const double n = static_cast<double>(x.numel());
  Tensor out = Tensor::scalar(s / n);
  if (recording({&x})) {
    mark_and_record(out, [x = x, out = out, n]() mutable {
      if (!out.has_grad() || !x.requires_grad()) return;
      const double g = out.grad_view()[0] / n;
      auto& gx = x.grad();
      for (auto& v : gx) v += g;
    });
  }
  return out;
}

Tensor stack_scalars(std::span<const Tensor> scalars) {
  const int64_t k = static_cast<int64_t>(scalars.size());
  if (k == 0) shape_fail("stack_scalars", "empty input");
  std::vector<double> vals(static_cast<size_t>(k));
  bool any_grad = false;
  for (int64_t i = 0; i < k; ++i) {
    const Tensor& s = scalars[static_cast<size_t>(i)];
    if (s.numel() != 1) shape_fail("stack_scalars", "input " + std::to_string(i) + " not scalar");
    vals[static_cast<size_t>(i)] = s.item();
    any_grad = any_grad || s.requires_grad();
  }
  Tensor out = Tensor::from_values({k}, std::move(vals));
  if (Tape::active() && any_grad) {
    std::vector<Tensor> inputs(scalars.begin(), scalars.end());
    mark_and_record(out, [inputs = std::move(inputs), out]() mutable {
      if (!out.has_grad()) return;
      const auto& og = out.grad_view();
      for (size_t i = 0; i < inputs.size(); ++i) {
        if (inputs[i].requires_grad()) inputs[i].grad()[0] += og[i];
      }
    });
  }
  return out;
}

Tensor cross_entropy_logits(const Tensor& logits, std::span<const int> targets,
                            std::span<const double> weights) {
  if (logits.rank() != 2) shape_fail("cross_entropy", "logits must be rank-2");
  const int64_t R = logits.dim(0);
  const int64_t V = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != R || static_cast<int64_t>(weights.size()) != R) {
    shape_fail("cross_entropy", "targets/weights length " + std::to_string(targets.size()) + "/" +
                                    std::to_string(weights.size()) + " vs " + std::to_string(R) +
                                    " rows");
  }
  const auto& xv = logits.values();
  const bool rec = recording({&logits});
  // Softmax rows are saved for the adjoint when recording, trading memory
  // for the repeated exp sweep.
  std::vector<double> probs;
  if (rec) probs.assign(static_cast<size_t>(R * V), 0.0);
  double loss = 0.0;
  for (int64_t r = 0; r < R; ++r) {
    const double w = weights[static_cast<size_t>(r)];
    if (w == 0.0) continue;
    const int t = targets[static_cast<size_t>(r)];
    if (t < 0 || t >= V) {
      fail(ErrorClass::domain_error,
           "cross_entropy: target " + std::to_string(t) + " outside vocabulary " +
               std::to_string(V) + " at row " + std::to_string(r));
    }
    const double* xr = xv.data() + r * V;
    double m = xr[0];
    for (int64_t j = 1; j < V; ++j) m = std::max(m, xr[j]);
    double z = 0.0;
    double* pr = rec ? probs.data() + r * V : nullptr;
    if (rec) {
      for (int64_t j = 0; j < V; ++j) {
        pr[j] = std::exp(xr[j] - m);
        z += pr[j];
      }
      for (int64_t j = 0; j < V; ++j) pr[j] /= z;
    } else {
      for (int64_t j = 0; j < V; ++j) z += std::exp(xr[j] - m);
    }
    loss += w * (m + std::log(z) - xr[t]);
  }
  Tensor out = Tensor::scalar(loss);

  if (rec) {
    std::vector<int> t_copy(targets.begin(), targets.end());
    std::vector<double> w_copy(weights.begin(), weights.end());
    mark_and_record(out, [logits = logits, out = out, t_copy = std::move(t_copy),
                          w_copy = std::move(w_copy), probs = std::move(probs), R, V]() mutable {
      if (!out.has_grad() || !logits.requires_grad()) return;
      const double g = out.grad_view()[0];
      if (g == 0.0) return;
      auto& gx = logits.grad();
      for (int64_t r = 0; r < R; ++r) {
        const double w = w_copy[static_cast<size_t>(r)];
        if (w == 0.0) continue;
        const double* pr = probs.data() + r * V;
        double* dx = gx.data() + r * V;
        const double gw = g * w;
        for (int64_t j = 0; j < V; ++j) dx[j] += gw * pr[j];
        dx[t_copy[static_cast<size_t>(r)]] -= gw;
      }
    });
  }
  return out;
}

}  // namespace ops

// ---------------------------------------------------------------- AdamW

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.values().size(), 0.0);
    v_.emplace_back(p.values().size(), 0.0);
  }
}

void AdamW::step() {
  for (size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) {
      fail(ErrorClass::domain_error,
           "adamw_step: parameter " + std::to_string(i) + " has no gradient");
    }
  }
  ++step_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i].values();
    const auto& g = params_[i].grad_view();
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t j = 0; j < p.size(); ++j) {
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= config_.lr * (mhat / (std::sqrt(vhat) + config_.eps) +
                            config_.weight_decay * p[j]);
    }
    params_[i].zero_grad();
  }
}

}  // namespace mia
