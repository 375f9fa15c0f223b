#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mia {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // allocated lazily on first accumulation
  bool requires_grad = false;
};
}  // namespace detail

/// Dense row-major float64 tensor. Value-semantic handle over shared storage:
/// copies alias the same buffer, which is what the tape needs to route
/// gradients back to parameters.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from_values(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const;
  int64_t numel() const;
  int64_t dim(size_t axis) const;
  size_t rank() const;

  std::vector<double>& values();
  const std::vector<double>& values() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);

  bool has_grad() const;
  std::vector<double>& grad();             // allocates zeros if absent
  const std::vector<double>& grad_view() const;  // throws if absent
  void zero_grad();                        // drops the grad buffer
  void accumulate_grad(std::span<const double> g);

  /// Scalar accessor; throws unless numel() == 1.
  double item() const;

  /// True if the two handles share storage.
  bool same_storage(const Tensor& other) const { return data_ == other.data_; }

 private:
  std::shared_ptr<detail::TensorData> data_;
  detail::TensorData& d();
  const detail::TensorData& d() const;
};

/// Ordered record of primitive ops. Each entry is the adjoint step of one
/// primitive; replaying entries in reverse accumulates gradients into every
/// requires_grad ancestor of the loss. One tape per optimization step.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Seeds grad(loss) = 1 and replays adjoints in reverse recorded order.
  void backward(const Tensor& loss);

  void clear();
  size_t size() const { return entries_.size(); }

  static Tape* active();
  void record(std::function<void()> adjoint);

 private:
  std::vector<std::function<void()>> entries_;
  Tape* prev_ = nullptr;  // restores the previously active tape on destruction
};

namespace ops {

// Elementwise binary ops. Shapes must match, or one side may be a scalar
// (numel 1), or rhs may be a rank-1 vector matching lhs's last dimension
// (row broadcast, used for biases and layer-norm gains).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);  // domain error on zero divisor

Tensor neg(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);  // domain error on x <= 0
Tensor abs(const Tensor& x);
Tensor clamp_min(const Tensor& x, double lo);
Tensor clamp_max(const Tensor& x, double hi);
Tensor gelu(const Tensor& x);  // exact erf form
Tensor relu(const Tensor& x);

/// 2-D matrix product with optional transposes: (M,K)x(K,N) -> (M,N).
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false,
              bool trans_b = false);

// Last-dimension ops treat a rank-N tensor as rows x lastdim.
Tensor softmax_lastdim(const Tensor& x);      // max-subtracted
Tensor log_softmax_lastdim(const Tensor& x);  // fused, never log(0)
Tensor logsumexp_lastdim(const Tensor& x);    // rows x 1
Tensor max_lastdim(const Tensor& x);          // rows x 1
Tensor layer_norm_lastdim(const Tensor& x, double eps = 1e-5);

/// Square score matrix (L,L); row i is a softmax over columns 0..i and
/// exactly zero beyond, which is what makes causal masking bit-exact.
Tensor softmax_causal(const Tensor& scores);

/// Gathers rows of a (V,d) table; adjoint scatter-adds into the table.
Tensor embedding_rows(const Tensor& table, std::span<const int> ids);

/// Selects columns of the last dimension, e.g. the YES/NO logits.
Tensor select_lastdim(const Tensor& x, std::span<const int> ids);

Tensor concat_axis(const Tensor& a, const Tensor& b, size_t axis);
Tensor slice_axis(const Tensor& x, size_t axis, int64_t start, int64_t len);

Tensor sum(const Tensor& x);   // scalar
Tensor mean(const Tensor& x);  // scalar

/// Packs scalar tensors into a rank-1 tensor (used to assemble per-sample
/// losses into a contrastive batch).
Tensor stack_scalars(std::span<const Tensor> scalars);

/// Weighted token-level cross entropy, fused with log-softmax:
///   loss = sum_r weight[r] * (-log softmax(logits[r])[target[r]])
/// Rows with weight 0 are skipped entirely. Returns a scalar.
Tensor cross_entropy_logits(const Tensor& logits, std::span<const int> targets,
                            std::span<const double> weights);

}  // namespace ops

/// AdamW with bias correction and decoupled weight decay.
struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWConfig config);

  /// One update; every param must carry a grad. Grads are zeroed after.
  void step();

  int64_t step_count() const { return step_; }
  const AdamWConfig& config() const { return config_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  AdamWConfig config_;
  int64_t step_ = 0;
};

}  // namespace mia
