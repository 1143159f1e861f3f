#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace lcmf {

namespace detail {

struct TensorImpl {
  std::vector<int64_t> shape;
  std::vector<double> data;
  // Doubles as the autograd tracking flag: op outputs inherit it from inputs.
  bool requires_grad = false;
  std::vector<double> grad;  // empty until backward touches this tensor
};

}  // namespace detail

// Dense row-major f64 tensor with value-handle semantics: copies share the
// underlying buffer. All graph-producing operations are free functions that
// record onto the active Tape, if any.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<int64_t> shape, double value, bool requires_grad = false);
  static Tensor from(std::vector<int64_t> shape, std::vector<double> data,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int64_t>& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int64_t dim(int i) const;
  int64_t numel() const;
  int64_t rows() const { return dim(0); }
  int64_t cols() const { return dim(1); }

  double* data();
  const double* data() const;
  double& at(std::initializer_list<int64_t> idx);
  double at(std::initializer_list<int64_t> idx) const;
  double value() const;  // scalar tensors only

  bool requires_grad() const;
  Tensor& set_requires_grad(bool v);

  bool has_grad() const;
  const std::vector<double>& grad_data() const;
  Tensor grad() const;  // copy of the gradient with this tensor's shape
  void zero_grad();

  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& handle() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Per-forward-pass gradient recorder. Constructing a Tape makes it the active
// tape for the current thread; destruction pops it. Ops record only while a
// tape is active and some input is tracked.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();

  void record(std::function<void(Tape&)> backward_step,
              std::vector<std::shared_ptr<detail::TensorImpl>> keep_alive);

  // Runs reverse-topological accumulation from a scalar loss, then adds the
  // results into .grad of every tracked tensor touched. Repeated calls
  // accumulate further.
  void backward(const Tensor& loss);

  // Gradient buffer lookups used inside backward closures.
  const std::vector<double>* flowing_grad(const detail::TensorImpl* t) const;
  std::vector<double>& grad_slot(const detail::TensorImpl* t);

  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    std::function<void(Tape&)> backward_step;
    std::vector<std::shared_ptr<detail::TensorImpl>> keep_alive;
  };
  std::vector<Node> nodes_;
  std::unordered_map<const detail::TensorImpl*, std::vector<double>> flow_;
};

bool any_tracked(std::initializer_list<Tensor> ts);

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor silu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor exp(const Tensor& a);

// ---- matrix ----
Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k]x[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k]x[n,k]^T -> [m,n]
Tensor matmul_tn(const Tensor& a, const Tensor& b);  // [m,k]^T x [m,n] -> [k,n]
Tensor add_rowvec(const Tensor& a, const Tensor& row);

// ---- reductions / shaping ----
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor mean_rows(const Tensor& a);                       // [T,D] -> [D]
Tensor broadcast_row(const Tensor& row, int64_t n_rows);  // [D] -> [T,D]
Tensor gather_rows(const Tensor& a, const std::vector<int64_t>& idx);
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor slice_rows(const Tensor& a, int64_t lo, int64_t hi);
Tensor slice_cols(const Tensor& a, int64_t lo, int64_t hi);
Tensor reshape(const Tensor& a, std::vector<int64_t> new_shape);

// ---- neural-net primitives ----
Tensor softmax_rows(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
// kernel[k,c]: tap k multiplies x[t-k,c] (causal) or x[t+k-left,c] (centered).
Tensor conv1d_depthwise(const Tensor& x, const Tensor& kernel, const Tensor& bias, bool causal);
// Mean cross-entropy of the logit rows listed in `rows` against targets.
// An empty selection yields an exact 0.0 loss.
Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int64_t>& targets,
                          const std::vector<int64_t>& rows);
// (1+gamma) * x + beta, elementwise; gamma/beta shaped like x.
Tensor film(const Tensor& x, const Tensor& gamma, const Tensor& beta);

namespace detail {
[[noreturn]] void fail(const std::string& msg);
std::string shape_str(const std::vector<int64_t>& s);
void check_same_shape(const char* op, const Tensor& a, const Tensor& b);
}  // namespace detail

}  // namespace lcmf
