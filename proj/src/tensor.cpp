#include "lcmf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "lcmf/parallel.hpp"

namespace lcmf {

namespace detail {

void fail(const std::string& msg) { throw std::invalid_argument(msg); }

std::string shape_str(const std::vector<int64_t>& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    fail(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
         shape_str(b.shape()));
}

}  // namespace detail

using detail::fail;
using detail::shape_str;
using detail::TensorImpl;

namespace {

int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) fail("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::shared_ptr<TensorImpl> make_impl(std::vector<int64_t> shape, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data.assign(static_cast<size_t>(shape_numel(impl->shape)), 0.0);
  impl->requires_grad = requires_grad;
  return impl;
}

}  // namespace

// ---- Tensor ----

Tensor Tensor::zeros(std::vector<int64_t> shape, bool requires_grad) {
  return Tensor(make_impl(std::move(shape), requires_grad));
}

Tensor Tensor::full(std::vector<int64_t> shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.impl()->data.begin(), t.impl()->data.end(), value);
  return t;
}

Tensor Tensor::from(std::vector<int64_t> shape, std::vector<double> data, bool requires_grad) {
  const int64_t n = shape_numel(shape);
  if (static_cast<int64_t>(data.size()) != n)
    fail("from: data size " + std::to_string(data.size()) + " does not fill shape " +
         shape_str(shape));
  Tensor t = zeros(std::move(shape), requires_grad);
  t.impl()->data = std::move(data);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

const std::vector<int64_t>& Tensor::shape() const {
  if (!impl_) fail("shape() on undefined tensor");
  return impl_->shape;
}

int64_t Tensor::dim(int i) const {
  const auto& s = shape();
  if (i < 0 || i >= static_cast<int>(s.size()))
    fail("dim " + std::to_string(i) + " out of range for " + shape_str(s));
  return s[static_cast<size_t>(i)];
}

int64_t Tensor::numel() const { return static_cast<int64_t>(impl_->data.size()); }

double* Tensor::data() { return impl_->data.data(); }
const double* Tensor::data() const { return impl_->data.data(); }

double& Tensor::at(std::initializer_list<int64_t> idx) {
  const auto& s = shape();
  if (idx.size() != s.size())
    fail("at: " + std::to_string(idx.size()) + " indices for " + shape_str(s));
  int64_t flat = 0;
  size_t k = 0;
  for (int64_t i : idx) {
    if (i < 0 || i >= s[k]) fail("at: index out of range for " + shape_str(s));
    flat = flat * s[k] + i;
    ++k;
  }
  return impl_->data[static_cast<size_t>(flat)];
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
  return const_cast<Tensor*>(this)->at(idx);
}

double Tensor::value() const {
  if (numel() != 1) fail("value() requires a scalar, got " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool v) {
  impl_->requires_grad = v;
  return *this;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

const std::vector<double>& Tensor::grad_data() const {
  if (!has_grad()) fail("grad_data() on tensor without gradient");
  return impl_->grad;
}

Tensor Tensor::grad() const { return Tensor::from(shape(), grad_data()); }

void Tensor::zero_grad() {
  if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

// ---- Tape ----

namespace {
thread_local std::vector<Tape*> g_tape_stack;
}

Tape::Tape() { g_tape_stack.push_back(this); }

Tape::~Tape() {
  if (!g_tape_stack.empty() && g_tape_stack.back() == this) g_tape_stack.pop_back();
}

Tape* Tape::current() { return g_tape_stack.empty() ? nullptr : g_tape_stack.back(); }

void Tape::record(std::function<void(Tape&)> backward_step,
                  std::vector<std::shared_ptr<detail::TensorImpl>> keep_alive) {
  nodes_.push_back(Node{std::move(backward_step), std::move(keep_alive)});
}

const std::vector<double>* Tape::flowing_grad(const TensorImpl* t) const {
  auto it = flow_.find(t);
  return it == flow_.end() ? nullptr : &it->second;
}

std::vector<double>& Tape::grad_slot(const TensorImpl* t) {
  auto& buf = flow_[t];
  if (buf.empty()) buf.assign(t->data.size(), 0.0);
  return buf;
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) fail("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad())
    fail("backward: loss does not depend on any tracked tensor");
  flow_.clear();
  grad_slot(loss.impl())[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward_step(*this);
  for (auto& [impl, buf] : flow_) {
    auto* t = const_cast<TensorImpl*>(impl);
    if (!t->requires_grad) continue;
    if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
    for (size_t i = 0; i < buf.size(); ++i) t->grad[i] += buf[i];
  }
  flow_.clear();
}

bool any_tracked(std::initializer_list<Tensor> ts) {
  for (const auto& t : ts)
    if (t.defined() && t.requires_grad()) return true;
  return false;
}

namespace {

// Output tensors inherit tracking; nodes are recorded only when useful.
Tensor make_output(std::vector<int64_t> shape, bool tracked) {
  return Tensor::zeros(std::move(shape), tracked);
}

bool recording(bool tracked) { return tracked && Tape::current() != nullptr; }

std::shared_ptr<TensorImpl> own(const Tensor& t) { return t.handle(); }

}  // namespace

// ---- elementwise helpers ----

namespace {

template <class Fwd, class Bwd>
Tensor binary_elementwise(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  detail::check_same_shape(name, a, b);
  const bool tracked = any_tracked({a, b});
  Tensor out = make_output(a.shape(), tracked);
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
  if (recording(tracked)) {
    Tape::current()->record(
        [a, b, out, bwd](Tape& tape) {
          const auto* g = tape.flowing_grad(out.impl());
          if (!g) return;
          const int64_t n = out.numel();
          std::vector<double>* ga = a.requires_grad() ? &tape.grad_slot(a.impl()) : nullptr;
          std::vector<double>* gb = b.requires_grad() ? &tape.grad_slot(b.impl()) : nullptr;
          for (int64_t i = 0; i < n; ++i) {
            double da = 0, db = 0;
            bwd(a.data()[i], b.data()[i], (*g)[static_cast<size_t>(i)], da, db);
            if (ga) (*ga)[static_cast<size_t>(i)] += da;
            if (gb) (*gb)[static_cast<size_t>(i)] += db;
          }
        },
        {own(a), own(b), own(out)});
  }
  return out;
}

template <class Fwd, class Bwd>
Tensor unary_elementwise(const Tensor& a, Fwd fwd, Bwd bwd) {
  const bool tracked = a.requires_grad();
  Tensor out = make_output(a.shape(), tracked);
  const double* pa = a.data();
  double* po = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
  if (recording(tracked)) {
    Tape::current()->record(
        [a, out, bwd](Tape& tape) {
          const auto* g = tape.flowing_grad(out.impl());
          if (!g) return;
          auto& ga = tape.grad_slot(a.impl());
          const int64_t n = out.numel();
          for (int64_t i = 0; i < n; ++i)
            ga[static_cast<size_t>(i)] +=
                bwd(a.data()[i], out.data()[i]) * (*g)[static_cast<size_t>(i)];
        },
        {own(a), own(out)});
  }
  return out;
}

double stable_sigmoid(double x) {
  if (x >= 0) {
    const double z = std::exp(-x);
    return 1.0 / (1.0 + z);
  }
  const double z = std::exp(x);
  return z / (1.0 + z);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double g, double& da, double& db) {
        da = g;
        db = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double g, double& da, double& db) {
        da = g;
        db = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double g, double& da, double& db) {
        da = g * y;
        db = g * x;
      });
}

Tensor scale(const Tensor& a, double c) {
  return unary_elementwise(
      a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary_elementwise(
      a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor silu(const Tensor& a) {
  return unary_elementwise(
      a, [](double x) { return x * stable_sigmoid(x); },
      [](double x, double) {
        const double s = stable_sigmoid(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

Tensor sigmoid(const Tensor& a) {
  return unary_elementwise(
      a, [](double x) { return stable_sigmoid(x); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
  return unary_elementwise(
      a,
      [](double x) {
        // log(1+e^x) without overflow on either tail
        return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
      },
      [](double x, double) { return stable_sigmoid(x); });
}

Tensor exp(const Tensor& a) {
  return unary_elementwise(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

// ---- matmul kernels (accumulate into c) ----

namespace {

void mm_nn_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  parallel_for(m, [&](int64_t i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (int64_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      const double* brow = b + kk * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  });
}

void mm_nt_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  // c[i,j] += dot(a[i,:], b[j,:])
  parallel_for(m, [&](int64_t i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (int64_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      crow[j] += acc;
    }
  });
}

void mm_tn_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  // c[kk,j] += sum_i a[i,kk] * b[i,j]
  parallel_for(k, [&](int64_t kk) {
    double* crow = c + kk * n;
    for (int64_t i = 0; i < m; ++i) {
      const double av = a[i * k + kk];
      const double* brow = b + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  });
}

void check_rank2(const char* op, const Tensor& t) {
  if (t.rank() != 2) fail(std::string(op) + ": expected rank-2, got " + shape_str(t.shape()));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_rank2("matmul", a);
  check_rank2("matmul", b);
  if (a.cols() != b.rows())
    fail("matmul: inner dims differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int64_t m = a.rows(), k = a.cols(), n = b.cols();
  const bool tracked = any_tracked({a, b});
  Tensor out = make_output({m, n}, tracked);
  mm_nn_acc(a.data(), b.data(), out.data(), m, k, n);
  if (recording(tracked)) {
    Tape::current()->record(
        [a, b, out, m, k, n](Tape& tape) {
          const auto* g = tape.flowing_grad(out.impl());
          if (!g) return;
          if (a.requires_grad())
            mm_nt_acc(g->data(), b.data(), tape.grad_slot(a.impl()).data(), m, n, k);
          if (b.requires_grad())
            mm_tn_acc(a.data(), g->data(), tape.grad_slot(b.impl()).data(), m, k, n);
        },
        {own(a), own(b), own(out)});
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  check_rank2("matmul_nt", a);
  check_rank2("matmul_nt", b);
  if (a.cols() != b.cols())
    fail("matmul_nt: inner dims differ, " + shape_str(a.shape()) + " x " +
         shape_str(b.shape()) + "^T");
  const int64_t m = a.rows(), k = a.cols(), n = b.rows();
  const bool tracked = any_tracked({a, b});
  Tensor out = make_output({m, n}, tracked);
  mm_nt_acc(a.data(), b.data(), out.data(), m, k, n);
  if (recording(tracked)) {
    Tape::current()->record(
        [a, b, out, m, k, n](Tape& tape) {
          const auto* g = tape.flowing_grad(out.impl());
          if (!g) return;
          if (a.requires_grad())
            mm_nn_acc(g->data(), b.data(), tape.grad_slot(a.impl()).data(), m, n, k);
          if (b.requires_grad())
            mm_tn_acc(g->data(), a.data(), tape.grad_slot(b.impl()).data(), m, n, k);
        },
        {own(a), own(b), own(out)});
  }
  return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  check_rank2("matmul_tn", a);
  check_rank2("matmul_tn", b);
  if (a.rows() != b.rows())
    fail("matmul_tn: outer dims differ, " + shape_str(a.shape()) + "^T x " +
         shape_str(b.shape()));
  const int64_t m = a.rows(), k = a.cols(), n = b.cols();
  const bool tracked = any_tracked({a, b});
  Tensor out = make_output({k, n}, tracked);
  mm_tn_acc(a.data(), b.data(), out.data(), m, k, n);
  if (recording(tracked)) {
    Tape::current()->record(
        [a, b, out, m, k, n](Tape& tape) {
          const auto* g = tape.flowing_grad(out.impl());
          if (!g) return;
          if (a.requires_grad())
            mm_nt_acc(b.data(), g->data(), tape.grad_slot(a.impl()).data(), m, n, k);
          if (b.requires_grad())
            mm_nn_acc(a.data(), g->data(), tape.grad_slot(b.impl()).data(), m, k, n);
        },
        {own(a), own(b), own(out)});
  }
  return out;
}

Tensor add_rowvec(const Tensor& a, const Tensor& row) {
  check_rank2("add_rowvec", a);
  if (row.rank() != 1 || row.dim(0) != a.cols())
    fail("add_rowvec: row " + shape_str(row.shape()) + " does not match " +
         shape_str(a.shape()));
  const int64_t m = a.rows(), n = a.cols();
  const bool tracked = any_tracked({a, row});
  Tensor out = make_output({m, n}, tracked);
  const double* pa = a.data();
  const double* pr = row.data();
  double* po = out.data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) po[i * n + j] = pa[i * n + j] + pr[j];
  if (recording(tracked)) {
    Tape::current()->record(
        [a, row, out, m, n](Tape& tape) {
          const auto* g = tape.flowing_grad(out.impl());
          if (!g) return;
          if (a.requires_grad()) {
            auto& ga = tape.grad_slot(a.impl());
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[i];
          }
          if (row.requires_grad()) {
            auto& gr = tape.grad_slot(row.impl());
            for (int64_t i = 0; i < m; ++i)
              for (int64_t j = 0; j < n; ++j)
                gr[static_cast<size_t>(j)] += (*g)[static_cast<size_t>(i * n + j)];
          }
        },
        {own(a), own(row), own(out)});
  }
  return out;
}

// ---- reductions / shaping ----

Tensor sum_all(const Tensor& a) {
  const bool tracked = a.requires_grad();
  Tensor out = make_output({1}, tracked);
  double acc = 0.0;
  const double* pa = a.data();
  for (int64_t i = 0; i < a.numel(); ++i) acc += pa[i];
  out.data()[0] = acc;
  if (recording(tracked)) {
    Tape::current()->record(
        [a, out](Tape& tape) {
          const auto* g = tape.flowing_grad(out.impl());
          if (!g) return;
          auto& ga = tape.grad_slot(a.impl());
          for (auto& v : ga) v += (*g)[0];
        },
        {own(a), own(out)});
  }
  return out;
}

Tensor mean_all(const Tensor& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.numel())); }

Tensor mean_rows(const Tensor& a) {
  check_rank2("mean_rows", a);
  const int64_t m = a.rows(), n = a.cols();
  if (m == 0) fail("mean_rows: empty input");
  const bool tracked = a.requires_grad();
  Tensor out = make_output({n}, tracked);
  double* po = out.data();
  const double* pa = a.data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) po[j] += pa[i * n + j];
  const double inv = 1.0 / static_cast<double>(m);
  for (int64_t j = 0; j < n; ++j) po[j] *= inv;
  if (recording(tracked)) {
    Tape::current()->record(
        [a, out, m, n, inv](Tape& tape) {
          const auto* g = tape.flowing_grad(out.impl());
          if (!g) return;
          auto& ga = tape.grad_slot(a.impl());
          for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j)
              ga[static_cast<size_t>(i * n + j)] += (*g)[static_cast<size_t>(j)] * inv;
        },
        {own(a), own(out)});
  }
  return out;
}

Tensor broadcast_row(const Tensor& row, int64_t n_rows) {
  if (row.rank() != 1) fail("broadcast_row: expected rank-1, got " + shape_str(row.shape()));
  const int64_t n = row.dim(0);
  const bool tracked = row.requires_grad();
  Tensor out = make_output({n_rows, n}, tracked);
  for (int64_t i = 0; i < n_rows; ++i)
    std::copy(row.data(), row.data() + n, out.data() + i * n);
  if (recording(tracked)) {
    Tape::current()->record(
        [row, out, n_rows, n](Tape& tape) {
          const auto* g = tape.flowing_grad(out.impl());
          if (!g) return;
          auto& gr = tape.grad_slot(row.impl());
          for (int64_t i = 0; i < n_rows; ++i)
            for (int64_t j = 0; j < n; ++j)
              gr[static_cast<size_t>(j)] += (*g)[static_cast<size_t>(i * n + j)];
        },
        {own(row), own(out)});
  }
  return out;
}

Tensor gather_rows(const Tensor& a, const std::vector<int64_t>& idx) {
  check_rank2("gather_rows", a);
  const int64_t m = a.rows(), n = a.cols();
  for (int64_t i : idx)
    if (i < 0 || i >= m)
      fail("gather_rows: index " + std::to_string(i) + " out of range for " +
           shape_str(a.shape()));
  const bool tracked = a.requires_grad();
  Tensor out = make_output({static_cast<int64_t>(idx.size()), n}, tracked);
  for (size_t r = 0; r < idx.size(); ++r)
    std::copy(a.data() + idx[r] * n, a.data() + (idx[r] + 1) * n,
              out.data() + static_cast<int64_t>(r) * n);
  if (recording(tracked)) {
    Tape::current()->record(
        [a, out, idx, n](Tape& tape) {
          const auto* g = tape.flowing_grad(out.impl());
          if (!g) return;
          auto& ga = tape.grad_slot(a.impl());
          for (size_t r = 0; r < idx.size(); ++r)
            for (int64_t j = 0; j < n; ++j)
              ga[static_cast<size_t>(idx[r] * n + j)] +=
                  (*g)[static_cast<size_t>(static_cast<int64_t>(r) * n + j)];
        },
        {own(a), own(out)});
  }
  return out;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  check_rank2("concat_rows", a);
  check_rank2("concat_rows", b);
  if (a.cols() != b.cols())
    fail("concat_rows: widths differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int64_t ma = a.rows(), mb = b.rows(), n = a.cols();
  const bool tracked = any_tracked({a, b});
  Tensor out = make_output({ma + mb, n}, tracked);
  std::copy(a.data(), a.data() + ma * n, out.data());
  std::copy(b.data(), b.data() + mb * n, out.data() + ma * n);
  if (recording(tracked)) {
    Tape::current()->record(
        [a, b, out, ma, mb, n](Tape& tape) {
          const auto* g = tape.flowing_grad(out.impl());
          if (!g) return;
          if (a.requires_grad()) {
            auto& ga = tape.grad_slot(a.impl());
            for (int64_t i = 0; i < ma * n; ++i) ga[static_cast<size_t>(i)] += (*g)[static_cast<size_t>(i)];
          }
          if (b.requires_grad()) {
            auto& gb = tape.grad_slot(b.impl());
            for (int64_t i = 0; i < mb * n; ++i)
              gb[static_cast<size_t>(i)] += (*g)[static_cast<size_t>(ma * n + i)];
          }
        },
        {own(a), own(b), own(out)});
  }
  return out;
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  check_rank2("concat_cols", a);
  check_rank2("concat_cols", b);
  if (a.rows() != b.rows())
    fail("concat_cols: heights differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int64_t m = a.rows(), na = a.cols(), nb = b.cols();
  const bool tracked = any_tracked({a, b});
  Tensor out = make_output({m, na + nb}, tracked);
  for (int64_t i = 0; i < m; ++i) {
    std::copy(a.data() + i * na, a.data() + (i + 1) * na, out.data() + i * (na + nb));
    std::copy(b.data() + i * nb, b.data() + (i + 1) * nb, out.data() + i * (na + nb) + na);
  }
  if (recording(tracked)) {
    Tape::current()->record(
        [a, b, out, m, na, nb](Tape& tape) {
          const auto* g = tape.flowing_grad(out.impl());
          if (!g) return;
          const int64_t w = na + nb;
          if (a.requires_grad()) {
            auto& ga = tape.grad_slot(a.impl());
            for (int64_t i = 0; i < m; ++i)
              for (int64_t j = 0; j < na; ++j)
                ga[static_cast<size_t>(i * na + j)] += (*g)[static_cast<size_t>(i * w + j)];
          }
          if (b.requires_grad()) {
            auto& gb = tape.grad_slot(b.impl());
            for (int64_t i = 0; i < m; ++i)
              for (int64_t j = 0; j < nb; ++j)
                gb[static_cast<size_t>(i * nb + j)] += (*g)[static_cast<size_t>(i * w + na + j)];
          }
        },
        {own(a), own(b), own(out)});
  }
  return out;
}

Tensor slice_rows(const Tensor& a, int64_t lo, int64_t hi) {
  check_rank2("slice_rows", a);
  if (lo < 0 || hi < lo || hi > a.rows())
    fail("slice_rows: [" + std::to_string(lo) + "," + std::to_string(hi) + ") out of " +
         shape_str(a.shape()));
  const int64_t n = a.cols(), m = hi - lo;
  const bool tracked = a.requires_grad();
  Tensor out = make_output({m, n}, tracked);
  std::copy(a.data() + lo * n, a.data() + hi * n, out.data());
  if (recording(tracked)) {
    Tape::current()->record(
        [a, out, lo, m, n](Tape& tape) {
          const auto* g = tape.flowing_grad(out.impl());
          if (!g) return;
          auto& ga = tape.grad_slot(a.impl());
          for (int64_t i = 0; i < m * n; ++i)
            ga[static_cast<size_t>(lo * n + i)] += (*g)[static_cast<size_t>(i)];
        },
        {own(a), own(out)});
  }
  return out;
}

Tensor slice_cols(const Tensor& a, int64_t lo, int64_t hi) {
  check_rank2("slice_cols", a);
  if (lo < 0 || hi < lo || hi > a.cols())
    fail("slice_cols: [" + std::to_string(lo) + "," + std::to_string(hi) + ") out of " +
         shape_str(a.shape()));
  const int64_t m = a.rows(), w = a.cols(), n = hi - lo;
  const bool tracked = a.requires_grad();
  Tensor out = make_output({m, n}, tracked);
  for (int64_t i = 0; i < m; ++i)
    std::copy(a.data() + i * w + lo, a.data() + i * w + hi, out.data() + i * n);
  if (recording(tracked)) {
    Tape::current()->record(
        [a, out, lo, m, w, n](Tape& tape) {
          const auto* g = tape.flowing_grad(out.impl());
          if (!g) return;
          auto& ga = tape.grad_slot(a.impl());
          for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j)
              ga[static_cast<size_t>(i * w + lo + j)] += (*g)[static_cast<size_t>(i * n + j)];
        },
        {own(a), own(out)});
  }
  return out;
}

Tensor reshape(const Tensor& a, std::vector<int64_t> new_shape) {
  if (shape_numel(new_shape) != a.numel())
    fail("reshape: " + shape_str(a.shape()) + " -> " + shape_str(new_shape) +
         " changes element count");
  const bool tracked = a.requires_grad();
  Tensor out = Tensor::from(std::move(new_shape),
                            std::vector<double>(a.data(), a.data() + a.numel()), tracked);
  if (recording(tracked)) {
    Tape::current()->record(
        [a, out](Tape& tape) {
          const auto* g = tape.flowing_grad(out.impl());
          if (!g) return;
          auto& ga = tape.grad_slot(a.impl());
          for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[i];
        },
        {own(a), own(out)});
  }
  return out;
}

// ---- nn primitives ----

Tensor softmax_rows(const Tensor& a) {
  check_rank2("softmax_rows", a);
  const int64_t m = a.rows(), n = a.cols();
  if (n == 0) fail("softmax_rows: zero-width rows");
  const bool tracked = a.requires_grad();
  Tensor out = make_output({m, n}, tracked);
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t i = 0; i < m; ++i) {
    const double* row = pa + i * n;
    double* orow = po + i * n;
    double mx = row[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      z += orow[j];
    }
    const double inv = 1.0 / z;
    for (int64_t j = 0; j < n; ++j) orow[j] *= inv;
  }
  if (recording(tracked)) {
    Tape::current()->record(
        [a, out, m, n](Tape& tape) {
          const auto* g = tape.flowing_grad(out.impl());
          if (!g) return;
          auto& ga = tape.grad_slot(a.impl());
          for (int64_t i = 0; i < m; ++i) {
            const double* s = out.data() + i * n;
            const double* gr = g->data() + i * n;
            double dot = 0.0;
            for (int64_t j = 0; j < n; ++j) dot += gr[j] * s[j];
            for (int64_t j = 0; j < n; ++j)
              ga[static_cast<size_t>(i * n + j)] += s[j] * (gr[j] - dot);
          }
        },
        {own(a), own(out)});
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  check_rank2("layer_norm", x);
  const int64_t m = x.rows(), n = x.cols();
  if (gain.rank() != 1 || gain.dim(0) != n || bias.rank() != 1 || bias.dim(0) != n)
    fail("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
         " do not match width of " + shape_str(x.shape()));
  const bool tracked = any_tracked({x, gain, bias});
  Tensor out = make_output({m, n}, tracked);
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(m));
  auto means = std::make_shared<std::vector<double>>(static_cast<size_t>(m));
  const double* px = x.data();
  const double* pg = gain.data();
  const double* pb = bias.data();
  double* po = out.data();
  for (int64_t i = 0; i < m; ++i) {
    const double* row = px + i * n;
    double mu = 0.0;
    for (int64_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      const double d = row[j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*means)[static_cast<size_t>(i)] = mu;
    (*inv_std)[static_cast<size_t>(i)] = is;
    double* orow = po + i * n;
    for (int64_t j = 0; j < n; ++j) orow[j] = pg[j] * ((row[j] - mu) * is) + pb[j];
  }
  if (recording(tracked)) {
    Tape::current()->record(
        [x, gain, bias, out, means, inv_std, m, n](Tape& tape) {
          const auto* g = tape.flowing_grad(out.impl());
          if (!g) return;
          std::vector<double>* gx = x.requires_grad() ? &tape.grad_slot(x.impl()) : nullptr;
          std::vector<double>* gg = gain.requires_grad() ? &tape.grad_slot(gain.impl()) : nullptr;
          std::vector<double>* gb = bias.requires_grad() ? &tape.grad_slot(bias.impl()) : nullptr;
          for (int64_t i = 0; i < m; ++i) {
            const double mu = (*means)[static_cast<size_t>(i)];
            const double is = (*inv_std)[static_cast<size_t>(i)];
            const double* row = x.data() + i * n;
            const double* gr = g->data() + i * n;
            if (gg || gb) {
              for (int64_t j = 0; j < n; ++j) {
                const double xh = (row[j] - mu) * is;
                if (gg) (*gg)[static_cast<size_t>(j)] += gr[j] * xh;
                if (gb) (*gb)[static_cast<size_t>(j)] += gr[j];
              }
            }
            if (gx) {
              double s1 = 0.0, s2 = 0.0;
              for (int64_t j = 0; j < n; ++j) {
                const double gy = gr[j] * gain.data()[j];
                const double xh = (row[j] - mu) * is;
                s1 += gy;
                s2 += gy * xh;
              }
              const double invn = 1.0 / static_cast<double>(n);
              for (int64_t j = 0; j < n; ++j) {
                const double gy = gr[j] * gain.data()[j];
                const double xh = (row[j] - mu) * is;
                (*gx)[static_cast<size_t>(i * n + j)] +=
                    is * (gy - invn * s1 - xh * invn * s2);
              }
            }
          }
        },
        {own(x), own(gain), own(bias), own(out)});
  }
  return out;
}

Tensor conv1d_depthwise(const Tensor& x, const Tensor& kernel, const Tensor& bias, bool causal) {
  check_rank2("conv1d_depthwise", x);
  check_rank2("conv1d_depthwise", kernel);
  const int64_t t_len = x.rows(), ch = x.cols(), k = kernel.rows();
  if (kernel.cols() != ch)
    fail("conv1d_depthwise: kernel " + shape_str(kernel.shape()) + " does not match channels of " +
         shape_str(x.shape()));
  if (k < 1) fail("conv1d_depthwise: kernel width must be >= 1");
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != ch))
    fail("conv1d_depthwise: bias " + shape_str(bias.shape()) + " does not match channels " +
         std::to_string(ch));
  const int64_t left = causal ? k - 1 : (k - 1) / 2;
  const bool tracked = has_bias ? any_tracked({x, kernel, bias}) : any_tracked({x, kernel});
  Tensor out = make_output({t_len, ch}, tracked);
  const double* px = x.data();
  const double* pk = kernel.data();
  double* po = out.data();
  for (int64_t t = 0; t < t_len; ++t) {
    double* orow = po + t * ch;
    if (has_bias) std::copy(bias.data(), bias.data() + ch, orow);
    for (int64_t kk = 0; kk < k; ++kk) {
      // causal: tap kk reads x[t-kk]; centered: tap kk reads x[t+kk-left]
      const int64_t s = causal ? t - kk : t + kk - left;
      if (s < 0 || s >= t_len) continue;
      const double* xrow = px + s * ch;
      const double* krow = pk + kk * ch;
      for (int64_t c = 0; c < ch; ++c) orow[c] += krow[c] * xrow[c];
    }
  }
  if (recording(tracked)) {
    Tape::current()->record(
        [x, kernel, bias, out, t_len, ch, k, causal, left, has_bias](Tape& tape) {
          const auto* g = tape.flowing_grad(out.impl());
          if (!g) return;
          std::vector<double>* gx = x.requires_grad() ? &tape.grad_slot(x.impl()) : nullptr;
          std::vector<double>* gk =
              kernel.requires_grad() ? &tape.grad_slot(kernel.impl()) : nullptr;
          std::vector<double>* gb =
              has_bias && bias.requires_grad() ? &tape.grad_slot(bias.impl()) : nullptr;
          for (int64_t t = 0; t < t_len; ++t) {
            const double* gr = g->data() + t * ch;
            if (gb)
              for (int64_t c = 0; c < ch; ++c) (*gb)[static_cast<size_t>(c)] += gr[c];
            for (int64_t kk = 0; kk < k; ++kk) {
              const int64_t s = causal ? t - kk : t + kk - left;
              if (s < 0 || s >= t_len) continue;
              for (int64_t c = 0; c < ch; ++c) {
                if (gx)
                  (*gx)[static_cast<size_t>(s * ch + c)] +=
                      kernel.data()[kk * ch + c] * gr[c];
                if (gk)
                  (*gk)[static_cast<size_t>(kk * ch + c)] += x.data()[s * ch + c] * gr[c];
              }
            }
          }
        },
        has_bias
            ? std::vector<std::shared_ptr<TensorImpl>>{own(x), own(kernel), own(bias), own(out)}
            : std::vector<std::shared_ptr<TensorImpl>>{own(x), own(kernel), own(out)});
  }
  return out;
}

Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int64_t>& targets,
                          const std::vector<int64_t>& rows) {
  check_rank2("cross_entropy_mean", logits);
  const int64_t m = logits.rows(), v = logits.cols();
  if (static_cast<int64_t>(targets.size()) != m)
    fail("cross_entropy_mean: " + std::to_string(targets.size()) + " targets for " +
         std::to_string(m) + " rows");
  const bool tracked = logits.requires_grad();
  if (rows.empty()) {
    // empty selection contributes an exact zero that still closes the graph
    Tensor out = make_output({1}, tracked);
    if (recording(tracked))
      Tape::current()->record([](Tape&) {}, {own(logits), own(out)});
    return out;
  }
  for (int64_t r : rows) {
    if (r < 0 || r >= m) fail("cross_entropy_mean: row " + std::to_string(r) + " out of range");
    if (targets[static_cast<size_t>(r)] < 0 || targets[static_cast<size_t>(r)] >= v)
      fail("cross_entropy_mean: target " + std::to_string(targets[static_cast<size_t>(r)]) +
           " out of vocab " + std::to_string(v));
  }
  Tensor out = make_output({1}, tracked);
  double acc = 0.0;
  const double* pl = logits.data();
  for (int64_t r : rows) {
    const double* row = pl + r * v;
    double mx = row[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int64_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    acc += mx + std::log(z) - row[targets[static_cast<size_t>(r)]];
  }
  out.data()[0] = acc / static_cast<double>(rows.size());
  if (recording(tracked)) {
    Tape::current()->record(
        [logits, out, targets, rows, m, v](Tape& tape) {
          const auto* g = tape.flowing_grad(out.impl());
          if (!g) return;
          const double gscale = (*g)[0] / static_cast<double>(rows.size());
          auto& gl = tape.grad_slot(logits.impl());
          for (int64_t r : rows) {
            const double* row = logits.data() + r * v;
            double mx = row[0];
            for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
            double z = 0.0;
            for (int64_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
            for (int64_t j = 0; j < v; ++j) {
              const double p = std::exp(row[j] - mx) / z;
              gl[static_cast<size_t>(r * v + j)] += gscale * p;
            }
            gl[static_cast<size_t>(r * v + targets[static_cast<size_t>(r)])] -= gscale;
          }
          (void)m;
        },
        {own(logits), own(out)});
  }
  return out;
}

Tensor film(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  detail::check_same_shape("film", x, gamma);
  detail::check_same_shape("film", x, beta);
  const bool tracked = any_tracked({x, gamma, beta});
  Tensor out = make_output(x.shape(), tracked);
  const double* px = x.data();
  const double* pg = gamma.data();
  const double* pb = beta.data();
  double* po = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = (1.0 + pg[i]) * px[i] + pb[i];
  if (recording(tracked)) {
    Tape::current()->record(
        [x, gamma, beta, out, n](Tape& tape) {
          const auto* g = tape.flowing_grad(out.impl());
          if (!g) return;
          std::vector<double>* gx = x.requires_grad() ? &tape.grad_slot(x.impl()) : nullptr;
          std::vector<double>* gg = gamma.requires_grad() ? &tape.grad_slot(gamma.impl()) : nullptr;
          std::vector<double>* gb = beta.requires_grad() ? &tape.grad_slot(beta.impl()) : nullptr;
          for (int64_t i = 0; i < n; ++i) {
            const double gr = (*g)[static_cast<size_t>(i)];
            if (gx) (*gx)[static_cast<size_t>(i)] += gr * (1.0 + gamma.data()[i]);
            if (gg) (*gg)[static_cast<size_t>(i)] += gr * x.data()[i];
            if (gb) (*gb)[static_cast<size_t>(i)] += gr;
          }
        },
        {own(x), own(gamma), own(beta), own(out)});
  }
  return out;
}

}  // namespace lcmf
