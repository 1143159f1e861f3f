#include "lcmf/scan.hpp"

#include <cmath>
#include <memory>
#include <string>

#include "lcmf/parallel.hpp"

namespace lcmf {

using detail::fail;
using detail::shape_str;
using detail::TensorImpl;

namespace {

// psi(u) = (e^u - 1)/u, psi(0) = 1; derivative with a series branch because
// the closed form loses all precision near zero.
double psi_prime(double u) {
  if (std::abs(u) < 1e-3)
    return 0.5 + u / 3.0 + u * u / 8.0 + u * u * u / 30.0;
  return (std::exp(u) * (u - 1.0) + 1.0) / (u * u);
}

void check_ssm_shapes(const SsmParams& p) {
  if (p.a.rank() != 2 || p.delta.rank() != 2 || p.b.rank() != 2 || p.c.rank() != 2)
    fail("discretize: A/delta/B/C must be rank-2");
  if (p.a.shape() != p.delta.shape())
    fail("discretize: A " + shape_str(p.a.shape()) + " vs delta " + shape_str(p.delta.shape()));
  if (p.b.shape() != p.c.shape())
    fail("discretize: B " + shape_str(p.b.shape()) + " vs C " + shape_str(p.c.shape()));
  if (p.a.rows() != p.b.rows())
    fail("discretize: A has T=" + std::to_string(p.a.rows()) + " but B has T=" +
         std::to_string(p.b.rows()));
}

}  // namespace

DiscretizedSsm discretize(const SsmParams& p, bool stable_mode) {
  check_ssm_shapes(p);
  const int64_t t_len = p.a.rows(), d_dim = p.a.cols(), n_state = p.b.cols();
  for (int64_t i = 0; i < p.delta.numel(); ++i)
    if (!(p.delta.data()[i] > 0.0))
      fail("discretize: delta must be positive, got " + std::to_string(p.delta.data()[i]));

  const bool tracked = any_tracked({p.a, p.delta, p.b});
  Tensor a_bar = Tensor::zeros({t_len, d_dim}, tracked);
  Tensor b_bar = Tensor::zeros({t_len, d_dim, n_state}, tracked);

  const double* pa = p.a.data();
  const double* pd = p.delta.data();
  const double* pb = p.b.data();
  double* pab = a_bar.data();
  double* pbb = b_bar.data();
  const double sign = stable_mode ? -1.0 : 1.0;

  for (int64_t t = 0; t < t_len; ++t) {
    const double* brow = pb + t * n_state;
    for (int64_t d = 0; d < d_dim; ++d) {
      const double a_eff = sign * pa[t * d_dim + d];
      const double dt = pd[t * d_dim + d];
      const double u = a_eff * dt;
      pab[t * d_dim + d] = std::exp(u);
      const double s = std::abs(u) < kDiscretizeLimitEps ? dt : std::expm1(u) / a_eff;
      double* bbrow = pbb + (t * d_dim + d) * n_state;
      for (int64_t n = 0; n < n_state; ++n) bbrow[n] = s * brow[n];
    }
  }

  if (tracked && Tape::current()) {
    Tensor a = p.a, delta = p.delta, b = p.b;
    Tape::current()->record(
        [a, delta, b, a_bar, b_bar, t_len, d_dim, n_state, sign](Tape& tape) {
          const auto* gab = tape.flowing_grad(a_bar.impl());
          const auto* gbb = tape.flowing_grad(b_bar.impl());
          if (!gab && !gbb) return;
          std::vector<double>* ga = a.requires_grad() ? &tape.grad_slot(a.impl()) : nullptr;
          std::vector<double>* gd = delta.requires_grad() ? &tape.grad_slot(delta.impl()) : nullptr;
          std::vector<double>* gb = b.requires_grad() ? &tape.grad_slot(b.impl()) : nullptr;
          for (int64_t t = 0; t < t_len; ++t) {
            const double* brow = b.data() + t * n_state;
            for (int64_t d = 0; d < d_dim; ++d) {
              const int64_t td = t * d_dim + d;
              const double a_eff = sign * a.data()[td];
              const double dt = delta.data()[td];
              const double u = a_eff * dt;
              const double eu = std::exp(u);
              const double s = std::abs(u) < kDiscretizeLimitEps ? dt : std::expm1(u) / a_eff;
              double ga_eff = 0.0, gdt = 0.0;
              if (gab) {
                const double g = (*gab)[static_cast<size_t>(td)];
                ga_eff += g * dt * eu;
                gdt += g * a_eff * eu;
              }
              if (gbb) {
                const double* grow = gbb->data() + td * n_state;
                double gs = 0.0;
                for (int64_t n = 0; n < n_state; ++n) {
                  gs += grow[n] * brow[n];
                  if (gb) (*gb)[static_cast<size_t>(t * n_state + n)] += grow[n] * s;
                }
                // ds/da_eff = dt^2 psi'(u), ds/ddt = e^u
                ga_eff += gs * dt * dt * psi_prime(u);
                gdt += gs * eu;
              }
              if (ga) (*ga)[static_cast<size_t>(td)] += sign * ga_eff;
              if (gd) (*gd)[static_cast<size_t>(td)] += gdt;
            }
          }
        },
        {a.handle(), delta.handle(), b.handle(), a_bar.handle(), b_bar.handle()});
  }
  return {a_bar, b_bar};
}

namespace {

void check_scan_shapes(const Tensor& x, const DiscretizedSsm& d, const Tensor& c,
                       const Tensor& d_skip) {
  if (x.rank() != 2) fail("scan: x must be rank-2, got " + shape_str(x.shape()));
  const int64_t t_len = x.rows(), d_dim = x.cols();
  if (d.a_bar.rank() != 2 || d.a_bar.rows() != t_len || d.a_bar.cols() != d_dim)
    fail("scan: a_bar " + shape_str(d.a_bar.shape()) + " does not match x " + shape_str(x.shape()));
  if (d.b_bar.rank() != 3 || d.b_bar.dim(0) != t_len || d.b_bar.dim(1) != d_dim)
    fail("scan: b_bar " + shape_str(d.b_bar.shape()) + " does not match x " + shape_str(x.shape()));
  const int64_t n_state = d.b_bar.dim(2);
  if (c.rank() != 2 || c.rows() != t_len || c.cols() != n_state)
    fail("scan: c " + shape_str(c.shape()) + " does not match b_bar " + shape_str(d.b_bar.shape()));
  if (d_skip.rank() != 1 || d_skip.dim(0) != d_dim)
    fail("scan: d_skip " + shape_str(d_skip.shape()) + " does not match channel count " +
         std::to_string(d_dim));
}

// Runs the recurrence for rows [t0, t1) of one channel, starting from h_state
// (length n_state, updated in place). Emits y when y != nullptr.
void scan_channel_range(const double* x, const double* ab, const double* bb, const double* c,
                        double dsk, double* y, double* h_state, int64_t t0, int64_t t1,
                        int64_t d, int64_t d_dim, int64_t n_state, double* h_out) {
  for (int64_t t = t0; t < t1; ++t) {
    const double xv = x[t * d_dim + d];
    const double av = ab[t * d_dim + d];
    const double* bbrow = bb + (t * d_dim + d) * n_state;
    const double* crow = c + t * n_state;
    double acc = dsk * xv;
    for (int64_t n = 0; n < n_state; ++n) {
      h_state[n] = av * h_state[n] + bbrow[n] * xv;
      acc += crow[n] * h_state[n];
    }
    if (y) y[t * d_dim + d] = acc;
    if (h_out)
      for (int64_t n = 0; n < n_state; ++n) h_out[(t * d_dim + d) * n_state + n] = h_state[n];
  }
}

// Shared forward+tape for the sequential and blocked paths; `plan` null means
// one block covering [0,T).
Tensor scan_impl(const Tensor& x, const DiscretizedSsm& d, const Tensor& c, const Tensor& d_skip,
                 const ScanBlockPlan* plan) {
  check_scan_shapes(x, d, c, d_skip);
  const int64_t t_len = x.rows(), d_dim = x.cols(), n_state = d.b_bar.dim(2);
  if (plan) plan->validate(t_len);

  const bool tracked = any_tracked({x, d.a_bar, d.b_bar, c, d_skip});
  const bool taping = tracked && Tape::current() != nullptr;
  Tensor y = Tensor::zeros({t_len, d_dim}, tracked);

  // full state history is only needed for the backward pass
  std::shared_ptr<std::vector<double>> h_hist;
  if (taping)
    h_hist = std::make_shared<std::vector<double>>(static_cast<size_t>(t_len * d_dim * n_state));
  double* h_out = h_hist ? h_hist->data() : nullptr;

  const int64_t n_blocks = plan ? plan->block_count(t_len) : 1;
  const int64_t blen = plan ? plan->block_length : t_len;

  if (n_blocks <= 1) {
    parallel_for(d_dim, [&](int64_t dd) {
      std::vector<double> h(static_cast<size_t>(n_state), 0.0);
      scan_channel_range(x.data(), d.a_bar.data(), d.b_bar.data(), c.data(), d_skip.data()[dd],
                         y.data(), h.data(), 0, t_len, dd, d_dim, n_state, h_out);
    });
  } else {
    // phase 1: propagate carries block to block (state only, no output)
    std::vector<double> carries(static_cast<size_t>(n_blocks * d_dim * n_state), 0.0);
    parallel_for(d_dim, [&](int64_t dd) {
      std::vector<double> h(static_cast<size_t>(n_state), 0.0);
      for (int64_t b = 0; b + 1 < n_blocks; ++b) {
        const int64_t t0 = b * blen;
        const int64_t t1 = std::min(t_len, t0 + blen);
        scan_channel_range(x.data(), d.a_bar.data(), d.b_bar.data(), c.data(), d_skip.data()[dd],
                           nullptr, h.data(), t0, t1, dd, d_dim, n_state, nullptr);
        double* slot = carries.data() + ((b + 1) * d_dim + dd) * n_state;
        for (int64_t n = 0; n < n_state; ++n) slot[n] = h[n];
      }
    });
    // phase 2: fill every block from its carry
    parallel_for(n_blocks * d_dim, [&](int64_t i) {
      const int64_t b = i / d_dim;
      const int64_t dd = i % d_dim;
      const int64_t t0 = b * blen;
      const int64_t t1 = std::min(t_len, t0 + blen);
      std::vector<double> h(static_cast<size_t>(n_state));
      const double* slot = carries.data() + (b * d_dim + dd) * n_state;
      for (int64_t n = 0; n < n_state; ++n) h[static_cast<size_t>(n)] = slot[n];
      scan_channel_range(x.data(), d.a_bar.data(), d.b_bar.data(), c.data(), d_skip.data()[dd],
                         y.data(), h.data(), t0, t1, dd, d_dim, n_state, h_out);
    });
  }

  if (taping) {
    Tensor a_bar = d.a_bar, b_bar = d.b_bar;
    Tape::current()->record(
        [x, a_bar, b_bar, c, d_skip, y, h_hist, t_len, d_dim, n_state](Tape& tape) {
          const auto* gy = tape.flowing_grad(y.impl());
          if (!gy) return;
          std::vector<double>* gx = x.requires_grad() ? &tape.grad_slot(x.impl()) : nullptr;
          std::vector<double>* gab = a_bar.requires_grad() ? &tape.grad_slot(a_bar.impl()) : nullptr;
          std::vector<double>* gbb = b_bar.requires_grad() ? &tape.grad_slot(b_bar.impl()) : nullptr;
          std::vector<double>* gc = c.requires_grad() ? &tape.grad_slot(c.impl()) : nullptr;
          std::vector<double>* gd = d_skip.requires_grad() ? &tape.grad_slot(d_skip.impl()) : nullptr;
          const double* h = h_hist->data();

          // gc and gd accumulate across channels; keep their writes on the
          // recording thread by splitting only over d.
          std::vector<double> gh(static_cast<size_t>(n_state));
          for (int64_t dd = 0; dd < d_dim; ++dd) {
            std::fill(gh.begin(), gh.end(), 0.0);
            for (int64_t t = t_len - 1; t >= 0; --t) {
              const int64_t td = t * d_dim + dd;
              const double gyv = gy->data()[td];
              const double* crow = c.data() + t * n_state;
              const double* bbrow = b_bar.data() + td * n_state;
              const double xv = x.data()[td];
              double gx_acc = gyv * d_skip.data()[dd];
              double gab_acc = 0.0;
              for (int64_t n = 0; n < n_state; ++n) {
                // gh holds a_bar[t+1]*gh[t+1] from the previous iteration
                const double ghn = gyv * crow[n] + gh[static_cast<size_t>(n)];
                const double h_prev =
                    t > 0 ? h[((t - 1) * d_dim + dd) * n_state + n] : 0.0;
                if (gab) gab_acc += ghn * h_prev;
                if (gbb) (*gbb)[static_cast<size_t>(td * n_state + n)] += ghn * xv;
                gx_acc += ghn * bbrow[n];
                if (gc)
                  (*gc)[static_cast<size_t>(t * n_state + n)] += gyv * h[td * n_state + n];
                // prepare carry for step t-1
                gh[static_cast<size_t>(n)] =
                    ghn * a_bar.data()[td];
              }
              if (gab) (*gab)[static_cast<size_t>(td)] += gab_acc;
              if (gx) (*gx)[static_cast<size_t>(td)] += gx_acc;
              if (gd) (*gd)[static_cast<size_t>(dd)] += gyv * xv;
            }
          }
        },
        {x.handle(), a_bar.handle(), b_bar.handle(), c.handle(), d_skip.handle(), y.handle()});
  }
  return y;
}

}  // namespace

Tensor scan_sequential(const Tensor& x, const DiscretizedSsm& d, const Tensor& c,
                       const Tensor& d_skip) {
  return scan_impl(x, d, c, d_skip, nullptr);
}

int64_t ScanBlockPlan::block_count(int64_t t_len) const {
  return (t_len + block_length - 1) / block_length;
}

void ScanBlockPlan::validate(int64_t t_len) const {
  if (block_length < 1)
    fail("ScanBlockPlan: block_length must be >= 1, got " + std::to_string(block_length));
  (void)t_len;
}

Tensor scan_blocked(const Tensor& x, const DiscretizedSsm& d, const Tensor& c,
                    const Tensor& d_skip, const ScanBlockPlan& plan) {
  return scan_impl(x, d, c, d_skip, &plan);
}

int64_t flops_scan(int64_t t_len, int64_t d_dim, int64_t n_state) {
  return t_len * d_dim * (5 * n_state + 1);
}

}  // namespace lcmf
