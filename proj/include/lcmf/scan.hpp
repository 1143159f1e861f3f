#pragma once

#include <cstdint>

#include "lcmf/tensor.hpp"

namespace lcmf {

// Per-position selective-SSM parameters. A and delta carry one scalar per
// (position, channel); B and C carry one state-space vector per position.
struct SsmParams {
  Tensor a;      // [T,D], raw (pre sign convention)
  Tensor delta;  // [T,D], must be > 0
  Tensor b;      // [T,N]
  Tensor c;      // [T,N]
};

struct DiscretizedSsm {
  Tensor a_bar;  // [T,D]   exp(a_eff * delta)
  Tensor b_bar;  // [T,D,N] ((exp(a_eff*delta)-1)/a_eff) * B, or delta*B in the limit
};

// |a_eff * delta| below this uses the analytic limit b_bar = delta * B.
inline constexpr double kDiscretizeLimitEps = 1e-8;

// Zero-order-hold discretization. stable_mode negates A before exponentiation
// so positive activations yield a contracting recurrence; paper-literal mode
// (stable_mode = false) exponentiates A as-is.
DiscretizedSsm discretize(const SsmParams& p, bool stable_mode);

// h[t] = a_bar[t] (.) h[t-1] + b_bar[t] * x[t];  y[t,d] = sum_n c[t,n] h[t,d,n] + d_skip[d] x[t,d]
// with h[-1] = 0.
Tensor scan_sequential(const Tensor& x, const DiscretizedSsm& d, const Tensor& c,
                       const Tensor& d_skip);

// Fixed-length block partition of [0,T); the final block may be short.
struct ScanBlockPlan {
  int64_t block_length = 64;

  int64_t block_count(int64_t t_len) const;
  void validate(int64_t t_len) const;
};

// Two phases: a carry pass propagates the hidden state across block
// boundaries, then each block is filled from its carry. Identical arithmetic
// per state element, so the result matches scan_sequential bitwise for every
// plan.
Tensor scan_blocked(const Tensor& x, const DiscretizedSsm& d, const Tensor& c,
                    const Tensor& d_skip, const ScanBlockPlan& plan);

// One recurrence step per (t, d): 3N flops for the state update, 2N for the
// output dot, and 1 for the skip-path multiply.
int64_t flops_scan(int64_t t_len, int64_t d_dim, int64_t n_state);

}  // namespace lcmf
