#pragma once

#include <string>
#include <utility>
#include <vector>

#include "lcmf/nn.hpp"
#include "lcmf/scan.hpp"
#include "lcmf/tensor.hpp"

namespace lcmf {

struct MambaCoreConfig {
  int64_t d_model = 64;
  int64_t d_inner = 128;
  int64_t n_state = 16;
  int64_t conv_width = 4;
  bool stable_mode = true;
};

// Conv-gated selective-SSM branch. Computes only the branch value
// Linear_out(V); residual and normalization wiring belongs to the caller,
// because the three block styles built on this core disagree about it.
class MambaCore {
 public:
  MambaCore() = default;
  // unimodal_bc: register this core's own B/C projections. Cores embedded in
  // a cross-modal block leave them out and receive B/C from the block.
  MambaCore(ParamStore& store, const std::string& name, const MambaCoreConfig& cfg,
            bool unimodal_bc = true);

  struct Split {
    Tensor normed;  // LayerNorm(x); doubles as the residual base in interaction blocks
    Tensor u_ssm;   // [T, d_inner], feeds the recurrence and the A/delta/B/C maps
    Tensor u_conv;  // [T, d_inner], feeds the gate
  };

  Split project(const Tensor& x) const;

  // state-space rates from the host features only
  Tensor rate_a(const Tensor& u_ssm) const;      // sigmoid, in (0,1)
  Tensor step_delta(const Tensor& u_ssm) const;  // softplus, > 0

  // unimodal input/output mixers: SiLU(causal_conv(linear(u_ssm)))
  Tensor own_b(const Tensor& u_ssm) const;
  Tensor own_c(const Tensor& u_ssm) const;

  // discretize -> scan -> conv gate -> output projection
  Tensor finish(const Split& s, const Tensor& b, const Tensor& c) const;

  Tensor branch(const Tensor& x) const;  // project + own_b/own_c + finish

  const MambaCoreConfig& config() const { return cfg_; }

 private:
  MambaCoreConfig cfg_;
  LayerNormLayer ln_in_;
  Linear in_proj_;              // d_model -> 2*d_inner
  Linear a_proj_, delta_proj_;  // d_inner -> d_inner
  Linear b_proj_, c_proj_;      // d_inner -> n_state, unimodal cores only
  Tensor conv_b_k_, conv_b_bias_;
  Tensor conv_c_k_, conv_c_bias_;
  Tensor conv_gate_k_, conv_gate_bias_;
  Tensor d_skip_;
  Linear out_proj_;  // d_inner -> d_model, zero-initialized
};

// x + branch(x): identity at init, shape preserving.
class MambaPreproc {
 public:
  MambaPreproc() = default;
  MambaPreproc(ParamStore& store, const std::string& name, const MambaCoreConfig& cfg);
  Tensor operator()(const Tensor& x) const;
  const MambaCore& core() const { return core_; }

 private:
  MambaCore core_;
};

// One cross-modal interaction layer. B and C are produced by projections
// shared between the two streams, applied to [U_host ; alpha * pooled
// U_other]; A and delta stay private per stream. alpha = 0 short-circuits
// the pooled summary to exact zeros, so the host output is bitwise
// independent of the other stream's content.
class CmmBlock {
 public:
  CmmBlock() = default;
  CmmBlock(ParamStore& store, const std::string& name, const MambaCoreConfig& cfg, double alpha);

  // Returns (Z_visual, Z_linguistic). Both outputs are computed from
  // pre-interaction snapshots, so neither depends on evaluation order.
  // An empty stream passes through untouched and contributes a zero summary.
  std::pair<Tensor, Tensor> forward(const Tensor& x_visual, const Tensor& x_linguistic) const;

  double alpha() const { return alpha_; }

 private:
  Tensor shared_b(const Tensor& u_host, const Tensor& summary) const;
  Tensor shared_c(const Tensor& u_host, const Tensor& summary) const;
  Tensor stream_out(const MambaCore& core, const LayerNormLayer& ln_out,
                    const MambaCore::Split& s, const Tensor& summary) const;

  double alpha_ = 1.0;
  MambaCoreConfig cfg_;
  MambaCore core_v_, core_l_;
  Linear b_shared_, c_shared_;  // 2*d_inner -> n_state
  Tensor conv_b_k_, conv_b_bias_;
  Tensor conv_c_k_, conv_c_bias_;
  LayerNormLayer ln_out_v_, ln_out_l_;
};

// One-sided interaction layer for pipelines that keep only one stream. The
// host stream gets the full CmmBlock treatment (B/C from [U_host ; alpha *
// pooled context]); the context stream is reduced to LN -> projection ->
// mean pool and has no output pathway, so no parameters are registered for
// an output that would be discarded. alpha = 0 or an empty context keeps the
// host bitwise independent of the context's content.
class CmmHostBlock {
 public:
  CmmHostBlock() = default;
  CmmHostBlock(ParamStore& store, const std::string& name, const MambaCoreConfig& cfg,
               double alpha);

  // x_host [T, D] -> [T, D]; an empty host passes through untouched.
  Tensor operator()(const Tensor& x_host, const Tensor& x_context) const;

  double alpha() const { return alpha_; }

 private:
  double alpha_ = 1.0;
  MambaCoreConfig cfg_;
  MambaCore core_;
  LayerNormLayer ctx_ln_;
  Linear ctx_proj_;  // d_model -> d_inner, the context side of the pool
  Linear b_shared_, c_shared_;
  Tensor conv_b_k_, conv_b_bias_;
  Tensor conv_c_k_, conv_c_bias_;
  LayerNormLayer ln_out_;
};

// Per-stream preprocessing pass followed by `layers` interaction layers with
// alpha ramping l / layers up to exactly 1 at the top.
class CmmStack {
 public:
  CmmStack() = default;
  CmmStack(ParamStore& store, const std::string& name, const MambaCoreConfig& cfg, int64_t layers);

  std::pair<Tensor, Tensor> forward(const Tensor& x_visual, const Tensor& x_linguistic) const;

  int64_t layers() const { return static_cast<int64_t>(blocks_.size()); }
  const CmmBlock& block(int64_t i) const { return blocks_[static_cast<size_t>(i)]; }

 private:
  MambaPreproc pre_v_, pre_l_;
  std::vector<CmmBlock> blocks_;
};

// Analytic flop counts, 1 flop per scalar multiply, add, exp, or divide.
// Normalization layers and residual adds are excluded here and in the
// attention count so the two are comparable.
int64_t flops_mamba_core(int64_t t_len, const MambaCoreConfig& cfg);
// Both streams plus the pooled cross-summaries. Linear in t_v + t_l;
// an empty stream costs nothing.
int64_t flops_cmm(int64_t t_v, int64_t t_l, const MambaCoreConfig& cfg);
// Host stream of a one-sided interaction layer plus its context projection
// and pooling.
int64_t flops_cmm_host(int64_t t_host, int64_t t_context, const MambaCoreConfig& cfg);

}  // namespace lcmf
