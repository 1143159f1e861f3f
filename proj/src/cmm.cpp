#include "lcmf/cmm.hpp"

#include <utility>

namespace lcmf {

namespace {

void check_core_config(const MambaCoreConfig& cfg) {
  if (cfg.d_model < 1 || cfg.d_inner < 1 || cfg.n_state < 1 || cfg.conv_width < 1)
    detail::fail("mamba core: all dimensions must be positive");
}

bool has_tokens(const Tensor& x) { return x.defined() && x.dim(0) > 0; }

}  // namespace

MambaCore::MambaCore(ParamStore& store, const std::string& name, const MambaCoreConfig& cfg,
                     bool unimodal_bc)
    : cfg_(cfg) {
  check_core_config(cfg);
  ln_in_ = LayerNormLayer(store, name + ".ln_in", cfg.d_model);
  in_proj_ = Linear(store, name + ".in_proj", cfg.d_model, 2 * cfg.d_inner);
  a_proj_ = Linear(store, name + ".a_proj", cfg.d_inner, cfg.d_inner);
  delta_proj_ = Linear(store, name + ".delta_proj", cfg.d_inner, cfg.d_inner);
  if (unimodal_bc) {
    b_proj_ = Linear(store, name + ".b_proj", cfg.d_inner, cfg.n_state);
    c_proj_ = Linear(store, name + ".c_proj", cfg.d_inner, cfg.n_state);
    conv_b_k_ = store.uniform_fan_in(name + ".conv_b.k", {cfg.conv_width, cfg.n_state},
                                     cfg.conv_width);
    conv_b_bias_ = store.zeros(name + ".conv_b.bias", {cfg.n_state});
    conv_c_k_ = store.uniform_fan_in(name + ".conv_c.k", {cfg.conv_width, cfg.n_state},
                                     cfg.conv_width);
    conv_c_bias_ = store.zeros(name + ".conv_c.bias", {cfg.n_state});
  }
  conv_gate_k_ = store.uniform_fan_in(name + ".conv_gate.k", {cfg.conv_width, cfg.d_inner},
                                      cfg.conv_width);
  conv_gate_bias_ = store.zeros(name + ".conv_gate.bias", {cfg.d_inner});
  d_skip_ = store.ones(name + ".d_skip", {cfg.d_inner});
  out_proj_ = Linear::zero_init(store, name + ".out_proj", cfg.d_inner, cfg.d_model);
}

MambaCore::Split MambaCore::project(const Tensor& x) const {
  if (x.rank() != 2 || x.cols() != cfg_.d_model)
    detail::fail("mamba core: input " + detail::shape_str(x.shape()) + " does not match width " +
                 std::to_string(cfg_.d_model));
  Split s;
  s.normed = ln_in_(x);
  Tensor u = in_proj_(s.normed);
  s.u_ssm = slice_cols(u, 0, cfg_.d_inner);
  s.u_conv = slice_cols(u, cfg_.d_inner, 2 * cfg_.d_inner);
  return s;
}

Tensor MambaCore::rate_a(const Tensor& u_ssm) const { return sigmoid(a_proj_(u_ssm)); }

Tensor MambaCore::step_delta(const Tensor& u_ssm) const { return softplus(delta_proj_(u_ssm)); }

Tensor MambaCore::own_b(const Tensor& u_ssm) const {
  return silu(conv1d_depthwise(b_proj_(u_ssm), conv_b_k_, conv_b_bias_, /*causal=*/true));
}

Tensor MambaCore::own_c(const Tensor& u_ssm) const {
  return silu(conv1d_depthwise(c_proj_(u_ssm), conv_c_k_, conv_c_bias_, /*causal=*/true));
}

Tensor MambaCore::finish(const Split& s, const Tensor& b, const Tensor& c) const {
  SsmParams p{rate_a(s.u_ssm), step_delta(s.u_ssm), b, c};
  DiscretizedSsm dis = discretize(p, cfg_.stable_mode);
  Tensor v_ssm = scan_sequential(s.u_ssm, dis, c, d_skip_);
  Tensor gate = sigmoid(conv1d_depthwise(s.u_conv, conv_gate_k_, conv_gate_bias_, /*causal=*/true));
  return out_proj_(mul(v_ssm, gate));
}

Tensor MambaCore::branch(const Tensor& x) const {
  Split s = project(x);
  return finish(s, own_b(s.u_ssm), own_c(s.u_ssm));
}

MambaPreproc::MambaPreproc(ParamStore& store, const std::string& name, const MambaCoreConfig& cfg)
    : core_(store, name, cfg) {}

Tensor MambaPreproc::operator()(const Tensor& x) const { return add(x, core_.branch(x)); }

CmmBlock::CmmBlock(ParamStore& store, const std::string& name, const MambaCoreConfig& cfg,
                   double alpha)
    : alpha_(alpha), cfg_(cfg) {
  if (alpha < 0.0 || alpha > 1.0) detail::fail("cmm: alpha outside [0,1]");
  core_v_ = MambaCore(store, name + ".visual", cfg, /*unimodal_bc=*/false);
  core_l_ = MambaCore(store, name + ".linguistic", cfg, /*unimodal_bc=*/false);
  b_shared_ = Linear(store, name + ".b_shared", 2 * cfg.d_inner, cfg.n_state);
  c_shared_ = Linear(store, name + ".c_shared", 2 * cfg.d_inner, cfg.n_state);
  conv_b_k_ = store.uniform_fan_in(name + ".conv_b.k", {cfg.conv_width, cfg.n_state},
                                   cfg.conv_width);
  conv_b_bias_ = store.zeros(name + ".conv_b.bias", {cfg.n_state});
  conv_c_k_ = store.uniform_fan_in(name + ".conv_c.k", {cfg.conv_width, cfg.n_state},
                                   cfg.conv_width);
  conv_c_bias_ = store.zeros(name + ".conv_c.bias", {cfg.n_state});
  ln_out_v_ = LayerNormLayer(store, name + ".visual.ln_out", cfg.d_model);
  ln_out_l_ = LayerNormLayer(store, name + ".linguistic.ln_out", cfg.d_model);
}

Tensor CmmBlock::shared_b(const Tensor& u_host, const Tensor& summary) const {
  Tensor cat = concat_cols(u_host, broadcast_row(summary, u_host.rows()));
  return silu(conv1d_depthwise(b_shared_(cat), conv_b_k_, conv_b_bias_, /*causal=*/true));
}

Tensor CmmBlock::shared_c(const Tensor& u_host, const Tensor& summary) const {
  Tensor cat = concat_cols(u_host, broadcast_row(summary, u_host.rows()));
  return silu(conv1d_depthwise(c_shared_(cat), conv_c_k_, conv_c_bias_, /*causal=*/true));
}

Tensor CmmBlock::stream_out(const MambaCore& core, const LayerNormLayer& ln_out,
                            const MambaCore::Split& s, const Tensor& summary) const {
  Tensor b = shared_b(s.u_ssm, summary);
  Tensor c = shared_c(s.u_ssm, summary);
  Tensor x_prime = add(s.normed, core.finish(s, b, c));
  return ln_out(x_prime);
}

std::pair<Tensor, Tensor> CmmBlock::forward(const Tensor& x_visual,
                                            const Tensor& x_linguistic) const {
  const bool hv = has_tokens(x_visual);
  const bool hl = has_tokens(x_linguistic);
  if (hv && hl && x_visual.cols() != x_linguistic.cols())
    detail::fail("cmm: stream widths differ, " + detail::shape_str(x_visual.shape()) + " vs " +
                 detail::shape_str(x_linguistic.shape()));

  MambaCore::Split sv, sl;
  if (hv) sv = core_v_.project(x_visual);
  if (hl) sl = core_l_.project(x_linguistic);

  // Summaries come from the pre-interaction snapshots. alpha = 0 or an empty
  // stream yields literal zeros rather than a scaled pool, which keeps the
  // host bitwise independent of the other stream's content.
  Tensor zero_summary = Tensor::zeros({cfg_.d_inner});
  Tensor sum_for_v = (hl && alpha_ != 0.0) ? scale(mean_rows(sl.u_ssm), alpha_) : zero_summary;
  Tensor sum_for_l = (hv && alpha_ != 0.0) ? scale(mean_rows(sv.u_ssm), alpha_) : zero_summary;

  Tensor z_v = hv ? stream_out(core_v_, ln_out_v_, sv, sum_for_v) : x_visual;
  Tensor z_l = hl ? stream_out(core_l_, ln_out_l_, sl, sum_for_l) : x_linguistic;
  return {z_v, z_l};
}

CmmHostBlock::CmmHostBlock(ParamStore& store, const std::string& name, const MambaCoreConfig& cfg,
                           double alpha)
    : alpha_(alpha), cfg_(cfg) {
  if (alpha < 0.0 || alpha > 1.0) detail::fail("cmm: alpha outside [0,1]");
  core_ = MambaCore(store, name + ".host", cfg, /*unimodal_bc=*/false);
  ctx_ln_ = LayerNormLayer(store, name + ".context.ln_in", cfg.d_model);
  ctx_proj_ = Linear(store, name + ".context.proj", cfg.d_model, cfg.d_inner);
  b_shared_ = Linear(store, name + ".b_shared", 2 * cfg.d_inner, cfg.n_state);
  c_shared_ = Linear(store, name + ".c_shared", 2 * cfg.d_inner, cfg.n_state);
  conv_b_k_ = store.uniform_fan_in(name + ".conv_b.k", {cfg.conv_width, cfg.n_state},
                                   cfg.conv_width);
  conv_b_bias_ = store.zeros(name + ".conv_b.bias", {cfg.n_state});
  conv_c_k_ = store.uniform_fan_in(name + ".conv_c.k", {cfg.conv_width, cfg.n_state},
                                   cfg.conv_width);
  conv_c_bias_ = store.zeros(name + ".conv_c.bias", {cfg.n_state});
  ln_out_ = LayerNormLayer(store, name + ".host.ln_out", cfg.d_model);
}

Tensor CmmHostBlock::operator()(const Tensor& x_host, const Tensor& x_context) const {
  if (!has_tokens(x_host)) return x_host;
  if (has_tokens(x_context) && x_context.cols() != cfg_.d_model)
    detail::fail("cmm: context width " + detail::shape_str(x_context.shape()) +
                 " does not match " + std::to_string(cfg_.d_model));
  MambaCore::Split s = core_.project(x_host);
  Tensor summary = (has_tokens(x_context) && alpha_ != 0.0)
                       ? scale(mean_rows(ctx_proj_(ctx_ln_(x_context))), alpha_)
                       : Tensor::zeros({cfg_.d_inner});
  Tensor cat = concat_cols(s.u_ssm, broadcast_row(summary, s.u_ssm.rows()));
  Tensor b = silu(conv1d_depthwise(b_shared_(cat), conv_b_k_, conv_b_bias_, /*causal=*/true));
  Tensor c = silu(conv1d_depthwise(c_shared_(cat), conv_c_k_, conv_c_bias_, /*causal=*/true));
  return ln_out_(add(s.normed, core_.finish(s, b, c)));
}

CmmStack::CmmStack(ParamStore& store, const std::string& name, const MambaCoreConfig& cfg,
                   int64_t layers) {
  if (layers < 1) detail::fail("cmm stack: needs at least one layer");
  pre_v_ = MambaPreproc(store, name + ".pre.visual", cfg);
  pre_l_ = MambaPreproc(store, name + ".pre.linguistic", cfg);
  for (int64_t l = 1; l <= layers; ++l) {
    const double alpha = static_cast<double>(l) / static_cast<double>(layers);
    blocks_.emplace_back(store, name + ".layer" + std::to_string(l), cfg, alpha);
  }
}

std::pair<Tensor, Tensor> CmmStack::forward(const Tensor& x_visual,
                                            const Tensor& x_linguistic) const {
  Tensor v = has_tokens(x_visual) ? pre_v_(x_visual) : x_visual;
  Tensor l = has_tokens(x_linguistic) ? pre_l_(x_linguistic) : x_linguistic;
  for (const CmmBlock& blk : blocks_) {
    auto [nv, nl] = blk.forward(v, l);
    v = nv;
    l = nl;
  }
  return {v, l};
}

// Cost conventions shared with flops_attention: 1 flop per scalar multiply,
// add, exp, or divide; sigmoid = 4, softplus = 3, silu = 5; a depthwise conv
// output costs 2*width (width multiplies, width-1 adds, 1 bias add);
// normalization layers and residual adds are excluded on both sides.
namespace {

int64_t core_common_flops(int64_t t, const MambaCoreConfig& cfg) {
  const int64_t d = cfg.d_model, e = cfg.d_inner, n = cfg.n_state, k = cfg.conv_width;
  int64_t f = 0;
  f += 2 * t * d * (2 * e) + t * (2 * e);  // input projection + bias
  f += 2 * (2 * t * e * e + t * e);        // A and delta maps
  f += (4 + 3) * t * e;                    // sigmoid(A), softplus(delta)
  f += t * e * (4 + n);                    // discretization
  f += flops_scan(t, e, n);
  f += t * e * (2 * k) + 4 * t * e + t * e;  // gate conv, sigmoid, hadamard
  f += 2 * t * e * d + t * d;                // output projection + bias
  return f;
}

int64_t bc_path_flops(int64_t t, int64_t in_width, const MambaCoreConfig& cfg) {
  const int64_t n = cfg.n_state, k = cfg.conv_width;
  // linear + bias, conv, silu; twice (B and C)
  return 2 * (2 * t * in_width * n + t * n + t * n * (2 * k) + 5 * t * n);
}

}  // namespace

int64_t flops_mamba_core(int64_t t_len, const MambaCoreConfig& cfg) {
  check_core_config(cfg);
  if (t_len <= 0) return 0;
  return core_common_flops(t_len, cfg) + bc_path_flops(t_len, cfg.d_inner, cfg);
}

int64_t flops_cmm(int64_t t_v, int64_t t_l, const MambaCoreConfig& cfg) {
  check_core_config(cfg);
  int64_t f = 0;
  for (int64_t t : {t_v, t_l})
    if (t > 0) f += core_common_flops(t, cfg) + bc_path_flops(t, 2 * cfg.d_inner, cfg);
  // Pooled summaries: the reduction adds. The per-summary divide and alpha
  // scale are dropped so the total stays exactly linear in sequence length.
  if (t_v > 0 && t_l > 0) f += (t_v + t_l) * cfg.d_inner;
  return f;
}

int64_t flops_cmm_host(int64_t t_host, int64_t t_context, const MambaCoreConfig& cfg) {
  check_core_config(cfg);
  if (t_host <= 0) return 0;
  int64_t f = core_common_flops(t_host, cfg) + bc_path_flops(t_host, 2 * cfg.d_inner, cfg);
  if (t_context > 0) {
    f += 2 * t_context * cfg.d_model * cfg.d_inner + t_context * cfg.d_inner;  // projection
    f += t_context * cfg.d_inner;                                              // pooled adds
  }
  return f;
}

}  // namespace lcmf
