#include "lcmf/sam.hpp"

#include <cmath>

namespace lcmf {

MultiHeadAttention::MultiHeadAttention(ParamStore& store, const std::string& name,
                                       int64_t d_model, int64_t heads)
    : heads_(heads) {
  if (heads < 1 || d_model % heads != 0)
    detail::fail("attention: width " + std::to_string(d_model) + " not divisible into " +
                 std::to_string(heads) + " heads");
  head_dim_ = d_model / heads;
  q_ = Linear(store, name + ".q", d_model, d_model);
  k_ = Linear(store, name + ".k", d_model, d_model);
  v_ = Linear(store, name + ".v", d_model, d_model);
  o_ = Linear(store, name + ".o", d_model, d_model);
}

Tensor MultiHeadAttention::operator()(const Tensor& x) const {
  Tensor q = q_(x), k = k_(x), v = v_(x);
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(head_dim_));
  Tensor merged;
  for (int64_t h = 0; h < heads_; ++h) {
    const int64_t lo = h * head_dim_, hi = (h + 1) * head_dim_;
    Tensor qh = slice_cols(q, lo, hi);
    Tensor kh = slice_cols(k, lo, hi);
    Tensor vh = slice_cols(v, lo, hi);
    Tensor weights = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt_dk));
    Tensor oh = matmul(weights, vh);
    merged = merged.defined() ? concat_cols(merged, oh) : oh;
  }
  return o_(merged);
}

CrossAttention::CrossAttention(ParamStore& store, const std::string& name, int64_t d_model)
    : d_model_(d_model) {
  q_ = Linear(store, name + ".q", d_model, d_model, /*bias=*/false);
  k_ = Linear(store, name + ".k", d_model, d_model, /*bias=*/false);
  v_ = Linear(store, name + ".v", d_model, d_model, /*bias=*/false);
}

Tensor CrossAttention::operator()(const Tensor& queries, const Tensor& keys_values) const {
  if (!keys_values.defined() || keys_values.dim(0) < 1)
    detail::fail("cross-attention: empty key set");
  if (queries.cols() != d_model_ || keys_values.cols() != d_model_)
    detail::fail("cross-attention: width mismatch, " + detail::shape_str(queries.shape()) +
                 " vs " + detail::shape_str(keys_values.shape()));
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d_model_));
  Tensor weights = softmax_rows(scale(matmul_nt(q_(queries), k_(keys_values)), inv_sqrt_d));
  return matmul(weights, v_(keys_values));
}

AttentionSublayer::AttentionSublayer(ParamStore& store, const std::string& name, int64_t d_model,
                                     int64_t heads) {
  ln_in_ = LayerNormLayer(store, name + ".ln_in", d_model);
  ln_out_ = LayerNormLayer(store, name + ".ln_out", d_model);
  mha_ = MultiHeadAttention(store, name, d_model, heads);
}

Tensor AttentionSublayer::operator()(const Tensor& x) const {
  return ln_out_(add(x, mha_(ln_in_(x))));
}

MambaSublayer::MambaSublayer(ParamStore& store, const std::string& name,
                             const MambaCoreConfig& cfg) {
  ln_out_ = LayerNormLayer(store, name + ".ln_out", cfg.d_model);
  core_ = MambaCore(store, name, cfg);
}

Tensor MambaSublayer::operator()(const Tensor& x) const {
  return ln_out_(add(x, core_.branch(x)));
}

SamBlock::SamBlock(ParamStore& store, const std::string& name, const SamBlockConfig& cfg)
    : with_attention_(cfg.with_attention) {
  if (with_attention_) attn_ = AttentionSublayer(store, name + ".attn", cfg.core.d_model, cfg.heads);
  mamba_ = MambaSublayer(store, name + ".mamba", cfg.core);
}

Tensor SamBlock::operator()(const Tensor& x) const {
  return mamba_(with_attention_ ? attn_(x) : x);
}

VitBlock::VitBlock(ParamStore& store, const std::string& name, const VitBlockConfig& cfg) {
  attn_ = AttentionSublayer(store, name + ".attn", cfg.d_model, cfg.heads);
  mlp_in_ = Linear(store, name + ".mlp.in", cfg.d_model, cfg.mlp_ratio * cfg.d_model);
  mlp_out_ = Linear(store, name + ".mlp.out", cfg.mlp_ratio * cfg.d_model, cfg.d_model);
  ln_mlp_ = LayerNormLayer(store, name + ".mlp.ln_out", cfg.d_model);
}

Tensor VitBlock::operator()(const Tensor& x) const {
  Tensor y = attn_(x);
  return ln_mlp_(add(y, mlp_out_(silu(mlp_in_(y)))));
}

int64_t flops_attention(int64_t t_len, int64_t d_model, int64_t heads) {
  if (t_len <= 0 || d_model < 1 || heads < 1) return 0;
  const int64_t t = t_len, d = d_model, h = heads;
  int64_t f = 0;
  f += 4 * (2 * t * d * d + t * d);  // Q, K, V, O projections with bias
  f += 2 * t * t * d;                // QK^T over all heads
  f += h * t * t;                    // score scaling
  f += 4 * h * t * t;                // softmax: max subtraction, exp, sum, divide
  f += 2 * t * t * d;                // weighted value sum
  return f;
}

int64_t flops_cross_attention(int64_t t_q, int64_t t_k, int64_t d_model) {
  if (t_q <= 0 || t_k <= 0 || d_model < 1) return 0;
  const int64_t d = d_model;
  int64_t f = 0;
  f += 2 * t_q * d * d;      // query projection, bias-free
  f += 2 * (2 * t_k * d * d);  // key and value projections
  f += 2 * t_q * t_k * d;    // scores
  f += 5 * t_q * t_k;        // scaling + softmax
  f += 2 * t_q * t_k * d;    // weighted value sum
  return f;
}

}  // namespace lcmf
