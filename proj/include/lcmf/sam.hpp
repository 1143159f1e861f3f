#pragma once

#include <string>
#include <vector>

#include "lcmf/cmm.hpp"
#include "lcmf/nn.hpp"
#include "lcmf/tensor.hpp"

namespace lcmf {

// Non-causal multi-head scaled dot-product self-attention with biased
// query/key/value/output projections. Returns the projection output only;
// residual wiring is the sublayer's job.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& store, const std::string& name, int64_t d_model, int64_t heads);

  Tensor operator()(const Tensor& x) const;

  int64_t heads() const { return heads_; }
  int64_t head_dim() const { return head_dim_; }

 private:
  int64_t heads_ = 0;
  int64_t head_dim_ = 0;
  Linear q_, k_, v_, o_;
};

// Single-head scaled dot-product attention between two feature sets:
// Softmax(q W_q (k W_k)^T / sqrt(D)) (v W_v). Projections are bias-free and
// there is no output projection, so each instance costs exactly 3*D^2
// parameters. Used wherever one feature set queries another.
class CrossAttention {
 public:
  CrossAttention() = default;
  CrossAttention(ParamStore& store, const std::string& name, int64_t d_model);

  // queries [Tq, D], keys_values [Tk, D] -> [Tq, D]. Tk = 0 is an error.
  Tensor operator()(const Tensor& queries, const Tensor& keys_values) const;

 private:
  int64_t d_model_ = 0;
  Linear q_, k_, v_;
};

// LayerNorm(x + out_proj(attention(LayerNorm(x)))). With the output
// projection zero-initialized this is LayerNorm(x) exactly.
class AttentionSublayer {
 public:
  AttentionSublayer() = default;
  AttentionSublayer(ParamStore& store, const std::string& name, int64_t d_model, int64_t heads);

  Tensor operator()(const Tensor& x) const;
  const MultiHeadAttention& attention() const { return mha_; }

 private:
  LayerNormLayer ln_in_, ln_out_;
  MultiHeadAttention mha_;
};

// LayerNorm(x + mamba_branch(x)); the branch normalizes its own input.
class MambaSublayer {
 public:
  MambaSublayer() = default;
  MambaSublayer(ParamStore& store, const std::string& name, const MambaCoreConfig& cfg);

  Tensor operator()(const Tensor& x) const;
  const MambaCore& core() const { return core_; }

 private:
  LayerNormLayer ln_out_;
  MambaCore core_;
};

struct SamBlockConfig {
  MambaCoreConfig core;
  int64_t heads = 4;
  // Ablation switch: false drops the attention sublayer entirely (its
  // parameters are not registered) and the block degenerates to Mamba-only.
  bool with_attention = true;
};

// Attention sublayer cascaded into a unimodal selective-SSM sublayer.
// The attention stage has the global receptive field; the scan stage is
// order-sensitive, so the block as a whole is not permutation-equivariant.
class SamBlock {
 public:
  SamBlock() = default;
  SamBlock(ParamStore& store, const std::string& name, const SamBlockConfig& cfg);

  Tensor operator()(const Tensor& x) const;

  bool with_attention() const { return with_attention_; }
  const AttentionSublayer& attention_sublayer() const { return attn_; }
  const MambaSublayer& mamba_sublayer() const { return mamba_; }

 private:
  bool with_attention_ = true;
  AttentionSublayer attn_;
  MambaSublayer mamba_;
};

struct VitBlockConfig {
  int64_t d_model = 64;
  int64_t heads = 4;
  int64_t mlp_ratio = 2;
};

// Standard transformer block: attention sublayer then a two-layer SiLU MLP,
// each residual followed by LayerNorm.
class VitBlock {
 public:
  VitBlock() = default;
  VitBlock(ParamStore& store, const std::string& name, const VitBlockConfig& cfg);

  Tensor operator()(const Tensor& x) const;

 private:
  AttentionSublayer attn_;
  Linear mlp_in_, mlp_out_;
  LayerNormLayer ln_mlp_;
};

// Analytic count, same conventions as flops_cmm: projections, scores,
// softmax (4 flops per element including the max subtraction), and the
// weighted sum; normalization and residuals excluded.
// 8TD^2 + 4TD + 4T^2D + 5HT^2, quadratic in T.
int64_t flops_attention(int64_t t_len, int64_t d_model, int64_t heads);

// Same conventions for the bias-free single-head cross-attention.
int64_t flops_cross_attention(int64_t t_q, int64_t t_k, int64_t d_model);

}  // namespace lcmf
