#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lcmf/cmm.hpp"
#include "lcmf/nn.hpp"
#include "lcmf/sam.hpp"
#include "lcmf/tensor.hpp"

namespace lcmf {

struct PatchGrid {
  int64_t image_side = 32;
  int64_t patch_size = 4;
  int64_t channels = 3;

  int64_t side_patches() const { return image_side / patch_size; }
  int64_t patch_count() const { return side_patches() * side_patches(); }
  int64_t patch_dim() const { return patch_size * patch_size * channels; }
  void validate() const;
};

// [H, W, C] image -> [P, patch_size^2 * C] rows, patches in row-major grid
// order, pixels within a patch in (y, x, channel) order. Differentiable,
// and unpatchify(patchify(img)) == img bitwise.
Tensor patchify(const Tensor& image, const PatchGrid& grid);
Tensor unpatchify(const Tensor& patches, const PatchGrid& grid);

// Disjoint index partition; both lists ascending. The ascending order also
// fixes the row order of the visible and masked feature sets.
struct MaskPlan {
  std::vector<int64_t> visible;
  std::vector<int64_t> masked;
  double ratio = 0.0;

  int64_t patch_count() const {
    return static_cast<int64_t>(visible.size() + masked.size());
  }
};

// Uniform sample without replacement, |masked| = round(ratio * patches),
// deterministic per seed. Requires 0 <= ratio < 1 so at least one patch
// stays visible.
MaskPlan sample_mask(int64_t patches, double ratio, uint64_t seed);

// Alternating attention-MLP / attention-Mamba blocks, starting with the
// former. sam_attention = false is the ablation that strips the attention
// sublayer out of every Mamba-cascade block.
struct HybridStackConfig {
  int64_t blocks = 4;
  int64_t heads = 4;
  int64_t mlp_ratio = 2;
  MambaCoreConfig core;
  bool sam_attention = true;
};

class HybridStack {
 public:
  HybridStack() = default;
  HybridStack(ParamStore& store, const std::string& name, const HybridStackConfig& cfg);

  Tensor operator()(const Tensor& x) const;
  int64_t blocks() const { return static_cast<int64_t>(kind_.size()); }

 private:
  std::vector<VitBlock> vit_;
  std::vector<SamBlock> sam_;
  std::vector<int> kind_;  // 0 = next vit block, 1 = next sam block
};

// Cross-attention with f_q as queries over f_kv_attn, then one host-side
// interaction layer on (result, f_kv_cmm); the enhanced query-side stream is
// returned. An empty query set passes through as an empty feature set; an
// empty key set is an error.
Tensor diffuse_stage(const CrossAttention& attn, const CmmHostBlock& cmm, const Tensor& f_q,
                     const Tensor& f_kv_attn, const Tensor& f_kv_cmm);

struct SdmaeConfig {
  PatchGrid grid;
  int64_t d_model = 64;
  int64_t heads = 4;
  int64_t mlp_ratio = 2;
  int64_t encoder_blocks = 4;
  int64_t decoder_blocks = 2;
  MambaCoreConfig core;  // d_model is forced to match this->d_model
  bool sam_attention = true;
  // Ablation: false strips the cross-attention out of both diffusion stages
  // (no parameters registered); each stage keeps its interaction layer.
  bool diffusion_attention = true;
};

// Masked autoencoder with two-stage semantic diffusion. The encoder runs on
// the full patch set and on the visible subset; stage 1 enhances visible
// features against full-set features, stage 2 builds masked-position
// features from a shared mask token and enhances them against the stage-1
// output; the reordered union feeds the pixel decoder.
class Sdmae {
 public:
  Sdmae() = default;
  Sdmae(ParamStore& store, const std::string& name, const SdmaeConfig& cfg);

  struct Output {
    Tensor f_e;             // [P, D] full-set features
    Tensor f_v;             // [V, D] visible features
    Tensor f_vp;            // [V, D] stage-1 enhanced
    Tensor f_mp;            // [M, D] stage-2 enhanced; zero rows when M = 0
    Tensor features;        // [P, D] fused features in original patch order
    Tensor pred_patches;    // [P, patch_dim]
    Tensor reconstruction;  // [H, W, C]
  };

  // patches [P, patch_dim] -> (F_e, F_v); embeddings for the visible subset
  // are gathered by index so ratio 0 gives F_v == F_e bitwise.
  std::pair<Tensor, Tensor> encode(const Tensor& patches, const MaskPlan& plan) const;

  // single encoder pass over the full patch set, for pipelines without masking
  Tensor encode_all(const Tensor& patches) const;

  // diffusion stages and pixel decoding from already-encoded features, so a
  // caller may interact f_v with another modality between encode and decode
  Output decode(const Tensor& f_e, const Tensor& f_v, const MaskPlan& plan) const;

  Output forward(const Tensor& image, const MaskPlan& plan) const;

  const SdmaeConfig& config() const { return cfg_; }

 private:
  Tensor embed(const Tensor& patches) const;

  SdmaeConfig cfg_;
  Linear patch_embed_;
  Tensor pos_embed_;   // [P, D]
  Tensor mask_token_;  // [D]
  HybridStack encoder_, decoder_;
  CrossAttention stage1_attn_, stage2_attn_;
  CmmHostBlock stage1_cmm_, stage2_cmm_;
  Linear pixel_head_;
};

// Per-row standardization (x - mean) / sqrt(var + eps) used on reconstruction
// targets. Plain data transform, no gradient; a constant row maps to zeros.
Tensor standardize_rows(const Tensor& t, double eps = 1e-6);

// Mean squared error between predicted and target patch rows, restricted to
// the plan's masked rows unless masked_only is false. The target side is
// treated as constant data; with normalize the targets are standardized per
// patch first. An empty row selection yields an exact 0.0 loss.
Tensor recon_loss(const Tensor& pred_patches, const Tensor& target_patches, const MaskPlan& plan,
                  bool normalize, bool masked_only = true);

}  // namespace lcmf
