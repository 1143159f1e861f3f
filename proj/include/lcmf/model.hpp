#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lcmf/cmm.hpp"
#include "lcmf/emf.hpp"
#include "lcmf/nn.hpp"
#include "lcmf/sam.hpp"
#include "lcmf/sdmae.hpp"
#include "lcmf/tensor.hpp"
#include "lcmf/text.hpp"

namespace lcmf {

// Whole-architecture configuration. Submodule configs are derived from this
// one so widths and ablation flags cannot drift apart between stages.
struct ModelConfig {
  PatchGrid grid;
  int64_t d_model = 64;
  int64_t heads = 4;
  int64_t mlp_ratio = 2;
  int64_t encoder_blocks = 4;
  int64_t decoder_blocks = 2;
  int64_t text_blocks = 2;
  int64_t max_text_len = 32;
  int64_t interaction_layers = 2;
  int64_t emf_depth = 2;
  int64_t vocab_size = 64;  // overwritten from the corpus word list
  int64_t answers = 16;     // overwritten from the answer vocabulary
  MambaCoreConfig core;     // d_model is forced to match this->d_model
  bool normalize_targets = true;

  // Ablation flags. Each removes parameters relative to the full model:
  // no_cmm drops the cross-modal interaction stack, no_sam strips the
  // attention sublayer out of every hybrid Mamba block, no_cross_attention
  // removes the cross-attention from both diffusion stages and from the
  // fusion head.
  bool no_cmm = false;
  bool no_sam = false;
  bool no_cross_attention = false;
  bool literal_cls_kv = false;

  SdmaeConfig sdmae_config() const;
  TextEncoderConfig text_config() const;
  EmfConfig emf_config() const;
  void validate() const;
};

// Visual and text encoders, the cross-modal interaction stack, the
// pretraining heads, and optionally the fusion head, all on one parameter
// store. Pretraining drives the reconstruction and masked-word heads;
// answering drives the fusion head; both share everything upstream.
// with_fusion = false builds the pretraining model, whose checkpoints are
// later applied to a fusion-bearing store (absent arrays keep their
// initialization, so the head starts fresh).
class LcmfModel {
 public:
  LcmfModel() = default;
  LcmfModel(ParamStore& store, const ModelConfig& cfg, bool with_fusion = true);

  struct PretrainOut {
    Tensor image_loss;  // masked-patch reconstruction error
    Tensor text_loss;   // masked-word cross-entropy
    Sdmae::Output sdmae;
    Tensor text_features;  // [T, D] after interaction
  };

  PretrainOut pretrain_forward(const Tensor& image, const MaskPlan& plan,
                               const std::vector<int64_t>& corrupted_ids,
                               const MlmPlan& mlm) const;

  // image -> encoder -> interaction -> fusion head
  Emf::State vqa_forward(const Tensor& image, const std::vector<int64_t>& ids) const;
  // per-frame encoder passes, elementwise temporal mean, then as above
  Emf::State vqa_forward_video(const std::vector<Tensor>& frames,
                               const std::vector<int64_t>& ids) const;

  // interaction stack pass-through; identity when the stack is ablated away
  std::pair<Tensor, Tensor> interact(const Tensor& f_visual, const Tensor& f_text) const;

  bool has_fusion() const { return with_fusion_; }
  const ModelConfig& config() const { return cfg_; }
  const Sdmae& sdmae() const { return sdmae_; }
  const TextEncoder& text() const { return text_; }
  const Linear& mlm_head() const { return mlm_head_; }
  const Emf& emf() const { return emf_; }

 private:
  Emf::State fuse(const Tensor& f_visual, const std::vector<int64_t>& ids) const;

  ModelConfig cfg_;
  bool with_fusion_ = false;
  Sdmae sdmae_;
  TextEncoder text_;
  Linear mlm_head_;
  CmmStack interact_;
  Emf emf_;
};

// index of the largest entry in the given row; ties go to the lower index
int64_t argmax_row(const Tensor& t, int64_t row = 0);

// Analytic per-module flop counts under the shared conventions. Block-level
// counts compose the attention, MLP, and selective-scan counters; the
// normalization layers and residual adds stay excluded throughout.
int64_t flops_vit_block(int64_t t_len, const VitBlockConfig& cfg);
int64_t flops_sam_block(int64_t t_len, const SamBlockConfig& cfg);
int64_t flops_hybrid_stack(int64_t t_len, const HybridStackConfig& cfg);

struct FlopsRow {
  std::string module;
  int64_t flops = 0;
};

// One row per module at its operating lengths: downstream modules at the
// full patch count and t_text, pretraining-only modules at the visible and
// masked lengths induced by mask_ratio. Ablated modules keep their row at
// zero so tables stay comparable across configurations.
std::vector<FlopsRow> flops_table(const ModelConfig& cfg, double mask_ratio, int64_t t_text);
int64_t flops_total(const std::vector<FlopsRow>& rows);
// answering pipeline only: embed, encoders, interaction, fusion
int64_t flops_vqa_forward(const ModelConfig& cfg, int64_t t_text);

}  // namespace lcmf
