#include "lcmf/model.hpp"

#include <cmath>
#include <stdexcept>

namespace lcmf {

SdmaeConfig ModelConfig::sdmae_config() const {
  SdmaeConfig s;
  s.grid = grid;
  s.d_model = d_model;
  s.heads = heads;
  s.mlp_ratio = mlp_ratio;
  s.encoder_blocks = encoder_blocks;
  s.decoder_blocks = decoder_blocks;
  s.core = core;
  s.core.d_model = d_model;
  s.sam_attention = !no_sam;
  s.diffusion_attention = !no_cross_attention;
  return s;
}

TextEncoderConfig ModelConfig::text_config() const {
  TextEncoderConfig t;
  t.vocab_size = vocab_size;
  t.d_model = d_model;
  t.heads = heads;
  t.mlp_ratio = mlp_ratio;
  t.blocks = text_blocks;
  t.max_len = max_text_len;
  return t;
}

EmfConfig ModelConfig::emf_config() const {
  EmfConfig e;
  e.d_model = d_model;
  e.answers = answers;
  e.depth = emf_depth;
  e.core = core;
  e.core.d_model = d_model;
  e.cross_attention = !no_cross_attention;
  e.literal_cls_kv = literal_cls_kv;
  return e;
}

void ModelConfig::validate() const {
  grid.validate();
  if (d_model < 1) throw std::invalid_argument("model: d_model must be positive");
  if (heads < 1 || d_model % heads != 0)
    throw std::invalid_argument("model: heads must divide d_model");
  if (mlp_ratio < 1) throw std::invalid_argument("model: mlp_ratio must be positive");
  if (encoder_blocks < 1 || decoder_blocks < 1 || text_blocks < 1)
    throw std::invalid_argument("model: block counts must be positive");
  if (max_text_len < 2) throw std::invalid_argument("model: max_text_len must hold cls and sep");
  if (interaction_layers < 1)
    throw std::invalid_argument("model: interaction_layers must be positive");
  if (emf_depth < 1) throw std::invalid_argument("model: emf_depth must be positive");
  if (vocab_size < Vocab::kReservedCount + 1)
    throw std::invalid_argument("model: vocab_size must exceed the reserved ids");
  if (answers < 1) throw std::invalid_argument("model: answers must be positive");
}

LcmfModel::LcmfModel(ParamStore& store, const ModelConfig& cfg, bool with_fusion)
    : cfg_(cfg), with_fusion_(with_fusion) {
  cfg_.validate();
  cfg_.core.d_model = cfg_.d_model;
  sdmae_ = Sdmae(store, "sdmae", cfg_.sdmae_config());
  text_ = TextEncoder(store, "text", cfg_.text_config());
  mlm_head_ = Linear(store, "mlm_head", cfg_.d_model, cfg_.vocab_size);
  if (!cfg_.no_cmm) interact_ = CmmStack(store, "interact", cfg_.core, cfg_.interaction_layers);
  if (with_fusion_) emf_ = Emf(store, "emf", cfg_.emf_config());
}

std::pair<Tensor, Tensor> LcmfModel::interact(const Tensor& f_visual, const Tensor& f_text) const {
  if (cfg_.no_cmm) return {f_visual, f_text};
  return interact_.forward(f_visual, f_text);
}

LcmfModel::PretrainOut LcmfModel::pretrain_forward(const Tensor& image, const MaskPlan& plan,
                                                   const std::vector<int64_t>& corrupted_ids,
                                                   const MlmPlan& mlm) const {
  const Tensor patches = patchify(image, cfg_.grid);
  auto [f_e, f_v] = sdmae_.encode(patches, plan);
  const Tensor f_t = text_(corrupted_ids);
  auto [f_vi, f_ti] = interact(f_v, f_t);

  PretrainOut out;
  out.sdmae = sdmae_.decode(f_e, f_vi, plan);
  out.text_features = f_ti;
  out.image_loss =
      recon_loss(out.sdmae.pred_patches, patches, plan, cfg_.normalize_targets);
  out.text_loss = mlm_loss(f_ti, mlm, mlm_head_);
  return out;
}

Emf::State LcmfModel::fuse(const Tensor& f_visual, const std::vector<int64_t>& ids) const {
  if (!with_fusion_) throw std::logic_error("model: built without the fusion head");
  const Tensor f_t = text_(ids);
  auto [f_vi, f_ti] = interact(f_visual, f_t);
  return emf_.forward(f_vi, f_ti);
}

Emf::State LcmfModel::vqa_forward(const Tensor& image, const std::vector<int64_t>& ids) const {
  return fuse(sdmae_.encode_all(patchify(image, cfg_.grid)), ids);
}

Emf::State LcmfModel::vqa_forward_video(const std::vector<Tensor>& frames,
                                        const std::vector<int64_t>& ids) const {
  if (frames.empty()) throw std::invalid_argument("model: video needs at least one frame");
  Tensor acc = sdmae_.encode_all(patchify(frames[0], cfg_.grid));
  for (size_t i = 1; i < frames.size(); ++i)
    acc = add(acc, sdmae_.encode_all(patchify(frames[i], cfg_.grid)));
  acc = scale(acc, 1.0 / static_cast<double>(frames.size()));
  return fuse(acc, ids);
}

int64_t argmax_row(const Tensor& t, int64_t row) {
  if (t.rank() != 2 || row < 0 || row >= t.dim(0) || t.dim(1) < 1)
    throw std::invalid_argument("argmax_row: bad row selection");
  const double* p = t.data() + row * t.dim(1);
  int64_t best = 0;
  for (int64_t j = 1; j < t.dim(1); ++j)
    if (p[j] > p[best]) best = j;
  return best;
}

int64_t flops_vit_block(int64_t t_len, const VitBlockConfig& cfg) {
  const int64_t d = cfg.d_model;
  const int64_t r = cfg.mlp_ratio * d;
  int64_t f = flops_attention(t_len, d, cfg.heads);
  f += 2 * t_len * d * r + t_len * r;  // expansion
  f += 5 * t_len * r;                  // silu
  f += 2 * t_len * r * d + t_len * d;  // contraction
  return f;
}

int64_t flops_sam_block(int64_t t_len, const SamBlockConfig& cfg) {
  int64_t f = flops_mamba_core(t_len, cfg.core);
  if (cfg.with_attention) f += flops_attention(t_len, cfg.core.d_model, cfg.heads);
  return f;
}

int64_t flops_hybrid_stack(int64_t t_len, const HybridStackConfig& cfg) {
  int64_t f = 0;
  for (int64_t i = 0; i < cfg.blocks; ++i) {
    if (i % 2 == 0) {
      f += flops_vit_block(t_len, {cfg.core.d_model, cfg.heads, cfg.mlp_ratio});
    } else {
      f += flops_sam_block(t_len, {cfg.core, cfg.heads, cfg.sam_attention});
    }
  }
  return f;
}

std::vector<FlopsRow> flops_table(const ModelConfig& cfg, double mask_ratio, int64_t t_text) {
  cfg.validate();
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0))
    throw std::invalid_argument("flops_table: mask_ratio must lie in [0, 1)");
  if (t_text < 2) throw std::invalid_argument("flops_table: t_text must hold cls and sep");

  const SdmaeConfig sd = cfg.sdmae_config();
  const int64_t d = cfg.d_model;
  const int64_t p = cfg.grid.patch_count();
  const int64_t pd = cfg.grid.patch_dim();
  const int64_t m = std::llround(mask_ratio * static_cast<double>(p));
  const int64_t v = p - m;

  HybridStackConfig enc{cfg.encoder_blocks, cfg.heads, cfg.mlp_ratio, sd.core, sd.sam_attention};
  HybridStackConfig dec{cfg.decoder_blocks, cfg.heads, cfg.mlp_ratio, sd.core, sd.sam_attention};

  std::vector<FlopsRow> rows;
  rows.push_back({"patch_embed", 2 * p * pd * d + p * d});
  rows.push_back({"visual_encoder", flops_hybrid_stack(p, enc)});
  rows.push_back({"text_encoder",
                  cfg.text_blocks * flops_vit_block(t_text, {d, cfg.heads, cfg.mlp_ratio})});
  int64_t inter = 0;
  if (!cfg.no_cmm) {
    inter = flops_mamba_core(p, sd.core) + flops_mamba_core(t_text, sd.core);
    inter += cfg.interaction_layers * flops_cmm(p, t_text, sd.core);
  }
  rows.push_back({"interaction", inter});
  int64_t diff_attn = 0;
  if (!cfg.no_cross_attention)
    diff_attn = flops_cross_attention(v, p, d) + flops_cross_attention(m, v, d);
  rows.push_back({"diffusion_attention", diff_attn});
  rows.push_back(
      {"diffusion_interaction", flops_cmm_host(v, p, sd.core) + flops_cmm_host(m, v, sd.core)});
  rows.push_back({"decoder", flops_hybrid_stack(p, dec)});
  rows.push_back({"pixel_head", 2 * p * d * pd + p * pd});
  rows.push_back({"mlm_head", 2 * t_text * d * cfg.vocab_size + t_text * cfg.vocab_size});
  rows.push_back({"fusion", flops_emf(p, t_text, cfg.emf_config())});
  return rows;
}

int64_t flops_total(const std::vector<FlopsRow>& rows) {
  int64_t total = 0;
  for (const FlopsRow& r : rows) total += r.flops;
  return total;
}

int64_t flops_vqa_forward(const ModelConfig& cfg, int64_t t_text) {
  int64_t total = 0;
  for (const FlopsRow& r : flops_table(cfg, 0.0, t_text)) {
    if (r.module == "patch_embed" || r.module == "visual_encoder" ||
        r.module == "text_encoder" || r.module == "interaction" || r.module == "fusion")
      total += r.flops;
  }
  return total;
}

}  // namespace lcmf
