#include "lcmf/sdmae.hpp"

#include <algorithm>
#include <cmath>

#include "lcmf/rng.hpp"

namespace lcmf {

namespace {

// Pixel-row indices of the [H*W, C] flattening listed patch by patch, so a
// single gather implements patchify and the inverse gather implements
// unpatchify.
std::vector<int64_t> patch_pixel_order(const PatchGrid& g) {
  const int64_t side = g.side_patches(), ps = g.patch_size, w = g.image_side;
  std::vector<int64_t> idx;
  idx.reserve(static_cast<size_t>(g.patch_count() * ps * ps));
  for (int64_t py = 0; py < side; ++py)
    for (int64_t px = 0; px < side; ++px)
      for (int64_t dy = 0; dy < ps; ++dy)
        for (int64_t dx = 0; dx < ps; ++dx) idx.push_back((py * ps + dy) * w + px * ps + dx);
  return idx;
}

std::vector<int64_t> invert_permutation(const std::vector<int64_t>& p) {
  std::vector<int64_t> inv(p.size());
  for (size_t i = 0; i < p.size(); ++i) inv[static_cast<size_t>(p[i])] = static_cast<int64_t>(i);
  return inv;
}

Tensor constant_copy(const Tensor& t) {
  return Tensor::from(t.shape(), std::vector<double>(t.data(), t.data() + t.numel()));
}

}  // namespace

void PatchGrid::validate() const {
  if (image_side < 1 || patch_size < 1 || channels < 1)
    detail::fail("patch grid: all dimensions must be positive");
  if (image_side % patch_size != 0)
    detail::fail("patch grid: side " + std::to_string(image_side) + " not divisible by patch " +
                 std::to_string(patch_size));
}

Tensor patchify(const Tensor& image, const PatchGrid& grid) {
  grid.validate();
  if (image.rank() != 3 || image.dim(0) != grid.image_side || image.dim(1) != grid.image_side ||
      image.dim(2) != grid.channels)
    detail::fail("patchify: image " + detail::shape_str(image.shape()) + " does not match grid");
  Tensor pixels = reshape(image, {grid.image_side * grid.image_side, grid.channels});
  Tensor ordered = gather_rows(pixels, patch_pixel_order(grid));
  return reshape(ordered, {grid.patch_count(), grid.patch_dim()});
}

Tensor unpatchify(const Tensor& patches, const PatchGrid& grid) {
  grid.validate();
  if (patches.rank() != 2 || patches.dim(0) != grid.patch_count() ||
      patches.dim(1) != grid.patch_dim())
    detail::fail("unpatchify: patches " + detail::shape_str(patches.shape()) +
                 " do not match grid");
  Tensor pixels = reshape(patches, {grid.image_side * grid.image_side, grid.channels});
  Tensor ordered = gather_rows(pixels, invert_permutation(patch_pixel_order(grid)));
  return reshape(ordered, {grid.image_side, grid.image_side, grid.channels});
}

MaskPlan sample_mask(int64_t patches, double ratio, uint64_t seed) {
  if (patches < 1) detail::fail("mask plan: needs at least one patch");
  if (!(ratio >= 0.0 && ratio < 1.0)) detail::fail("mask plan: ratio outside [0, 1)");
  const int64_t m = std::llround(ratio * static_cast<double>(patches));

  Rng rng(seed_hash(seed));
  MaskPlan plan;
  plan.ratio = ratio;
  plan.masked = rng.sample_indices(patches, m);
  std::sort(plan.masked.begin(), plan.masked.end());

  std::vector<bool> is_masked(static_cast<size_t>(patches), false);
  for (int64_t i : plan.masked) is_masked[static_cast<size_t>(i)] = true;
  plan.visible.reserve(static_cast<size_t>(patches - m));
  for (int64_t i = 0; i < patches; ++i)
    if (!is_masked[static_cast<size_t>(i)]) plan.visible.push_back(i);
  return plan;
}

HybridStack::HybridStack(ParamStore& store, const std::string& name,
                         const HybridStackConfig& cfg) {
  if (cfg.blocks < 1) detail::fail("hybrid stack: needs at least one block");
  for (int64_t i = 0; i < cfg.blocks; ++i) {
    const std::string bname = name + ".block" + std::to_string(i + 1);
    if (i % 2 == 0) {
      vit_.emplace_back(store, bname, VitBlockConfig{cfg.core.d_model, cfg.heads, cfg.mlp_ratio});
      kind_.push_back(0);
    } else {
      sam_.emplace_back(store, bname, SamBlockConfig{cfg.core, cfg.heads, cfg.sam_attention});
      kind_.push_back(1);
    }
  }
}

Tensor HybridStack::operator()(const Tensor& x) const {
  Tensor y = x;
  size_t iv = 0, is = 0;
  for (int k : kind_) y = (k == 0) ? vit_[iv++](y) : sam_[is++](y);
  return y;
}

Tensor diffuse_stage(const CrossAttention& attn, const CmmHostBlock& cmm, const Tensor& f_q,
                     const Tensor& f_kv_attn, const Tensor& f_kv_cmm) {
  if (!f_kv_attn.defined() || f_kv_attn.dim(0) < 1 || !f_kv_cmm.defined() || f_kv_cmm.dim(0) < 1)
    detail::fail("diffuse stage: empty key set");
  if (!f_q.defined() || f_q.dim(0) < 1) return f_q;
  return cmm(attn(f_q, f_kv_attn), f_kv_cmm);
}

Sdmae::Sdmae(ParamStore& store, const std::string& name, const SdmaeConfig& cfg) : cfg_(cfg) {
  cfg_.grid.validate();
  cfg_.core.d_model = cfg_.d_model;
  const int64_t p = cfg_.grid.patch_count(), d = cfg_.d_model;

  patch_embed_ = Linear(store, name + ".patch_embed", cfg_.grid.patch_dim(), d);
  pos_embed_ = store.uniform_fan_in(name + ".pos_embed", {p, d}, d);
  mask_token_ = store.uniform_fan_in(name + ".mask_token", {d}, d);

  HybridStackConfig stack{cfg_.encoder_blocks, cfg_.heads, cfg_.mlp_ratio, cfg_.core,
                          cfg_.sam_attention};
  encoder_ = HybridStack(store, name + ".encoder", stack);
  stack.blocks = cfg_.decoder_blocks;
  decoder_ = HybridStack(store, name + ".decoder", stack);

  if (cfg_.diffusion_attention) {
    stage1_attn_ = CrossAttention(store, name + ".stage1.attn", d);
    stage2_attn_ = CrossAttention(store, name + ".stage2.attn", d);
  }
  stage1_cmm_ = CmmHostBlock(store, name + ".stage1.cmm", cfg_.core, /*alpha=*/1.0);
  stage2_cmm_ = CmmHostBlock(store, name + ".stage2.cmm", cfg_.core, /*alpha=*/1.0);

  pixel_head_ = Linear(store, name + ".pixel_head", d, cfg_.grid.patch_dim());
}

Tensor Sdmae::embed(const Tensor& patches) const {
  return add(patch_embed_(patches), pos_embed_);
}

std::pair<Tensor, Tensor> Sdmae::encode(const Tensor& patches, const MaskPlan& plan) const {
  if (patches.rank() != 2 || patches.dim(0) != cfg_.grid.patch_count() ||
      patches.dim(1) != cfg_.grid.patch_dim())
    detail::fail("sdmae: patches " + detail::shape_str(patches.shape()) + " do not match grid");
  if (plan.patch_count() != cfg_.grid.patch_count())
    detail::fail("sdmae: mask plan covers " + std::to_string(plan.patch_count()) +
                 " patches, grid has " + std::to_string(cfg_.grid.patch_count()));
  Tensor emb = embed(patches);
  Tensor f_e = encoder_(emb);
  Tensor f_v = encoder_(gather_rows(emb, plan.visible));
  return {f_e, f_v};
}

Sdmae::Output Sdmae::decode(const Tensor& f_e, const Tensor& f_v, const MaskPlan& plan) const {
  Output out;
  out.f_e = f_e;
  out.f_v = f_v;
  out.f_vp = cfg_.diffusion_attention
                 ? diffuse_stage(stage1_attn_, stage1_cmm_, f_v, f_e, f_e)
                 : stage1_cmm_(f_v, f_e);

  const int64_t v = static_cast<int64_t>(plan.visible.size());
  const int64_t m = static_cast<int64_t>(plan.masked.size());
  Tensor combined;
  if (m > 0) {
    Tensor f_m = add(broadcast_row(mask_token_, m), gather_rows(pos_embed_, plan.masked));
    out.f_mp = cfg_.diffusion_attention
                   ? diffuse_stage(stage2_attn_, stage2_cmm_, f_m, out.f_vp, out.f_vp)
                   : stage2_cmm_(f_m, out.f_vp);
    combined = concat_rows(out.f_vp, out.f_mp);
  } else {
    out.f_mp = Tensor::zeros({0, cfg_.d_model});
    combined = out.f_vp;
  }

  // combined row i is patch visible[i] for i < v, then masked[i - v]; the
  // gather below restores original patch order.
  std::vector<int64_t> order(static_cast<size_t>(plan.patch_count()));
  for (int64_t i = 0; i < v; ++i) order[static_cast<size_t>(plan.visible[static_cast<size_t>(i)])] = i;
  for (int64_t j = 0; j < m; ++j)
    order[static_cast<size_t>(plan.masked[static_cast<size_t>(j)])] = v + j;
  out.features = gather_rows(combined, order);

  out.pred_patches = pixel_head_(decoder_(out.features));
  out.reconstruction = unpatchify(out.pred_patches, cfg_.grid);
  return out;
}

Tensor Sdmae::encode_all(const Tensor& patches) const {
  if (patches.rank() != 2 || patches.dim(0) != cfg_.grid.patch_count() ||
      patches.dim(1) != cfg_.grid.patch_dim())
    detail::fail("sdmae: patches " + detail::shape_str(patches.shape()) + " do not match grid");
  return encoder_(embed(patches));
}

Sdmae::Output Sdmae::forward(const Tensor& image, const MaskPlan& plan) const {
  Tensor patches = patchify(image, cfg_.grid);
  auto [f_e, f_v] = encode(patches, plan);
  return decode(f_e, f_v, plan);
}

Tensor standardize_rows(const Tensor& t, double eps) {
  if (t.rank() != 2) detail::fail("standardize_rows: expects a rank-2 tensor");
  const int64_t r = t.dim(0), c = t.dim(1);
  Tensor out = Tensor::zeros({r, c});
  for (int64_t i = 0; i < r; ++i) {
    const double* row = t.data() + i * c;
    double mean = 0.0;
    for (int64_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (int64_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + eps);
    double* dst = out.data() + i * c;
    for (int64_t j = 0; j < c; ++j) dst[j] = (row[j] - mean) * inv;
  }
  return out;
}

Tensor recon_loss(const Tensor& pred_patches, const Tensor& target_patches, const MaskPlan& plan,
                  bool normalize, bool masked_only) {
  if (pred_patches.shape() != target_patches.shape())
    detail::fail("recon loss: shape mismatch " + detail::shape_str(pred_patches.shape()) +
                 " vs " + detail::shape_str(target_patches.shape()));
  if (pred_patches.rank() != 2 || pred_patches.dim(0) != plan.patch_count())
    detail::fail("recon loss: patch rows do not match the mask plan");

  std::vector<int64_t> rows;
  if (masked_only) {
    rows = plan.masked;
  } else {
    rows.resize(static_cast<size_t>(plan.patch_count()));
    for (size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<int64_t>(i);
  }
  if (rows.empty()) return Tensor::scalar(0.0);

  Tensor t_sel = gather_rows(target_patches, rows);
  Tensor t_cmp = normalize ? standardize_rows(t_sel) : constant_copy(t_sel);
  Tensor diff = sub(gather_rows(pred_patches, rows), t_cmp);
  return mean_all(mul(diff, diff));
}

}  // namespace lcmf
