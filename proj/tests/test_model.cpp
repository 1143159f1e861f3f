#include <cmath>
#include <utility>
#include <vector>

#include "doctest.h"
#include "lcmf/model.hpp"
#include "oracles.hpp"

using oracles::grad_check;
using oracles::random_tensor;
using oracles::randomize_params;
using oracles::store_inputs;

namespace {

lcmf::ModelConfig desk_config() {
  lcmf::ModelConfig cfg;  // defaults are the desk-scale shape
  cfg.vocab_size = 32;
  return cfg;
}

lcmf::ModelConfig tiny_config() {
  lcmf::ModelConfig cfg;
  cfg.grid.image_side = 8;
  cfg.grid.patch_size = 4;
  cfg.d_model = 4;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.encoder_blocks = 2;
  cfg.decoder_blocks = 1;
  cfg.text_blocks = 1;
  cfg.max_text_len = 6;
  cfg.interaction_layers = 1;
  cfg.emf_depth = 1;
  cfg.vocab_size = 8;
  cfg.answers = 3;
  cfg.core.d_model = 4;
  cfg.core.d_inner = 6;
  cfg.core.n_state = 2;
  cfg.core.conv_width = 2;
  return cfg;
}

int64_t count_params(const lcmf::ModelConfig& cfg, bool with_fusion = true) {
  lcmf::ParamStore store(7);
  lcmf::LcmfModel model(store, cfg, with_fusion);
  return store.total_params();
}

int64_t row(const std::vector<lcmf::FlopsRow>& rows, const std::string& module) {
  for (const lcmf::FlopsRow& r : rows)
    if (r.module == module) return r.flops;
  REQUIRE(false);
  return -1;
}

}  // namespace

TEST_CASE("derived configs carry the ablation flags") {
  lcmf::ModelConfig cfg = desk_config();
  cfg.no_sam = true;
  cfg.no_cross_attention = true;
  cfg.literal_cls_kv = true;
  cfg.core.d_model = 999;  // overridden by the model width

  const lcmf::SdmaeConfig sd = cfg.sdmae_config();
  CHECK(sd.core.d_model == 64);
  CHECK_FALSE(sd.sam_attention);
  CHECK_FALSE(sd.diffusion_attention);
  CHECK(sd.encoder_blocks == 4);

  const lcmf::EmfConfig emf = cfg.emf_config();
  CHECK(emf.core.d_model == 64);
  CHECK_FALSE(emf.cross_attention);
  CHECK(emf.literal_cls_kv);
  CHECK(emf.answers == 16);

  const lcmf::TextEncoderConfig tx = cfg.text_config();
  CHECK(tx.vocab_size == 32);
  CHECK(tx.blocks == 2);

  lcmf::ModelConfig bad = desk_config();
  bad.d_model = 63;  // heads must divide
  CHECK_THROWS(bad.validate());
  bad = desk_config();
  bad.vocab_size = 5;  // nothing beyond the reserved ids
  CHECK_THROWS(bad.validate());
}

TEST_CASE("ablations strip parameters in the documented order") {
  const lcmf::ModelConfig full = desk_config();
  lcmf::ModelConfig no_cmm = full;
  no_cmm.no_cmm = true;
  lcmf::ModelConfig no_sam = full;
  no_sam.no_sam = true;
  lcmf::ModelConfig no_cross = full;
  no_cross.no_cross_attention = true;

  const int64_t c_full = count_params(full);
  const int64_t c_cmm = count_params(no_cmm);
  const int64_t c_sam = count_params(no_sam);
  const int64_t c_cross = count_params(no_cross);

  CHECK(c_cmm < c_sam);
  CHECK(c_sam < c_cross);
  CHECK(c_cross < c_full);

  // cross-attention ablation: two diffusion stages + two fusion attentions,
  // 3 * D^2 bias-free parameters each
  CHECK(c_full - c_cross == 4 * 3 * 64 * 64);
  // hybrid-stack ablation: one attention sublayer per Mamba block (two
  // encoder, one decoder), 4 biased D*D projections + 2 layer norms each
  CHECK(c_full - c_sam == 3 * (4 * (64 * 64 + 64) + 4 * 64));
  // interaction ablation removes exactly the standalone interaction stack
  {
    lcmf::ParamStore store(3);
    lcmf::CmmStack stack(store, "interact", full.sdmae_config().core, full.interaction_layers);
    CHECK(c_full - c_cmm == store.total_params());
  }
}

TEST_CASE("parameter counter matches an independent traversal") {
  lcmf::ParamStore store(11);
  lcmf::LcmfModel model(store, desk_config());
  int64_t by_walk = 0;
  for (const auto& [name, info] : store.entries()) by_walk += info.tensor.numel();
  CHECK(by_walk == store.total_params());
  CHECK(by_walk > 0);
}

TEST_CASE("pretrain forward matches the manual stage composition") {
  const lcmf::ModelConfig cfg = tiny_config();
  lcmf::ParamStore store(21);
  lcmf::LcmfModel model(store, cfg, /*with_fusion=*/false);
  randomize_params(store, 77, -0.2, 0.2);

  const lcmf::Tensor image = random_tensor({8, 8, 3}, 5, 0.0, 1.0);
  const lcmf::MaskPlan plan = lcmf::sample_mask(4, 0.5, 9);
  const std::vector<int64_t> ids{lcmf::Vocab::kCls, 5, lcmf::Vocab::kMask, 6, lcmf::Vocab::kSep};
  lcmf::MlmPlan mlm;
  mlm.positions = {1, 2};
  mlm.labels = {6, 5};
  mlm.actions = {lcmf::MlmPlan::kKeep, lcmf::MlmPlan::kMaskOut};

  const lcmf::LcmfModel::PretrainOut out = model.pretrain_forward(image, plan, ids, mlm);

  const lcmf::Tensor patches = lcmf::patchify(image, cfg.grid);
  const auto [f_e, f_v] = model.sdmae().encode(patches, plan);
  const lcmf::Tensor f_t = model.text()(ids);
  const auto [f_vi, f_ti] = model.interact(f_v, f_t);
  const lcmf::Sdmae::Output dec = model.sdmae().decode(f_e, f_vi, plan);
  const lcmf::Tensor img_loss = lcmf::recon_loss(dec.pred_patches, patches, plan, true);
  const lcmf::Tensor txt_loss = lcmf::mlm_loss(f_ti, mlm, model.mlm_head());

  CHECK(out.image_loss.value() == img_loss.value());
  CHECK(out.text_loss.value() == txt_loss.value());
  CHECK(std::isfinite(out.image_loss.value()));
  CHECK(std::isfinite(out.text_loss.value()));
  REQUIRE(out.sdmae.reconstruction.shape() == image.shape());
  for (int64_t i = 0; i < dec.reconstruction.numel(); ++i)
    CHECK(out.sdmae.reconstruction.data()[i] == dec.reconstruction.data()[i]);

  CHECK_THROWS(model.vqa_forward(image, ids));  // fusion head absent
}

TEST_CASE("vqa forward matches the manual stage composition") {
  const lcmf::ModelConfig cfg = tiny_config();
  lcmf::ParamStore store(22);
  lcmf::LcmfModel model(store, cfg);
  randomize_params(store, 78, -0.2, 0.2);

  const lcmf::Tensor image = random_tensor({8, 8, 3}, 6, 0.0, 1.0);
  const std::vector<int64_t> ids{lcmf::Vocab::kCls, 5, 6, lcmf::Vocab::kSep};
  const lcmf::Emf::State state = model.vqa_forward(image, ids);

  const lcmf::Tensor f_all = model.sdmae().encode_all(lcmf::patchify(image, cfg.grid));
  const lcmf::Tensor f_t = model.text()(ids);
  const auto [f_vi, f_ti] = model.interact(f_all, f_t);
  const lcmf::Emf::State manual = model.emf().forward(f_vi, f_ti);

  REQUIRE(state.logits.shape() == std::vector<int64_t>{1, 3});
  for (int64_t i = 0; i < 3; ++i) CHECK(state.logits.data()[i] == manual.logits.data()[i]);
}

TEST_CASE("two identical frames reduce to the single-image forward") {
  const lcmf::ModelConfig cfg = tiny_config();
  lcmf::ParamStore store(23);
  lcmf::LcmfModel model(store, cfg);
  randomize_params(store, 79, -0.2, 0.2);

  const lcmf::Tensor image = random_tensor({8, 8, 3}, 7, 0.0, 1.0);
  const std::vector<int64_t> ids{lcmf::Vocab::kCls, 5, lcmf::Vocab::kSep};

  const lcmf::Emf::State single = model.vqa_forward(image, ids);
  const lcmf::Emf::State pair = model.vqa_forward_video({image, image}, ids);
  for (int64_t i = 0; i < single.logits.numel(); ++i)
    CHECK(pair.logits.data()[i] == single.logits.data()[i]);

  // a genuinely different frame moves the logits
  lcmf::Tensor other = random_tensor({8, 8, 3}, 8, 0.0, 1.0);
  const lcmf::Emf::State mixed = model.vqa_forward_video({image, other}, ids);
  double diff = 0.0;
  for (int64_t i = 0; i < single.logits.numel(); ++i)
    diff += std::abs(mixed.logits.data()[i] - single.logits.data()[i]);
  CHECK(diff > 0.0);

  CHECK_THROWS(model.vqa_forward_video({}, ids));
}

TEST_CASE("equal seeds build byte-equal models") {
  const lcmf::ModelConfig cfg = tiny_config();
  lcmf::ParamStore a(31), b(31), c(32);
  lcmf::LcmfModel ma(a, cfg), mb(b, cfg), mc(c, cfg);

  const lcmf::Tensor image = random_tensor({8, 8, 3}, 9, 0.0, 1.0);
  const std::vector<int64_t> ids{lcmf::Vocab::kCls, 5, lcmf::Vocab::kSep};
  const lcmf::Tensor la = ma.vqa_forward(image, ids).logits;
  const lcmf::Tensor lb = mb.vqa_forward(image, ids).logits;
  const lcmf::Tensor lc = mc.vqa_forward(image, ids).logits;
  bool same_seed_equal = true, diff_seed_equal = true;
  for (int64_t i = 0; i < la.numel(); ++i) {
    same_seed_equal = same_seed_equal && la.data()[i] == lb.data()[i];
    diff_seed_equal = diff_seed_equal && la.data()[i] == lc.data()[i];
  }
  CHECK(same_seed_equal);
  CHECK_FALSE(diff_seed_equal);
}

TEST_CASE("pretrain checkpoints restore into a fusion-bearing store") {
  const lcmf::ModelConfig cfg = tiny_config();
  lcmf::ParamStore pre_store(41);
  lcmf::LcmfModel pre(pre_store, cfg, /*with_fusion=*/false);
  randomize_params(pre_store, 99, -0.3, 0.3);
  lcmf::save_checkpoint("tmp_model_ckpt.bin", pre_store);

  lcmf::ParamStore fine_store(41);
  lcmf::LcmfModel fine(fine_store, cfg, /*with_fusion=*/true);
  const lcmf::Tensor head_before = fine_store.get("emf.head.w");
  std::vector<double> head_init(head_before.data(), head_before.data() + head_before.numel());

  lcmf::apply_checkpoint(fine_store, lcmf::load_checkpoint_file("tmp_model_ckpt.bin"));

  // shared parameters take the trained values, the fresh head keeps its init
  const lcmf::Tensor embed = fine_store.get("sdmae.patch_embed.w");
  const lcmf::Tensor trained = pre_store.get("sdmae.patch_embed.w");
  for (int64_t i = 0; i < embed.numel(); ++i) CHECK(embed.data()[i] == trained.data()[i]);
  const lcmf::Tensor head_after = fine_store.get("emf.head.w");
  for (int64_t i = 0; i < head_after.numel(); ++i)
    CHECK(head_after.data()[i] == head_init[static_cast<size_t>(i)]);
  std::remove("tmp_model_ckpt.bin");
}

TEST_CASE("end-to-end gradients match finite differences") {
  lcmf::ModelConfig cfg = tiny_config();
  lcmf::ParamStore store(51);
  lcmf::LcmfModel model(store, cfg);
  randomize_params(store, 111, -0.25, 0.25);

  const lcmf::Tensor image = random_tensor({8, 8, 3}, 13, 0.0, 1.0);
  const lcmf::MaskPlan plan = lcmf::sample_mask(4, 0.5, 17);
  const std::vector<int64_t> ids{lcmf::Vocab::kCls, 5, lcmf::Vocab::kMask, lcmf::Vocab::kSep};
  lcmf::MlmPlan mlm;
  mlm.positions = {1, 2};
  mlm.labels = {6, 5};
  mlm.actions = {lcmf::MlmPlan::kKeep, lcmf::MlmPlan::kMaskOut};

  const auto loss_fn = [&]() {
    const lcmf::LcmfModel::PretrainOut pre = model.pretrain_forward(image, plan, ids, mlm);
    const lcmf::Emf::State st = model.vqa_forward(image, ids);
    const lcmf::Tensor answer = lcmf::cross_entropy_mean(st.logits, {1}, {0});
    return lcmf::add(lcmf::add(pre.image_loss, pre.text_loss), answer);
  };
  const auto res = grad_check(loss_fn, store_inputs(store), 1e-5, 1e-5);
  CAPTURE(res.worst);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("flops table composes the block counters") {
  const lcmf::ModelConfig cfg = desk_config();
  const auto rows = flops_table(cfg, 0.75, 16);

  int64_t sum = 0;
  for (const auto& r : rows) sum += r.flops;
  CHECK(lcmf::flops_total(rows) == sum);

  // encoder row is the alternating composition
  const lcmf::SdmaeConfig sd = cfg.sdmae_config();
  const int64_t vit = lcmf::flops_vit_block(64, {64, 4, 2});
  const int64_t sam = lcmf::flops_sam_block(64, {sd.core, 4, true});
  CHECK(row(rows, "visual_encoder") == 2 * vit + 2 * sam);
  CHECK(row(rows, "decoder") == vit + sam);
  CHECK(row(rows, "text_encoder") == 2 * lcmf::flops_vit_block(16, {64, 4, 2}));

  // diffusion rows follow the mask split: 48 masked, 16 visible
  CHECK(row(rows, "diffusion_attention") ==
        lcmf::flops_cross_attention(16, 64, 64) + lcmf::flops_cross_attention(48, 16, 64));
  CHECK(row(rows, "diffusion_interaction") ==
        lcmf::flops_cmm_host(16, 64, sd.core) + lcmf::flops_cmm_host(48, 16, sd.core));

  // only the diffusion rows respond to the mask ratio
  const auto half = flops_table(cfg, 0.5, 16);
  for (const auto& r : rows) {
    const bool diffusion = r.module == "diffusion_attention" || r.module == "diffusion_interaction";
    if (diffusion)
      CHECK(row(half, r.module) != r.flops);
    else
      CHECK(row(half, r.module) == r.flops);
  }
}

TEST_CASE("ablations lower the flops table monotonically and locally") {
  const lcmf::ModelConfig full = desk_config();
  const auto base = flops_table(full, 0.75, 16);

  lcmf::ModelConfig cfg = full;
  cfg.no_cross_attention = true;
  const auto nocross = flops_table(cfg, 0.75, 16);
  for (const auto& r : base) {
    if (r.module == "diffusion_attention" || r.module == "fusion")
      CHECK(row(nocross, r.module) < r.flops);
    else
      CHECK(row(nocross, r.module) == r.flops);
  }
  CHECK(row(nocross, "diffusion_attention") == 0);

  cfg = full;
  cfg.no_cmm = true;
  const auto nocmm = flops_table(cfg, 0.75, 16);
  CHECK(row(nocmm, "interaction") == 0);
  CHECK(lcmf::flops_total(nocmm) < lcmf::flops_total(base));

  cfg = full;
  cfg.no_sam = true;
  const auto nosam = flops_table(cfg, 0.75, 16);
  CHECK(row(nosam, "visual_encoder") < row(base, "visual_encoder"));
  CHECK(row(nosam, "decoder") < row(base, "decoder"));
  CHECK(row(nosam, "text_encoder") == row(base, "text_encoder"));
  CHECK(lcmf::flops_total(nosam) < lcmf::flops_total(base));
}

TEST_CASE("vqa forward flops cover exactly the answering pipeline") {
  const lcmf::ModelConfig cfg = desk_config();
  const auto rows = flops_table(cfg, 0.0, 16);
  const int64_t expect = row(rows, "patch_embed") + row(rows, "visual_encoder") +
                         row(rows, "text_encoder") + row(rows, "interaction") +
                         row(rows, "fusion");
  CHECK(lcmf::flops_vqa_forward(cfg, 16) == expect);
  CHECK(lcmf::flops_vqa_forward(cfg, 16) < lcmf::flops_total(rows));
  CHECK_THROWS(flops_table(cfg, 1.0, 16));
  CHECK_THROWS(flops_table(cfg, 0.75, 1));
}
