#include <cmath>
#include <cstdint>
#include <vector>

#include "doctest.h"
#include "lcmf/sdmae.hpp"
#include "oracles.hpp"

using oracles::grad_check;
using oracles::GradCheckResult;
using oracles::random_tensor;
using oracles::randomize_params;
using oracles::store_inputs;

namespace {

lcmf::SdmaeConfig tiny_sdmae() {
  lcmf::SdmaeConfig cfg;
  cfg.grid = {8, 4, 3};  // 4 patches of 48 pixels
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.encoder_blocks = 2;
  cfg.decoder_blocks = 2;
  cfg.core = {8, 10, 2, 2, true};
  return cfg;
}

void check_rows_equal(const lcmf::Tensor& a, int64_t row_a, const lcmf::Tensor& b, int64_t row_b) {
  REQUIRE(a.cols() == b.cols());
  for (int64_t j = 0; j < a.cols(); ++j) CHECK(a.at({row_a, j}) == b.at({row_b, j}));
}

// value encoding used by the layout tests: v(y, x, c) is unique per site
double pix(int64_t y, int64_t x, int64_t c, int64_t w, int64_t ch) {
  return static_cast<double>((y * w + x) * ch + c);
}

lcmf::Tensor coded_image(const lcmf::PatchGrid& g) {
  std::vector<double> data;
  data.reserve(static_cast<size_t>(g.image_side * g.image_side * g.channels));
  for (int64_t y = 0; y < g.image_side; ++y)
    for (int64_t x = 0; x < g.image_side; ++x)
      for (int64_t c = 0; c < g.channels; ++c)
        data.push_back(pix(y, x, c, g.image_side, g.channels));
  return lcmf::Tensor::from({g.image_side, g.image_side, g.channels}, std::move(data));
}

}  // namespace

TEST_CASE("patch grid arithmetic and validation") {
  lcmf::PatchGrid big{224, 16, 3};
  CHECK(big.patch_count() == 196);
  CHECK(big.patch_dim() == 768);
  CHECK(lcmf::PatchGrid{2, 1, 1}.patch_count() == 4);

  CHECK_THROWS(lcmf::PatchGrid{10, 4, 3}.validate());
  CHECK_THROWS(lcmf::PatchGrid{0, 1, 3}.validate());
  CHECK_THROWS(lcmf::patchify(lcmf::Tensor::zeros({8, 8, 3}), lcmf::PatchGrid{8, 3, 3}));
  CHECK_THROWS(lcmf::patchify(lcmf::Tensor::zeros({8, 4, 3}), lcmf::PatchGrid{8, 4, 3}));
}

TEST_CASE("unit patches equal pixel rows") {
  lcmf::PatchGrid g{2, 1, 2};
  lcmf::Tensor p = lcmf::patchify(coded_image(g), g);
  REQUIRE(p.rows() == 4);
  REQUIRE(p.cols() == 2);
  for (int64_t y = 0; y < 2; ++y)
    for (int64_t x = 0; x < 2; ++x)
      for (int64_t c = 0; c < 2; ++c) CHECK(p.at({y * 2 + x, c}) == pix(y, x, c, 2, 2));
}

TEST_CASE("patch rows are (y, x, channel) within a row-major patch grid") {
  lcmf::PatchGrid g{4, 2, 2};
  lcmf::Tensor p = lcmf::patchify(coded_image(g), g);
  REQUIRE(p.rows() == 4);
  REQUIRE(p.cols() == 8);
  for (int64_t py = 0; py < 2; ++py)
    for (int64_t px = 0; px < 2; ++px)
      for (int64_t dy = 0; dy < 2; ++dy)
        for (int64_t dx = 0; dx < 2; ++dx)
          for (int64_t c = 0; c < 2; ++c)
            CHECK(p.at({py * 2 + px, (dy * 2 + dx) * 2 + c}) ==
                  pix(py * 2 + dy, px * 2 + dx, c, 4, 2));
}

TEST_CASE("unpatchify inverts patchify bitwise") {
  for (const lcmf::PatchGrid& g : {lcmf::PatchGrid{32, 4, 3}, lcmf::PatchGrid{8, 8, 1}}) {
    lcmf::Tensor img = random_tensor({g.image_side, g.image_side, g.channels}, 11);
    lcmf::Tensor back = lcmf::unpatchify(lcmf::patchify(img, g), g);
    REQUIRE(back.shape() == img.shape());
    for (int64_t i = 0; i < img.numel(); ++i) CHECK(back.data()[i] == img.data()[i]);
  }
}

TEST_CASE("patchify is differentiable") {
  lcmf::PatchGrid g{4, 2, 1};
  lcmf::Tensor img = random_tensor({4, 4, 1}, 3, -1.0, 1.0, /*tracked=*/true);
  auto loss_fn = [&]() {
    lcmf::Tensor p = lcmf::patchify(img, g);
    return lcmf::mean_all(lcmf::mul(p, p));
  };
  GradCheckResult res = grad_check(loss_fn, {{"image", img}});
  CAPTURE(res.worst);
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("mask plans are deterministic exact partitions") {
  lcmf::MaskPlan plan = lcmf::sample_mask(196, 0.75, 42);
  CHECK(plan.masked.size() == 147);
  CHECK(plan.visible.size() == 49);

  lcmf::MaskPlan again = lcmf::sample_mask(196, 0.75, 42);
  CHECK(plan.masked == again.masked);
  CHECK(plan.visible == again.visible);
  CHECK(lcmf::sample_mask(196, 0.75, 43).masked != plan.masked);

  // exact disjoint partition, both halves ascending
  std::vector<bool> seen(196, false);
  int64_t prev = -1;
  for (int64_t i : plan.masked) {
    CHECK(i > prev);
    prev = i;
    seen[static_cast<size_t>(i)] = true;
  }
  prev = -1;
  for (int64_t i : plan.visible) {
    CHECK(i > prev);
    prev = i;
    CHECK(!seen[static_cast<size_t>(i)]);
    seen[static_cast<size_t>(i)] = true;
  }
  CHECK(std::count(seen.begin(), seen.end(), false) == 0);

  CHECK(lcmf::sample_mask(64, 0.0, 1).visible.size() == 64);
  // half-patch counts round away from zero
  CHECK(lcmf::sample_mask(7, 0.5, 1).masked.size() == 4);

  CHECK_THROWS(lcmf::sample_mask(16, 1.0, 1));
  CHECK_THROWS(lcmf::sample_mask(16, 1.5, 1));
  CHECK_THROWS(lcmf::sample_mask(16, -0.1, 1));
  CHECK_THROWS(lcmf::sample_mask(0, 0.5, 1));
}

TEST_CASE("mask sampling hits every index uniformly") {
  const int64_t trials = 4000;
  std::vector<int64_t> hits(8, 0);
  for (int64_t s = 0; s < trials; ++s)
    for (int64_t i : lcmf::sample_mask(8, 0.5, static_cast<uint64_t>(s)).masked)
      ++hits[static_cast<size_t>(i)];
  for (int64_t h : hits) {
    // expectation 2000, sd ~31.6; this band is beyond six sigma
    CHECK(h > 1800);
    CHECK(h < 2200);
  }
}

TEST_CASE("encoding the full set and the visible subset") {
  lcmf::ParamStore store(21);
  lcmf::Sdmae model(store, "mae", tiny_sdmae());
  lcmf::Tensor patches = lcmf::patchify(random_tensor({8, 8, 3}, 5), tiny_sdmae().grid);

  // ratio 0: the visible gather is the identity, so both passes coincide
  auto [f_e, f_v] = model.encode(patches, lcmf::sample_mask(4, 0.0, 9));
  REQUIRE(f_e.shape() == std::vector<int64_t>{4, 8});
  REQUIRE(f_v.shape() == f_e.shape());
  for (int64_t i = 0; i < f_e.numel(); ++i) CHECK(f_v.data()[i] == f_e.data()[i]);

  auto [g_e, g_v] = model.encode(patches, lcmf::sample_mask(4, 0.5, 9));
  CHECK(g_e.rows() == 4);
  CHECK(g_v.rows() == 2);

  CHECK_THROWS(model.encode(patches, lcmf::sample_mask(5, 0.5, 9)));
  CHECK_THROWS(model.encode(lcmf::Tensor::zeros({4, 40}), lcmf::sample_mask(4, 0.5, 9)));
}

TEST_CASE("single-key cross-attention returns the projected value row") {
  lcmf::ParamStore store(33);
  lcmf::CrossAttention ca(store, "ca", 8);
  lcmf::Tensor q = random_tensor({3, 8}, 1);
  lcmf::Tensor kv = random_tensor({1, 8}, 2);

  lcmf::Tensor out = ca(q, kv);
  lcmf::Tensor expected = lcmf::matmul(kv, store.get("ca.v.w"));
  REQUIRE(out.shape() == std::vector<int64_t>{3, 8});
  for (int64_t i = 0; i < 3; ++i) check_rows_equal(out, i, expected, 0);

  CHECK_THROWS(ca(q, lcmf::Tensor::zeros({0, 8})));
  CHECK_THROWS(ca(q, random_tensor({2, 4}, 3)));
}

TEST_CASE("diffuse stage contracts") {
  lcmf::ParamStore store(17);
  lcmf::MambaCoreConfig core{8, 10, 2, 2, true};
  lcmf::CrossAttention attn(store, "st.attn", 8);
  lcmf::CmmHostBlock cmm(store, "st.cmm", core, 1.0);

  lcmf::Tensor f_q = random_tensor({3, 8}, 4);
  lcmf::Tensor f_kv = random_tensor({5, 8}, 6);
  lcmf::Tensor out = lcmf::diffuse_stage(attn, cmm, f_q, f_kv, f_kv);
  CHECK(out.shape() == std::vector<int64_t>{3, 8});

  lcmf::Tensor empty = lcmf::Tensor::zeros({0, 8});
  CHECK(lcmf::diffuse_stage(attn, cmm, empty, f_kv, f_kv).dim(0) == 0);
  CHECK_THROWS(lcmf::diffuse_stage(attn, cmm, f_q, empty, f_kv));
  CHECK_THROWS(lcmf::diffuse_stage(attn, cmm, f_q, f_kv, empty));
}

TEST_CASE("host block isolates the host when the coupling is off") {
  lcmf::MambaCoreConfig core{8, 10, 2, 2, true};
  lcmf::Tensor host = random_tensor({4, 8}, 91);

  // alpha 0: two different contexts, bitwise identical host outputs
  lcmf::ParamStore store(23);
  lcmf::CmmHostBlock off(store, "off", core, 0.0);
  lcmf::CmmHostBlock on(store, "on", core, 1.0);
  randomize_params(store, 96);  // move the output projections off zero
  lcmf::Tensor a = off(host, random_tensor({6, 8}, 92));
  lcmf::Tensor b = off(host, random_tensor({2, 8}, 93));
  lcmf::Tensor c = off(host, lcmf::Tensor::zeros({0, 8}));
  for (int64_t i = 0; i < a.numel(); ++i) {
    CHECK(a.data()[i] == b.data()[i]);
    CHECK(a.data()[i] == c.data()[i]);
  }

  // alpha 1: the context moves the output
  lcmf::Tensor d = on(host, random_tensor({6, 8}, 92));
  lcmf::Tensor e = on(host, random_tensor({6, 8}, 94));
  double max_diff = 0.0;
  for (int64_t i = 0; i < d.numel(); ++i)
    max_diff = std::max(max_diff, std::abs(d.data()[i] - e.data()[i]));
  CHECK(max_diff > 1e-8);

  CHECK_THROWS(lcmf::CmmHostBlock(store, "bad", core, 1.5));
  CHECK_THROWS(on(host, random_tensor({3, 5}, 95)));
}

TEST_CASE("forward restores original patch order") {
  lcmf::ParamStore store(77);
  lcmf::Sdmae model(store, "mae", tiny_sdmae());
  lcmf::Tensor img = random_tensor({8, 8, 3}, 13);
  lcmf::MaskPlan plan = lcmf::sample_mask(4, 0.5, 3);
  REQUIRE(plan.masked.size() == 2);

  lcmf::Sdmae::Output out = model.forward(img, plan);
  CHECK(out.f_e.shape() == std::vector<int64_t>{4, 8});
  CHECK(out.f_vp.shape() == std::vector<int64_t>{2, 8});
  CHECK(out.f_mp.shape() == std::vector<int64_t>{2, 8});
  CHECK(out.features.shape() == std::vector<int64_t>{4, 8});
  CHECK(out.pred_patches.shape() == std::vector<int64_t>{4, 48});
  CHECK(out.reconstruction.shape() == img.shape());

  // every enhanced row lands back at the patch index it came from
  for (size_t i = 0; i < plan.visible.size(); ++i)
    check_rows_equal(out.features, plan.visible[i], out.f_vp, static_cast<int64_t>(i));
  for (size_t j = 0; j < plan.masked.size(); ++j)
    check_rows_equal(out.features, plan.masked[j], out.f_mp, static_cast<int64_t>(j));
}

TEST_CASE("ratio zero skips the mask stage") {
  lcmf::ParamStore store(78);
  lcmf::Sdmae model(store, "mae", tiny_sdmae());
  lcmf::Tensor img = random_tensor({8, 8, 3}, 14);

  lcmf::Sdmae::Output out = model.forward(img, lcmf::sample_mask(4, 0.0, 5));
  CHECK(out.f_mp.dim(0) == 0);
  REQUIRE(out.features.shape() == out.f_vp.shape());
  for (int64_t i = 0; i < out.features.numel(); ++i)
    CHECK(out.features.data()[i] == out.f_vp.data()[i]);
  CHECK(out.reconstruction.shape() == img.shape());
  for (int64_t i = 0; i < out.reconstruction.numel(); ++i)
    CHECK(std::isfinite(out.reconstruction.data()[i]));
}

TEST_CASE("fixed seeds reproduce the forward pass") {
  lcmf::Tensor img = random_tensor({8, 8, 3}, 15);
  lcmf::MaskPlan plan = lcmf::sample_mask(4, 0.5, 8);

  lcmf::ParamStore s1(99), s2(99), s3(100);
  lcmf::Tensor p1 = lcmf::Sdmae(s1, "mae", tiny_sdmae()).forward(img, plan).pred_patches;
  lcmf::Tensor p2 = lcmf::Sdmae(s2, "mae", tiny_sdmae()).forward(img, plan).pred_patches;
  lcmf::Tensor p3 = lcmf::Sdmae(s3, "mae", tiny_sdmae()).forward(img, plan).pred_patches;

  bool differs = false;
  for (int64_t i = 0; i < p1.numel(); ++i) {
    CHECK(p1.data()[i] == p2.data()[i]);
    differs = differs || p1.data()[i] != p3.data()[i];
  }
  CHECK(differs);
}

TEST_CASE("attention ablation removes exactly the attention sublayers") {
  lcmf::HybridStackConfig cfg;
  cfg.blocks = 4;
  cfg.heads = 2;
  cfg.core = {8, 10, 2, 2, true};

  lcmf::ParamStore full(1), ablated(1);
  lcmf::HybridStack hs_full(full, "hs", cfg);
  cfg.sam_attention = false;
  lcmf::HybridStack hs_ablated(ablated, "hs", cfg);

  CHECK(full.has("hs.block2.attn.q.w"));
  CHECK(full.has("hs.block4.attn.o.b"));
  CHECK(!ablated.has("hs.block2.attn.q.w"));
  CHECK(!ablated.has("hs.block4.attn.o.b"));
  CHECK(ablated.has("hs.block2.mamba.in_proj.w"));
  CHECK(ablated.has("hs.block3.attn.q.w"));  // non-Mamba blocks keep attention

  // per ablated block: q/k/v/o at d^2+d each plus the two norms at 2d each
  const int64_t d = 8;
  const int64_t per_block = 4 * (d * d + d) + 4 * d;
  CHECK(full.total_params() - ablated.total_params() == 2 * per_block);

  lcmf::Tensor x = random_tensor({5, 8}, 21);
  CHECK(hs_ablated(x).shape() == x.shape());
  CHECK(hs_full(x).shape() == x.shape());
}

TEST_CASE("hand-checked reconstruction losses") {
  lcmf::MaskPlan plan;
  plan.visible = {0};
  plan.masked = {1};
  plan.ratio = 0.5;

  lcmf::Tensor pred = lcmf::Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  lcmf::Tensor target = lcmf::Tensor::from({2, 3}, {9, 9, 9, 1, 2, 4});

  // raw: masked-row residuals are (3, 3, 2)
  CHECK(lcmf::recon_loss(pred, target, plan, false).at({0}) == doctest::Approx(22.0 / 3.0).epsilon(1e-15));

  // identical inputs give an exact zero
  CHECK(lcmf::recon_loss(target, target, plan, false).at({0}) == 0.0);
  CHECK(lcmf::recon_loss(target, target, plan, true).at({0}) != 0.0);  // normalized target moves

  // normalized: target row (1,2,4) standardizes with mean 7/3, var 14/9
  {
    const double mean = 7.0 / 3.0;
    const double inv = 1.0 / std::sqrt(14.0 / 9.0 + 1e-6);
    double expected = 0.0;
    const double t[3] = {1, 2, 4}, p[3] = {4, 5, 6};
    for (int j = 0; j < 3; ++j) {
      const double diff = p[j] - (t[j] - mean) * inv;
      expected += diff * diff;
    }
    expected /= 3.0;
    CHECK(lcmf::recon_loss(pred, target, plan, true).at({0}) ==
          doctest::Approx(expected).epsilon(1e-14));
  }

  // constant masked patch standardizes to zero, leaving mean(pred^2)
  {
    lcmf::Tensor flat = lcmf::Tensor::from({2, 3}, {9, 9, 9, 5, 5, 5});
    const double expected = (16.0 + 25.0 + 36.0) / 3.0;
    CHECK(lcmf::recon_loss(pred, flat, plan, true).at({0}) ==
          doctest::Approx(expected).epsilon(1e-15));
  }

  // the all-patch flag widens the support to every row
  {
    const double row0 = ((1.0 - 9) * (1 - 9) + (2.0 - 9) * (2 - 9) + (3.0 - 9) * (3 - 9));
    const double row1 = (9.0 + 9.0 + 4.0);
    CHECK(lcmf::recon_loss(pred, target, plan, false, /*masked_only=*/false).at({0}) ==
          doctest::Approx((row0 + row1) / 6.0).epsilon(1e-15));
  }

  // nothing masked and masked-only support: exact zero
  lcmf::MaskPlan open;
  open.visible = {0, 1};
  CHECK(lcmf::recon_loss(pred, target, open, true).at({0}) == 0.0);

  CHECK_THROWS(lcmf::recon_loss(pred, lcmf::Tensor::zeros({2, 4}), plan, false));
  lcmf::MaskPlan wide;
  wide.visible = {0, 1, 2};
  CHECK_THROWS(lcmf::recon_loss(pred, target, wide, false));
}

TEST_CASE("loss gradients stay on masked predictions") {
  lcmf::MaskPlan plan;
  plan.visible = {0, 2};
  plan.masked = {1};

  lcmf::Tensor pred = random_tensor({3, 4}, 31, -1.0, 1.0, /*tracked=*/true);
  lcmf::Tensor target = random_tensor({3, 4}, 32);
  lcmf::Tensor t_norm = lcmf::standardize_rows(lcmf::gather_rows(target, plan.masked));

  lcmf::Tape tape;
  tape.backward(lcmf::recon_loss(pred, target, plan, true));

  const std::vector<double>& g = pred.grad_data();
  for (int64_t j = 0; j < 4; ++j) {
    CHECK(g[static_cast<size_t>(j)] == 0.0);
    CHECK(g[static_cast<size_t>(2 * 4 + j)] == 0.0);
    const double expected = 2.0 * (pred.at({1, j}) - t_norm.at({0, j})) / 4.0;
    CHECK(g[static_cast<size_t>(4 + j)] == doctest::Approx(expected).epsilon(1e-14));
  }
}

TEST_CASE("two-stage pipeline passes a finite-difference check") {
  lcmf::SdmaeConfig cfg;
  cfg.grid = {4, 2, 1};  // 4 patches of 4 pixels
  cfg.d_model = 4;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.encoder_blocks = 2;
  cfg.decoder_blocks = 2;
  cfg.core = {4, 6, 2, 2, true};

  lcmf::ParamStore store(57);
  lcmf::Sdmae model(store, "mae", cfg);
  randomize_params(store, 58);

  lcmf::Tensor img = random_tensor({4, 4, 1}, 59, -1.0, 1.0, /*tracked=*/true);
  lcmf::Tensor target = random_tensor({4, 4}, 60);
  lcmf::MaskPlan plan = lcmf::sample_mask(4, 0.5, 61);

  auto loss_fn = [&]() {
    lcmf::Sdmae::Output out = model.forward(img, plan);
    return lcmf::recon_loss(out.pred_patches, target, plan, true);
  };

  std::vector<std::pair<std::string, lcmf::Tensor>> inputs = store_inputs(store);
  inputs.emplace_back("image", img);
  GradCheckResult res = grad_check(loss_fn, inputs, 1e-5, 1e-5);
  CAPTURE(res.worst);
  CAPTURE(res.max_abs_err);
  CHECK(res.max_rel_err < 1e-4);
}
