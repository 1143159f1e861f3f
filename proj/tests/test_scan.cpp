#include <cmath>
#include <vector>

#include "doctest.h"
#include "lcmf/rng.hpp"
#include "lcmf/scan.hpp"
#include "lcmf/tensor.hpp"
#include "oracles.hpp"

using lcmf::DiscretizedSsm;
using lcmf::ScanBlockPlan;
using lcmf::SsmParams;
using lcmf::Tape;
using lcmf::Tensor;
using oracles::grad_check;

namespace {

// Small random problem with positive rates and step sizes.
struct Problem {
  Tensor x, a, delta, b, c, d_skip;

  Problem(int64_t t_len, int64_t d_dim, int64_t n_state, uint64_t seed, bool tracked = false) {
    lcmf::Rng rng(seed);
    auto fill = [&](std::vector<int64_t> shape, double lo, double hi) {
      Tensor t = Tensor::zeros(shape, tracked);
      for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
      return t;
    };
    x = fill({t_len, d_dim}, -1.0, 1.0);
    a = fill({t_len, d_dim}, 0.1, 1.5);
    delta = fill({t_len, d_dim}, 0.05, 0.8);
    b = fill({t_len, n_state}, -1.0, 1.0);
    c = fill({t_len, n_state}, -1.0, 1.0);
    d_skip = fill({d_dim}, -0.5, 0.5);
  }

  SsmParams params() const { return SsmParams{a, delta, b, c}; }
};

}  // namespace

TEST_CASE("discretization matches the closed form away from zero") {
  Tensor a = Tensor::from({1, 1}, {2.0});
  Tensor delta = Tensor::from({1, 1}, {0.5});
  Tensor b = Tensor::from({1, 2}, {3.0, -0.5});
  Tensor c = Tensor::from({1, 2}, {1.0, 1.0});
  SsmParams p{a, delta, b, c};

  // stable mode negates the rate: u = -2 * 0.5 = -1
  DiscretizedSsm ds = lcmf::discretize(p, true);
  CHECK(ds.a_bar.at({0, 0}) == doctest::Approx(std::exp(-1.0)).epsilon(1e-14));
  double s = (std::exp(-1.0) - 1.0) / -2.0;
  CHECK(ds.b_bar.at({0, 0, 0}) == doctest::Approx(s * 3.0).epsilon(1e-14));
  CHECK(ds.b_bar.at({0, 0, 1}) == doctest::Approx(s * -0.5).epsilon(1e-14));

  // paper-literal mode uses the rate as-is: u = +1
  DiscretizedSsm du = lcmf::discretize(p, false);
  CHECK(du.a_bar.at({0, 0}) == doctest::Approx(std::exp(1.0)).epsilon(1e-14));
  double su = (std::exp(1.0) - 1.0) / 2.0;
  CHECK(du.b_bar.at({0, 0, 0}) == doctest::Approx(su * 3.0).epsilon(1e-14));
}

TEST_CASE("discretization agrees with the series expansion near zero") {
  // u spanning [1e-12, 1e-2]. Above the limit threshold the closed form must
  // track delta * phi1(u); below it the branch returns delta exactly, whose
  // relative distance from phi1 is bounded by u.
  for (double u : {1e-12, 1e-9, 2e-8, 1e-6, 1e-4, 1e-2}) {
    const double delta_v = 0.37;
    const double a_v = u / delta_v;
    SsmParams p{Tensor::from({1, 1}, {a_v}), Tensor::from({1, 1}, {delta_v}),
                Tensor::from({1, 1}, {1.0}), Tensor::from({1, 1}, {1.0})};
    DiscretizedSsm ds = lcmf::discretize(p, false);
    const double expect = delta_v * oracles::phi1_series(u);
    const double rel = std::abs(ds.b_bar.at({0, 0, 0}) - expect) / expect;
    CHECK(rel <= std::max(u, 1e-13));
  }
}

TEST_CASE("discretization is continuous across the limit branch") {
  const double delta_v = 1.0;
  for (double u : {0.99e-8, 1.01e-8}) {
    SsmParams p{Tensor::from({1, 1}, {u}), Tensor::from({1, 1}, {delta_v}),
                Tensor::from({1, 1}, {1.0}), Tensor::from({1, 1}, {1.0})};
    DiscretizedSsm ds = lcmf::discretize(p, false);
    // both sides sit within 1e-8 of delta * b
    CHECK(std::abs(ds.b_bar.at({0, 0, 0}) - delta_v) / delta_v < 1e-8);
  }
}

TEST_CASE("discretization validates shapes and positive step sizes") {
  Problem pr(3, 2, 2, 7);
  SsmParams bad = pr.params();
  bad.delta.at({1, 1}) = 0.0;
  CHECK_THROWS(lcmf::discretize(bad, true));
  bad.delta.at({1, 1}) = -0.1;
  CHECK_THROWS(lcmf::discretize(bad, true));

  SsmParams shape_bad = pr.params();
  shape_bad.b = Tensor::zeros({2, 2});
  CHECK_THROWS(lcmf::discretize(shape_bad, true));
}

TEST_CASE("scan matches the quadratic-time unrolled recurrence") {
  Problem pr(6, 3, 4, 11);
  DiscretizedSsm ds = lcmf::discretize(pr.params(), true);
  Tensor y = lcmf::scan_sequential(pr.x, ds, pr.c, pr.d_skip);
  Tensor ref = oracles::scan_unrolled(pr.x, ds, pr.c, pr.d_skip);
  REQUIRE(y.numel() == ref.numel());
  for (int64_t i = 0; i < y.numel(); ++i)
    CHECK(y.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-11));
}

TEST_CASE("single step reduces to an affine map") {
  // T = 1: y = <c, b_bar> x + d_skip x, h carries nothing
  Tensor x = Tensor::from({1, 1}, {2.0});
  Tensor a = Tensor::from({1, 1}, {1.0});
  Tensor delta = Tensor::from({1, 1}, {0.3});
  Tensor b = Tensor::from({1, 2}, {0.5, -1.0});
  Tensor c = Tensor::from({1, 2}, {2.0, 1.0});
  Tensor d_skip = Tensor::from({1}, {0.25});
  DiscretizedSsm ds = lcmf::discretize(SsmParams{a, delta, b, c}, true);
  Tensor y = lcmf::scan_sequential(x, ds, c, d_skip);
  const double s = (std::exp(-0.3) - 1.0) / -1.0;
  const double expect = (2.0 * s * 0.5 + 1.0 * s * -1.0) * 2.0 + 0.25 * 2.0;
  CHECK(y.at({0, 0}) == doctest::Approx(expect).epsilon(1e-13));
}

TEST_CASE("blocked scan is bitwise identical to sequential") {
  Problem pr(13, 4, 3, 23);
  DiscretizedSsm ds = lcmf::discretize(pr.params(), true);
  Tensor ref = lcmf::scan_sequential(pr.x, ds, pr.c, pr.d_skip);
  for (int64_t bl : {1, 2, 3, 5, 13, 64}) {
    ScanBlockPlan plan{bl};
    Tensor y = lcmf::scan_blocked(pr.x, ds, pr.c, pr.d_skip, plan);
    for (int64_t i = 0; i < ref.numel(); ++i) CHECK(y.data()[i] == ref.data()[i]);
  }
}

TEST_CASE("block plan arithmetic") {
  ScanBlockPlan plan{4};
  CHECK(plan.block_count(1) == 1);
  CHECK(plan.block_count(4) == 1);
  CHECK(plan.block_count(5) == 2);
  CHECK(plan.block_count(16) == 4);
  ScanBlockPlan bad{0};
  CHECK_THROWS(bad.validate(8));
}

TEST_CASE("scan flop count") {
  // one step, one channel, one state: 3 recurrence + 2 output + 1 skip
  CHECK(lcmf::flops_scan(1, 1, 1) == 6);
  CHECK(lcmf::flops_scan(2048, 64, 16) == 2048 * 64 * (5 * 16 + 1));
  // linear in sequence length
  CHECK(lcmf::flops_scan(4096, 64, 16) == 2 * lcmf::flops_scan(2048, 64, 16));
}

TEST_CASE("scan pipeline gradients match finite differences") {
  Problem pr(4, 2, 3, 31, true);
  auto loss = [&] {
    SsmParams p{lcmf::sigmoid(pr.a), lcmf::softplus(pr.delta), pr.b, pr.c};
    DiscretizedSsm ds = lcmf::discretize(p, true);
    Tensor y = lcmf::scan_sequential(pr.x, ds, p.c, pr.d_skip);
    return lcmf::sum_all(lcmf::silu(y));
  };
  auto res = grad_check(loss, {{"x", pr.x},
                               {"a", pr.a},
                               {"delta", pr.delta},
                               {"b", pr.b},
                               {"c", pr.c},
                               {"d_skip", pr.d_skip}});
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("gradients stay correct inside the limit branch") {
  // rates small enough that |a * delta| < 1e-8 on some elements and just
  // above on others, straddling the branch
  Tensor x = Tensor::from({2, 2}, {0.7, -0.4, 0.3, 1.1}, true);
  Tensor a = Tensor::from({2, 2}, {1e-9, 3e-8, 5e-10, 2e-7}, true);
  Tensor delta = Tensor::from({2, 2}, {0.5, 0.4, 0.6, 0.3}, true);
  Tensor b = Tensor::from({2, 2}, {0.8, -0.6, 0.2, 0.9}, true);
  Tensor c = Tensor::from({2, 2}, {1.0, 0.5, -0.7, 0.4}, true);
  Tensor d_skip = Tensor::from({2}, {0.1, -0.2}, true);
  auto loss = [&] {
    DiscretizedSsm ds = lcmf::discretize(SsmParams{a, delta, b, c}, true);
    return lcmf::sum_all(lcmf::scan_sequential(x, ds, c, d_skip));
  };
  auto res = grad_check(loss, {{"x", x}, {"a", a}, {"delta", delta}, {"b", b}, {"c", c}});
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("blocked scan backward is bitwise identical to sequential") {
  Problem pr(11, 3, 2, 47, true);
  DiscretizedSsm ds = lcmf::discretize(pr.params(), true);

  auto run = [&](bool blocked) {
    pr.x.zero_grad();
    pr.c.zero_grad();
    pr.d_skip.zero_grad();
    Tape tape;
    Tensor y = blocked ? lcmf::scan_blocked(pr.x, ds, pr.c, pr.d_skip, ScanBlockPlan{3})
                       : lcmf::scan_sequential(pr.x, ds, pr.c, pr.d_skip);
    tape.backward(lcmf::sum_all(lcmf::silu(y)));
    std::vector<double> g(pr.x.grad_data().begin(), pr.x.grad_data().end());
    auto gc = pr.c.grad_data();
    g.insert(g.end(), gc.begin(), gc.end());
    return g;
  };
  auto gs = run(false);
  auto gb = run(true);
  REQUIRE(gs.size() == gb.size());
  for (size_t i = 0; i < gs.size(); ++i) CHECK(gs[i] == gb[i]);
}

TEST_CASE("stable mode contracts where the literal recurrence explodes") {
  const int64_t t_len = 512, d_dim = 2, n_state = 2;
  Tensor x = Tensor::full({t_len, d_dim}, 1.0);
  Tensor a = Tensor::full({t_len, d_dim}, 3.0);
  Tensor delta = Tensor::full({t_len, d_dim}, 0.9);
  Tensor b = Tensor::full({t_len, n_state}, 1.0);
  Tensor c = Tensor::full({t_len, n_state}, 1.0);
  Tensor d_skip = Tensor::zeros({d_dim});
  SsmParams p{a, delta, b, c};

  Tensor ys = lcmf::scan_sequential(x, lcmf::discretize(p, true), c, d_skip);
  double max_stable = 0.0;
  for (int64_t i = 0; i < ys.numel(); ++i) max_stable = std::max(max_stable, std::abs(ys.data()[i]));
  CHECK(max_stable < 100.0);

  Tensor yu = lcmf::scan_sequential(x, lcmf::discretize(p, false), c, d_skip);
  double max_literal = 0.0;
  for (int64_t i = 0; i < yu.numel(); ++i)
    max_literal = std::max(max_literal, std::abs(yu.data()[i]));
  CHECK(max_literal > 1e6);
}

TEST_CASE("scan is bitwise reproducible across invocations") {
  Problem pr(9, 2, 3, 91);
  DiscretizedSsm d1 = lcmf::discretize(pr.params(), true);
  DiscretizedSsm d2 = lcmf::discretize(pr.params(), true);
  Tensor y1 = lcmf::scan_sequential(pr.x, d1, pr.c, pr.d_skip);
  Tensor y2 = lcmf::scan_sequential(pr.x, d2, pr.c, pr.d_skip);
  for (int64_t i = 0; i < y1.numel(); ++i) CHECK(y1.data()[i] == y2.data()[i]);
}
