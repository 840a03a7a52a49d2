#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "icr/ops.hpp"
#include "oracles.hpp"

using namespace icr;

namespace {

double max_rel_dev(const Tensor& got, const Tensor& want) {
  double mag = 0.0, dev = 0.0;
  REQUIRE(got.shape() == want.shape());
  for (int64_t i = 0; i < got.size(); ++i) {
    mag = std::max(mag, std::abs(static_cast<double>(want.data()[i])));
    dev = std::max(dev, std::abs(static_cast<double>(got.data()[i]) - want.data()[i]));
  }
  return dev / std::max(mag, 1e-12);
}

GConvParams random_gconv(int co, int ci, int k, Rng& rng, bool lifting = false,
                         bool with_bias = true) {
  GConvParams p;
  if (lifting)
    p.weight = rand_uniform({co, ci, k, k}, -0.5f, 0.5f, rng);
  else
    p.weight = rand_uniform({co, ci, 4, k, k}, -0.5f, 0.5f, rng);
  if (with_bias) p.bias = rand_uniform({co}, -0.2f, 0.2f, rng);
  p.stride = 1;
  p.padding = (k - 1) / 2;
  return p;
}

}  // namespace

// ---- correlate2d --------------------------------------------------------------

TEST_CASE("correlate2d: 1x1 scalar filter scales the input") {
  Tensor f = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
  Conv2dParams p;
  p.weight = Tensor::from({1, 1, 1, 1}, {2});
  Tensor out = correlate2d(f, p, Boundary::kZero);
  const float want[4] = {2, 4, 6, 8};
  for (int i = 0; i < 4; ++i) CHECK(out.data()[i] == want[i]);
}

TEST_CASE("correlate2d: 2x2 identity filter, valid padding") {
  Tensor f = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
  Conv2dParams p;
  p.weight = Tensor::from({1, 1, 2, 2}, {1, 0, 0, 1});
  Tensor out = correlate2d(f, p, Boundary::kZero);
  REQUIRE(out.size() == 1);
  CHECK(out.item() == 5.0f);  // 1*1 + 4*1
}

TEST_CASE("correlate2d matches direct summation on random instances") {
  Rng rng(3);
  for (int t = 0; t < 5; ++t) {
    Tensor f = rand_uniform({2, 3, 7, 7}, -1.0f, 1.0f, rng);
    Conv2dParams p;
    p.weight = rand_uniform({4, 3, 3, 3}, -1.0f, 1.0f, rng);
    p.stride = t % 2 ? 2 : 1;
    p.padding = 1;
    Tensor got = correlate2d(f, p, Boundary::kZero);
    Tensor want = oracles::correlate2d_direct(f, p.weight, p.stride, p.padding);
    CHECK(max_rel_dev(got, want) < 1e-6);
  }
}

TEST_CASE("correlate2d: translated circular input gives translated output") {
  Rng rng(5);
  Tensor f = rand_uniform({1, 2, 8, 8}, -1.0f, 1.0f, rng);
  Conv2dParams p;
  p.weight = rand_uniform({3, 2, 3, 3}, -1.0f, 1.0f, rng);
  p.padding = 1;
  P4Element g{0, 3, 5};
  Tensor lhs = correlate2d(act_planar(f, g, Boundary::kCircular), p, Boundary::kCircular);
  Tensor rhs = act_planar(correlate2d(f, p, Boundary::kCircular), g, Boundary::kCircular);
  CHECK(max_rel_dev(lhs, rhs) < 1e-6);
}

TEST_CASE("correlate2d rejects kernels larger than the padded input") {
  Tensor f = Tensor::zeros({1, 1, 2, 2});
  Conv2dParams p;
  p.weight = Tensor::zeros({1, 1, 5, 5});
  CHECK_THROWS_AS(correlate2d(f, p, Boundary::kZero), std::invalid_argument);
}

TEST_CASE("correlate2d gradients pass finite differences") {
  Rng rng(7);
  Tensor f = rand_uniform({1, 2, 5, 5}, -1.0f, 1.0f, rng, true);
  Conv2dParams p;
  p.weight = rand_uniform({2, 2, 3, 3}, -1.0f, 1.0f, rng, true);
  p.bias = rand_uniform({2}, -0.5f, 0.5f, rng, true);
  p.padding = 1;
  Tensor probe = rand_uniform({1, 2, 5, 5}, -1.0f, 1.0f, rng);
  auto forward = [&] { return correlate2d(f, p, Boundary::kZero); };
  auto res = oracles::finite_difference_check({f, p.weight, p.bias}, forward, probe, 1e-3);
  CHECK(res.max_scale_err < 1e-4);
  CHECK(res.max_rel_err < 1e-3);
}

// ---- lift_correlate -------------------------------------------------------------

TEST_CASE("lift: rotation-symmetric filter yields four identical slices") {
  Rng rng(9);
  Tensor f = rand_uniform({1, 1, 6, 6}, -1.0f, 1.0f, rng);
  GConvParams p;
  p.weight = Tensor::full({1, 1, 3, 3}, 0.7f);
  p.padding = 1;
  GroupFeatureMap out = lift_correlate(f, p, Boundary::kCircular);
  for (int r = 1; r < 4; ++r)
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < 6; ++j)
        CHECK(out.values.at({0, 0, r, i, j}) ==
              doctest::Approx(out.values.at({0, 0, 0, i, j})).epsilon(1e-6));
}

TEST_CASE("lift equivariance: act(rot) after lift == lift after planar rot") {
  Rng rng(11);
  Tensor f = rand_uniform({1, 2, 8, 8}, -1.0f, 1.0f, rng);
  GConvParams p = random_gconv(3, 2, 3, rng, /*lifting=*/true);
  P4Element g{1, 0, 0};
  Tensor lhs = act_group(lift_correlate(f, p, Boundary::kCircular).values, g,
                         Boundary::kCircular);
  Tensor rhs =
      lift_correlate(act_planar(f, g, Boundary::kCircular), p, Boundary::kCircular).values;
  CHECK(max_rel_dev(rhs, lhs) < 1e-5);
}

TEST_CASE("lift on a centred delta reproduces the rotated filters") {
  // single centred 1: output rotation slice r equals the r-rotated filter
  // evaluated per the correlation convention psi(y - x)
  Tensor f = Tensor::zeros({1, 1, 3, 3});
  f.data()[f.offset({0, 0, 1, 1})] = 1.0f;
  Tensor w = Tensor::from({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  GConvParams p;
  p.weight = w;
  p.padding = 1;
  GroupFeatureMap out = lift_correlate(f, p, Boundary::kZero);
  for (int r = 0; r < 4; ++r) {
    Tensor wr = rotate_filter_spatial(w, r);
    // out_r(x) = sum_o f(x+o) wr(o) = wr(c - x), a point reflection of wr
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        CHECK(out.values.at({0, 0, r, i, j}) ==
              doctest::Approx(wr.at({0, 0, 2 - i, 2 - j})).epsilon(1e-6));
  }
}

TEST_CASE("lift gradients pass finite differences") {
  Rng rng(13);
  Tensor f = rand_uniform({1, 1, 6, 6}, -1.0f, 1.0f, rng, true);
  GConvParams p = random_gconv(2, 1, 3, rng, /*lifting=*/true);
  p.weight.set_requires_grad(true);
  p.bias.set_requires_grad(true);
  Tensor probe = rand_uniform({1, 2, 4, 6, 6}, -1.0f, 1.0f, rng);
  auto forward = [&] { return lift_correlate(f, p, Boundary::kCircular).values; };
  auto res = oracles::finite_difference_check({f, p.weight, p.bias}, forward, probe, 1e-3);
  CHECK(res.max_scale_err < 1e-4);
  CHECK(res.max_rel_err < 1e-3);
}

// ---- group_correlate ---------------------------------------------------------------

TEST_CASE("group_correlate with a delta filter mixes channels pointwise") {
  Rng rng(15);
  Tensor f = rand_uniform({1, 2, 4, 5, 5}, -1.0f, 1.0f, rng);
  GConvParams p;
  p.weight = Tensor::zeros({3, 2, 4, 3, 3});
  // weight(co, ci, rotation 0, centre) = M[co][ci]
  const float M[3][2] = {{0.5f, -1.0f}, {2.0f, 0.25f}, {1.0f, 1.0f}};
  for (int co = 0; co < 3; ++co)
    for (int ci = 0; ci < 2; ++ci)
      p.weight.data()[p.weight.offset({co, ci, 0, 1, 1})] = M[co][ci];
  p.padding = 1;
  GroupFeatureMap out = group_correlate({f, Boundary::kCircular}, p);
  for (int co = 0; co < 3; ++co)
    for (int r = 0; r < 4; ++r)
      for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) {
          const float want = M[co][0] * f.at({0, 0, r, i, j}) +
                             M[co][1] * f.at({0, 1, r, i, j});
          CHECK(out.values.at({0, co, r, i, j}) == doctest::Approx(want).epsilon(1e-5));
        }
}

TEST_CASE("group_correlate equivariance under rotations and circular shifts") {
  Rng rng(17);
  Tensor f = rand_uniform({1, 2, 4, 8, 8}, -1.0f, 1.0f, rng);
  GConvParams p = random_gconv(3, 2, 3, rng);
  GroupFeatureMap gf{f, Boundary::kCircular};
  for (int r = 0; r < 4; ++r) {
    P4Element g{r, static_cast<int>(uniform_int(rng, 0, 7)),
                static_cast<int>(uniform_int(rng, 0, 7))};
    Tensor lhs = act_group(group_correlate(gf, p).values, g, Boundary::kCircular);
    Tensor rhs = group_correlate({act_group(f, g, Boundary::kCircular),
                                  Boundary::kCircular}, p).values;
    CHECK(max_rel_dev(rhs, lhs) < 1e-5);
  }
}

TEST_CASE("group_correlate matches the brute-force double sum") {
  Rng rng(19);
  for (int t = 0; t < 8; ++t) {
    const int ci = 1 + static_cast<int>(uniform_int(rng, 0, 1));
    const int co = 1 + static_cast<int>(uniform_int(rng, 0, 1));
    Tensor f = rand_uniform({1, ci, 4, 8, 8}, -1.0f, 1.0f, rng);
    GConvParams p = random_gconv(co, ci, 3, rng);
    Tensor got = group_correlate({f, Boundary::kCircular}, p).values;
    Tensor want = oracles::group_correlate_bruteforce(f, p.weight, p.bias);
    CHECK(max_rel_dev(got, want) < 1e-6);
  }
}

TEST_CASE("group_correlate gradients pass finite differences") {
  Rng rng(21);
  Tensor f = rand_uniform({1, 1, 4, 5, 5}, -0.5f, 0.5f, rng, true);
  GConvParams p = random_gconv(1, 1, 3, rng);
  p.weight.set_requires_grad(true);
  p.bias.set_requires_grad(true);
  Tensor probe = rand_uniform({1, 1, 4, 5, 5}, -1.0f, 1.0f, rng);
  auto forward = [&] { return group_correlate({f, Boundary::kCircular}, p).values; };
  auto res = oracles::finite_difference_check({f, p.weight, p.bias}, forward, probe, 1e-3);
  CHECK(res.max_scale_err < 1e-4);
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("strided group_correlate halves the spatial extents") {
  Rng rng(23);
  Tensor f = rand_uniform({1, 2, 4, 8, 8}, -1.0f, 1.0f, rng);
  GConvParams p = random_gconv(2, 2, 3, rng);
  p.stride = 2;
  GroupFeatureMap out = group_correlate({f, Boundary::kZero}, p);
  CHECK(out.values.dim(3) == 4);
  CHECK(out.values.dim(4) == 4);
}

// ---- layer_norm -----------------------------------------------------------------

TEST_CASE("layer_norm: constant input maps to the affine bias") {
  Tensor x = Tensor::full({2, 6}, 3.7f);
  LayerNormParams p;
  p.gain = Tensor::full({6}, 2.0f);
  p.bias = Tensor::full({6}, 0.25f);
  p.epsilon = 1e-5f;
  Tensor out = layer_norm(x, p, 1);
  for (int64_t i = 0; i < out.size(); ++i)
    CHECK(out.data()[i] == doctest::Approx(0.25f).epsilon(1e-6));
}

TEST_CASE("layer_norm: [1,3] normalizes to [-1,1]") {
  Tensor x = Tensor::from({2}, {1, 3});
  LayerNormParams p;
  p.gain = Tensor::ones({2});
  p.bias = Tensor::zeros({2});
  p.epsilon = 1e-12f;
  Tensor out = layer_norm(x, p, 0);
  CHECK(out.at({0}) == doctest::Approx(-1.0f).epsilon(1e-4));
  CHECK(out.at({1}) == doctest::Approx(1.0f).epsilon(1e-4));
}

TEST_CASE("layer_norm commutes with permutations of the normalized axes") {
  Rng rng(25);
  Tensor x = rand_uniform({8}, -2.0f, 2.0f, rng);
  LayerNormParams p;
  // scalar affine broadcasts over the whole tail
  p.gain = Tensor::scalar(1.0f);
  p.bias = Tensor::scalar(0.0f);
  Tensor reversed = Tensor::zeros({8});
  for (int i = 0; i < 8; ++i) reversed.data()[i] = x.data()[7 - i];
  Tensor a = layer_norm(x, p, 0);
  Tensor b = layer_norm(reversed, p, 0);
  for (int i = 0; i < 8; ++i) CHECK(a.data()[7 - i] == b.data()[i]);
}

TEST_CASE("layer_norm gradients pass finite differences") {
  Rng rng(27);
  Tensor x = rand_uniform({2, 3, 4}, -1.0f, 1.0f, rng, true);
  LayerNormParams p;
  p.gain = rand_uniform({3}, 0.5f, 1.5f, rng, true);
  p.bias = rand_uniform({3}, -0.5f, 0.5f, rng, true);
  Tensor probe = rand_uniform({2, 3, 4}, -1.0f, 1.0f, rng);
  auto forward = [&] { return layer_norm(x, p, 1); };
  auto res = oracles::finite_difference_check({x, p.gain, p.bias}, forward, probe, 1e-3);
  CHECK(res.max_scale_err < 1e-4);
  CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("layer_norm validates affine shapes") {
  Tensor x = Tensor::zeros({2, 3, 4});
  LayerNormParams p;
  p.gain = Tensor::ones({4});
  p.bias = Tensor::zeros({4});
  CHECK_THROWS_AS(layer_norm(x, p, 1), std::invalid_argument);
}

// ---- residual block ------------------------------------------------------------

TEST_CASE("residual block with zero convs is relu(f)") {
  Rng rng(29);
  Tensor f = rand_uniform({1, 3, 4, 6, 6}, -1.0f, 1.0f, rng);
  ResidualBlockParams p;
  p.conv1.weight = Tensor::zeros({3, 3, 4, 3, 3});
  p.conv1.bias = Tensor::zeros({3});
  p.conv1.padding = 1;
  p.conv2.weight = Tensor::zeros({3, 3, 4, 3, 3});
  p.conv2.bias = Tensor::zeros({3});
  p.conv2.padding = 1;
  GroupFeatureMap out = residual_block({f, Boundary::kZero}, p);
  for (int64_t i = 0; i < f.size(); ++i)
    CHECK(out.values.data()[i] == std::max(0.0f, f.data()[i]));
}

TEST_CASE("residual block is equivariant on circular maps") {
  Rng rng(31);
  Tensor f = rand_uniform({1, 2, 4, 8, 8}, -1.0f, 1.0f, rng);
  ResidualBlockParams p;
  p.conv1 = random_gconv(3, 2, 3, rng);
  p.conv2 = random_gconv(3, 3, 3, rng);
  GConvParams proj = random_gconv(3, 2, 1, rng);
  proj.padding = 0;
  p.projection = proj;
  P4Element g{3, 2, 5};
  Tensor lhs = act_group(residual_block({f, Boundary::kCircular}, p).values, g,
                         Boundary::kCircular);
  Tensor rhs = residual_block({act_group(f, g, Boundary::kCircular),
                               Boundary::kCircular}, p).values;
  CHECK(max_rel_dev(rhs, lhs) < 1e-5);
}

TEST_CASE("stride-2 residual block halves the spatial extents") {
  Rng rng(33);
  Tensor f = rand_uniform({1, 2, 4, 8, 8}, -1.0f, 1.0f, rng);
  ResidualBlockParams p;
  p.conv1 = random_gconv(4, 2, 3, rng);
  p.conv1.stride = 2;
  p.conv2 = random_gconv(4, 4, 3, rng);
  GConvParams proj = random_gconv(4, 2, 1, rng);
  proj.padding = 0;
  proj.stride = 2;
  p.projection = proj;
  GroupFeatureMap out = residual_block({f, Boundary::kZero}, p);
  CHECK(out.values.dim(3) == 4);
  CHECK(out.values.dim(4) == 4);
}

// ---- project_logits ---------------------------------------------------------------

TEST_CASE("project_logits on a constant field applies the linear map") {
  const int C = 3, D = 2;
  Tensor caps = Tensor::zeros({1, C, D, 4, 3, 3});
  const float vals[3][2] = {{1.0f, 2.0f}, {-0.5f, 0.5f}, {0.0f, 3.0f}};
  for (int c = 0; c < C; ++c)
    for (int d = 0; d < D; ++d)
      for (int r = 0; r < 4; ++r)
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 3; ++j)
            caps.data()[caps.offset({0, c, d, r, i, j})] = vals[c][d];
  LogitHeadParams p;
  p.weight = Tensor::from({C, D}, {1, 1, 2, 0, 0.5f, -1});
  p.bias = Tensor::from({C}, {0.1f, 0.2f, 0.3f});
  Tensor logits = project_logits(caps, p);
  CHECK(logits.at({0, 0}) == doctest::Approx(3.0f + 0.1f));
  CHECK(logits.at({0, 1}) == doctest::Approx(-1.0f + 0.2f));
  CHECK(logits.at({0, 2}) == doctest::Approx(-3.0f + 0.3f));
}

TEST_CASE("project_logits is invariant under p4 actions on circular fields") {
  Rng rng(35);
  Tensor caps = rand_uniform({2, 3, 4, 4, 6, 6}, -1.0f, 1.0f, rng);
  LogitHeadParams p;
  p.weight = rand_uniform({3, 4}, -1.0f, 1.0f, rng);
  p.bias = rand_uniform({3}, -0.5f, 0.5f, rng);
  Tensor base = project_logits(caps, p);
  for (int t = 0; t < 8; ++t) {
    P4Element g{static_cast<int>(uniform_int(rng, 0, 3)),
                static_cast<int>(uniform_int(rng, 0, 5)),
                static_cast<int>(uniform_int(rng, 0, 5))};
    Tensor moved = project_logits(act_group(caps, g, Boundary::kCircular), p);
    CHECK(max_rel_dev(moved, base) < 1e-5);
    // argmax stability
    for (int b = 0; b < 2; ++b) {
      int a0 = 0, a1 = 0;
      for (int c = 1; c < 3; ++c) {
        if (base.at({b, c}) > base.at({b, a0})) a0 = c;
        if (moved.at({b, c}) > moved.at({b, a1})) a1 = c;
      }
      CHECK(a0 == a1);
    }
  }
}

TEST_CASE("project_logits matches the direct max-mean evaluation") {
  Rng rng(37);
  Tensor caps = rand_uniform({1, 2, 3, 4, 4, 4}, -1.0f, 1.0f, rng);
  LogitHeadParams p;
  p.weight = rand_uniform({2, 3}, -1.0f, 1.0f, rng);
  p.bias = rand_uniform({2}, -0.5f, 0.5f, rng);
  Tensor got = project_logits(caps, p);
  for (int c = 0; c < 2; ++c) {
    double best = -1e30;
    for (int r = 0; r < 4; ++r) {
      double mean = 0.0;
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
          double dotv = 0.0;
          for (int d = 0; d < 3; ++d)
            dotv += static_cast<double>(p.weight.at({c, d})) * caps.at({0, c, d, r, i, j});
          mean += dotv + p.bias.at({c});
        }
      best = std::max(best, mean / 16.0);
    }
    CHECK(got.at({0, c}) == doctest::Approx(best).epsilon(1e-5));
  }
}

TEST_CASE("project_logits gradients pass finite differences") {
  Rng rng(39);
  Tensor caps = rand_uniform({1, 2, 3, 4, 3, 3}, -0.5f, 0.5f, rng, true);
  LogitHeadParams p;
  p.weight = rand_uniform({2, 3}, -1.0f, 1.0f, rng, true);
  p.bias = rand_uniform({2}, -0.5f, 0.5f, rng, true);
  Tensor probe = rand_uniform({1, 2}, -1.0f, 1.0f, rng);
  auto f64 = std::make_shared<std::vector<double>>();
  auto forward = [&, f64] { return project_logits(caps, p, f64.get()); };
  auto res = oracles::finite_difference_check_f64(
      {caps, p.weight, p.bias}, forward,
      [&](const Tensor& out) { return sum_all(mul(out, probe)); },
      [&, f64](const Tensor&) {
        double s = 0.0;
        for (size_t i = 0; i < f64->size(); ++i)
          s += (*f64)[i] * probe.data()[static_cast<int64_t>(i)];
        return s;
      },
      1e-3);
  CHECK(res.max_scale_err < 1e-4);
  CHECK(res.max_rel_err < 1e-3);
}
