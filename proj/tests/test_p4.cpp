#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "icr/p4.hpp"

using namespace icr;

namespace {

P4Element random_element(Rng& rng, int extent) {
  return {static_cast<int>(uniform_int(rng, 0, 3)),
          static_cast<int>(uniform_int(rng, -extent, extent)),
          static_cast<int>(uniform_int(rng, -extent, extent))};
}

}  // namespace

TEST_CASE("compose: identity, worked example, inverse axiom") {
  P4Element e = p4_identity();
  P4Element g{2, 1, 3};
  CHECK(compose(e, g) == g);
  CHECK(compose(g, e) == g);

  // R(90deg)(1,0) = (0,1)
  P4Element a{1, 1, 0};
  P4Element got = compose(a, a);
  CHECK(got == P4Element{2, 1, 1});

  CHECK(compose(a, inverse(a)) == e);
}

TEST_CASE("inverse: identity, worked example, involution") {
  CHECK(inverse(p4_identity()) == p4_identity());
  CHECK(inverse(P4Element{1, 1, 0}) == P4Element{3, 0, 1});
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    P4Element g = random_element(rng, 5);
    CHECK(inverse(inverse(g)) == g);
    CHECK(compose(g, inverse(g)) == p4_identity());
    CHECK(compose(inverse(g), g) == p4_identity());
  }
}

TEST_CASE("compose is associative on random triples (exact integers)") {
  Rng rng(7);
  for (int t = 0; t < 100; ++t) {
    P4Element a = random_element(rng, 9);
    P4Element b = random_element(rng, 9);
    P4Element c = random_element(rng, 9);
    CHECK(compose(compose(a, b), c) == compose(a, compose(b, c)));
  }
}

TEST_CASE("act by the identity returns an identical map") {
  Rng rng(11);
  Tensor f = rand_uniform({2, 4, 6, 6}, -1.0f, 1.0f, rng);
  Tensor out = act_group(f, p4_identity(), Boundary::kCircular);
  for (int64_t i = 0; i < f.size(); ++i) CHECK(out.data()[i] == f.data()[i]);
}

TEST_CASE("act is a representation on circular maps: act(g)act(h) == act(gh)") {
  Rng rng(13);
  for (int t = 0; t < 20; ++t) {
    Tensor f = rand_uniform({1, 4, 8, 8}, -1.0f, 1.0f, rng);
    P4Element g = random_element(rng, 7);
    P4Element h = random_element(rng, 7);
    Tensor lhs = act_group(f, g, Boundary::kCircular);
    lhs = act_group(act_group(f, h, Boundary::kCircular), g, Boundary::kCircular);
    Tensor rhs = act_group(f, compose(g, h), Boundary::kCircular);
    for (int64_t i = 0; i < f.size(); ++i) CHECK(lhs.data()[i] == rhs.data()[i]);
  }
}

TEST_CASE("act relocates a single entry per the rotation matrix") {
  // entry at rotation 0, centre + (0,1) under g = (1,(0,0)) must move to
  // rotation 1, centre + R(90deg)(0,1) = centre + (-1,0)
  const int H = 9;  // odd: the centre is a grid point
  const int c = (H - 1) / 2;
  Tensor f = Tensor::zeros({1, 4, H, H});
  f.data()[f.offset({0, 0, c + 0, c + 1})] = 1.0f;
  Tensor out = act_group(f, P4Element{1, 0, 0}, Boundary::kCircular);
  CHECK(out.at({0, 1, c - 1, c + 0}) == 1.0f);
  double total = 0.0;
  for (int64_t i = 0; i < out.size(); ++i) total += out.data()[i];
  CHECK(total == 1.0);
}

TEST_CASE("act preserves the multiset of values on circular maps") {
  Rng rng(17);
  Tensor f = rand_uniform({2, 4, 6, 6}, -1.0f, 1.0f, rng);
  P4Element g = random_element(rng, 6);
  Tensor out = act_group(f, g, Boundary::kCircular);
  std::vector<float> a(f.data(), f.data() + f.size());
  std::vector<float> b(out.data(), out.data() + out.size());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  CHECK(a == b);
}

TEST_CASE("act with zero boundary drops values carried off the grid") {
  Tensor f = Tensor::ones({1, 4, 4, 4});
  Tensor out = act_group(f, P4Element{0, 2, 0}, Boundary::kZero);
  // top two rows come from off-grid -> zero
  for (int s = 0; s < 4; ++s) {
    CHECK(out.at({0, s, 0, 0}) == 0.0f);
    CHECK(out.at({0, s, 1, 3}) == 0.0f);
    CHECK(out.at({0, s, 2, 0}) == 1.0f);
  }
}

TEST_CASE("rotate_filter: identity, 4-cycle, worked 3x3 slice") {
  Rng rng(19);
  Tensor w = rand_uniform({2, 3, 4, 3, 3}, -1.0f, 1.0f, rng);
  Tensor r0 = rotate_filter(w, 0);
  for (int64_t i = 0; i < w.size(); ++i) CHECK(r0.data()[i] == w.data()[i]);

  Tensor cyc = rotate_filter(rotate_filter(w, 1), 3);
  for (int64_t i = 0; i < w.size(); ++i) CHECK(cyc.data()[i] == w.data()[i]);

  Tensor slice = Tensor::from({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor rot = rotate_filter_spatial(slice, 1);
  const float want[9] = {3, 6, 9, 2, 5, 8, 1, 4, 7};
  for (int i = 0; i < 9; ++i) CHECK(rot.data()[i] == want[i]);
}

TEST_CASE("rotate_filter shifts the rotation axis cyclically") {
  Tensor w = Tensor::zeros({1, 1, 4, 1, 1});
  w.data()[2] = 5.0f;  // rotation slot 2
  Tensor rot = rotate_filter(w, 1);
  CHECK(rot.data()[3] == 5.0f);  // slot 2 -> slot 3
}

TEST_CASE("rotate_filter rejects non-square kernels") {
  Tensor w = Tensor::zeros({1, 1, 4, 2, 3});
  CHECK_THROWS_AS(rotate_filter(w, 1), std::invalid_argument);
}
