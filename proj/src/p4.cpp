#include "icr/p4.hpp"

namespace icr {

static int mod4(int r) { return ((r % 4) + 4) % 4; }

std::pair<int, int> rotate_vec(int r, int u, int v) {
  switch (mod4(r)) {
    case 0: return {u, v};
    case 1: return {-v, u};
    case 2: return {-u, -v};
    default: return {v, -u};
  }
}

P4Element compose(const P4Element& a, const P4Element& b) {
  auto [tu, tv] = rotate_vec(a.r, b.du, b.dv);
  return {mod4(a.r + b.r), a.du + tu, a.dv + tv};
}

P4Element inverse(const P4Element& a) {
  auto [tu, tv] = rotate_vec(-a.r, a.du, a.dv);
  return {mod4(-a.r), -tu, -tv};
}

std::pair<int, int> rot_src(int r, int i, int j, int H, int W) {
  switch (mod4(r)) {
    case 0: return {i, j};
    case 1: return {j, H - 1 - i};
    case 2: return {H - 1 - i, W - 1 - j};
    default: return {W - 1 - j, i};
  }
}

static inline int wrap(int x, int n) { return ((x % n) + n) % n; }

Tensor act_group(const Tensor& f, const P4Element& g, Boundary mode) {
  require(f.ndim() >= 3, "act_group: expected trailing axes (4, H, W)");
  const int nd = f.ndim();
  const int64_t S = f.dim(nd - 3);
  const int H = static_cast<int>(f.dim(nd - 2));
  const int W = static_cast<int>(f.dim(nd - 1));
  require(S == 4, "act_group: rotation axis must have extent 4");
  if (g.r % 2 != 0) require(H == W, "act_group: odd rotations need a square grid");

  Tensor out = Tensor::zeros(f.shape());
  const int64_t lead = f.size() / (4 * H * W);
  const float* src = f.data();
  float* dst = out.data();
  const int rr = mod4(g.r);
  for (int64_t c = 0; c < lead; ++c) {
    for (int s = 0; s < 4; ++s) {
      const int s_src = mod4(s - rr);
      const float* plane = src + ((c * 4) + s_src) * H * W;
      float* oplane = dst + ((c * 4) + s) * H * W;
      for (int i = 0; i < H; ++i) {
        for (int j = 0; j < W; ++j) {
          auto [u, v] = rot_src(rr, i - g.du, j - g.dv, H, W);
          float val = 0.0f;
          if (mode == Boundary::kCircular) {
            val = plane[wrap(u, H) * W + wrap(v, W)];
          } else if (u >= 0 && u < H && v >= 0 && v < W) {
            val = plane[u * W + v];
          }
          oplane[i * W + j] = val;
        }
      }
    }
  }
  return out;
}

GroupFeatureMap act(const P4Element& g, const GroupFeatureMap& f) {
  return {act_group(f.values, g, f.boundary), f.boundary};
}

Tensor act_planar(const Tensor& f, const P4Element& g, Boundary mode) {
  require(f.ndim() >= 2, "act_planar: expected trailing axes (H, W)");
  const int nd = f.ndim();
  const int H = static_cast<int>(f.dim(nd - 2));
  const int W = static_cast<int>(f.dim(nd - 1));
  if (g.r % 2 != 0) require(H == W, "act_planar: odd rotations need a square grid");
  Tensor out = Tensor::zeros(f.shape());
  const int64_t lead = f.size() / (H * W);
  const float* src = f.data();
  float* dst = out.data();
  const int rr = mod4(g.r);
  for (int64_t c = 0; c < lead; ++c) {
    const float* plane = src + c * H * W;
    float* oplane = dst + c * H * W;
    for (int i = 0; i < H; ++i) {
      for (int j = 0; j < W; ++j) {
        auto [u, v] = rot_src(rr, i - g.du, j - g.dv, H, W);
        float val = 0.0f;
        if (mode == Boundary::kCircular) {
          val = plane[wrap(u, H) * W + wrap(v, W)];
        } else if (u >= 0 && u < H && v >= 0 && v < W) {
          val = plane[u * W + v];
        }
        oplane[i * W + j] = val;
      }
    }
  }
  return out;
}

Tensor rotate_filter(const Tensor& w, int r) {
  require(w.ndim() >= 3, "rotate_filter: expected trailing axes (4, kh, kw)");
  const int nd = w.ndim();
  require(w.dim(nd - 3) == 4, "rotate_filter: rotation axis must have extent 4");
  const int kh = static_cast<int>(w.dim(nd - 2));
  const int kw = static_cast<int>(w.dim(nd - 1));
  require(kh == kw, "rotate_filter: non-square kernel");
  Tensor out = Tensor::zeros(w.shape());
  const int64_t lead = w.size() / (4 * kh * kw);
  const float* src = w.data();
  float* dst = out.data();
  const int rr = mod4(r);
  for (int64_t c = 0; c < lead; ++c) {
    for (int s = 0; s < 4; ++s) {
      const int s_src = mod4(s - rr);
      const float* plane = src + (c * 4 + s_src) * kh * kw;
      float* oplane = dst + (c * 4 + s) * kh * kw;
      for (int i = 0; i < kh; ++i) {
        for (int j = 0; j < kw; ++j) {
          auto [u, v] = rot_src(rr, i, j, kh, kw);
          oplane[i * kw + j] = plane[u * kw + v];
        }
      }
    }
  }
  return out;
}

Tensor rotate_filter_spatial(const Tensor& w, int r) {
  require(w.ndim() >= 2, "rotate_filter_spatial: expected trailing axes (kh, kw)");
  const int nd = w.ndim();
  const int kh = static_cast<int>(w.dim(nd - 2));
  const int kw = static_cast<int>(w.dim(nd - 1));
  require(kh == kw, "rotate_filter_spatial: non-square kernel");
  Tensor out = Tensor::zeros(w.shape());
  const int64_t lead = w.size() / (kh * kw);
  const float* src = w.data();
  float* dst = out.data();
  const int rr = mod4(r);
  for (int64_t c = 0; c < lead; ++c) {
    const float* plane = src + c * kh * kw;
    float* oplane = dst + c * kh * kw;
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        auto [u, v] = rot_src(rr, i, j, kh, kw);
        oplane[i * kw + j] = plane[u * kw + v];
      }
    }
  }
  return out;
}

}  // namespace icr
