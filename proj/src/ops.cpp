#include "icr/ops.hpp"

#include <cmath>
#include <cstring>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "conv_engine.hpp"

namespace icr {

namespace detail {

void conv_bwd_weights(const ConvGeom& g, int nblocks, const float* in0,
                      int64_t in_bs, const float* gout0, int64_t gout_bs,
                      int64_t gout_cs, double* gw, bool parallel) {
  const int64_t hw = static_cast<int64_t>(g.Hi) * g.Wi;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (parallel)
#endif
  for (int co = 0; co < g.Co; ++co) {
    for (int ci = 0; ci < g.Ci; ++ci) {
      for (int a = 0; a < g.kh; ++a) {
        for (int b = 0; b < g.kw; ++b) {
          const int x0 = b - g.pad;
          double acc = 0.0;
          for (int n = 0; n < nblocks; ++n) {
            const float* in = in0 + n * in_bs + ci * hw;
            const float* gout = gout0 + n * gout_bs + co * gout_cs;
            for (int oy = 0; oy < g.Ho; ++oy) {
              int y = oy * g.stride - g.pad + a;
              if (g.circular) {
                y = wrap(y, g.Hi);
              } else if (y < 0 || y >= g.Hi) {
                continue;
              }
              const float* row = in + static_cast<int64_t>(y) * g.Wi;
              const float* grow = gout + static_cast<int64_t>(oy) * g.Wo;
              acc += g.circular
                         ? bwd_w_dot_circ(grow, row, g.Wo, x0, g.stride, g.Wi)
                         : bwd_w_dot_zero(grow, row, g.Wo, x0, g.stride, g.Wi);
            }
          }
          gw[((static_cast<int64_t>(co) * g.Ci + ci) * g.kh + a) * g.kw + b] += acc;
        }
      }
    }
  }
}

}  // namespace detail

namespace {

using detail::ConvGeom;
using detail::conv_bwd_input_block;
using detail::conv_bwd_weights;
using detail::conv_fwd_block;
using detail::make_geom;

void add_double_into(float* dst, const std::vector<double>& src) {
  for (size_t i = 0; i < src.size(); ++i) dst[i] += static_cast<float>(src[i]);
}

const float* out_grad(const std::shared_ptr<Tensor::Storage>& s) {
  return s->grad.empty() ? nullptr : s->grad.data();
}

float* ensure_grad(const std::shared_ptr<Tensor::Storage>& s) {
  if (s->grad.empty()) s->grad.assign(s->value.size(), 0.0f);
  return s->grad.data();
}

bool recording(bool any_grad) { return any_grad && GradTape::active() != nullptr; }

}  // namespace

// ---- correlate2d -------------------------------------------------------------

Tensor correlate2d(const Tensor& f, const Conv2dParams& p, Boundary mode) {
  require(f.defined() && f.ndim() == 4, "correlate2d: input must be (B, C, H, W)");
  require(p.weight.ndim() == 4, "correlate2d: weight must be (Co, Ci, kh, kw)");
  require(p.weight.dim(1) == f.dim(1), "correlate2d: channel mismatch");
  const int B = static_cast<int>(f.dim(0));
  ConvGeom g = make_geom(static_cast<int>(f.dim(1)), static_cast<int>(f.dim(2)),
                         static_cast<int>(f.dim(3)), static_cast<int>(p.weight.dim(0)),
                         static_cast<int>(p.weight.dim(2)), static_cast<int>(p.weight.dim(3)),
                         p.stride, p.padding, mode);
  if (p.bias.defined())
    require(p.bias.size() == g.Co, "correlate2d: bias size mismatch");

  bool any_grad = f.requires_grad() || p.weight.requires_grad() ||
                  (p.bias.defined() && p.bias.requires_grad());
  Tensor out = Tensor::zeros({B, g.Co, g.Ho, g.Wo},
                             any_grad && GradTape::active() != nullptr);
  const int64_t in_bs = static_cast<int64_t>(g.Ci) * g.Hi * g.Wi;
  const int64_t out_bs = static_cast<int64_t>(g.Co) * g.Ho * g.Wo;
  const float* bias = p.bias.defined() ? p.bias.data() : nullptr;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int b = 0; b < B; ++b) {
    conv_fwd_block(g, f.data() + b * in_bs, p.weight.data(), bias,
                   out.data() + b * out_bs, static_cast<int64_t>(g.Ho) * g.Wo);
  }

  if (recording(any_grad)) {
    auto fs = f.storage(), ws = p.weight.storage(), os = out.storage();
    auto bs_ = p.bias.defined() ? p.bias.storage() : nullptr;
    GradTape::active()->record([g, B, fs, ws, bs_, os, in_bs, out_bs] {
      const float* go = out_grad(os);
      if (!go) return;
      const int64_t out_cs = static_cast<int64_t>(g.Ho) * g.Wo;
      if (fs->requires_grad) {
        float* gin = ensure_grad(fs);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int b = 0; b < B; ++b) {
          std::vector<double> acc(static_cast<size_t>(in_bs), 0.0);
          conv_bwd_input_block(g, go + b * out_bs, out_cs, ws->value.data(), acc.data());
          add_double_into(gin + b * in_bs, acc);
        }
      }
      if (ws->requires_grad) {
        std::vector<double> gw(ws->value.size(), 0.0);
        conv_bwd_weights(g, B, fs->value.data(), in_bs, go, out_bs, out_cs,
                         gw.data(), /*parallel=*/true);
        add_double_into(ensure_grad(ws), gw);
      }
      if (bs_ && bs_->requires_grad) {
        float* gb = ensure_grad(bs_);
        for (int co = 0; co < g.Co; ++co) {
          double acc = 0.0;
          for (int b = 0; b < B; ++b) {
            const float* oc = go + b * out_bs + co * out_cs;
            for (int64_t i = 0; i < out_cs; ++i) acc += oc[i];
          }
          gb[co] += static_cast<float>(acc);
        }
      }
    });
  }
  return out;
}

// ---- lifting and group correlations -------------------------------------------

namespace {

// Shared implementation: `lifting` selects planar input (Ci, H, W) vs group
// input (Ci, 4, H, W); output is always (B, Co, 4, Ho, Wo).
Tensor gconv_impl(const Tensor& f, const GConvParams& p, Boundary mode, bool lifting) {
  if (lifting) {
    require(f.ndim() == 4, "lift_correlate: input must be (B, C, H, W)");
    require(p.weight.ndim() == 4, "lift_correlate: weight must be (Co, Ci, kh, kw)");
    require(p.weight.dim(1) == f.dim(1), "lift_correlate: channel mismatch");
  } else {
    require(f.ndim() == 5, "group_correlate: input must be (B, C, 4, H, W)");
    require(f.dim(2) == 4, "group_correlate: rotation extent must be 4");
    require(p.weight.ndim() == 5 && p.weight.dim(2) == 4,
            "group_correlate: weight must be (Co, Ci, 4, kh, kw)");
    require(p.weight.dim(1) == f.dim(1), "group_correlate: channel mismatch");
  }
  const int B = static_cast<int>(f.dim(0));
  const int C = static_cast<int>(f.dim(1));
  const int S = lifting ? 1 : 4;
  const int nd = f.ndim();
  const int Hi = static_cast<int>(f.dim(nd - 2));
  const int Wi = static_cast<int>(f.dim(nd - 1));
  const int Co = static_cast<int>(p.weight.dim(0));
  const int kh = static_cast<int>(p.weight.dim(p.weight.ndim() - 2));
  const int kw = static_cast<int>(p.weight.dim(p.weight.ndim() - 1));
  // the four input rotation planes act as extra channels
  ConvGeom g = make_geom(C * S, Hi, Wi, Co, kh, kw, p.stride, p.padding, mode);
  if (p.bias.defined()) require(p.bias.size() == Co, "gconv: bias size mismatch");

  // rotated filter bank, one copy per output rotation
  std::vector<Tensor> wrot(4);
  for (int r = 0; r < 4; ++r)
    wrot[r] = lifting ? rotate_filter_spatial(p.weight, r) : rotate_filter(p.weight, r);

  bool any_grad = f.requires_grad() || p.weight.requires_grad() ||
                  (p.bias.defined() && p.bias.requires_grad());
  Tensor out = Tensor::zeros({B, Co, 4, g.Ho, g.Wo},
                             any_grad && GradTape::active() != nullptr);
  const int64_t in_bs = static_cast<int64_t>(C) * S * Hi * Wi;
  const int64_t out_bs = static_cast<int64_t>(Co) * 4 * g.Ho * g.Wo;
  const int64_t out_cs = static_cast<int64_t>(4) * g.Ho * g.Wo;  // co stride
  const int64_t plane = static_cast<int64_t>(g.Ho) * g.Wo;
  const float* bias = p.bias.defined() ? p.bias.data() : nullptr;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) collapse(2)
#endif
  for (int b = 0; b < B; ++b) {
    for (int r = 0; r < 4; ++r) {
      conv_fwd_block(g, f.data() + b * in_bs, wrot[r].data(), bias,
                     out.data() + b * out_bs + r * plane, out_cs);
    }
  }

  if (recording(any_grad)) {
    auto fs = f.storage(), ws = p.weight.storage(), os = out.storage();
    auto bs_ = p.bias.defined() ? p.bias.storage() : nullptr;
    GradTape::active()->record(
        [g, B, fs, ws, bs_, os, wrot, in_bs, out_bs, out_cs, plane, lifting] {
          const float* go = out_grad(os);
          if (!go) return;
          if (fs->requires_grad) {
            float* gin = ensure_grad(fs);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (int b = 0; b < B; ++b) {
              std::vector<double> acc(static_cast<size_t>(in_bs), 0.0);
              for (int r = 0; r < 4; ++r) {
                conv_bwd_input_block(g, go + b * out_bs + r * plane, out_cs,
                                     wrot[r].data(), acc.data());
              }
              add_double_into(gin + b * in_bs, acc);
            }
          }
          if (ws->requires_grad) {
            Tensor gw_total = Tensor::zeros(ws->shape);
            for (int r = 0; r < 4; ++r) {
              Tensor grot = Tensor::zeros(ws->shape);
              std::vector<double> acc(ws->value.size(), 0.0);
              conv_bwd_weights(g, B, fs->value.data(), in_bs, go + r * plane,
                               out_bs, out_cs, acc.data(), /*parallel=*/true);
              for (size_t i = 0; i < acc.size(); ++i)
                grot.data()[i] = static_cast<float>(acc[i]);
              // transpose of the rotation permutation = inverse rotation
              Tensor gback = lifting ? rotate_filter_spatial(grot, (4 - r) % 4)
                                     : rotate_filter(grot, (4 - r) % 4);
              for (int64_t i = 0; i < gw_total.size(); ++i)
                gw_total.data()[i] += gback.data()[i];
            }
            float* gw = ensure_grad(ws);
            for (int64_t i = 0; i < gw_total.size(); ++i) gw[i] += gw_total.data()[i];
          }
          if (bs_ && bs_->requires_grad) {
            float* gb = ensure_grad(bs_);
            for (int co = 0; co < g.Co; ++co) {
              double acc = 0.0;
              for (int b = 0; b < B; ++b) {
                const float* oc = go + b * out_bs + co * out_cs;
                for (int64_t i = 0; i < out_cs; ++i) acc += oc[i];
              }
              gb[co] += static_cast<float>(acc);
            }
          }
        });
  }
  return out;
}

}  // namespace

GroupFeatureMap lift_correlate(const Tensor& f, const GConvParams& p, Boundary mode) {
  return {gconv_impl(f, p, mode, /*lifting=*/true), mode};
}

GroupFeatureMap group_correlate(const GroupFeatureMap& f, const GConvParams& p) {
  return {gconv_impl(f.values, p, f.boundary, /*lifting=*/false), f.boundary};
}

// ---- layer norm ----------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const LayerNormParams& p, int first_norm_axis) {
  require(x.defined(), "layer_norm: undefined input");
  require(first_norm_axis >= 0 && first_norm_axis < x.ndim(),
          "layer_norm: axis out of range");
  require(p.epsilon > 0.0f, "layer_norm: epsilon must be positive");
  int64_t groups = 1, n = 1;
  for (int i = 0; i < first_norm_axis; ++i) groups *= x.dim(i);
  for (int i = first_norm_axis; i < x.ndim(); ++i) n *= x.dim(i);
  require(n > 0, "layer_norm: empty normalization extent");
  // gain/bias must be a leading prefix of the normalized tail
  require(p.gain.defined() && p.bias.defined(), "layer_norm: missing affine params");
  require(p.gain.shape() == p.bias.shape(), "layer_norm: gain/bias shape mismatch");
  const int64_t gsize = p.gain.size();
  require(gsize > 0 && n % gsize == 0, "layer_norm: affine shape incompatible");
  for (int i = 0; i < p.gain.ndim(); ++i)
    require(first_norm_axis + i < x.ndim() && p.gain.dim(i) == x.dim(first_norm_axis + i),
            "layer_norm: affine shape is not a prefix of the normalized axes");
  const int64_t rest = n / gsize;

  bool any_grad = x.requires_grad() || p.gain.requires_grad() || p.bias.requires_grad();
  Tensor out = Tensor::zeros(x.shape(), any_grad && GradTape::active() != nullptr);
  // per-group statistics kept for the backward pass
  std::vector<double> mean(static_cast<size_t>(groups));
  std::vector<double> inv_std(static_cast<size_t>(groups));
  const float* px = x.data();
  const float* pg = p.gain.data();
  const float* pb = p.bias.data();
  float* po = out.data();
  for (int64_t gi = 0; gi < groups; ++gi) {
    const float* row = px + gi * n;
    double s = 0.0, s2 = 0.0;
    for (int64_t t = 0; t < n; ++t) {
      s += row[t];
      s2 += static_cast<double>(row[t]) * row[t];
    }
    const double mu = s / static_cast<double>(n);
    double var = s2 / static_cast<double>(n) - mu * mu;
    if (var < 0.0) var = 0.0;
    const double is = 1.0 / std::sqrt(var + static_cast<double>(p.epsilon));
    mean[static_cast<size_t>(gi)] = mu;
    inv_std[static_cast<size_t>(gi)] = is;
    float* orow = po + gi * n;
    for (int64_t t = 0; t < n; ++t) {
      const int64_t ai = t / rest;
      const double xh = (row[t] - mu) * is;
      orow[t] = static_cast<float>(xh * pg[ai] + pb[ai]);
    }
  }

  if (recording(any_grad)) {
    auto xs = x.storage(), gs = p.gain.storage(), bs = p.bias.storage(),
         os = out.storage();
    GradTape::active()->record([xs, gs, bs, os, mean, inv_std, groups, n, rest] {
      const float* go = out_grad(os);
      if (!go) return;
      const float* px = xs->value.data();
      const float* pg = gs->value.data();
      std::vector<double> dgain(gs->value.size(), 0.0), dbias(gs->value.size(), 0.0);
      float* gx = xs->requires_grad ? ensure_grad(xs) : nullptr;
      for (int64_t gi = 0; gi < groups; ++gi) {
        const float* row = px + gi * n;
        const float* grow = go + gi * n;
        const double mu = mean[static_cast<size_t>(gi)];
        const double is = inv_std[static_cast<size_t>(gi)];
        double sum_dxh = 0.0, sum_dxh_xh = 0.0;
        for (int64_t t = 0; t < n; ++t) {
          const int64_t ai = t / rest;
          const double xh = (row[t] - mu) * is;
          const double dxh = static_cast<double>(grow[t]) * pg[ai];
          sum_dxh += dxh;
          sum_dxh_xh += dxh * xh;
          dgain[static_cast<size_t>(ai)] += static_cast<double>(grow[t]) * xh;
          dbias[static_cast<size_t>(ai)] += grow[t];
        }
        if (gx) {
          const double nn = static_cast<double>(n);
          float* gxrow = gx + gi * n;
          for (int64_t t = 0; t < n; ++t) {
            const int64_t ai = t / rest;
            const double xh = (row[t] - mu) * is;
            const double dxh = static_cast<double>(grow[t]) * pg[ai];
            gxrow[t] += static_cast<float>(
                is * (dxh - sum_dxh / nn - xh * sum_dxh_xh / nn));
          }
        }
      }
      if (gs->requires_grad) {
        float* g = ensure_grad(gs);
        for (size_t i = 0; i < dgain.size(); ++i) g[i] += static_cast<float>(dgain[i]);
      }
      if (bs->requires_grad) {
        float* g = ensure_grad(bs);
        for (size_t i = 0; i < dbias.size(); ++i) g[i] += static_cast<float>(dbias[i]);
      }
    });
  }
  return out;
}

// ---- residual block --------------------------------------------------------------

GroupFeatureMap residual_block(const GroupFeatureMap& f, const ResidualBlockParams& p) {
  GroupFeatureMap h = group_correlate(f, p.conv1);
  h.values = relu(h.values);
  h = group_correlate(h, p.conv2);
  Tensor shortcut = p.projection ? group_correlate(f, *p.projection).values : f.values;
  return {relu(add(h.values, shortcut)), f.boundary};
}

// ---- logit head ------------------------------------------------------------------

Tensor project_logits(const Tensor& class_caps, const LogitHeadParams& p,
                      std::vector<double>* logits_f64) {
  require(class_caps.ndim() == 6, "project_logits: caps must be (B, C, D, 4, H, W)");
  require(class_caps.dim(3) == 4, "project_logits: rotation extent must be 4");
  require(p.weight.ndim() == 2, "project_logits: weight must be (C, D)");
  require(p.weight.dim(0) == class_caps.dim(1) && p.weight.dim(1) == class_caps.dim(2),
          "project_logits: weight shape mismatch");
  require(p.bias.defined() && p.bias.size() == class_caps.dim(1),
          "project_logits: bias shape mismatch");
  const int B = static_cast<int>(class_caps.dim(0));
  const int C = static_cast<int>(class_caps.dim(1));
  const int D = static_cast<int>(class_caps.dim(2));
  const int H = static_cast<int>(class_caps.dim(4));
  const int W = static_cast<int>(class_caps.dim(5));
  const int64_t plane = static_cast<int64_t>(H) * W;
  const int64_t G = 4 * plane;

  bool any_grad = class_caps.requires_grad() || p.weight.requires_grad() ||
                  p.bias.requires_grad();
  Tensor out = Tensor::zeros({B, C}, any_grad && GradTape::active() != nullptr);
  if (logits_f64) logits_f64->assign(static_cast<size_t>(B) * C, 0.0);
  std::vector<int> best_rot(static_cast<size_t>(B) * C);
  const float* caps = class_caps.data();
  const float* w = p.weight.data();
  const float* bias = p.bias.data();
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const float* base = caps + (static_cast<int64_t>(b) * C + c) * D * G;
      double best = 0.0;
      int bestr = -1;
      for (int r = 0; r < 4; ++r) {
        double m = 0.0;
        for (int d = 0; d < D; ++d) {
          const float* fplane = base + d * G + r * plane;
          double s = 0.0;
          for (int64_t t = 0; t < plane; ++t) s += fplane[t];
          m += s * w[c * D + d];
        }
        m = m / static_cast<double>(plane) + bias[c];
        // strictly-greater keeps the first maximal rotation on ties
        if (bestr < 0 || m > best) {
          best = m;
          bestr = r;
        }
      }
      best_rot[static_cast<size_t>(b) * C + c] = bestr;
      out.data()[static_cast<int64_t>(b) * C + c] = static_cast<float>(best);
      if (logits_f64) (*logits_f64)[static_cast<size_t>(b) * C + c] = best;
    }
  }

  if (recording(any_grad)) {
    auto cs = class_caps.storage(), ws = p.weight.storage(), bs = p.bias.storage(),
         os = out.storage();
    GradTape::active()->record([cs, ws, bs, os, best_rot, B, C, D, plane, G] {
      const float* go = out_grad(os);
      if (!go) return;
      const float* caps = cs->value.data();
      const float* w = ws->value.data();
      float* gcaps = cs->requires_grad ? ensure_grad(cs) : nullptr;
      std::vector<double> gw(ws->value.size(), 0.0);
      std::vector<double> gb(bs->value.size(), 0.0);
      const double inv = 1.0 / static_cast<double>(plane);
      for (int b = 0; b < B; ++b) {
        for (int c = 0; c < C; ++c) {
          const double g = go[static_cast<int64_t>(b) * C + c];
          if (g == 0.0) continue;
          const int r = best_rot[static_cast<size_t>(b) * C + c];
          const float* base = caps + (static_cast<int64_t>(b) * C + c) * D * G;
          gb[static_cast<size_t>(c)] += g;
          for (int d = 0; d < D; ++d) {
            const float* fplane = base + d * G + r * plane;
            double s = 0.0;
            for (int64_t t = 0; t < plane; ++t) s += fplane[t];
            gw[static_cast<size_t>(c) * D + d] += g * s * inv;
            if (gcaps) {
              float* gplane = gcaps + (static_cast<int64_t>(b) * C + c) * D * G +
                              d * G + r * plane;
              const float add = static_cast<float>(g * inv * w[c * D + d]);
              for (int64_t t = 0; t < plane; ++t) gplane[t] += add;
            }
          }
        }
      }
      if (ws->requires_grad) {
        float* g = ensure_grad(ws);
        for (size_t i = 0; i < gw.size(); ++i) g[i] += static_cast<float>(gw[i]);
      }
      if (bs->requires_grad) {
        float* g = ensure_grad(bs);
        for (size_t i = 0; i < gb.size(); ++i) g[i] += static_cast<float>(gb[i]);
      }
    });
  }
  return out;
}

}  // namespace icr
