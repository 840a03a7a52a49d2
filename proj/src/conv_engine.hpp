#pragma once

// Internal correlation engine shared by the planar, lifting, group, and
// prediction kernels. One "block" is a (Ci, Hi, Wi) input slab correlated
// with (Co, Ci, kh, kw) weights into (Co, Ho, Wo); group correlations view
// (channels x rotations) as Ci and run one block per output rotation.
//
// Loops are weight-outer / row-inner: for every filter tap the kernel adds
// w * input-row into a float64 accumulator plane, so the hot loops run over
// contiguous spans. Each output element still receives its additions in
// (ci, a, b) order with a float64 accumulator.

#include <algorithm>
#include <cstdint>
#include <vector>

#include "icr/p4.hpp"
#include "icr/tensor.hpp"

namespace icr::detail {

inline int wrap(int x, int n) { return ((x % n) + n) % n; }

struct ConvGeom {
  int Ci, Hi, Wi;
  int Co, kh, kw;
  int stride, pad;
  int Ho, Wo;
  bool circular;
};

inline ConvGeom make_geom(int Ci, int Hi, int Wi, int Co, int kh, int kw,
                          int stride, int pad, Boundary mode) {
  require(kh == kw, "correlation: non-square kernel");
  require(stride >= 1, "correlation: stride must be >= 1");
  require(pad >= 0, "correlation: negative padding");
  ConvGeom g{Ci, Hi, Wi, Co, kh, kw, stride, pad, 0, 0, mode == Boundary::kCircular};
  if (g.circular) {
    require(Hi % stride == 0 && Wi % stride == 0,
            "correlation: circular stride must divide the extent");
    require(kh <= Hi && kw <= Wi, "correlation: kernel larger than input (circular)");
    g.Ho = Hi / stride;
    g.Wo = Wi / stride;
  } else {
    require(Hi + 2 * pad >= kh && Wi + 2 * pad >= kw,
            "correlation: kernel larger than padded input");
    g.Ho = (Hi + 2 * pad - kh) / stride + 1;
    g.Wo = (Wi + 2 * pad - kw) / stride + 1;
  }
  require(g.Ho >= 1 && g.Wo >= 1, "correlation: empty output");
  return g;
}

// acc[ox] += wv * in_row[x0 + ox*stride] over the valid extent
inline void fwd_axpy_zero(double* acc, const float* in_row, int Wo, int x0,
                          int stride, double wv, int Wi) {
  if (stride == 1) {
    const int lo = std::max(0, -x0);
    const int hi = std::min(Wo, Wi - x0);
    const float* src = in_row + x0;
    for (int ox = lo; ox < hi; ++ox) acc[ox] += wv * src[ox];
  } else {
    for (int ox = 0; ox < Wo; ++ox) {
      const int x = x0 + ox * stride;
      if (x >= 0 && x < Wi) acc[ox] += wv * in_row[x];
    }
  }
}

inline void fwd_axpy_circ(double* acc, const float* in_row, int Wo, int x0,
                          int stride, double wv, int Wi) {
  if (stride == 1) {
    // Wo == Wi here, so the wrapped row splits into two contiguous spans
    const int start = wrap(x0, Wi);
    const int first = Wi - start;
    const float* src = in_row + start;
    for (int ox = 0; ox < first; ++ox) acc[ox] += wv * src[ox];
    src = in_row - first;
    for (int ox = first; ox < Wo; ++ox) acc[ox] += wv * src[ox];
  } else {
    for (int ox = 0; ox < Wo; ++ox)
      acc[ox] += wv * in_row[wrap(x0 + ox * stride, Wi)];
  }
}

// out[co, oy, ox] = (bias[co]) + sum_{ci,a,b} in[ci, oy*s-p+a, ox*s-p+b] * w[co,ci,a,b]
inline void conv_fwd_block(const ConvGeom& g, const float* in, const float* w,
                           const float* bias, float* out, int64_t out_cs) {
  const int64_t hw = static_cast<int64_t>(g.Hi) * g.Wi;
  const int64_t plane = static_cast<int64_t>(g.Ho) * g.Wo;
  thread_local std::vector<double> scratch;
  scratch.assign(static_cast<size_t>(plane), 0.0);
  double* acc = scratch.data();
  for (int co = 0; co < g.Co; ++co) {
    std::fill(scratch.begin(), scratch.end(),
              bias ? static_cast<double>(bias[co]) : 0.0);
    const float* wc = w + static_cast<int64_t>(co) * g.Ci * g.kh * g.kw;
    for (int ci = 0; ci < g.Ci; ++ci) {
      const float* ic = in + ci * hw;
      for (int a = 0; a < g.kh; ++a) {
        const float* wrow = wc + (static_cast<int64_t>(ci) * g.kh + a) * g.kw;
        for (int b = 0; b < g.kw; ++b) {
          const double wv = wrow[b];
          const int x0 = b - g.pad;
          for (int oy = 0; oy < g.Ho; ++oy) {
            int y = oy * g.stride - g.pad + a;
            if (g.circular) {
              y = wrap(y, g.Hi);
            } else if (y < 0 || y >= g.Hi) {
              continue;
            }
            const float* row = ic + static_cast<int64_t>(y) * g.Wi;
            double* arow = acc + static_cast<int64_t>(oy) * g.Wo;
            if (g.circular)
              fwd_axpy_circ(arow, row, g.Wo, x0, g.stride, wv, g.Wi);
            else
              fwd_axpy_zero(arow, row, g.Wo, x0, g.stride, wv, g.Wi);
          }
        }
      }
    }
    float* oc = out + co * out_cs;
    for (int64_t t = 0; t < plane; ++t) oc[t] = static_cast<float>(acc[t]);
  }
}

// gin[x0 + ox*stride] += wv * gout[ox], the transpose of fwd_axpy
inline void bwd_axpy_zero(double* gin_row, const float* grow, int Wo, int x0,
                          int stride, double wv, int Wi) {
  if (stride == 1) {
    const int lo = std::max(0, -x0);
    const int hi = std::min(Wo, Wi - x0);
    double* dst = gin_row + x0;
    for (int ox = lo; ox < hi; ++ox) dst[ox] += wv * grow[ox];
  } else {
    for (int ox = 0; ox < Wo; ++ox) {
      const int x = x0 + ox * stride;
      if (x >= 0 && x < Wi) gin_row[x] += wv * grow[ox];
    }
  }
}

inline void bwd_axpy_circ(double* gin_row, const float* grow, int Wo, int x0,
                          int stride, double wv, int Wi) {
  if (stride == 1) {
    const int start = wrap(x0, Wi);
    const int first = Wi - start;
    double* dst = gin_row + start;
    for (int ox = 0; ox < first; ++ox) dst[ox] += wv * grow[ox];
    dst = gin_row - first;
    for (int ox = first; ox < Wo; ++ox) dst[ox] += wv * grow[ox];
  } else {
    for (int ox = 0; ox < Wo; ++ox)
      gin_row[wrap(x0 + ox * stride, Wi)] += wv * grow[ox];
  }
}

// Scatters d(out) back into a float64 accumulator laid out like the input block.
inline void conv_bwd_input_block(const ConvGeom& g, const float* gout,
                                 int64_t gout_cs, const float* w, double* gin) {
  const int64_t hw = static_cast<int64_t>(g.Hi) * g.Wi;
  for (int co = 0; co < g.Co; ++co) {
    const float* wc = w + static_cast<int64_t>(co) * g.Ci * g.kh * g.kw;
    const float* oc = gout + co * gout_cs;
    for (int ci = 0; ci < g.Ci; ++ci) {
      double* ic = gin + ci * hw;
      for (int a = 0; a < g.kh; ++a) {
        const float* wrow = wc + (static_cast<int64_t>(ci) * g.kh + a) * g.kw;
        for (int b = 0; b < g.kw; ++b) {
          const double wv = wrow[b];
          const int x0 = b - g.pad;
          for (int oy = 0; oy < g.Ho; ++oy) {
            int y = oy * g.stride - g.pad + a;
            if (g.circular) {
              y = wrap(y, g.Hi);
            } else if (y < 0 || y >= g.Hi) {
              continue;
            }
            const float* grow = oc + static_cast<int64_t>(oy) * g.Wo;
            double* gin_row = ic + static_cast<int64_t>(y) * g.Wi;
            if (g.circular)
              bwd_axpy_circ(gin_row, grow, g.Wo, x0, g.stride, wv, g.Wi);
            else
              bwd_axpy_zero(gin_row, grow, g.Wo, x0, g.stride, wv, g.Wi);
          }
        }
      }
    }
  }
}

// dot of a gout row against the matching input row span
inline double bwd_w_dot_zero(const float* grow, const float* in_row, int Wo,
                             int x0, int stride, int Wi) {
  double acc = 0.0;
  if (stride == 1) {
    const int lo = std::max(0, -x0);
    const int hi = std::min(Wo, Wi - x0);
    const float* src = in_row + x0;
    for (int ox = lo; ox < hi; ++ox)
      acc += static_cast<double>(grow[ox]) * src[ox];
  } else {
    for (int ox = 0; ox < Wo; ++ox) {
      const int x = x0 + ox * stride;
      if (x >= 0 && x < Wi) acc += static_cast<double>(grow[ox]) * in_row[x];
    }
  }
  return acc;
}

inline double bwd_w_dot_circ(const float* grow, const float* in_row, int Wo,
                             int x0, int stride, int Wi) {
  double acc = 0.0;
  if (stride == 1) {
    const int start = wrap(x0, Wi);
    const int first = Wi - start;
    const float* src = in_row + start;
    for (int ox = 0; ox < first; ++ox)
      acc += static_cast<double>(grow[ox]) * src[ox];
    src = in_row - first;
    for (int ox = first; ox < Wo; ++ox)
      acc += static_cast<double>(grow[ox]) * src[ox];
  } else {
    for (int ox = 0; ox < Wo; ++ox)
      acc += static_cast<double>(grow[ox]) * in_row[wrap(x0 + ox * stride, Wi)];
  }
  return acc;
}

// gw[co,ci,a,b] += sum over blocks n and output sites of gout_n * in_n.
// Every weight entry owns its accumulator, so the result is deterministic
// for any thread count. `parallel` must be false when already inside an
// OpenMP region.
void conv_bwd_weights(const ConvGeom& g, int nblocks, const float* in0,
                      int64_t in_bs, const float* gout0, int64_t gout_bs,
                      int64_t gout_cs, double* gw, bool parallel);

}  // namespace icr::detail
