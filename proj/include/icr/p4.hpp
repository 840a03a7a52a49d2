#pragma once

#include <array>
#include <utility>

#include "icr/tensor.hpp"

namespace icr {

/**
 * Element of p4: an integer translation composed with a rotation by a
 * multiple of 90 degrees counterclockwise. Translations are (du, dv) in
 * (row, col) grid units; the rotation matrix on (row, col) vectors is
 * R = [[0,-1],[1,0]], so R*(1,0) = (0,1).
 */
struct P4Element {
  int r = 0;   // rotation index in {0,1,2,3}
  int du = 0;  // row translation
  int dv = 0;  // col translation

  friend bool operator==(const P4Element& a, const P4Element& b) {
    return a.r == b.r && a.du == b.du && a.dv == b.dv;
  }
};

inline P4Element p4_identity() { return {0, 0, 0}; }

// R(r) applied to an integer (row, col) vector; exact.
std::pair<int, int> rotate_vec(int r, int u, int v);

// (a.r + b.r mod 4, a.t + R(a.r) b.t)
P4Element compose(const P4Element& a, const P4Element& b);
// ((-a.r) mod 4, -R(-a.r) a.t)
P4Element inverse(const P4Element& a);

enum class Boundary { kZero, kCircular };

/**
 * Feature values on p4 over a finite grid: (..., channel, rotation=4, H, W).
 * The boundary mode states how the group action treats points carried off
 * the grid.
 */
struct GroupFeatureMap {
  Tensor values;  // trailing axes (4, H, W); leading axes are batch/channel
  Boundary boundary = Boundary::kZero;
};

/**
 * L_g on a group feature map: out(c, s, x) = f(c, (s - g.r) mod 4,
 * R(-g.r)(x - g.t)), the spatial rotation taken about the grid centre.
 * Pure index relocation, exact for 90-degree multiples. Not recorded on
 * the tape; this is the audit-side transform.
 */
Tensor act_group(const Tensor& f, const P4Element& g, Boundary mode);
GroupFeatureMap act(const P4Element& g, const GroupFeatureMap& f);

// Same action on planar maps with trailing axes (H, W).
Tensor act_planar(const Tensor& f, const P4Element& g, Boundary mode);

/**
 * Filter transform used by group correlations: spatial rotation of each
 * kh x kw slice by 90*r degrees plus a cyclic shift by r along the filter
 * rotation axis. Expects (..., 4, kh, kw) with square kernels.
 */
Tensor rotate_filter(const Tensor& w, int r);

// Spatial-only variant for lifting filters, (..., kh, kw).
Tensor rotate_filter_spatial(const Tensor& w, int r);

// Source-index map of the r-fold 90-degree rotation on an H x W grid:
// out(i, j) = in(rot_src(r, i, j)). H == W required for odd r.
std::pair<int, int> rot_src(int r, int i, int j, int H, int W);

}  // namespace icr
