#pragma once

#include <optional>

#include "icr/p4.hpp"
#include "icr/tensor.hpp"

namespace icr {

/**
 * Planar correlation parameters. weight (Co, Ci, kh, kw) with square
 * kernels; bias (Co) or undefined for none.
 */
struct Conv2dParams {
  Tensor weight;
  Tensor bias;
  int stride = 1;
  int padding = 0;
};

/**
 * Group correlation parameters. weight (Co, Ci, 4, kh, kw) for
 * group-to-group, (Co, Ci, kh, kw) for lifting. Bias is per output
 * channel, shared across rotations and positions, which is what keeps
 * the correlation equivariant.
 */
struct GConvParams {
  Tensor weight;
  Tensor bias;
  int stride = 1;
  int padding = 0;
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
  float epsilon = 1e-5f;
};

// out(x) = bias + sum_{y,k} f_k(y) w_k(y - x); differentiable.
Tensor correlate2d(const Tensor& f, const Conv2dParams& p, Boundary mode);

// Planar input to p4: rotation slice r is the planar correlation of f with
// the spatially r-rotated filter.
GroupFeatureMap lift_correlate(const Tensor& f, const GConvParams& p, Boundary mode);

// p4 to p4: rotation slice r correlates all four input rotation planes with
// rotate_filter(weight, r).
GroupFeatureMap group_correlate(const GroupFeatureMap& f, const GConvParams& p);

/**
 * Normalizes over the trailing axes starting at first_norm_axis, with
 * statistics per leading index; gain/bias are shaped as a prefix of the
 * normalized tail and broadcast over the rest.
 */
Tensor layer_norm(const Tensor& x, const LayerNormParams& p, int first_norm_axis);

/**
 * relu(conv2(relu(conv1(f))) + shortcut(f)). The shortcut is the identity
 * when no projection is configured, else a 1x1 strided group correlation.
 */
struct ResidualBlockParams {
  GConvParams conv1;
  GConvParams conv2;
  std::optional<GConvParams> projection;
};
GroupFeatureMap residual_block(const GroupFeatureMap& f, const ResidualBlockParams& p);

/**
 * Class-capsule head: weight (C, D) maps each class capsule to a scalar
 * field over (rotation, row, col); the logit is the spatial mean followed
 * by the max over the four rotations, so logits are invariant under p4 on
 * circular inputs. Ties at the max route the gradient to the first
 * maximal rotation.
 */
struct LogitHeadParams {
  Tensor weight;  // (C, D)
  Tensor bias;    // (C)
};
// class_caps (B, C, D, 4, H, W) -> logits (B, C). When logits_f64 is given
// it receives the float64 accumulation behind the returned values.
Tensor project_logits(const Tensor& class_caps, const LogitHeadParams& p,
                      std::vector<double>* logits_f64 = nullptr);

}  // namespace icr
