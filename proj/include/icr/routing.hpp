#pragma once

#include <cstdint>
#include <vector>

#include "icr/ops.hpp"

namespace icr {

/**
 * Capsule poses on p4: values (B, type, dim, rotation=4, H, W).
 * After squash every capsule vector has norm < 1.
 */
struct CapsuleField {
  Tensor values;
  Boundary boundary = Boundary::kZero;
};

// Per-(in-type, out-type) predictions: values (B, in, out, dim, 4, H, W).
struct PredictionField {
  Tensor values;
  Boundary boundary = Boundary::kZero;
};

struct ICRConfig {
  int k = 10;                      // neighbour count, 1 <= k <= N_in - 1
  int num_iter = 2;                // centrality smoothing iterations
  float epsilon = 1e-8f;           // cosine denominator guard
  bool use_pred_layernorm = true;  // off for equivariance audits
};

/**
 * Routing intermediates at every (out-type j, group position g):
 *   affinity    (B, J, 4, H, W, N, N)   pairwise prediction cosines
 *   centrality  (B, J, 4, H, W, N)      degree centralities after smoothing
 *   centrality0 (B, J, 4, H, W, N)      raw affinity row sums
 *   neighbors   (B, J, 4, H, W, N, k)   frozen k-NN lists (indices != self)
 *   weights     (B, I, J, 4, H, W)      softmaxed routing weights c
 * Only `weights` carries gradients; the rest are diagnostics.
 */
struct RoutingState {
  Tensor affinity;
  Tensor centrality;
  Tensor centrality0;
  std::vector<int32_t> neighbors;
  int k = 0;
  Tensor weights;
  // the float64 accumulation behind `weights`, kept for verification
  std::vector<double> weights_f64;
};

struct PrimaryCapsParams {
  GConvParams gconv;   // widths[-1] -> types * dim channels
  LayerNormParams ln;  // gain/bias (types, dim)
  bool use_layernorm = true;
};

// Group correlation with types*dim output channels reshaped to capsules,
// then a per-sample layernorm over (type, dim, rotation, row, col).
CapsuleField primary_capsules(const GroupFeatureMap& f, const PrimaryCapsParams& p,
                              int types, int dim);

/**
 * One set of equivariant filters per (in-type, out-type) pair.
 *   weight (I, J, Dout, Din, 4, kh, kw), bias (I, J, Dout).
 * Stride is fixed at 1 in capsule layers. The optional layernorm
 * normalizes jointly over (in, out, dim, rotation, row, col) per sample,
 * with affine per (in, out, dim); it trades exact equivariance for scale
 * control, so audits run with it disabled.
 */
struct PredictParams {
  Tensor weight;
  Tensor bias;
  LayerNormParams ln;
  int padding = 1;
};
PredictionField predict(const CapsuleField& f, const PredictParams& p,
                        bool use_layernorm);

/**
 * Iterative collaborative routing. Per (out-type, group position):
 * cosine affinity matrix of the N predictions, degree centralities as row
 * sums (self included), k nearest neighbours from the initial affinities
 * (self excluded, ties to the lowest index), then num_iter synchronous
 * replacements of each centrality by the mean over its frozen neighbour
 * list, and finally a softmax over the N input types.
 *
 * A zero-norm prediction has affinity 0 to every other prediction via the
 * epsilon guard. Verifies A symmetry and softmax row sums (1e-6) on every
 * call.
 */
RoutingState icr_weights(const PredictionField& pred, const ICRConfig& cfg);

// f_j(g) = squash(sum_i c_ij(g) Pred_ij(g)); checks post-squash norms < 1.
CapsuleField route(const PredictionField& pred, const RoutingState& state);

// Norm-bounding nonlinearity along `dim_axis`: v -> (|v|^2/(1+|v|^2)) v/|v|.
Tensor squash(const Tensor& v, int dim_axis);

}  // namespace icr
