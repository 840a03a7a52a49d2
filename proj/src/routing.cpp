#include "icr/routing.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "conv_engine.hpp"

namespace icr {

namespace {

const float* out_grad(const std::shared_ptr<Tensor::Storage>& s) {
  return s->grad.empty() ? nullptr : s->grad.data();
}

float* ensure_grad(const std::shared_ptr<Tensor::Storage>& s) {
  if (s->grad.empty()) s->grad.assign(s->value.size(), 0.0f);
  return s->grad.data();
}

}  // namespace

// ---- primary capsules ------------------------------------------------------

CapsuleField primary_capsules(const GroupFeatureMap& f, const PrimaryCapsParams& p,
                              int types, int dim) {
  require(types > 0 && dim > 0, "primary_capsules: bad capsule geometry");
  require(p.gconv.weight.dim(0) == static_cast<int64_t>(types) * dim,
          "primary_capsules: gconv output channels must equal types * dim");
  GroupFeatureMap g = group_correlate(f, p.gconv);
  const int64_t B = g.values.dim(0);
  const int64_t H = g.values.dim(3), W = g.values.dim(4);
  Tensor caps = reshape(g.values, {B, types, dim, 4, H, W});
  if (p.use_layernorm) caps = layer_norm(caps, p.ln, /*first_norm_axis=*/1);
  return {caps, f.boundary};
}

// ---- predict ----------------------------------------------------------------

PredictionField predict(const CapsuleField& f, const PredictParams& p,
                        bool use_layernorm) {
  require(f.values.ndim() == 6, "predict: capsules must be (B, N, D, 4, H, W)");
  require(p.weight.ndim() == 7, "predict: weight must be (I, J, Dout, Din, 4, kh, kw)");
  require(p.weight.dim(0) == f.values.dim(1), "predict: in-type count mismatch");
  require(p.weight.dim(3) == f.values.dim(2), "predict: capsule dim mismatch");
  require(p.weight.dim(4) == 4, "predict: filter rotation extent must be 4");
  const int B = static_cast<int>(f.values.dim(0));
  const int I = static_cast<int>(p.weight.dim(0));
  const int J = static_cast<int>(p.weight.dim(1));
  const int Dout = static_cast<int>(p.weight.dim(2));
  const int Din = static_cast<int>(p.weight.dim(3));
  const int kh = static_cast<int>(p.weight.dim(5));
  const int kw = static_cast<int>(p.weight.dim(6));
  const int H = static_cast<int>(f.values.dim(4));
  const int W = static_cast<int>(f.values.dim(5));
  require(p.bias.defined() && p.bias.ndim() == 3 && p.bias.dim(0) == I &&
              p.bias.dim(1) == J && p.bias.dim(2) == Dout,
          "predict: bias must be (I, J, Dout)");

  // Each (i, j) pair is its own stride-1 group correlation of capsule type
  // i with filter set (i, j); the four input rotation planes act as
  // channels of the correlation engine.
  const Tensor& caps = f.values;
  detail::ConvGeom g = detail::make_geom(Din * 4, H, W, Dout, kh, kw, /*stride=*/1,
                                         p.padding, f.boundary);
  std::vector<Tensor> wrot(4);
  for (int r = 0; r < 4; ++r) wrot[r] = rotate_filter(p.weight, r);

  bool any_grad = caps.requires_grad() || p.weight.requires_grad() ||
                  p.bias.requires_grad();
  Tensor out = Tensor::zeros({B, I, J, Dout, 4, g.Ho, g.Wo},
                             any_grad && GradTape::active() != nullptr);
  const int64_t caps_block = static_cast<int64_t>(Din) * 4 * H * W;   // (b, i) slab
  const int64_t w_block = static_cast<int64_t>(Dout) * Din * 4 * kh * kw;  // (i, j) slab
  const int64_t out_block = static_cast<int64_t>(Dout) * 4 * g.Ho * g.Wo;  // (b, i, j) slab
  const int64_t plane = static_cast<int64_t>(g.Ho) * g.Wo;
  const int64_t out_cs = 4 * plane;
  const float* pb = p.bias.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int64_t t = 0; t < static_cast<int64_t>(B) * I * J; ++t) {
    const int j = static_cast<int>(t % J);
    const int i = static_cast<int>((t / J) % I);
    const int b = static_cast<int>(t / (static_cast<int64_t>(I) * J));
    const float* in = caps.data() + (static_cast<int64_t>(b) * I + i) * caps_block;
    float* dst = out.data() + t * out_block;
    for (int r = 0; r < 4; ++r) {
      detail::conv_fwd_block(g, in, wrot[r].data() + (static_cast<int64_t>(i) * J + j) * w_block,
                             pb + (static_cast<int64_t>(i) * J + j) * Dout,
                             dst + r * plane, out_cs);
    }
  }

  if (any_grad && GradTape::active()) {
    auto fs = caps.storage(), ws = p.weight.storage(), bs = p.bias.storage(),
         os = out.storage();
    GradTape::active()->record([g, B, I, J, Dout, fs, ws, bs, os, wrot, caps_block,
                                w_block, out_block, plane, out_cs] {
      const float* go = os->grad.empty() ? nullptr : os->grad.data();
      if (!go) return;
      if (fs->requires_grad) {
        float* gin = ensure_grad(fs);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int64_t t = 0; t < static_cast<int64_t>(B) * I; ++t) {
          const int i = static_cast<int>(t % I);
          const int b = static_cast<int>(t / I);
          std::vector<double> acc(static_cast<size_t>(caps_block), 0.0);
          for (int j = 0; j < J; ++j) {
            const float* gslab =
                go + ((static_cast<int64_t>(b) * I + i) * J + j) * out_block;
            for (int r = 0; r < 4; ++r) {
              detail::conv_bwd_input_block(
                  g, gslab + r * plane, out_cs,
                  wrot[r].data() + (static_cast<int64_t>(i) * J + j) * w_block,
                  acc.data());
            }
          }
          float* dst = gin + (static_cast<int64_t>(b) * I + i) * caps_block;
          for (size_t q = 0; q < acc.size(); ++q) dst[q] += static_cast<float>(acc[q]);
        }
      }
      if (ws->requires_grad) {
        float* gw = ensure_grad(ws);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int64_t t = 0; t < static_cast<int64_t>(I) * J; ++t) {
          const int j = static_cast<int>(t % J);
          const int i = static_cast<int>(t / J);
          Tensor pair_total = Tensor::zeros({Dout, static_cast<int64_t>(g.Ci / 4), 4,
                                             static_cast<int64_t>(g.kh),
                                             static_cast<int64_t>(g.kw)});
          for (int r = 0; r < 4; ++r) {
            std::vector<double> acc(static_cast<size_t>(w_block), 0.0);
            detail::conv_bwd_weights(
                g, B, fs->value.data() + static_cast<int64_t>(i) * caps_block,
                static_cast<int64_t>(I) * caps_block,
                go + t * out_block + r * plane,
                static_cast<int64_t>(I) * J * out_block, out_cs, acc.data(),
                /*parallel=*/false);
            Tensor grot = Tensor::zeros(pair_total.shape());
            for (size_t q = 0; q < acc.size(); ++q)
              grot.data()[q] = static_cast<float>(acc[q]);
            Tensor gback = rotate_filter(grot, (4 - r) % 4);
            for (int64_t q = 0; q < pair_total.size(); ++q)
              pair_total.data()[q] += gback.data()[q];
          }
          float* dst = gw + t * w_block;
          for (int64_t q = 0; q < w_block; ++q) dst[q] += pair_total.data()[q];
        }
      }
      if (bs->requires_grad) {
        float* gb = ensure_grad(bs);
        for (int64_t t = 0; t < static_cast<int64_t>(I) * J; ++t) {
          for (int d = 0; d < Dout; ++d) {
            double acc = 0.0;
            for (int b = 0; b < B; ++b) {
              const float* oc = go + (static_cast<int64_t>(b) * I * J + t) * out_block +
                                d * out_cs;
              for (int64_t q = 0; q < out_cs; ++q) acc += oc[q];
            }
            gb[t * Dout + d] += static_cast<float>(acc);
          }
        }
      }
    });
  }

  Tensor pred = out;
  if (use_layernorm) pred = layer_norm(pred, p.ln, /*first_norm_axis=*/1);
  return {pred, f.boundary};
}

// ---- squash -----------------------------------------------------------------

Tensor squash(const Tensor& v, int dim_axis) {
  require(v.defined(), "squash: undefined input");
  require(dim_axis >= 0 && dim_axis < v.ndim(), "squash: axis out of range");
  const int64_t d = v.dim(dim_axis);
  int64_t inner = 1;
  for (int i = dim_axis + 1; i < v.ndim(); ++i) inner *= v.dim(i);
  const int64_t outer = v.size() / (d * inner);

  bool any_grad = v.requires_grad();
  Tensor out = Tensor::zeros(v.shape(), any_grad && GradTape::active() != nullptr);
  const float* pv = v.data();
  float* po = out.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * d * inner + in;
      double n2 = 0.0;
      for (int64_t p = 0; p < d; ++p) {
        const double x = pv[base + p * inner];
        n2 += x * x;
      }
      const double n = std::sqrt(n2);
      const double s = n / (1.0 + n2);  // |v| / (1 + |v|^2)
      for (int64_t p = 0; p < d; ++p)
        po[base + p * inner] = static_cast<float>(pv[base + p * inner] * s);
    }
  }
  if (any_grad && GradTape::active()) {
    auto vs = v.storage(), os = out.storage();
    GradTape::active()->record([vs, os, d, inner, outer] {
      const float* go = out_grad(os);
      if (!go) return;
      const float* pv = vs->value.data();
      float* gv = ensure_grad(vs);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
          const int64_t base = o * d * inner + in;
          double n2 = 0.0, dot = 0.0;
          for (int64_t p = 0; p < d; ++p) {
            const double x = pv[base + p * inner];
            n2 += x * x;
            dot += static_cast<double>(go[base + p * inner]) * x;
          }
          const double n = std::sqrt(n2);
          if (n < 1e-12) continue;  // Jacobian vanishes at the origin
          const double s = n / (1.0 + n2);
          const double ds = (1.0 - n2) / ((1.0 + n2) * (1.0 + n2));
          for (int64_t p = 0; p < d; ++p) {
            const double x = pv[base + p * inner];
            gv[base + p * inner] += static_cast<float>(
                s * go[base + p * inner] + (ds / n) * dot * x);
          }
        }
      }
    });
  }
  return out;
}

// ---- icr_weights ---------------------------------------------------------------

RoutingState icr_weights(const PredictionField& pred, const ICRConfig& cfg) {
  const Tensor& P = pred.values;
  require(P.defined() && P.ndim() == 7,
          "icr_weights: predictions must be (B, I, J, D, 4, H, W)");
  const int B = static_cast<int>(P.dim(0));
  const int N = static_cast<int>(P.dim(1));
  const int J = static_cast<int>(P.dim(2));
  const int D = static_cast<int>(P.dim(3));
  const int H = static_cast<int>(P.dim(5));
  const int W = static_cast<int>(P.dim(6));
  require(N >= 2, "icr_weights: at least two input capsule types required");
  require(cfg.k >= 1 && cfg.k <= N - 1, "icr_weights: k out of range [1, N-1]");
  require(cfg.num_iter >= 0, "icr_weights: num_iter must be >= 0");
  const int k = cfg.k;
  const int T = cfg.num_iter;
  const double eps = static_cast<double>(cfg.epsilon);
  const int64_t G = static_cast<int64_t>(4) * H * W;
  const int64_t sites = static_cast<int64_t>(B) * J * G;

  RoutingState st;
  st.k = k;
  st.affinity = Tensor::zeros({B, J, 4, H, W, N, N});
  st.centrality = Tensor::zeros({B, J, 4, H, W, N});
  st.centrality0 = Tensor::zeros({B, J, 4, H, W, N});
  st.neighbors.assign(static_cast<size_t>(sites) * N * k, -1);
  bool any_grad = P.requires_grad();
  st.weights = Tensor::zeros({B, static_cast<int64_t>(N), J, 4, H, W},
                             any_grad && GradTape::active() != nullptr);
  st.weights_f64.assign(static_cast<size_t>(st.weights.size()), 0.0);

  const float* pp = P.data();
  float* pa = st.affinity.data();
  float* pdc = st.centrality.data();
  float* pdc0 = st.centrality0.data();
  int32_t* pkn = st.neighbors.data();
  float* pc = st.weights.data();
  // strides into the prediction tensor
  const int64_t stride_i = static_cast<int64_t>(J) * D * G;
  const int64_t stride_p = G;
  int violations = 0;

#ifdef _OPENMP
#pragma omp parallel for schedule(static) reduction(+ : violations)
#endif
  for (int64_t site = 0; site < sites; ++site) {
    const int64_t g = site % G;
    const int64_t j = (site / G) % J;
    const int64_t b = site / (G * static_cast<int64_t>(J));
    const int64_t pbase = (b * N * static_cast<int64_t>(J) + j) * D * G + g;

    // gather the N prediction vectors
    std::vector<double> vec(static_cast<size_t>(N) * D);
    std::vector<double> norm(static_cast<size_t>(N));
    for (int i = 0; i < N; ++i) {
      double n2 = 0.0;
      for (int p = 0; p < D; ++p) {
        const double x = pp[pbase + i * stride_i + p * stride_p];
        vec[static_cast<size_t>(i) * D + p] = x;
        n2 += x * x;
      }
      norm[static_cast<size_t>(i)] = std::sqrt(n2);
    }
    // affinity matrix, every entry computed directly
    std::vector<double> A(static_cast<size_t>(N) * N);
    for (int i = 0; i < N; ++i) {
      for (int kk = 0; kk < N; ++kk) {
        double dot = 0.0;
        for (int p = 0; p < D; ++p)
          dot += vec[static_cast<size_t>(i) * D + p] * vec[static_cast<size_t>(kk) * D + p];
        A[static_cast<size_t>(i) * N + kk] =
            dot / (norm[static_cast<size_t>(i)] * norm[static_cast<size_t>(kk)] + eps);
      }
    }
    for (int i = 0; i < N; ++i)
      for (int kk = 0; kk < i; ++kk)
        if (std::abs(A[static_cast<size_t>(i) * N + kk] -
                     A[static_cast<size_t>(kk) * N + i]) > 1e-6)
          ++violations;
    // raw degree centralities: row sums including self
    std::vector<double> dc(static_cast<size_t>(N));
    for (int i = 0; i < N; ++i) {
      double s = 0.0;
      for (int kk = 0; kk < N; ++kk) s += A[static_cast<size_t>(i) * N + kk];
      dc[static_cast<size_t>(i)] = s;
    }
    // k nearest neighbours from the initial affinities, self excluded,
    // ties broken towards the lowest index
    std::vector<int32_t> kn(static_cast<size_t>(N) * k);
    std::vector<int> order(static_cast<size_t>(N));
    for (int i = 0; i < N; ++i) {
      std::iota(order.begin(), order.end(), 0);
      order.erase(order.begin() + i);
      std::stable_sort(order.begin(), order.end(), [&](int x, int y) {
        return A[static_cast<size_t>(i) * N + x] > A[static_cast<size_t>(i) * N + y];
      });
      for (int t = 0; t < k; ++t) kn[static_cast<size_t>(i) * k + t] = order[static_cast<size_t>(t)];
      order.resize(static_cast<size_t>(N));
    }
    // synchronous neighbour-mean smoothing over the frozen lists
    std::vector<double> cur = dc, nxt(static_cast<size_t>(N));
    for (int t = 0; t < T; ++t) {
      for (int i = 0; i < N; ++i) {
        double s = 0.0;
        for (int q = 0; q < k; ++q) s += cur[static_cast<size_t>(kn[static_cast<size_t>(i) * k + q])];
        nxt[static_cast<size_t>(i)] = s / static_cast<double>(k);
      }
      cur.swap(nxt);
    }
    // softmax over input types
    double mx = cur[0];
    for (int i = 1; i < N; ++i) mx = std::max(mx, cur[static_cast<size_t>(i)]);
    double z = 0.0;
    std::vector<double> c(static_cast<size_t>(N));
    for (int i = 0; i < N; ++i) {
      c[static_cast<size_t>(i)] = std::exp(cur[static_cast<size_t>(i)] - mx);
      z += c[static_cast<size_t>(i)];
    }
    double rowsum = 0.0;
    for (int i = 0; i < N; ++i) {
      c[static_cast<size_t>(i)] /= z;
      rowsum += c[static_cast<size_t>(i)];
    }
    if (std::abs(rowsum - 1.0) > 1e-6) ++violations;

    // write back
    const int64_t abase = site * static_cast<int64_t>(N) * N;
    for (int i = 0; i < N * N; ++i) pa[abase + i] = static_cast<float>(A[static_cast<size_t>(i)]);
    const int64_t dbase = site * static_cast<int64_t>(N);
    for (int i = 0; i < N; ++i) {
      pdc0[dbase + i] = static_cast<float>(dc[static_cast<size_t>(i)]);
      pdc[dbase + i] = static_cast<float>(cur[static_cast<size_t>(i)]);
    }
    std::memcpy(pkn + dbase * k, kn.data(), sizeof(int32_t) * kn.size());
    // c laid out (B, I, J, 4, H, W)
    for (int i = 0; i < N; ++i) {
      const int64_t cidx = (b * N + i) * static_cast<int64_t>(J) * G + j * G + g;
      pc[cidx] = static_cast<float>(c[static_cast<size_t>(i)]);
      st.weights_f64[static_cast<size_t>(cidx)] = c[static_cast<size_t>(i)];
    }
  }
  if (violations > 0)
    throw std::runtime_error("icr_weights: routing invariant violated "
                             "(affinity symmetry or softmax row sum)");

  if (any_grad && GradTape::active()) {
    auto ps = P.storage(), cs = st.weights.storage();
    auto kn_shared = std::make_shared<std::vector<int32_t>>(st.neighbors);
    // norms are cheap to recompute; the affinity tensor is kept alive
    Tensor A_saved = st.affinity;
    GradTape::active()->record([ps, cs, kn_shared, A_saved, B, N, J, D, G, k, T,
                                eps, stride_i, stride_p, sites] {
      const float* gc = out_grad(cs);
      if (!gc) return;
      const float* pp = ps->value.data();
      const float* pcv = cs->value.data();
      const float* pa = A_saved.data();
      const int32_t* pkn = kn_shared->data();
      float* gp = ensure_grad(ps);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
      for (int64_t site = 0; site < sites; ++site) {
        const int64_t g = site % G;
        const int64_t j = (site / G) % J;
        const int64_t b = site / (G * static_cast<int64_t>(J));
        const int64_t pbase = (b * N * static_cast<int64_t>(J) + j) * D * G + g;
        const int64_t dbase = site * static_cast<int64_t>(N);
        const int64_t abase = site * static_cast<int64_t>(N) * N;

        // gradient of the softmax
        std::vector<double> ds(static_cast<size_t>(N));
        {
          double dot = 0.0;
          std::vector<double> cv(static_cast<size_t>(N)), gv(static_cast<size_t>(N));
          for (int i = 0; i < N; ++i) {
            cv[static_cast<size_t>(i)] =
                pcv[(b * N + i) * static_cast<int64_t>(J) * G + j * G + g];
            gv[static_cast<size_t>(i)] =
                gc[(b * N + i) * static_cast<int64_t>(J) * G + j * G + g];
            dot += cv[static_cast<size_t>(i)] * gv[static_cast<size_t>(i)];
          }
          for (int i = 0; i < N; ++i)
            ds[static_cast<size_t>(i)] =
                cv[static_cast<size_t>(i)] * (gv[static_cast<size_t>(i)] - dot);
        }
        // transpose of the frozen neighbour-mean, applied num_iter times
        std::vector<double> tmp(static_cast<size_t>(N));
        for (int t = 0; t < T; ++t) {
          std::fill(tmp.begin(), tmp.end(), 0.0);
          for (int i = 0; i < N; ++i) {
            const double share = ds[static_cast<size_t>(i)] / static_cast<double>(k);
            for (int q = 0; q < k; ++q)
              tmp[static_cast<size_t>(pkn[dbase * k + i * k + q])] += share;
          }
          ds.swap(tmp);
        }
        // row-sum backward: dA_ik = ds_i; cosine backward into predictions
        std::vector<double> vec(static_cast<size_t>(N) * D);
        std::vector<double> norm(static_cast<size_t>(N));
        for (int i = 0; i < N; ++i) {
          double n2 = 0.0;
          for (int p = 0; p < D; ++p) {
            const double x = pp[pbase + i * stride_i + p * stride_p];
            vec[static_cast<size_t>(i) * D + p] = x;
            n2 += x * x;
          }
          norm[static_cast<size_t>(i)] = std::sqrt(n2);
        }
        std::vector<double> dvec(static_cast<size_t>(N) * D, 0.0);
        std::vector<double> dnorm(static_cast<size_t>(N), 0.0);
        for (int i = 0; i < N; ++i) {
          const double dA_row = ds[static_cast<size_t>(i)];
          if (dA_row == 0.0) continue;
          for (int kk = 0; kk < N; ++kk) {
            const double q = norm[static_cast<size_t>(i)] * norm[static_cast<size_t>(kk)] + eps;
            const double a = pa[abase + i * N + kk];
            const double dD = dA_row / q;
            const double dq = -dA_row * a / q;
            // D_ik = P_i . P_k
            for (int p = 0; p < D; ++p) {
              dvec[static_cast<size_t>(i) * D + p] += dD * vec[static_cast<size_t>(kk) * D + p];
              dvec[static_cast<size_t>(kk) * D + p] += dD * vec[static_cast<size_t>(i) * D + p];
            }
            dnorm[static_cast<size_t>(i)] += dq * norm[static_cast<size_t>(kk)];
            dnorm[static_cast<size_t>(kk)] += dq * norm[static_cast<size_t>(i)];
          }
        }
        for (int i = 0; i < N; ++i) {
          const double n = norm[static_cast<size_t>(i)];
          if (n < 1e-30) continue;  // zero vector: norm subgradient 0
          const double scal = dnorm[static_cast<size_t>(i)] / n;
          for (int p = 0; p < D; ++p)
            dvec[static_cast<size_t>(i) * D + p] += scal * vec[static_cast<size_t>(i) * D + p];
        }
        for (int i = 0; i < N; ++i)
          for (int p = 0; p < D; ++p)
            gp[pbase + i * stride_i + p * stride_p] +=
                static_cast<float>(dvec[static_cast<size_t>(i) * D + p]);
      }
    });
  }
  return st;
}

// ---- route -----------------------------------------------------------------------

CapsuleField route(const PredictionField& pred, const RoutingState& state) {
  const Tensor& P = pred.values;
  const Tensor& c = state.weights;
  require(P.ndim() == 7, "route: predictions must be (B, I, J, D, 4, H, W)");
  require(c.defined() && c.ndim() == 6, "route: weights must be (B, I, J, 4, H, W)");
  require(c.dim(0) == P.dim(0) && c.dim(1) == P.dim(1) && c.dim(2) == P.dim(2),
          "route: weight/prediction shape mismatch");
  const int B = static_cast<int>(P.dim(0));
  const int N = static_cast<int>(P.dim(1));
  const int J = static_cast<int>(P.dim(2));
  const int D = static_cast<int>(P.dim(3));
  const int H = static_cast<int>(P.dim(5));
  const int W = static_cast<int>(P.dim(6));
  const int64_t G = static_cast<int64_t>(4) * H * W;

  bool any_grad = P.requires_grad() || c.requires_grad();
  Tensor out = Tensor::zeros({B, J, D, 4, H, W},
                             any_grad && GradTape::active() != nullptr);
  const float* pp = P.data();
  const float* pc = c.data();
  float* po = out.data();
  const int64_t sites = static_cast<int64_t>(B) * J * G;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int64_t site = 0; site < sites; ++site) {
    const int64_t g = site % G;
    const int64_t j = (site / G) % J;
    const int64_t b = site / (G * static_cast<int64_t>(J));
    for (int p = 0; p < D; ++p) {
      double acc = 0.0;
      for (int i = 0; i < N; ++i) {
        const double w = pc[(b * N + i) * static_cast<int64_t>(J) * G + j * G + g];
        const double x = pp[((b * N + i) * J + j) * D * G + p * G + g];
        acc += w * x;
      }
      po[(b * static_cast<int64_t>(J) + j) * D * G + p * G + g] = static_cast<float>(acc);
    }
  }
  if (any_grad && GradTape::active()) {
    auto ps = P.storage(), cs = c.storage(), os = out.storage();
    GradTape::active()->record([ps, cs, os, B, N, J, D, G, sites] {
      const float* go = out_grad(os);
      if (!go) return;
      const float* pp = ps->value.data();
      const float* pcv = cs->value.data();
      float* gp = ps->requires_grad ? ensure_grad(ps) : nullptr;
      float* gcw = cs->requires_grad ? ensure_grad(cs) : nullptr;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
      for (int64_t site = 0; site < sites; ++site) {
        const int64_t g = site % G;
        const int64_t j = (site / G) % J;
        const int64_t b = site / (G * static_cast<int64_t>(J));
        for (int i = 0; i < N; ++i) {
          const int64_t cidx = (b * N + i) * static_cast<int64_t>(J) * G + j * G + g;
          const double w = pcv[cidx];
          double dw = 0.0;
          for (int p = 0; p < D; ++p) {
            const int64_t oidx = (b * static_cast<int64_t>(J) + j) * D * G + p * G + g;
            const int64_t pidx = ((b * N + i) * J + j) * D * G + p * G + g;
            const double gv = go[oidx];
            if (gp) gp[pidx] += static_cast<float>(gv * w);
            dw += gv * pp[pidx];
          }
          if (gcw) gcw[cidx] += static_cast<float>(dw);
        }
      }
    });
  }
  Tensor squashed = squash(out, /*dim_axis=*/2);
  // post-squash norms must stay strictly below 1
  {
    const float* pv = squashed.data();
    const int64_t inner = G;
    const int64_t outer = squashed.size() / (static_cast<int64_t>(D) * G);
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t in = 0; in < inner; ++in) {
        double n2 = 0.0;
        for (int p = 0; p < D; ++p) {
          const double x = pv[o * D * G + p * G + in];
          n2 += x * x;
        }
        if (!(std::sqrt(n2) < 1.0))
          throw std::runtime_error("route: post-squash capsule norm >= 1");
      }
    }
  }
  return {squashed, pred.boundary};
}

}  // namespace icr
