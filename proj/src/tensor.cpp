#include "icr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>

namespace icr {

int64_t numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    require(d >= 0, "negative dimension");
    n *= d;
  }
  return n;
}

static std::string shape_str(const std::vector<int64_t>& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int64_t> shape, bool requires_grad) {
  auto s = std::make_shared<Storage>();
  s->shape = std::move(shape);
  s->value.assign(static_cast<size_t>(numel(s->shape)), 0.0f);
  s->requires_grad = requires_grad;
  return Tensor(std::move(s));
}

Tensor Tensor::ones(std::vector<int64_t> shape, bool requires_grad) {
  return full(std::move(shape), 1.0f, requires_grad);
}

Tensor Tensor::full(std::vector<int64_t> shape, float v, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.s_->value.begin(), t.s_->value.end(), v);
  return t;
}

Tensor Tensor::from(std::vector<int64_t> shape, std::vector<float> values,
                    bool requires_grad) {
  require(numel(shape) == static_cast<int64_t>(values.size()),
          "value count does not match shape " + shape_str(shape));
  auto s = std::make_shared<Storage>();
  s->shape = std::move(shape);
  s->value = std::move(values);
  s->requires_grad = requires_grad;
  return Tensor(std::move(s));
}

Tensor Tensor::scalar(float v, bool requires_grad) {
  return from({}, {v}, requires_grad);
}

float* Tensor::grad() {
  if (s_->grad.empty()) s_->grad.assign(s_->value.size(), 0.0f);
  return s_->grad.data();
}

const float* Tensor::grad() const {
  return s_->grad.empty() ? nullptr : s_->grad.data();
}

void Tensor::zero_grad() {
  if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), 0.0f);
}

float Tensor::item() const {
  require(size() == 1, "item() requires a single-element tensor");
  return s_->value[0];
}

int64_t Tensor::offset(std::initializer_list<int64_t> idx) const {
  require(static_cast<int>(idx.size()) == ndim(), "index rank mismatch");
  int64_t off = 0;
  int axis = 0;
  for (int64_t i : idx) {
    require(i >= 0 && i < s_->shape[static_cast<size_t>(axis)], "index out of range");
    off = off * s_->shape[static_cast<size_t>(axis)] + i;
    ++axis;
  }
  return off;
}

float Tensor::at(std::initializer_list<int64_t> idx) const {
  return s_->value[static_cast<size_t>(offset(idx))];
}

Tensor Tensor::clone() const {
  auto s = std::make_shared<Storage>();
  s->shape = s_->shape;
  s->value = s_->value;
  s->requires_grad = false;
  return Tensor(std::move(s));
}

void Tensor::assert_finite(const std::string& what) const {
  for (float v : s_->value) {
    if (!std::isfinite(v)) {
      throw std::runtime_error("non-finite value in " + what);
    }
  }
}

// ---- GradTape ---------------------------------------------------------------

namespace {
GradTape* g_active_tape = nullptr;
}

GradTape::GradTape() : prev_(g_active_tape) { g_active_tape = this; }

GradTape::~GradTape() { g_active_tape = prev_; }

GradTape* GradTape::active() { return g_active_tape; }

void GradTape::record(std::function<void()> backward_fn) {
  nodes_.push_back(std::move(backward_fn));
}

void GradTape::backward(const Tensor& loss) {
  if (consumed_) throw std::runtime_error("gradient tape already consumed");
  if (!loss.defined() || loss.size() != 1)
    throw std::invalid_argument("backward() requires a scalar loss");
  consumed_ = true;
  auto ls = loss.storage();
  if (ls->grad.empty()) ls->grad.assign(1, 0.0f);
  ls->grad[0] += 1.0f;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

// ---- randomness -------------------------------------------------------------

double uniform_double(Rng& rng, double lo, double hi) {
  // 53 random bits -> [0,1)
  double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

float uniform_real(Rng& rng, float lo, float hi) {
  return static_cast<float>(uniform_double(rng, lo, hi));
}

int64_t uniform_int(Rng& rng, int64_t lo, int64_t hi) {
  require(lo <= hi, "uniform_int: empty range");
  uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
  return lo + static_cast<int64_t>(rng() % span);
}

double normal_double(Rng& rng) {
  // Box-Muller on hand-rolled uniforms
  double u1 = uniform_double(rng, 0.0, 1.0);
  double u2 = uniform_double(rng, 0.0, 1.0);
  u1 = std::max(u1, 1e-300);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

Tensor rand_uniform(std::vector<int64_t> shape, float lo, float hi, Rng& rng,
                    bool requires_grad) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  float* d = t.data();
  for (int64_t i = 0; i < t.size(); ++i) d[i] = uniform_real(rng, lo, hi);
  return t;
}

Tensor rand_normal(std::vector<int64_t> shape, float mean, float stddev, Rng& rng,
                   bool requires_grad) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  float* d = t.data();
  for (int64_t i = 0; i < t.size(); ++i)
    d[i] = mean + stddev * static_cast<float>(normal_double(rng));
  return t;
}

// ---- op helpers -------------------------------------------------------------

namespace {

bool recording(const Tensor& out) {
  return GradTape::active() != nullptr && out.requires_grad();
}

bool grads_wanted(const Tensor& a) { return a.requires_grad(); }

Tensor make_output(std::vector<int64_t> shape, bool any_input_grad) {
  bool rg = any_input_grad && GradTape::active() != nullptr;
  return Tensor::zeros(std::move(shape), rg);
}

// Returns nullptr when the output never received a gradient; such nodes are
// disconnected from the loss and can be skipped.
const float* out_grad(const std::shared_ptr<Tensor::Storage>& os) {
  return os->grad.empty() ? nullptr : os->grad.data();
}

float* ensure_grad(const std::shared_ptr<Tensor::Storage>& s) {
  if (s->grad.empty()) s->grad.assign(s->value.size(), 0.0f);
  return s->grad.data();
}

}  // namespace

// ---- elementwise ------------------------------------------------------------

enum class BinOp { kAdd, kSub, kMul, kDiv };

static Tensor binary_op(BinOp op, const Tensor& a, const Tensor& b) {
  require(a.defined() && b.defined(), "undefined tensor");
  require(a.shape() == b.shape(),
          "shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = make_output(a.shape(), a.requires_grad() || b.requires_grad());
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  const int64_t n = a.size();
  switch (op) {
    case BinOp::kAdd: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i]; break;
    case BinOp::kSub: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i]; break;
    case BinOp::kMul: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i]; break;
    case BinOp::kDiv:
      for (int64_t i = 0; i < n; ++i) {
        po[i] = pa[i] / pb[i];
        if (!std::isfinite(po[i]))
          throw std::runtime_error("non-finite result in div()");
      }
      break;
  }
  if (recording(out)) {
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    bool ga = grads_wanted(a), gb = grads_wanted(b);
    GradTape::active()->record([op, as, bs, os, ga, gb, n] {
      const float* go = out_grad(os);
      if (!go) return;
      if (ga) {
        float* g = ensure_grad(as);
        switch (op) {
          case BinOp::kAdd: case BinOp::kSub:
            for (int64_t i = 0; i < n; ++i) g[i] += go[i];
            break;
          case BinOp::kMul:
            for (int64_t i = 0; i < n; ++i) g[i] += go[i] * bs->value[i];
            break;
          case BinOp::kDiv:
            for (int64_t i = 0; i < n; ++i) g[i] += go[i] / bs->value[i];
            break;
        }
      }
      if (gb) {
        float* g = ensure_grad(bs);
        switch (op) {
          case BinOp::kAdd:
            for (int64_t i = 0; i < n; ++i) g[i] += go[i];
            break;
          case BinOp::kSub:
            for (int64_t i = 0; i < n; ++i) g[i] -= go[i];
            break;
          case BinOp::kMul:
            for (int64_t i = 0; i < n; ++i) g[i] += go[i] * as->value[i];
            break;
          case BinOp::kDiv:
            for (int64_t i = 0; i < n; ++i)
              g[i] -= go[i] * as->value[i] / (bs->value[i] * bs->value[i]);
            break;
        }
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(BinOp::kAdd, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(BinOp::kSub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(BinOp::kMul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op(BinOp::kDiv, a, b); }

enum class UnOp { kNeg, kRelu, kExp, kLog, kSqrt, kScale, kAddScalar };

static Tensor unary_op(UnOp op, const Tensor& a, float c) {
  require(a.defined(), "undefined tensor");
  Tensor out = make_output(a.shape(), a.requires_grad());
  const float* pa = a.data();
  float* po = out.data();
  const int64_t n = a.size();
  switch (op) {
    case UnOp::kNeg: for (int64_t i = 0; i < n; ++i) po[i] = -pa[i]; break;
    case UnOp::kRelu: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] > 0.0f ? pa[i] : 0.0f; break;
    case UnOp::kExp:
      for (int64_t i = 0; i < n; ++i) {
        po[i] = std::exp(pa[i]);
        if (!std::isfinite(po[i])) throw std::runtime_error("non-finite result in exp()");
      }
      break;
    case UnOp::kLog:
      for (int64_t i = 0; i < n; ++i) {
        po[i] = std::log(pa[i]);
        if (!std::isfinite(po[i])) throw std::runtime_error("non-finite result in log()");
      }
      break;
    case UnOp::kSqrt:
      for (int64_t i = 0; i < n; ++i) {
        po[i] = std::sqrt(pa[i]);
        if (!std::isfinite(po[i])) throw std::runtime_error("non-finite result in sqrt()");
      }
      break;
    case UnOp::kScale: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * c; break;
    case UnOp::kAddScalar: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + c; break;
  }
  if (recording(out)) {
    auto as = a.storage(), os = out.storage();
    GradTape::active()->record([op, as, os, c, n] {
      const float* go = out_grad(os);
      if (!go) return;
      float* g = ensure_grad(as);
      switch (op) {
        case UnOp::kNeg: for (int64_t i = 0; i < n; ++i) g[i] -= go[i]; break;
        case UnOp::kRelu:
          for (int64_t i = 0; i < n; ++i) g[i] += as->value[i] > 0.0f ? go[i] : 0.0f;
          break;
        case UnOp::kExp:
          for (int64_t i = 0; i < n; ++i) g[i] += go[i] * os->value[i];
          break;
        case UnOp::kLog:
          for (int64_t i = 0; i < n; ++i) g[i] += go[i] / as->value[i];
          break;
        case UnOp::kSqrt:
          for (int64_t i = 0; i < n; ++i) g[i] += go[i] * 0.5f / os->value[i];
          break;
        case UnOp::kScale: for (int64_t i = 0; i < n; ++i) g[i] += go[i] * c; break;
        case UnOp::kAddScalar: for (int64_t i = 0; i < n; ++i) g[i] += go[i]; break;
      }
    });
  }
  return out;
}

Tensor neg(const Tensor& a) { return unary_op(UnOp::kNeg, a, 0.0f); }
Tensor relu(const Tensor& a) { return unary_op(UnOp::kRelu, a, 0.0f); }
Tensor exp_op(const Tensor& a) { return unary_op(UnOp::kExp, a, 0.0f); }
Tensor log_op(const Tensor& a) { return unary_op(UnOp::kLog, a, 0.0f); }
Tensor sqrt_op(const Tensor& a) { return unary_op(UnOp::kSqrt, a, 0.0f); }
Tensor scale(const Tensor& a, float v) { return unary_op(UnOp::kScale, a, v); }
Tensor add_scalar(const Tensor& a, float v) { return unary_op(UnOp::kAddScalar, a, v); }

Tensor ones_like(const Tensor& a) { return Tensor::ones(a.shape()); }
Tensor zeros_like(const Tensor& a) { return Tensor::zeros(a.shape()); }

Tensor reshape(const Tensor& a, std::vector<int64_t> shape) {
  require(numel(shape) == a.size(), "reshape: element count mismatch");
  Tensor out = make_output(std::move(shape), a.requires_grad());
  std::memcpy(out.data(), a.data(), sizeof(float) * static_cast<size_t>(a.size()));
  if (recording(out)) {
    auto as = a.storage(), os = out.storage();
    int64_t n = a.size();
    GradTape::active()->record([as, os, n] {
      const float* go = out_grad(os);
      if (!go) return;
      float* g = ensure_grad(as);
      for (int64_t i = 0; i < n; ++i) g[i] += go[i];
    });
  }
  return out;
}

// ---- reductions --------------------------------------------------------------

namespace {

struct ReducePlan {
  std::vector<int64_t> out_shape;
  // out_index[i] = flat output slot for input flat index i, via per-axis strides
  std::vector<int64_t> in_dims;
  std::vector<int64_t> out_stride_for_axis;  // 0 for reduced axes
  int64_t out_size = 1;
  int64_t reduce_extent = 1;
};

ReducePlan plan_reduce(const Tensor& a, const std::vector<int>& axes) {
  require(!axes.empty(), "reduce: axes must be non-empty");
  std::vector<bool> reduced(static_cast<size_t>(a.ndim()), false);
  for (int ax : axes) {
    require(ax >= 0 && ax < a.ndim(), "reduce: axis out of range");
    require(!reduced[static_cast<size_t>(ax)], "reduce: duplicate axis");
    reduced[static_cast<size_t>(ax)] = true;
    require(a.dim(ax) > 0, "reduce: empty reduction extent");
  }
  ReducePlan p;
  p.in_dims = a.shape();
  for (int i = 0; i < a.ndim(); ++i) {
    if (reduced[static_cast<size_t>(i)]) p.reduce_extent *= a.dim(i);
    else p.out_shape.push_back(a.dim(i));
  }
  p.out_size = numel(p.out_shape);
  // strides of output laid out over the kept axes, in input axis order
  p.out_stride_for_axis.assign(static_cast<size_t>(a.ndim()), 0);
  int64_t stride = 1;
  for (int i = a.ndim() - 1; i >= 0; --i) {
    if (!reduced[static_cast<size_t>(i)]) {
      p.out_stride_for_axis[static_cast<size_t>(i)] = stride;
      stride *= a.dim(i);
    }
  }
  return p;
}

// flat input index -> flat output slot
inline int64_t out_slot(const ReducePlan& p, int64_t flat) {
  int64_t slot = 0;
  for (int i = static_cast<int>(p.in_dims.size()) - 1; i >= 0; --i) {
    int64_t d = p.in_dims[static_cast<size_t>(i)];
    int64_t ix = flat % d;
    flat /= d;
    slot += ix * p.out_stride_for_axis[static_cast<size_t>(i)];
  }
  return slot;
}

}  // namespace

enum class RedOp { kSum, kMean, kMax };

static Tensor reduce_op(RedOp op, const Tensor& a, const std::vector<int>& axes) {
  require(a.defined(), "undefined tensor");
  ReducePlan p = plan_reduce(a, axes);
  Tensor out = make_output(p.out_shape, a.requires_grad());
  const float* pa = a.data();
  float* po = out.data();
  const int64_t n = a.size();
  std::vector<int64_t> argmax;
  if (op == RedOp::kMax) {
    argmax.assign(static_cast<size_t>(p.out_size), -1);
    for (int64_t i = 0; i < n; ++i) {
      int64_t s = out_slot(p, i);
      // strictly-greater keeps the first maximal index on ties
      if (argmax[static_cast<size_t>(s)] < 0 ||
          pa[i] > pa[argmax[static_cast<size_t>(s)]]) {
        argmax[static_cast<size_t>(s)] = i;
      }
    }
    for (int64_t s = 0; s < p.out_size; ++s)
      po[s] = pa[argmax[static_cast<size_t>(s)]];
  } else {
    std::vector<double> acc(static_cast<size_t>(p.out_size), 0.0);
    for (int64_t i = 0; i < n; ++i) acc[static_cast<size_t>(out_slot(p, i))] += pa[i];
    double inv = op == RedOp::kMean ? 1.0 / static_cast<double>(p.reduce_extent) : 1.0;
    for (int64_t s = 0; s < p.out_size; ++s)
      po[s] = static_cast<float>(acc[static_cast<size_t>(s)] * inv);
  }
  if (recording(out)) {
    auto as = a.storage(), os = out.storage();
    GradTape::active()->record([op, as, os, p, argmax, n] {
      const float* go = out_grad(os);
      if (!go) return;
      float* g = ensure_grad(as);
      if (op == RedOp::kMax) {
        for (size_t s = 0; s < argmax.size(); ++s)
          g[argmax[s]] += go[s];
      } else {
        float inv = op == RedOp::kMean
                        ? 1.0f / static_cast<float>(p.reduce_extent) : 1.0f;
        for (int64_t i = 0; i < n; ++i) g[i] += go[out_slot(p, i)] * inv;
      }
    });
  }
  return out;
}

Tensor reduce_sum(const Tensor& a, const std::vector<int>& axes) {
  return reduce_op(RedOp::kSum, a, axes);
}
Tensor reduce_mean(const Tensor& a, const std::vector<int>& axes) {
  return reduce_op(RedOp::kMean, a, axes);
}
Tensor reduce_max(const Tensor& a, const std::vector<int>& axes) {
  return reduce_op(RedOp::kMax, a, axes);
}

Tensor sum_all(const Tensor& a) {
  require(a.defined(), "undefined tensor");
  if (a.ndim() == 0) return unary_op(UnOp::kScale, a, 1.0f);
  std::vector<int> axes(static_cast<size_t>(a.ndim()));
  std::iota(axes.begin(), axes.end(), 0);
  return reduce_op(RedOp::kSum, a, axes);
}

double sum_f64(const Tensor& a) {
  require(a.defined(), "undefined tensor");
  double acc = 0.0;
  const float* p = a.data();
  for (int64_t i = 0; i < a.size(); ++i) acc += p[i];
  return acc;
}

// ---- softmax / cross entropy ---------------------------------------------------

Tensor softmax(const Tensor& a, int axis) {
  require(axis >= 0 && axis < a.ndim(), "softmax: axis out of range");
  const int64_t extent = a.dim(axis);
  int64_t inner = 1;
  for (int i = axis + 1; i < a.ndim(); ++i) inner *= a.dim(i);
  int64_t outer = a.size() / (extent * inner);
  Tensor out = make_output(a.shape(), a.requires_grad());
  const float* pa = a.data();
  float* po = out.data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * extent * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t k = 0; k < extent; ++k)
        mx = std::max(mx, static_cast<double>(pa[base + k * inner]));
      double z = 0.0;
      for (int64_t k = 0; k < extent; ++k)
        z += std::exp(static_cast<double>(pa[base + k * inner]) - mx);
      for (int64_t k = 0; k < extent; ++k)
        po[base + k * inner] = static_cast<float>(
            std::exp(static_cast<double>(pa[base + k * inner]) - mx) / z);
    }
  }
  if (recording(out)) {
    auto as = a.storage(), os = out.storage();
    GradTape::active()->record([as, os, outer, inner, extent] {
      const float* go = out_grad(os);
      if (!go) return;
      float* g = ensure_grad(as);
      const float* y = os->value.data();
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
          const int64_t base = o * extent * inner + in;
          double dot = 0.0;
          for (int64_t k = 0; k < extent; ++k)
            dot += static_cast<double>(go[base + k * inner]) * y[base + k * inner];
          for (int64_t k = 0; k < extent; ++k) {
            const int64_t i = base + k * inner;
            g[i] += static_cast<float>(y[i] * (go[i] - dot));
          }
        }
      }
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  require(logits.ndim() == 2, "cross_entropy: logits must be (B, C)");
  const int64_t B = logits.dim(0), C = logits.dim(1);
  require(static_cast<int64_t>(labels.size()) == B, "cross_entropy: label count mismatch");
  for (int y : labels)
    require(y >= 0 && y < C, "cross_entropy: label out of range");
  Tensor out = make_output({}, logits.requires_grad());
  const float* z = logits.data();
  double total = 0.0;
  for (int64_t b = 0; b < B; ++b) {
    const float* row = z + b * C;
    double mx = row[0];
    for (int64_t c = 1; c < C; ++c) mx = std::max(mx, static_cast<double>(row[c]));
    double s = 0.0;
    for (int64_t c = 0; c < C; ++c) s += std::exp(static_cast<double>(row[c]) - mx);
    total += std::log(s) + mx - static_cast<double>(row[labels[static_cast<size_t>(b)]]);
  }
  out.data()[0] = static_cast<float>(total / static_cast<double>(B));
  if (recording(out)) {
    auto ls = logits.storage(), os = out.storage();
    GradTape::active()->record([ls, os, labels, B, C] {
      const float* go = out_grad(os);
      if (!go) return;
      float* g = ensure_grad(ls);
      const float* z = ls->value.data();
      const float scale = go[0] / static_cast<float>(B);
      for (int64_t b = 0; b < B; ++b) {
        const float* row = z + b * C;
        double mx = row[0];
        for (int64_t c = 1; c < C; ++c) mx = std::max(mx, static_cast<double>(row[c]));
        double s = 0.0;
        for (int64_t c = 0; c < C; ++c) s += std::exp(static_cast<double>(row[c]) - mx);
        for (int64_t c = 0; c < C; ++c) {
          double p = std::exp(static_cast<double>(row[c]) - mx) / s;
          double onehot = labels[static_cast<size_t>(b)] == c ? 1.0 : 0.0;
          g[b * C + c] += static_cast<float>((p - onehot) * scale);
        }
      }
    });
  }
  return out;
}

}  // namespace icr
