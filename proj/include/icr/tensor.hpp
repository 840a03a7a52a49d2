#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace icr {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

/**
 * Dense row-major float32 tensor. Reductions and correlation kernels
 * accumulate in float64. Values are immutable by convention once produced
 * by an operation; only the trainer mutates parameter storage in place.
 *
 * Copying a Tensor is cheap: it is a shared handle to the storage, which
 * is what lets the gradient tape refer back to operation inputs.
 */
class Tensor {
 public:
  struct Storage {
    std::vector<int64_t> shape;
    std::vector<float> value;
    std::vector<float> grad;  // empty until first needed
    bool requires_grad = false;
  };

  Tensor() = default;

  static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false);
  static Tensor ones(std::vector<int64_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<int64_t> shape, float v, bool requires_grad = false);
  static Tensor from(std::vector<int64_t> shape, std::vector<float> values,
                     bool requires_grad = false);
  static Tensor scalar(float v, bool requires_grad = false);

  bool defined() const { return s_ != nullptr; }
  const std::vector<int64_t>& shape() const { return s_->shape; }
  int ndim() const { return static_cast<int>(s_->shape.size()); }
  int64_t dim(int axis) const { return s_->shape.at(static_cast<size_t>(axis)); }
  int64_t size() const { return static_cast<int64_t>(s_->value.size()); }

  float* data() { return s_->value.data(); }
  const float* data() const { return s_->value.data(); }
  std::vector<float>& values() { return s_->value; }
  const std::vector<float>& values() const { return s_->value; }

  bool requires_grad() const { return s_ && s_->requires_grad; }
  void set_requires_grad(bool rg) { s_->requires_grad = rg; }
  bool has_grad() const { return s_ && !s_->grad.empty(); }
  float* grad();              // allocates a zero buffer on first use
  const float* grad() const;  // nullptr when never touched
  void zero_grad();

  float item() const;
  float at(std::initializer_list<int64_t> idx) const;
  int64_t offset(std::initializer_list<int64_t> idx) const;

  Tensor clone() const;  // deep copy of values, detached from the tape

  void assert_finite(const std::string& what) const;

  std::shared_ptr<Storage> storage() const { return s_; }

 private:
  explicit Tensor(std::shared_ptr<Storage> s) : s_(std::move(s)) {}
  std::shared_ptr<Storage> s_;
};

int64_t numel(const std::vector<int64_t>& shape);

/**
 * Record of executed differentiable operations for one forward pass.
 * Constructing a tape installs it as the active one; operations executed
 * while a tape is active append a backward closure. backward() replays the
 * closures in strict reverse execution order, exactly once.
 */
class GradTape {
 public:
  GradTape();
  ~GradTape();
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* active();
  void record(std::function<void()> backward_fn);
  size_t size() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and replays the tape. The loss must be a
  // scalar recorded under this tape; a tape can be consumed only once.
  void backward(const Tensor& loss);

 private:
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
  GradTape* prev_ = nullptr;
};

// ---- deterministic randomness -------------------------------------------
// Distributions are hand-rolled from mt19937_64 so that seeded runs are
// reproducible independent of the standard library implementation.

using Rng = std::mt19937_64;

double uniform_double(Rng& rng, double lo, double hi);
float uniform_real(Rng& rng, float lo, float hi);
int64_t uniform_int(Rng& rng, int64_t lo, int64_t hi);  // inclusive bounds
double normal_double(Rng& rng);                         // standard normal

Tensor rand_uniform(std::vector<int64_t> shape, float lo, float hi, Rng& rng,
                    bool requires_grad = false);
Tensor rand_normal(std::vector<int64_t> shape, float mean, float stddev, Rng& rng,
                   bool requires_grad = false);

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, float v);
Tensor scale(const Tensor& a, float v);
Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor exp_op(const Tensor& a);
Tensor log_op(const Tensor& a);
Tensor sqrt_op(const Tensor& a);
Tensor ones_like(const Tensor& a);
Tensor zeros_like(const Tensor& a);

// Recorded reshape; the copy keeps the tape simple and is cheap at the
// scales this library runs at.
Tensor reshape(const Tensor& a, std::vector<int64_t> shape);

// ---- reductions (float64 accumulation) ------------------------------------

Tensor reduce_sum(const Tensor& a, const std::vector<int>& axes);
Tensor reduce_mean(const Tensor& a, const std::vector<int>& axes);
// Ties route the gradient to the first maximal index.
Tensor reduce_max(const Tensor& a, const std::vector<int>& axes);
Tensor sum_all(const Tensor& a);  // scalar

// The float64 accumulation behind sum_all, before the float32 cast.
double sum_f64(const Tensor& a);

// ---- classifier head -------------------------------------------------------

Tensor softmax(const Tensor& a, int axis);
// logits (B, C), labels in [0, C); returns scalar mean loss.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

}  // namespace icr
