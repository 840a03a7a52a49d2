#pragma once

#include <array>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "icr/data.hpp"
#include "icr/routing.hpp"

namespace icr {

/**
 * Architecture: lifting correlation, 7 residual pre-capsule blocks,
 * primary capsules, hidden capsule layers with iterative collaborative
 * routing, a class-capsule layer, and the logit head.
 */
struct ModelConfig {
  int image_channels = 1;
  int image_size = 16;
  std::vector<int> block_widths = {8, 8, 16, 16, 16, 32, 32};
  std::vector<int> block_strides = {1, 1, 2, 1, 2, 1, 1};
  int primary_types = 8;
  int primary_dim = 8;
  std::vector<std::pair<int, int>> hidden_capsules = {{8, 8}, {8, 8}, {8, 8}};
  int class_count = 4;
  int class_dim = 8;
  std::vector<ICRConfig> routing;  // one per capsule layer (hidden + class)
  bool primary_layernorm = true;
  Boundary boundary = Boundary::kZero;
  bool desk_scale = true;
  int lift_kernel = 3;
  int block_kernel = 3;
  int pred_kernel = 3;

  void validate() const;
  int routing_layer_count() const { return static_cast<int>(hidden_capsules.size()) + 1; }

  // Same parameter shapes, but stride 1 everywhere, circular boundary and
  // all layernorms off: the configuration under which every layer is
  // exactly equivariant.
  ModelConfig audit_variant() const;

  static ModelConfig desk();
  static ModelConfig paper_cifar10();
  static ModelConfig paper_cifar100();
  static ModelConfig paper_fashion_mnist();
};

struct TrainConfig {
  int epochs = 20;
  int batch_size = 64;
  float peak_lr = 3e-3f;
  float weight_decay = 1e-2f;
  float warmup_frac = 0.3f;    // linear warmup fraction of total steps
  float final_lr_frac = 0.01f; // cosine decay floor as a fraction of peak
  uint64_t seed = 1;

  void validate() const;
};

struct NamedParam {
  std::string name;
  Tensor tensor;
};

struct ForwardTrace {
  // named intermediate representations, all with trailing (4, H, W) except
  // the final "logits" entry
  std::vector<std::pair<std::string, Tensor>> layers;
};

class Model {
 public:
  struct RoutingLayer {
    PredictParams pred;
    ICRConfig icr;
    int in_types = 0, in_dim = 0, out_types = 0, out_dim = 0;
  };

  static Model build(const ModelConfig& cfg, uint64_t seed);

  // images (B, c, H, W) -> logits (B, C); aborts on non-finite logits.
  Tensor forward(const Tensor& images, ForwardTrace* trace = nullptr) const;

  const ModelConfig& config() const { return cfg_; }
  std::vector<NamedParam>& parameters() { return params_; }
  const std::vector<NamedParam>& parameters() const { return params_; }
  int64_t parameter_count() const;

  // Rebuilds the same weights under a different configuration (used by the
  // audit, which reruns a trained model at stride 1 / circular / no-LN).
  Model with_config(const ModelConfig& cfg) const;

 private:
  ModelConfig cfg_;
  GConvParams lift_;
  std::vector<ResidualBlockParams> blocks_;
  PrimaryCapsParams primary_;
  std::vector<RoutingLayer> layers_;
  LogitHeadParams head_;
  std::vector<NamedParam> params_;

  void register_params();
};

// One-cycle schedule, simplified: linear warmup to the peak over
// warmup_frac of the steps, then cosine decay to final_lr_frac * peak.
float one_cycle_lr(int64_t step, int64_t total_steps, const TrainConfig& tc);

/**
 * Decoupled-weight-decay adaptive-moment optimizer. A step with zero
 * gradients shrinks every parameter by exactly (1 - lr * wd).
 */
class AdamW {
 public:
  explicit AdamW(std::vector<NamedParam>& params, float beta1 = 0.9f,
                 float beta2 = 0.999f, float eps = 1e-8f);
  void zero_grad();
  void step(float lr, float weight_decay);

 private:
  std::vector<NamedParam>* params_;
  std::vector<Tensor> m_, v_;
  float beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

// Forward, cross-entropy, backward, optimizer step; returns the loss.
float train_step(Model& m, AdamW& opt, const Tensor& images,
                 const std::vector<int>& labels, float lr, float weight_decay);

struct EvalResult {
  double accuracy = 0.0;
  std::vector<double> per_class_accuracy;
  double mean_loss = 0.0;
};
EvalResult evaluate(const Model& m, const Dataset& data, int batch_size = 64);

struct TrainResult {
  std::vector<std::string> metric_lines;  // one JSON record per epoch
  std::array<double, 5> final_suite_accuracy{};
  double final_train_loss = 0.0;
};

// Full training run: per-epoch augmentation per the transform protocol,
// one-cycle schedule, per-epoch evaluation on the 5 suites, JSONL metrics.
TrainResult train_model(Model& m, const Dataset& train,
                        const std::array<Dataset, 5>& suites,
                        const TrainConfig& tc, const TransformSpec& augment,
                        const std::string& checkpoint_path,
                        const std::string& metrics_path, std::ostream* progress);

// Versioned checkpoint: JSON manifest + raw float32 blobs; bit-exact
// round trip.
void save_checkpoint(const std::string& path, const Model& m, int epoch,
                     uint64_t seed);
Model load_checkpoint(const std::string& path, int* epoch = nullptr,
                      uint64_t* seed = nullptr);

// JSON codec for configuration files.
std::string model_config_json(const ModelConfig& cfg);
ModelConfig parse_model_config_json(const std::string& text);

struct AuditReport {
  std::vector<std::pair<std::string, double>> layer_errors;  // max over elements/group
  bool pass(double threshold) const;
};

// Compares every traced layer of forward(act_g(x)) against act_g applied to
// the trace of forward(x), for each group element; errors are max-abs
// deviations relative to the per-layer max magnitude.
AuditReport audit_equivariance(const Model& m, const Tensor& images,
                               const std::vector<P4Element>& gs);

Tensor gather_batch(const Tensor& images, const std::vector<int64_t>& idx);

}  // namespace icr
