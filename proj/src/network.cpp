#include "icr/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

#include <json.hpp>

namespace icr {

using nlohmann::json;

// ---- configs -------------------------------------------------------------

void ModelConfig::validate() const {
  require(image_channels >= 1, "config: image channels must be positive");
  require(image_size >= 8, "config: image size too small");
  require(block_widths.size() == 7, "config: exactly 7 residual blocks expected");
  require(block_strides.size() == 7, "config: exactly 7 block strides expected");
  for (int w : block_widths) require(w > 0, "config: block width must be positive");
  for (int s : block_strides) require(s >= 1, "config: block stride must be >= 1");
  require(primary_types > 0 && primary_dim > 0, "config: bad primary capsule geometry");
  require(class_count >= 2, "config: at least two classes");
  require(class_dim > 0, "config: class capsule dim must be positive");
  require(routing.size() == static_cast<size_t>(routing_layer_count()),
          "config: one ICRConfig per capsule layer (hidden + class) required");
  int in_types = primary_types;
  for (size_t l = 0; l < routing.size(); ++l) {
    const ICRConfig& rc = routing[l];
    require(rc.num_iter >= 0, "config: num_iter must be >= 0");
    require(rc.k >= 1 && rc.k <= in_types - 1,
            "config: routing k out of range [1, N_in - 1]");
    if (l < hidden_capsules.size()) in_types = hidden_capsules[l].first;
  }
  require(lift_kernel % 2 == 1 && block_kernel % 2 == 1 && pred_kernel % 2 == 1,
          "config: kernels must be odd");
}

ModelConfig ModelConfig::audit_variant() const {
  ModelConfig c = *this;
  std::fill(c.block_strides.begin(), c.block_strides.end(), 1);
  c.boundary = Boundary::kCircular;
  c.primary_layernorm = false;
  for (auto& rc : c.routing) rc.use_pred_layernorm = false;
  return c;
}

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.routing.assign(static_cast<size_t>(c.routing_layer_count()),
                   ICRConfig{4, 2, 1e-8f, true});
  return c;
}

static ModelConfig paper_base() {
  ModelConfig c;
  c.image_channels = 3;
  c.image_size = 32;
  c.block_widths = {32, 32, 64, 64, 64, 128, 128};
  c.block_strides = {1, 1, 2, 1, 2, 1, 1};
  c.primary_types = 32;
  c.primary_dim = 16;
  c.hidden_capsules = {{32, 16}, {32, 16}, {32, 16}};
  c.class_dim = 16;
  c.desk_scale = false;
  return c;
}

ModelConfig ModelConfig::paper_cifar10() {
  ModelConfig c = paper_base();
  c.class_count = 10;
  c.routing.assign(4, ICRConfig{10, 2, 1e-8f, true});
  return c;
}

ModelConfig ModelConfig::paper_cifar100() {
  ModelConfig c = paper_base();
  c.class_count = 100;
  c.routing.assign(4, ICRConfig{5, 2, 1e-8f, true});
  return c;
}

ModelConfig ModelConfig::paper_fashion_mnist() {
  ModelConfig c = paper_base();
  c.image_channels = 1;
  c.image_size = 28;
  c.class_count = 10;
  c.routing.assign(4, ICRConfig{10, 2, 1e-8f, true});
  return c;
}

void TrainConfig::validate() const {
  require(epochs >= 0, "train config: negative epochs");
  require(batch_size >= 1, "train config: batch size must be positive");
  require(peak_lr > 0.0f, "train config: peak lr must be positive");
  require(weight_decay >= 0.0f, "train config: negative weight decay");
  require(warmup_frac >= 0.0f && warmup_frac < 1.0f, "train config: bad warmup fraction");
  require(final_lr_frac > 0.0f && final_lr_frac <= 1.0f, "train config: bad final lr fraction");
}

// ---- model construction -----------------------------------------------------

namespace {

Tensor init_fan_in(std::vector<int64_t> shape, int64_t fan_in, Rng& rng) {
  const float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
  Tensor t = rand_uniform(std::move(shape), -bound, bound, rng);
  t.set_requires_grad(true);
  return t;
}

Tensor init_zeros(std::vector<int64_t> shape) {
  Tensor t = Tensor::zeros(std::move(shape));
  t.set_requires_grad(true);
  return t;
}

Tensor init_ones(std::vector<int64_t> shape) {
  Tensor t = Tensor::ones(std::move(shape));
  t.set_requires_grad(true);
  return t;
}

}  // namespace

Model Model::build(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Model m;
  m.cfg_ = cfg;
  Rng rng(seed);
  const int k = cfg.block_kernel;

  // lifting layer
  m.lift_.weight = init_fan_in({cfg.block_widths[0], cfg.image_channels,
                                cfg.lift_kernel, cfg.lift_kernel},
                               static_cast<int64_t>(cfg.image_channels) *
                                   cfg.lift_kernel * cfg.lift_kernel,
                               rng);
  m.lift_.bias = init_zeros({cfg.block_widths[0]});
  m.lift_.stride = 1;
  m.lift_.padding = (cfg.lift_kernel - 1) / 2;

  // residual pre-capsule blocks
  int cin = cfg.block_widths[0];
  for (int b = 0; b < 7; ++b) {
    const int cout = cfg.block_widths[static_cast<size_t>(b)];
    const int stride = cfg.block_strides[static_cast<size_t>(b)];
    ResidualBlockParams rb;
    rb.conv1.weight = init_fan_in({cout, cin, 4, k, k},
                                  static_cast<int64_t>(cin) * 4 * k * k, rng);
    rb.conv1.bias = init_zeros({cout});
    rb.conv1.stride = stride;
    rb.conv1.padding = (k - 1) / 2;
    rb.conv2.weight = init_fan_in({cout, cout, 4, k, k},
                                  static_cast<int64_t>(cout) * 4 * k * k, rng);
    rb.conv2.bias = init_zeros({cout});
    rb.conv2.stride = 1;
    rb.conv2.padding = (k - 1) / 2;
    // projection shortcut whenever the stated stride or width changes; the
    // audit variant keeps the same parameter set and runs it at stride 1
    if (stride != 1 || cin != cout) {
      GConvParams proj;
      proj.weight = init_fan_in({cout, cin, 4, 1, 1}, static_cast<int64_t>(cin) * 4, rng);
      proj.bias = init_zeros({cout});
      proj.stride = stride;
      proj.padding = 0;
      rb.projection = std::move(proj);
    }
    m.blocks_.push_back(std::move(rb));
    cin = cout;
  }

  // primary capsules
  const int pc_channels = cfg.primary_types * cfg.primary_dim;
  m.primary_.gconv.weight = init_fan_in({pc_channels, cin, 4, k, k},
                                        static_cast<int64_t>(cin) * 4 * k * k, rng);
  m.primary_.gconv.bias = init_zeros({pc_channels});
  m.primary_.gconv.stride = 1;
  m.primary_.gconv.padding = (k - 1) / 2;
  m.primary_.ln.gain = init_ones({cfg.primary_types, cfg.primary_dim});
  m.primary_.ln.bias = init_zeros({cfg.primary_types, cfg.primary_dim});
  m.primary_.use_layernorm = cfg.primary_layernorm;

  // capsule layers (hidden + class), one filter set per (in, out) type pair
  int in_types = cfg.primary_types, in_dim = cfg.primary_dim;
  const int pk = cfg.pred_kernel;
  for (int l = 0; l < cfg.routing_layer_count(); ++l) {
    const bool is_class = l == static_cast<int>(cfg.hidden_capsules.size());
    const int out_types = is_class ? cfg.class_count
                                   : cfg.hidden_capsules[static_cast<size_t>(l)].first;
    const int out_dim = is_class ? cfg.class_dim
                                 : cfg.hidden_capsules[static_cast<size_t>(l)].second;
    RoutingLayer rl;
    rl.in_types = in_types;
    rl.in_dim = in_dim;
    rl.out_types = out_types;
    rl.out_dim = out_dim;
    rl.icr = cfg.routing[static_cast<size_t>(l)];
    rl.pred.weight = init_fan_in({in_types, out_types, out_dim, in_dim, 4, pk, pk},
                                 static_cast<int64_t>(in_dim) * 4 * pk * pk, rng);
    rl.pred.bias = init_zeros({in_types, out_types, out_dim});
    rl.pred.ln.gain = init_ones({in_types, out_types, out_dim});
    rl.pred.ln.bias = init_zeros({in_types, out_types, out_dim});
    rl.pred.padding = (pk - 1) / 2;
    m.layers_.push_back(std::move(rl));
    in_types = out_types;
    in_dim = out_dim;
  }

  // logit head
  m.head_.weight = init_fan_in({cfg.class_count, cfg.class_dim},
                               static_cast<int64_t>(cfg.class_dim), rng);
  m.head_.bias = init_zeros({cfg.class_count});

  m.register_params();
  return m;
}

void Model::register_params() {
  params_.clear();
  auto reg = [this](const std::string& name, const Tensor& t) {
    params_.push_back({name, t});
  };
  reg("lift.weight", lift_.weight);
  reg("lift.bias", lift_.bias);
  for (size_t b = 0; b < blocks_.size(); ++b) {
    const std::string p = "block" + std::to_string(b + 1) + ".";
    reg(p + "conv1.weight", blocks_[b].conv1.weight);
    reg(p + "conv1.bias", blocks_[b].conv1.bias);
    reg(p + "conv2.weight", blocks_[b].conv2.weight);
    reg(p + "conv2.bias", blocks_[b].conv2.bias);
    if (blocks_[b].projection) {
      reg(p + "proj.weight", blocks_[b].projection->weight);
      reg(p + "proj.bias", blocks_[b].projection->bias);
    }
  }
  reg("primary.weight", primary_.gconv.weight);
  reg("primary.bias", primary_.gconv.bias);
  reg("primary.ln.gain", primary_.ln.gain);
  reg("primary.ln.bias", primary_.ln.bias);
  for (size_t l = 0; l < layers_.size(); ++l) {
    const std::string p = "caps" + std::to_string(l + 1) + ".";
    reg(p + "pred.weight", layers_[l].pred.weight);
    reg(p + "pred.bias", layers_[l].pred.bias);
    reg(p + "pred.ln.gain", layers_[l].pred.ln.gain);
    reg(p + "pred.ln.bias", layers_[l].pred.ln.bias);
  }
  reg("head.weight", head_.weight);
  reg("head.bias", head_.bias);
}

int64_t Model::parameter_count() const {
  int64_t n = 0;
  for (const auto& p : params_) n += p.tensor.size();
  return n;
}

Model Model::with_config(const ModelConfig& cfg) const {
  cfg.validate();
  Model m = Model::build(cfg, /*seed=*/0);
  require(m.params_.size() == params_.size(),
          "with_config: parameter sets are incompatible");
  for (size_t i = 0; i < params_.size(); ++i) {
    require(m.params_[i].name == params_[i].name &&
                m.params_[i].tensor.shape() == params_[i].tensor.shape(),
            "with_config: parameter mismatch at " + params_[i].name);
    std::memcpy(m.params_[i].tensor.data(), params_[i].tensor.data(),
                sizeof(float) * static_cast<size_t>(params_[i].tensor.size()));
  }
  return m;
}

// ---- forward ---------------------------------------------------------------

Tensor Model::forward(const Tensor& images, ForwardTrace* trace) const {
  require(images.defined() && images.ndim() == 4, "forward: images must be (B, c, H, W)");
  require(images.dim(1) == cfg_.image_channels, "forward: channel count mismatch");
  auto record = [trace](const std::string& name, const Tensor& t) {
    if (trace) trace->layers.emplace_back(name, t);
  };

  GroupFeatureMap f = lift_correlate(images, lift_, cfg_.boundary);
  f.values = relu(f.values);
  record("lift", f.values);
  for (size_t b = 0; b < blocks_.size(); ++b) {
    f = residual_block(f, blocks_[b]);
    record("block" + std::to_string(b + 1), f.values);
  }
  CapsuleField caps = primary_capsules(f, primary_, cfg_.primary_types, cfg_.primary_dim);
  record("primary", caps.values);
  for (size_t l = 0; l < layers_.size(); ++l) {
    const RoutingLayer& rl = layers_[l];
    PredictionField pred = predict(caps, rl.pred, rl.icr.use_pred_layernorm);
    record("caps" + std::to_string(l + 1) + ".pred", pred.values);
    RoutingState st = icr_weights(pred, rl.icr);
    record("caps" + std::to_string(l + 1) + ".weights", st.weights);
    caps = route(pred, st);
    record("caps" + std::to_string(l + 1) + ".out", caps.values);
  }
  Tensor logits = project_logits(caps.values, head_);
  logits.assert_finite("logits (forward aborted)");
  record("logits", logits);
  return logits;
}

// ---- optimizer ----------------------------------------------------------------

float one_cycle_lr(int64_t step, int64_t total_steps, const TrainConfig& tc) {
  if (total_steps <= 0) return tc.peak_lr;
  const int64_t warm = std::max<int64_t>(1, static_cast<int64_t>(
                                               std::llround(tc.warmup_frac *
                                                            static_cast<double>(total_steps))));
  if (step < warm)
    return tc.peak_lr * static_cast<float>(step + 1) / static_cast<float>(warm);
  const double t = total_steps == warm
                       ? 1.0
                       : static_cast<double>(step - warm) /
                             static_cast<double>(total_steps - warm);
  const double floor = static_cast<double>(tc.peak_lr) * tc.final_lr_frac;
  return static_cast<float>(floor + (tc.peak_lr - floor) * 0.5 * (1.0 + std::cos(M_PI * t)));
}

AdamW::AdamW(std::vector<NamedParam>& params, float beta1, float beta2, float eps)
    : params_(&params), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (auto& p : params) {
    m_.push_back(Tensor::zeros(p.tensor.shape()));
    v_.push_back(Tensor::zeros(p.tensor.shape()));
  }
}

void AdamW::zero_grad() {
  for (auto& p : *params_) p.tensor.zero_grad();
}

void AdamW::step(float lr, float weight_decay) {
  ++t_;
  const double b1 = beta1_, b2 = beta2_;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const double decay = 1.0 - static_cast<double>(lr) * weight_decay;
  for (size_t i = 0; i < params_->size(); ++i) {
    Tensor& p = (*params_)[i].tensor;
    const float* g = p.grad();  // zero buffer when no gradient reached it
    float* pv = p.data();
    float* mv = m_[i].data();
    float* vv = v_[i].data();
    for (int64_t t = 0; t < p.size(); ++t) {
      const double gd = g[t];
      const double m = b1 * mv[t] + (1.0 - b1) * gd;
      const double v = b2 * vv[t] + (1.0 - b2) * gd * gd;
      mv[t] = static_cast<float>(m);
      vv[t] = static_cast<float>(v);
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      pv[t] = static_cast<float>(static_cast<double>(pv[t]) * decay -
                                 lr * mhat / (std::sqrt(vhat) + eps_));
    }
  }
}

float train_step(Model& m, AdamW& opt, const Tensor& images,
                 const std::vector<int>& labels, float lr, float weight_decay) {
  GradTape tape;
  Tensor logits = m.forward(images);
  Tensor loss = cross_entropy(logits, labels);
  if (!std::isfinite(loss.item()))
    throw std::runtime_error("train_step: non-finite loss");
  opt.zero_grad();
  tape.backward(loss);
  opt.step(lr, weight_decay);
  return loss.item();
}

// ---- evaluation -----------------------------------------------------------------

Tensor gather_batch(const Tensor& images, const std::vector<int64_t>& idx) {
  std::vector<int64_t> shape = images.shape();
  shape[0] = static_cast<int64_t>(idx.size());
  Tensor out = Tensor::zeros(shape);
  const int64_t block = images.size() / images.dim(0);
  for (size_t i = 0; i < idx.size(); ++i) {
    std::memcpy(out.data() + static_cast<int64_t>(i) * block,
                images.data() + idx[i] * block,
                sizeof(float) * static_cast<size_t>(block));
  }
  return out;
}

EvalResult evaluate(const Model& m, const Dataset& data, int batch_size) {
  const int64_t n = data.images.dim(0);
  require(n > 0, "evaluate: empty dataset");
  const int C = m.config().class_count;
  EvalResult r;
  r.per_class_accuracy.assign(static_cast<size_t>(C), 0.0);
  std::vector<int64_t> class_total(static_cast<size_t>(C), 0);
  int64_t correct = 0;
  double loss_sum = 0.0;
  for (int64_t start = 0; start < n; start += batch_size) {
    const int64_t bs = std::min<int64_t>(batch_size, n - start);
    std::vector<int64_t> idx(static_cast<size_t>(bs));
    std::iota(idx.begin(), idx.end(), start);
    Tensor batch = gather_batch(data.images, idx);
    std::vector<int> labels(data.labels.begin() + start, data.labels.begin() + start + bs);
    Tensor logits = m.forward(batch);
    loss_sum += static_cast<double>(cross_entropy(logits, labels).item()) *
                static_cast<double>(bs);
    const float* z = logits.data();
    for (int64_t b = 0; b < bs; ++b) {
      int best = 0;
      for (int c = 1; c < C; ++c)
        if (z[b * C + c] > z[b * C + best]) best = c;
      const int y = labels[static_cast<size_t>(b)];
      ++class_total[static_cast<size_t>(y)];
      if (best == y) {
        ++correct;
        r.per_class_accuracy[static_cast<size_t>(y)] += 1.0;
      }
    }
  }
  for (int c = 0; c < C; ++c) {
    if (class_total[static_cast<size_t>(c)] > 0)
      r.per_class_accuracy[static_cast<size_t>(c)] /=
          static_cast<double>(class_total[static_cast<size_t>(c)]);
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  r.mean_loss = loss_sum / static_cast<double>(n);
  return r;
}

// ---- training loop ----------------------------------------------------------------

TrainResult train_model(Model& m, const Dataset& train,
                        const std::array<Dataset, 5>& suites,
                        const TrainConfig& tc, const TransformSpec& augment,
                        const std::string& checkpoint_path,
                        const std::string& metrics_path, std::ostream* progress) {
  tc.validate();
  const int64_t n = train.images.dim(0);
  const int64_t steps_per_epoch = (n + tc.batch_size - 1) / tc.batch_size;
  const int64_t total_steps = steps_per_epoch * tc.epochs;
  AdamW opt(m.parameters());
  TrainResult res;
  std::ofstream metrics;
  if (!metrics_path.empty()) {
    metrics.open(metrics_path);
    if (!metrics) throw std::runtime_error("cannot write metrics file: " + metrics_path);
  }
  auto emit_epoch = [&](int epoch, double train_loss) {
    json rec;
    rec["epoch"] = epoch;
    rec["train_loss"] = train_loss;
    json accs = json::array();
    for (int s = 0; s < 5; ++s) {
      EvalResult er = evaluate(m, suites[static_cast<size_t>(s)], tc.batch_size);
      res.final_suite_accuracy[static_cast<size_t>(s)] = er.accuracy;
      accs.push_back(er.accuracy);
    }
    rec["suite_accuracy"] = accs;
    const std::string line = rec.dump();
    res.metric_lines.push_back(line);
    if (metrics.is_open()) metrics << line << "\n" << std::flush;
    if (progress) *progress << line << std::endl;
  };

  int64_t step = 0;
  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    Rng order_rng(tc.seed * 0x9e3779b97f4a7c15ull + static_cast<uint64_t>(epoch));
    Rng aug_rng(tc.seed * 0xbf58476d1ce4e5b9ull + static_cast<uint64_t>(epoch));
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    for (int64_t i = n - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)],
                order[static_cast<size_t>(uniform_int(order_rng, 0, i))]);
    double loss_sum = 0.0;
    int64_t seen = 0;
    for (int64_t start = 0; start < n; start += tc.batch_size) {
      const int64_t bs = std::min<int64_t>(tc.batch_size, n - start);
      std::vector<int64_t> idx(order.begin() + start, order.begin() + start + bs);
      Tensor batch = gather_batch(train.images, idx);
      // per-epoch resampled geometric augmentation
      const int64_t block = batch.size() / bs;
      for (int64_t b = 0; b < bs; ++b) {
        Tensor t = apply_transform(slice_image(batch, b), augment, aug_rng);
        std::memcpy(batch.data() + b * block, t.data(),
                    sizeof(float) * static_cast<size_t>(block));
      }
      std::vector<int> labels(static_cast<size_t>(bs));
      for (int64_t b = 0; b < bs; ++b)
        labels[static_cast<size_t>(b)] = train.labels[static_cast<size_t>(idx[static_cast<size_t>(b)])];
      const float lr = one_cycle_lr(step, total_steps, tc);
      const float loss = train_step(m, opt, batch, labels, lr, tc.weight_decay);
      loss_sum += static_cast<double>(loss) * static_cast<double>(bs);
      seen += bs;
      ++step;
    }
    res.final_train_loss = loss_sum / static_cast<double>(seen);
    emit_epoch(epoch, res.final_train_loss);
    if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path, m, epoch, tc.seed);
  }
  if (tc.epochs == 0) {
    if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path, m, 0, tc.seed);
    emit_epoch(0, 0.0);
  }
  return res;
}

// ---- checkpoint ---------------------------------------------------------------------

static json config_to_json(const ModelConfig& c) {
  json j;
  j["image_channels"] = c.image_channels;
  j["image_size"] = c.image_size;
  j["block_widths"] = c.block_widths;
  j["block_strides"] = c.block_strides;
  j["primary_types"] = c.primary_types;
  j["primary_dim"] = c.primary_dim;
  json hidden = json::array();
  for (auto& [nt, nd] : c.hidden_capsules) hidden.push_back({{"types", nt}, {"dim", nd}});
  j["hidden_capsules"] = hidden;
  j["class_count"] = c.class_count;
  j["class_dim"] = c.class_dim;
  json routing = json::array();
  for (auto& rc : c.routing)
    routing.push_back({{"k", rc.k},
                       {"num_iter", rc.num_iter},
                       {"epsilon", rc.epsilon},
                       {"use_pred_layernorm", rc.use_pred_layernorm}});
  j["routing"] = routing;
  j["primary_layernorm"] = c.primary_layernorm;
  j["boundary"] = c.boundary == Boundary::kCircular ? "circular" : "zero";
  j["desk_scale"] = c.desk_scale;
  j["lift_kernel"] = c.lift_kernel;
  j["block_kernel"] = c.block_kernel;
  j["pred_kernel"] = c.pred_kernel;
  return j;
}

static ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.image_channels = j.at("image_channels").get<int>();
  c.image_size = j.at("image_size").get<int>();
  c.block_widths = j.at("block_widths").get<std::vector<int>>();
  c.block_strides = j.at("block_strides").get<std::vector<int>>();
  c.primary_types = j.at("primary_types").get<int>();
  c.primary_dim = j.at("primary_dim").get<int>();
  c.hidden_capsules.clear();
  for (auto& h : j.at("hidden_capsules"))
    c.hidden_capsules.emplace_back(h.at("types").get<int>(), h.at("dim").get<int>());
  c.class_count = j.at("class_count").get<int>();
  c.class_dim = j.at("class_dim").get<int>();
  c.routing.clear();
  for (auto& r : j.at("routing")) {
    ICRConfig rc;
    rc.k = r.at("k").get<int>();
    rc.num_iter = r.at("num_iter").get<int>();
    rc.epsilon = r.at("epsilon").get<float>();
    rc.use_pred_layernorm = r.at("use_pred_layernorm").get<bool>();
    c.routing.push_back(rc);
  }
  c.primary_layernorm = j.at("primary_layernorm").get<bool>();
  c.boundary = j.at("boundary").get<std::string>() == "circular" ? Boundary::kCircular
                                                                 : Boundary::kZero;
  c.desk_scale = j.at("desk_scale").get<bool>();
  c.lift_kernel = j.at("lift_kernel").get<int>();
  c.block_kernel = j.at("block_kernel").get<int>();
  c.pred_kernel = j.at("pred_kernel").get<int>();
  return c;
}

std::string model_config_json(const ModelConfig& cfg) {
  return config_to_json(cfg).dump(2);
}

ModelConfig parse_model_config_json(const std::string& text) {
  return config_from_json(json::parse(text));
}

void save_checkpoint(const std::string& path, const Model& m, int epoch,
                     uint64_t seed) {
  json j;
  j["version"] = "icr-checkpoint-v1";
  j["config"] = config_to_json(m.config());
  j["seed"] = seed;
  j["epoch"] = epoch;
  json tensors = json::array();
  uint64_t offset = 0;
  for (const auto& p : m.parameters()) {
    tensors.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", offset}});
    offset += static_cast<uint64_t>(p.tensor.size()) * sizeof(float);
  }
  j["tensors"] = tensors;
  const std::string header = j.dump();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write checkpoint: " + path);
  const char magic[8] = {'I', 'C', 'R', 'C', 'K', 'P', 'T', '1'};
  f.write(magic, 8);
  const uint64_t hlen = header.size();
  f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  f.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& p : m.parameters()) {
    f.write(reinterpret_cast<const char*>(p.tensor.data()),
            static_cast<std::streamsize>(p.tensor.size() * sizeof(float)));
  }
  if (!f) throw std::runtime_error("checkpoint write failed: " + path);
}

Model load_checkpoint(const std::string& path, int* epoch, uint64_t* seed) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, "ICRCKPT1", 8) != 0)
    throw std::runtime_error("bad checkpoint magic: " + path);
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string header(hlen, '\0');
  f.read(header.data(), static_cast<std::streamsize>(hlen));
  if (!f) throw std::runtime_error("truncated checkpoint header: " + path);
  json j = json::parse(header);
  if (j.at("version").get<std::string>() != "icr-checkpoint-v1")
    throw std::runtime_error("unsupported checkpoint version in " + path);
  Model m = Model::build(config_from_json(j.at("config")), /*seed=*/0);
  if (epoch) *epoch = j.at("epoch").get<int>();
  if (seed) *seed = j.at("seed").get<uint64_t>();
  auto& params = m.parameters();
  size_t i = 0;
  for (auto& t : j.at("tensors")) {
    require(i < params.size(), "checkpoint: too many tensors");
    const std::string name = t.at("name").get<std::string>();
    require(params[i].name == name, "checkpoint: unexpected tensor " + name);
    const auto shape = t.at("shape").get<std::vector<int64_t>>();
    require(params[i].tensor.shape() == shape, "checkpoint: shape mismatch for " + name);
    f.read(reinterpret_cast<char*>(params[i].tensor.data()),
           static_cast<std::streamsize>(params[i].tensor.size() * sizeof(float)));
    if (!f) throw std::runtime_error("truncated checkpoint payload: " + path);
    ++i;
  }
  require(i == params.size(), "checkpoint: missing tensors");
  return m;
}

// ---- equivariance audit ----------------------------------------------------------

bool AuditReport::pass(double threshold) const {
  for (const auto& [name, err] : layer_errors)
    if (!(err < threshold)) return false;
  return !layer_errors.empty();
}

AuditReport audit_equivariance(const Model& m, const Tensor& images,
                               const std::vector<P4Element>& gs) {
  const Boundary mode = m.config().boundary;
  ForwardTrace base;
  m.forward(images, &base);
  AuditReport report;
  std::vector<double> errs(base.layers.size(), 0.0);
  for (const P4Element& g : gs) {
    Tensor moved = act_planar(images, g, mode);
    ForwardTrace got;
    m.forward(moved, &got);
    for (size_t i = 0; i < base.layers.size(); ++i) {
      const auto& [name, ref] = base.layers[i];
      Tensor expected = name == "logits" ? ref : act_group(ref, g, mode);
      const Tensor& actual = got.layers[i].second;
      double max_mag = 0.0, max_dev = 0.0;
      const float* e = expected.data();
      const float* a = actual.data();
      for (int64_t t = 0; t < expected.size(); ++t) {
        max_mag = std::max(max_mag, std::abs(static_cast<double>(e[t])));
        max_dev = std::max(max_dev, std::abs(static_cast<double>(a[t]) - e[t]));
      }
      errs[i] = std::max(errs[i], max_dev / std::max(max_mag, 1e-12));
    }
  }
  for (size_t i = 0; i < base.layers.size(); ++i)
    report.layer_errors.emplace_back(base.layers[i].first, errs[i]);
  return report;
}

}  // namespace icr
