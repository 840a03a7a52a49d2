#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "icr/network.hpp"
#include "oracles.hpp"

using namespace icr;

namespace {

ModelConfig tiny_config(int image_size = 12) {
  ModelConfig c;
  c.image_channels = 1;
  c.image_size = image_size;
  c.block_widths = {4, 4, 6, 6, 6, 8, 8};
  c.block_strides = {1, 1, 2, 1, 2, 1, 1};
  c.primary_types = 4;
  c.primary_dim = 4;
  c.hidden_capsules = {{4, 4}};
  c.class_count = 4;
  c.class_dim = 4;
  c.routing.assign(2, ICRConfig{2, 1, 1e-8f, true});
  return c;
}

}  // namespace

TEST_CASE("desk config builds and runs forward on 16x16 input") {
  Model m = Model::build(ModelConfig::desk(), 1);
  CHECK(m.parameter_count() > 0);
  Rng rng(2);
  Tensor x = rand_uniform({2, 1, 16, 16}, 0.0f, 1.0f, rng);
  Tensor logits = m.forward(x);
  CHECK(logits.shape() == std::vector<int64_t>{2, 4});
  logits.assert_finite("logits");
}

TEST_CASE("paper configs build with a reported parameter count") {
  Model m = Model::build(ModelConfig::paper_cifar10(), 1);
  const int64_t n = m.parameter_count();
  MESSAGE("paper cifar10 parameter count: ", n);
  CHECK(n > 1000000);
  ModelConfig f = ModelConfig::paper_fashion_mnist();
  CHECK(f.routing[0].k == 10);
  CHECK(f.routing[0].num_iter == 2);
  ModelConfig h = ModelConfig::paper_cifar100();
  CHECK(h.routing[0].k == 5);
  CHECK(h.class_count == 100);
  // the paper-scale capsule geometry is representable
  ModelConfig t = ModelConfig::paper_cifar10();
  CHECK(t.primary_types == 32);
  CHECK(t.primary_dim == 16);
}

TEST_CASE("two builds from the same seed are bit-identical") {
  Model a = Model::build(tiny_config(), 77);
  Model b = Model::build(tiny_config(), 77);
  REQUIRE(a.parameters().size() == b.parameters().size());
  for (size_t i = 0; i < a.parameters().size(); ++i) {
    const Tensor& ta = a.parameters()[i].tensor;
    const Tensor& tb = b.parameters()[i].tensor;
    REQUIRE(ta.size() == tb.size());
    CHECK(std::memcmp(ta.data(), tb.data(),
                      sizeof(float) * static_cast<size_t>(ta.size())) == 0);
  }
}

TEST_CASE("config validation rejects malformed setups") {
  ModelConfig c = tiny_config();
  c.block_widths.pop_back();
  CHECK_THROWS_AS(Model::build(c, 1), std::invalid_argument);
  c = tiny_config();
  c.routing[0].k = 4;  // N_in - 1 == 3
  CHECK_THROWS_AS(Model::build(c, 1), std::invalid_argument);
  c = tiny_config();
  c.routing.pop_back();
  CHECK_THROWS_AS(Model::build(c, 1), std::invalid_argument);
}

TEST_CASE("zero-weight model with head bias only produces the bias logits") {
  Model m = Model::build(tiny_config(), 5);
  for (auto& p : m.parameters()) {
    std::fill(p.tensor.values().begin(), p.tensor.values().end(), 0.0f);
  }
  // head bias drives the logits straight through the routed zero capsules
  float* hb = nullptr;
  for (auto& p : m.parameters())
    if (p.name == "head.bias") hb = p.tensor.data();
  REQUIRE(hb != nullptr);
  const float bias[4] = {0.3f, -0.1f, 0.7f, 0.2f};
  for (int c = 0; c < 4; ++c) hb[c] = bias[c];
  Rng rng(6);
  Tensor x = rand_uniform({2, 1, 12, 12}, 0.0f, 1.0f, rng);
  Tensor logits = m.forward(x);
  for (int b = 0; b < 2; ++b)
    for (int c = 0; c < 4; ++c)
      CHECK(logits.at({b, c}) == doctest::Approx(bias[c]).epsilon(1e-6));
}

TEST_CASE("audit-mode logits are invariant to the four rotations") {
  ModelConfig cfg = tiny_config(12).audit_variant();
  Model m = Model::build(cfg, 9);
  Rng rng(10);
  Tensor x = rand_uniform({4, 1, 12, 12}, 0.0f, 1.0f, rng);
  Tensor base = m.forward(x);
  for (int r = 1; r < 4; ++r) {
    Tensor moved = m.forward(act_planar(x, P4Element{r, 0, 0}, Boundary::kCircular));
    double mag = 0.0, dev = 0.0;
    for (int64_t i = 0; i < base.size(); ++i) {
      mag = std::max(mag, std::abs(static_cast<double>(base.data()[i])));
      dev = std::max(dev, std::abs(static_cast<double>(moved.data()[i]) - base.data()[i]));
    }
    CHECK(dev / std::max(mag, 1e-12) < 1e-4);
    for (int b = 0; b < 4; ++b) {
      int a0 = 0, a1 = 0;
      for (int c = 1; c < 4; ++c) {
        if (base.at({b, c}) > base.at({b, a0})) a0 = c;
        if (moved.at({b, c}) > moved.at({b, a1})) a1 = c;
      }
      CHECK(a0 == a1);
    }
  }
}

TEST_CASE("equivariance audit passes on every traced layer") {
  ModelConfig cfg = tiny_config(12).audit_variant();
  Model m = Model::build(cfg, 11);
  Rng rng(12);
  Tensor x = rand_uniform({1, 1, 12, 12}, 0.0f, 1.0f, rng);
  std::vector<P4Element> gs;
  for (int r = 0; r < 4; ++r) gs.push_back({r, 0, 0});
  for (int t = 0; t < 4; ++t)
    gs.push_back({static_cast<int>(uniform_int(rng, 0, 3)),
                  static_cast<int>(uniform_int(rng, 0, 11)),
                  static_cast<int>(uniform_int(rng, 0, 11))});
  AuditReport rep = audit_equivariance(m, x, gs);
  REQUIRE(!rep.layer_errors.empty());
  for (const auto& [name, err] : rep.layer_errors) {
    INFO("layer ", name, " err ", err);
    CHECK(err < 1e-4);
  }
  CHECK(rep.pass(1e-4));
}

TEST_CASE("end-to-end gradients match finite differences on sampled parameters") {
  ModelConfig cfg = tiny_config(8);
  cfg.routing.assign(2, ICRConfig{2, 1, 1e-8f, true});
  Model m = Model::build(cfg, 13);
  Rng rng(14);
  Tensor x = rand_uniform({2, 1, 8, 8}, 0.0f, 1.0f, rng);
  std::vector<int> labels = {1, 3};
  // a representative parameter subset, a few coordinates each
  std::vector<Tensor> subset;
  for (auto& p : m.parameters()) {
    if (p.name == "lift.weight" || p.name == "block3.conv1.weight" ||
        p.name == "block7.conv2.bias" || p.name == "primary.weight" ||
        p.name == "primary.ln.gain" || p.name == "caps1.pred.weight" ||
        p.name == "caps2.pred.bias" || p.name == "head.weight")
      subset.push_back(p.tensor);
  }
  REQUIRE(subset.size() == 8);
  auto res = oracles::finite_difference_check_ce(
      subset, [&] { return m.forward(x); }, labels, 1e-3, /*max_coords=*/4,
      /*consistency_gate=*/5e-4);
  CHECK(res.checked >= 16);  // the gate may drop noise-dominated coordinates
  CHECK(res.max_rel_err < 1e-3);
  CHECK(res.max_scale_err < 1e-3);
}

TEST_CASE("train_step with zero learning rate leaves parameters unchanged") {
  Model m = Model::build(tiny_config(), 15);
  std::vector<std::vector<float>> before;
  for (auto& p : m.parameters())
    before.emplace_back(p.tensor.data(), p.tensor.data() + p.tensor.size());
  AdamW opt(m.parameters());
  Rng rng(16);
  Tensor x = rand_uniform({4, 1, 12, 12}, 0.0f, 1.0f, rng);
  train_step(m, opt, x, {0, 1, 2, 3}, /*lr=*/0.0f, /*weight_decay=*/0.01f);
  for (size_t i = 0; i < m.parameters().size(); ++i) {
    const Tensor& t = m.parameters()[i].tensor;
    CHECK(std::memcmp(t.data(), before[i].data(),
                      sizeof(float) * static_cast<size_t>(t.size())) == 0);
  }
}

TEST_CASE("weight-decay-only step shrinks parameters by exactly (1 - lr wd)") {
  Model m = Model::build(tiny_config(), 17);
  std::vector<std::vector<float>> before;
  for (auto& p : m.parameters())
    before.emplace_back(p.tensor.data(), p.tensor.data() + p.tensor.size());
  AdamW opt(m.parameters());
  opt.zero_grad();  // inject zero gradients
  const float lr = 0.01f, wd = 0.1f;
  opt.step(lr, wd);
  const double decay = 1.0 - static_cast<double>(lr) * wd;
  for (size_t i = 0; i < m.parameters().size(); ++i) {
    const Tensor& t = m.parameters()[i].tensor;
    for (int64_t j = 0; j < t.size(); ++j) {
      const float want = static_cast<float>(static_cast<double>(before[i][static_cast<size_t>(j)]) * decay);
      CHECK(t.data()[j] == want);
    }
  }
}

TEST_CASE("one-cycle schedule warms up then decays to the floor") {
  TrainConfig tc;
  tc.peak_lr = 1.0f;
  tc.warmup_frac = 0.3f;
  tc.final_lr_frac = 0.01f;
  const int64_t total = 100;
  CHECK(one_cycle_lr(0, total, tc) < 0.05f);
  CHECK(one_cycle_lr(29, total, tc) == doctest::Approx(1.0f));
  float prev = 2.0f;
  for (int64_t s = 30; s < total; s += 10) {
    const float lr = one_cycle_lr(s, total, tc);
    CHECK(lr <= prev);
    prev = lr;
  }
  CHECK(one_cycle_lr(total - 1, total, tc) < 0.03f);
}

TEST_CASE("a single batch can be overfit within 200 steps") {
  ModelConfig cfg = tiny_config(12);
  Model m = Model::build(cfg, 19);
  AdamW opt(m.parameters());
  Dataset ds = gen_synthetic(4, 2, 12, 20);
  Tensor batch = ds.images.clone();
  std::vector<int> labels = ds.labels;
  float loss = 1e9f;
  for (int step = 0; step < 200; ++step)
    loss = train_step(m, opt, batch, labels, 5e-3f, 0.0f);
  CHECK(loss < 0.05f);
}

TEST_CASE("evaluate: perfect and chance-level accuracy, recount oracle") {
  ModelConfig cfg = tiny_config(12);
  Model m = Model::build(cfg, 21);
  Dataset test = gen_synthetic(4, 128, 12, 22);

  // random-looking logits from the fresh model sit near chance on balanced data
  EvalResult chance = evaluate(m, test, 64);
  CHECK(std::abs(chance.accuracy - 0.25) < 0.12);

  // recount oracle: accuracy equals a direct recount of argmax matches
  int64_t correct = 0;
  for (int64_t i = 0; i < test.images.dim(0); ++i) {
    std::vector<int64_t> one{i};
    Tensor logits = m.forward(gather_batch(test.images, one));
    int best = 0;
    for (int c = 1; c < 4; ++c)
      if (logits.at({0, c}) > logits.at({0, best})) best = c;
    if (best == test.labels[static_cast<size_t>(i)]) ++correct;
  }
  CHECK(chance.accuracy ==
        doctest::Approx(static_cast<double>(correct) / test.images.dim(0)).epsilon(1e-9));
  CHECK(chance.per_class_accuracy.size() == 4);

  // a model overfit on the evaluation set itself scores perfectly
  AdamW opt(m.parameters());
  Dataset small = gen_synthetic(4, 8, 12, 23);
  float loss = 1.0f;
  for (int step = 0; step < 250 && loss > 0.01f; ++step)
    loss = train_step(m, opt, small.images, small.labels, 5e-3f, 0.0f);
  EvalResult perfect = evaluate(m, small, 16);
  CHECK(perfect.accuracy == 1.0);
  CHECK(perfect.mean_loss < 0.05);
}

TEST_CASE("loss decreases over the first 50 steps in at least 9 of 10 seeds") {
  Dataset train = gen_synthetic(4, 64, 12, 30);
  int decreased = 0;
  for (uint64_t seed = 1; seed <= 10; ++seed) {
    ModelConfig cfg = tiny_config(12);
    Model m = Model::build(cfg, seed);
    AdamW opt(m.parameters());
    Rng order(seed);
    double first = 0.0, last = 0.0;
    for (int step = 0; step < 50; ++step) {
      std::vector<int64_t> idx(16);
      std::vector<int> labels(16);
      for (int b = 0; b < 16; ++b) {
        idx[static_cast<size_t>(b)] = uniform_int(order, 0, train.images.dim(0) - 1);
        labels[static_cast<size_t>(b)] = train.labels[static_cast<size_t>(idx[static_cast<size_t>(b)])];
      }
      const float loss = train_step(m, opt, gather_batch(train.images, idx), labels,
                                    3e-3f, 1e-2f);
      if (step < 10) first += loss;
      if (step >= 40) last += loss;
    }
    if (last < first) ++decreased;
  }
  CHECK(decreased >= 9);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  namespace fs = std::filesystem;
  fs::create_directories("tmp_test_network");
  const std::string path = "tmp_test_network/ckpt.icr";
  Model m = Model::build(tiny_config(), 31);
  // perturb away from the seeded init so the test is not trivial
  AdamW opt(m.parameters());
  Dataset ds = gen_synthetic(4, 4, 12, 32);
  train_step(m, opt, ds.images, ds.labels, 1e-3f, 1e-2f);
  save_checkpoint(path, m, /*epoch=*/3, /*seed=*/31);
  int epoch = -1;
  uint64_t seed = 0;
  Model back = load_checkpoint(path, &epoch, &seed);
  CHECK(epoch == 3);
  CHECK(seed == 31);
  REQUIRE(back.parameters().size() == m.parameters().size());
  for (size_t i = 0; i < m.parameters().size(); ++i) {
    const Tensor& a = m.parameters()[i].tensor;
    const Tensor& b = back.parameters()[i].tensor;
    CHECK(std::memcmp(a.data(), b.data(),
                      sizeof(float) * static_cast<size_t>(a.size())) == 0);
  }
  // config survives the round trip
  CHECK(model_config_json(back.config()) == model_config_json(m.config()));
  CHECK_THROWS_AS(load_checkpoint("tmp_test_network/missing.icr"), std::runtime_error);
}

TEST_CASE("identical seeds and configs give identical metrics logs") {
  Dataset train = gen_synthetic(4, 16, 12, 40);
  Dataset test = gen_synthetic(4, 8, 12, 41);
  auto suites = make_test_suites(test, TestSuiteSpec::standard(), 7);
  TransformSpec augment;
  augment.max_translation = 2;
  augment.rot_lo = -180.0f;
  augment.rot_hi = 180.0f;
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 16;
  tc.seed = 5;
  auto run = [&] {
    Model m = Model::build(tiny_config(12), tc.seed);
    return train_model(m, train, suites, tc, augment, "", "", nullptr);
  };
  TrainResult a = run();
  TrainResult b = run();
  REQUIRE(a.metric_lines.size() == b.metric_lines.size());
  for (size_t i = 0; i < a.metric_lines.size(); ++i)
    CHECK(a.metric_lines[i] == b.metric_lines[i]);
  CHECK(a.final_train_loss == b.final_train_loss);
}

TEST_CASE("forward aborts on non-finite logits") {
  Model m = Model::build(tiny_config(12), 43);
  for (auto& p : m.parameters()) {
    if (p.name == "head.bias") p.tensor.data()[0] = std::nanf("");
  }
  Rng rng(44);
  Tensor x = rand_uniform({1, 1, 12, 12}, 0.0f, 1.0f, rng);
  CHECK_THROWS_AS(m.forward(x), std::runtime_error);
}
