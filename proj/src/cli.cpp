#include "icr/cli.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

namespace icr {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct DataOpts {
  std::string dataset = "synth";
  std::string data_dir = ".";
  int train_count = 2000;
  int test_count = 400;
  int size = 16;
  uint64_t data_seed = 77;
};

void add_data_opts(CLI::App* cmd, DataOpts& d) {
  cmd->add_option("--dataset", d.dataset, "synth | idx | cifar10 | cifar100")
      ->check(CLI::IsMember({"synth", "idx", "cifar10", "cifar100"}));
  cmd->add_option("--data-dir", d.data_dir, "directory with dataset files");
  cmd->add_option("--train-count", d.train_count, "synthetic train images");
  cmd->add_option("--test-count", d.test_count, "synthetic test images");
  cmd->add_option("--size", d.size, "synthetic image size");
  cmd->add_option("--data-seed", d.data_seed, "synthetic generator seed");
}

Dataset load_train_split(const DataOpts& d) {
  if (d.dataset == "synth") {
    return gen_synthetic(4, d.train_count / 4, d.size, d.data_seed);
  }
  if (d.dataset == "idx") {
    return load_idx(d.data_dir + "/train-images.idx", d.data_dir + "/train-labels.idx");
  }
  if (d.dataset == "cifar10") {
    std::vector<Dataset> parts;
    for (int i = 1; i <= 5; ++i)
      parts.push_back(load_cifar_bin(d.data_dir + "/data_batch_" + std::to_string(i) + ".bin",
                                     CifarVariant::kCifar10));
    return concat_datasets(parts);
  }
  return load_cifar_bin(d.data_dir + "/train.bin", CifarVariant::kCifar100Fine);
}

Dataset load_test_split(const DataOpts& d) {
  if (d.dataset == "synth") {
    return gen_synthetic(4, d.test_count / 4, d.size, d.data_seed + 1);
  }
  if (d.dataset == "idx") {
    return load_idx(d.data_dir + "/test-images.idx", d.data_dir + "/test-labels.idx");
  }
  if (d.dataset == "cifar10") {
    return load_cifar_bin(d.data_dir + "/test_batch.bin", CifarVariant::kCifar10);
  }
  return load_cifar_bin(d.data_dir + "/test.bin", CifarVariant::kCifar100Fine);
}

ModelConfig preset_config(const std::string& preset) {
  if (preset == "desk") return ModelConfig::desk();
  if (preset == "cifar10") return ModelConfig::paper_cifar10();
  if (preset == "cifar100") return ModelConfig::paper_cifar100();
  if (preset == "fashion") return ModelConfig::paper_fashion_mnist();
  throw std::runtime_error("unknown preset: " + preset);
}

// Config files come in two forms: a JSON object with "model"/"train"
// sections, or flat key=value lines for the training knobs.
void apply_config_file(const std::string& path, ModelConfig* mc, TrainConfig* tc) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  std::string text = ss.str();
  size_t first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    json j = json::parse(text);
    if (j.contains("model")) *mc = parse_model_config_json(j.at("model").dump());
    if (j.contains("train")) {
      const json& t = j.at("train");
      if (t.contains("epochs")) tc->epochs = t.at("epochs").get<int>();
      if (t.contains("batch_size")) tc->batch_size = t.at("batch_size").get<int>();
      if (t.contains("peak_lr")) tc->peak_lr = t.at("peak_lr").get<float>();
      if (t.contains("weight_decay")) tc->weight_decay = t.at("weight_decay").get<float>();
      if (t.contains("seed")) tc->seed = t.at("seed").get<uint64_t>();
    }
    return;
  }
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    size_t eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      size_t a = s.find_first_not_of(" \t\r");
      size_t b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key.empty()) continue;
    if (key == "preset") *mc = preset_config(val);
    else if (key == "epochs") tc->epochs = std::stoi(val);
    else if (key == "batch_size") tc->batch_size = std::stoi(val);
    else if (key == "peak_lr") tc->peak_lr = std::stof(val);
    else if (key == "weight_decay") tc->weight_decay = std::stof(val);
    else if (key == "seed") tc->seed = std::stoull(val);
    else if (key == "k") { for (auto& rc : mc->routing) rc.k = std::stoi(val); }
    else if (key == "num_iter") { for (auto& rc : mc->routing) rc.num_iter = std::stoi(val); }
    else throw std::runtime_error("unknown config key: " + key);
  }
}

std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += "\"";
  return out;
}

struct SuiteRow {
  int suite;
  int translation;
  int rotation;
  double accuracy;
  double mean_loss;
};

const int kSuiteTranslation[5] = {0, 2, 2, 2, 2};
const int kSuiteRotation[5] = {0, 30, 60, 90, 180};

void write_eval_outputs(const std::string& out_dir, const std::string& model_name,
                        const std::vector<SuiteRow>& rows, std::ostream& console) {
  // CSV rows follow the suite order of the results tables:
  // (0,0), (2,30), (2,60), (2,90), (2,180)
  std::ostringstream csv;
  csv << "suite,max_translation_px,rotation_range_deg,accuracy,mean_loss\n";
  for (const auto& r : rows) {
    csv << r.suite << "," << r.translation << "," << r.rotation << ","
        << r.accuracy << "," << r.mean_loss << "\n";
  }
  json j;
  j["method"] = csv_quote(model_name);
  json suites = json::array();
  for (const auto& r : rows)
    suites.push_back({{"suite", r.suite},
                      {"max_translation_px", r.translation},
                      {"rotation_range_deg", r.rotation},
                      {"accuracy", r.accuracy},
                      {"mean_loss", r.mean_loss}});
  j["suites"] = suites;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream fcsv(out_dir + "/eval.csv");
    fcsv << csv.str();
    std::ofstream fjson(out_dir + "/eval.json");
    fjson << j.dump(2) << "\n";
  }
  console << csv.str();
}

int cmd_train(const DataOpts& data, const std::string& preset,
              const std::string& config_path, ModelConfig mc, TrainConfig tc,
              uint64_t suite_seed, const std::string& out_dir, bool quiet) {
  (void)preset;
  if (!config_path.empty()) apply_config_file(config_path, &mc, &tc);
  Dataset train = load_train_split(data);
  Dataset test = load_test_split(data);
  mc.class_count = train.class_count;
  mc.image_channels = static_cast<int>(train.images.dim(1));
  mc.image_size = static_cast<int>(train.images.dim(2));
  mc.validate();
  tc.validate();
  auto suites = make_test_suites(test, TestSuiteSpec::standard(), suite_seed);

  Model m = Model::build(mc, tc.seed);
  if (!quiet)
    std::cout << "model parameters: " << m.parameter_count() << std::endl;
  fs::create_directories(out_dir);
  TransformSpec augment;
  augment.max_translation = 2;
  augment.rot_lo = -180.0f;
  augment.rot_hi = 180.0f;
  train_model(m, train, suites, tc, augment, out_dir + "/checkpoint.icr",
              out_dir + "/metrics.jsonl", quiet ? nullptr : &std::cout);
  return 0;
}

int cmd_eval(const std::string& checkpoint, const DataOpts& data,
             uint64_t suite_seed, const std::string& out_dir) {
  Model m = load_checkpoint(checkpoint);
  Dataset test = load_test_split(data);
  require(test.class_count == m.config().class_count,
          "eval: dataset class count does not match the checkpoint");
  auto suites = make_test_suites(test, TestSuiteSpec::standard(), suite_seed);
  std::vector<SuiteRow> rows;
  for (int s = 0; s < 5; ++s) {
    EvalResult er = evaluate(m, suites[static_cast<size_t>(s)]);
    rows.push_back({s + 1, kSuiteTranslation[s], kSuiteRotation[s], er.accuracy,
                    er.mean_loss});
  }
  write_eval_outputs(out_dir, checkpoint, rows, std::cout);
  return 0;
}

int cmd_audit(const std::string& mode, const std::string& checkpoint,
              uint64_t seed, double threshold, int translations) {
  Model audit_model = [&] {
    if (!checkpoint.empty()) {
      Model m = load_checkpoint(checkpoint);
      return m.with_config(m.config().audit_variant());
    }
    require(mode == "exact", "audit: --mode exact or --checkpoint required");
    ModelConfig cfg = ModelConfig::desk().audit_variant();
    return Model::build(cfg, seed);
  }();
  const ModelConfig& cfg = audit_model.config();
  Rng rng(seed + 1);
  Tensor input = rand_uniform({2, cfg.image_channels, cfg.image_size, cfg.image_size},
                              0.0f, 1.0f, rng);
  std::vector<P4Element> gs;
  for (int r = 0; r < 4; ++r) gs.push_back({r, 0, 0});
  for (int t = 0; t < translations; ++t) {
    gs.push_back({static_cast<int>(uniform_int(rng, 0, 3)),
                  static_cast<int>(uniform_int(rng, 0, cfg.image_size - 1)),
                  static_cast<int>(uniform_int(rng, 0, cfg.image_size - 1))});
  }
  AuditReport report = audit_equivariance(audit_model, input, gs);
  for (const auto& [name, err] : report.layer_errors)
    std::cout << "layer " << name << " max_rel_err " << err << "\n";
  const bool ok = report.pass(threshold);
  std::cout << (ok ? "audit PASS" : "audit FAIL") << " (threshold " << threshold
            << ")" << std::endl;
  return ok ? 0 : 1;
}

int cmd_gen_synth(const std::string& out_dir, int train_count, int test_count,
                  int size, uint64_t seed) {
  fs::create_directories(out_dir);
  Dataset train = gen_synthetic(4, train_count / 4, size, seed);
  Dataset test = gen_synthetic(4, test_count / 4, size, seed + 1);
  write_idx_images(out_dir + "/train-images.idx", train.images);
  write_idx_labels(out_dir + "/train-labels.idx", train.labels);
  write_idx_images(out_dir + "/test-images.idx", test.images);
  write_idx_labels(out_dir + "/test-labels.idx", test.labels);
  std::cout << "wrote " << train.images.dim(0) << " train and " << test.images.dim(0)
            << " test images to " << out_dir << std::endl;
  return 0;
}

int cmd_bench_routing(const std::string& out_csv, int sites, uint64_t seed) {
  std::ostringstream csv;
  csv << "n_types,dim,k,num_iter,sites,ms_per_call\n";
  Rng rng(seed);
  for (int N : {4, 8, 16, 32}) {
    for (int k : {1, 3, 5, 10}) {
      if (k > N - 1) continue;
      for (int T : {0, 1, 2, 3}) {
        const int D = 8;
        // sites spread over one out-type and a 4 x s x s grid
        int side = 1;
        while (4 * side * side < sites) ++side;
        Tensor pred = rand_uniform({1, N, 1, D, 4, side, side}, -1.0f, 1.0f, rng);
        ICRConfig cfg{k, T, 1e-8f, false};
        PredictionField pf{pred, Boundary::kCircular};
        const int reps = 5;
        auto t0 = std::chrono::steady_clock::now();
        for (int rep = 0; rep < reps; ++rep) icr_weights(pf, cfg);
        auto t1 = std::chrono::steady_clock::now();
        const double ms =
            std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
        csv << N << "," << D << "," << k << "," << T << "," << 4 * side * side << ","
            << ms << "\n";
      }
    }
  }
  if (!out_csv.empty()) {
    std::ofstream f(out_csv);
    if (!f) throw std::runtime_error("cannot write " + out_csv);
    f << csv.str();
  }
  std::cout << csv.str();
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"p4-equivariant capsule network with iterative collaborative routing"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "train a model and log metrics");
  DataOpts train_data;
  add_data_opts(train, train_data);
  std::string preset = "desk", config_path, out_dir = "runs/latest";
  uint64_t suite_seed = 7;
  bool quiet = false;
  TrainConfig tc;
  train->add_option("--preset", preset, "desk | cifar10 | cifar100 | fashion");
  train->add_option("--config", config_path, "JSON or key=value config file");
  train->add_option("--out", out_dir, "output directory");
  train->add_option("--suite-seed", suite_seed, "test-suite transform seed");
  train->add_option("--epochs", tc.epochs);
  train->add_option("--batch-size", tc.batch_size);
  train->add_option("--lr", tc.peak_lr, "peak learning rate");
  train->add_option("--weight-decay", tc.weight_decay);
  train->add_option("--seed", tc.seed);
  train->add_flag("--quiet", quiet);
  int k_override = 0, iter_override = -1;
  train->add_option("--k", k_override, "override routing k for all layers");
  train->add_option("--num-iter", iter_override, "override routing iterations");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the 5 suites");
  DataOpts eval_data;
  add_data_opts(eval, eval_data);
  std::string checkpoint, eval_out;
  uint64_t eval_suite_seed = 7;
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--suite-seed", eval_suite_seed);
  eval->add_option("--out", eval_out, "directory for eval.csv / eval.json");

  // audit
  auto* audit = app.add_subcommand("audit", "equivariance audit");
  std::string audit_mode = "exact", audit_checkpoint;
  uint64_t audit_seed = 3;
  double audit_threshold = 1e-4;
  int audit_translations = 8;
  audit->add_option("--mode", audit_mode, "exact: fresh audit-config model");
  audit->add_option("--checkpoint", audit_checkpoint, "audit a trained model");
  audit->add_option("--seed", audit_seed);
  audit->add_option("--threshold", audit_threshold);
  audit->add_option("--translations", audit_translations);

  // gen-synth
  auto* gen = app.add_subcommand("gen-synth", "write the synthetic dataset as IDX");
  std::string gen_out = "data/synth";
  int gen_train = 2000, gen_test = 400, gen_size = 16;
  uint64_t gen_seed = 77;
  gen->add_option("--out", gen_out);
  gen->add_option("--train-count", gen_train);
  gen->add_option("--test-count", gen_test);
  gen->add_option("--size", gen_size);
  gen->add_option("--seed", gen_seed);

  // bench-routing
  auto* bench = app.add_subcommand("bench-routing", "time icr_weights over a grid");
  std::string bench_out;
  int bench_sites = 256;
  uint64_t bench_seed = 5;
  bench->add_option("--out", bench_out, "CSV output file");
  bench->add_option("--sites", bench_sites);
  bench->add_option("--seed", bench_seed);

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*train) {
      ModelConfig mc = preset_config(preset);
      if (k_override > 0)
        for (auto& rc : mc.routing) rc.k = k_override;
      if (iter_override >= 0)
        for (auto& rc : mc.routing) rc.num_iter = iter_override;
      return cmd_train(train_data, preset, config_path, mc, tc, suite_seed, out_dir,
                       quiet);
    }
    if (*eval) return cmd_eval(checkpoint, eval_data, eval_suite_seed, eval_out);
    if (*audit)
      return cmd_audit(audit_mode, audit_checkpoint, audit_seed, audit_threshold,
                       audit_translations);
    if (*gen) return cmd_gen_synth(gen_out, gen_train, gen_test, gen_size, gen_seed);
    if (*bench) return cmd_bench_routing(bench_out, bench_sites, bench_seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 1;
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args);
}

}  // namespace icr
