// Acceptance checks. Prints one "[PASS]" or "[FAIL]" line per criterion.
// Usage: zdtc_acceptance [--only N] [--work DIR]

#include "zdtc/dataset.hpp"
#include "zdtc/error.hpp"
#include "zdtc/eval.hpp"
#include "zdtc/gbt.hpp"
#include "zdtc/nn.hpp"
#include "zdtc/openset.hpp"
#include "zdtc/pipeline.hpp"
#include "zdtc/rng.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

using namespace zdtc;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

fs::path g_work = fs::temp_directory_path() / "zdtc_acceptance";

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

RunConfig default_config(const fs::path& dir, std::uint64_t seed = 42) {
  KeyValueConfig kv;
  kv.set("work_dir", dir.string());
  kv.set("seed", std::to_string(seed));
  return RunConfig::from_config(kv);
}

void run_pipeline(const RunConfig& cfg) {
  std::ostringstream log;
  cmd_generate(cfg, log);
  cmd_train(cfg, log);
  cmd_calibrate(cfg, log);
  cmd_eval(cfg, log);
}

/// Default-scenario run shared by several criteria; rebuilt when older than this binary.
const RunConfig& default_run() {
  static const RunConfig cfg = [] {
    const auto c = default_config(g_work / "default");
    const fs::path stamp = c.reports_dir() / "report.json";
    const bool fresh = fs::exists(stamp) && fs::exists("/proc/self/exe") &&
                       fs::last_write_time(stamp) > fs::last_write_time(fs::canonical("/proc/self/exe"));
    if (!fresh) {
      fs::remove_all(c.work_dir);
      run_pipeline(c);
    }
    return c;
  }();
  return cfg;
}

// ------------------------------------------------------------- criterion 1

/// ReLU and max-pool branch pattern; a central difference is only valid when
/// both probes stay on the same branch as the base point.
std::vector<int> branch_pattern(const ForwardPass& pass) {
  std::vector<int> out;
  for (const auto& c : pass.conv) {
    for (Eigen::Index i = 0; i < c.pre.size(); ++i) out.push_back(c.pre.data()[i] > 0.0);
    for (Eigen::Index i = 0; i < c.arg.size(); ++i) out.push_back(c.arg.data()[i]);
  }
  for (double z : pass.trace.pre_fc1) out.push_back(z > 0.0);
  return out;
}

Outcome gradient_check() {
  const auto start = std::chrono::steady_clock::now();
  Rng rng(2024);
  const double h = 1e-5;
  double worst = 0.0;
  long checked = 0, skipped = 0;
  for (int net = 0; net < 20; ++net) {
    CnnHyper hyper;
    hyper.filters = 1 + static_cast<int>(rng.below(4));
    hyper.fv_dim = 2 + static_cast<int>(rng.below(6));
    hyper.classes = 2 + static_cast<int>(rng.below(4));
    hyper.input_len = 8 + static_cast<int>(rng.below(13));
    CnnModel model = init_cnn(hyper, 1000 + static_cast<std::uint64_t>(net));
    Vector theta = flatten_params(model);
    for (auto& t : theta) t += 0.05 * rng.normal();  // non-zero biases
    unflatten_params(model, theta);
    Vector x(hyper.input_len);
    for (auto& v : x) v = rng.uniform();
    const int target = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(hyper.classes)));

    const auto base = forward_full(model, x);
    const auto pattern = branch_pattern(base);
    const Vector analytic = flatten_gradients(backward(model, base, target));
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
      Vector t = theta;
      t[i] = theta[i] + h;
      unflatten_params(model, t);
      const auto up = forward_full(model, x);
      t[i] = theta[i] - h;
      unflatten_params(model, t);
      const auto down = forward_full(model, x);
      if (branch_pattern(up) != pattern || branch_pattern(down) != pattern) {
        ++skipped;
        continue;
      }
      const double numeric = (cross_entropy(up.trace, target) - cross_entropy(down.trace, target)) / (2.0 * h);
      const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-6});
      worst = std::max(worst, std::abs(numeric - analytic[i]) / denom);
      ++checked;
    }
    unflatten_params(model, theta);
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const bool pass = worst < 1e-4 && seconds < 60.0 && skipped * 100 <= checked;
  return {pass, "max rel err " + sci(worst) + " over " + std::to_string(checked) + " weights (" +
                    std::to_string(skipped) + " at a branch switch), " + fmt(seconds, 1) + " s"};
}

// ------------------------------------------------------------- criterion 2

Outcome gradbp_zero_point() {
  Rng rng(7);
  double worst = 0.0;
  int cases = 0;
  for (int trial = 0; trial < 200; ++trial) {
    CnnHyper hyper = CnnHyper::for_proto(trial % 2 ? Proto::UDP : Proto::TCP, 2 + trial % 9);
    const auto model = init_cnn(hyper, static_cast<std::uint64_t>(trial));
    Vector x(hyper.input_len);
    for (auto& v : x) v = rng.uniform();
    auto trace = forward(model, x);
    // Saturate: the predicted logit sits far above the rest.
    const int top = static_cast<int>(rng.below(static_cast<std::uint64_t>(hyper.classes)));
    for (Eigen::Index k = 0; k < trace.v.size(); ++k) trace.v[k] = rng.normal();
    trace.v[top] = 40.0 + 20.0 * rng.uniform();
    trace.probs = softmax(trace.v);
    Vector onehot = Vector::Zero(hyper.classes);
    onehot[top] = 1.0;
    if ((trace.probs - onehot).cwiseAbs().maxCoeff() > 1e-9) continue;
    ++cases;
    worst = std::max(worst, score_gradbp(model, trace, NormKind::L2));
  }
  return {cases == 200 && worst < 1e-8, std::to_string(cases) + " saturated traces, max L2 " + sci(worst)};
}

// ------------------------------------------------------------- criterion 3

struct Aucs {
  double gradbp = 0.0, softmax = 0.0, input = 0.0;
  bool ordered() const { return gradbp - softmax >= 0.02 && softmax - input >= 0.02; }
  std::string str() const {
    return "GradBP_L2 " + fmt(gradbp) + ", SoftMax " + fmt(softmax) + ", InputCluster " + fmt(input);
  }
};

Aucs read_aucs(const RunConfig& cfg) {
  const auto report = read_json(cfg.reports_dir() / "report.json");
  const auto& d = report.at("profiles").at("TCP").at("detectors").at("cnn");
  return {d.at("GradBP_L2").at("auc").get<double>(), d.at("SoftMax").at("auc").get<double>(),
          d.at("InputCluster").at("auc").get<double>()};
}

Outcome detector_ordering() {
  const auto pinned = read_aucs(default_run());
  std::string detail = "seed 42: " + pinned.str();
  if (pinned.ordered()) return {pinned.gradbp >= 0.85, detail};

  int ordered = 0;
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    KeyValueConfig kv;
    kv.set("work_dir", (g_work / ("seed_" + std::to_string(seed))).string());
    kv.set("seed", std::to_string(seed));
    kv.set("models", "cnn");
    kv.set("detectors", "InputCluster,SoftMax,GradBP_L2");
    const auto cfg = RunConfig::from_config(kv);
    fs::remove_all(cfg.work_dir);
    run_pipeline(cfg);
    const auto a = read_aucs(cfg);
    ordered += a.ordered() ? 1 : 0;
    detail += "; seed " + std::to_string(seed) + ": " + a.str();
  }
  detail += "; ordered with margin in " + std::to_string(ordered) + "/5 seeds";
  return {pinned.gradbp >= 0.85 && ordered >= 4, detail};
}

// ------------------------------------------------------------- criterion 4

Outcome holdout_fpr() {
  const auto& cfg = default_run();
  const auto holdout = generate_known_holdout(cfg.generator, 5000);
  bool pass = holdout.size() >= 5000;
  std::string detail = std::to_string(holdout.size()) + " held-out flows;";
  for (const auto& profile : read_json(cfg.models_dir() / "profiles.json")) {
    const Proto proto = parse_proto(profile.at("proto").get<std::string>());
    std::vector<FlowRecord> flows;
    for (const auto& r : holdout) {
      if (r.proto == proto) flows.push_back(r);
    }
    if (flows.empty()) continue;
    const Matrix x = feature_matrix(flows, cfg.generator.mtu);
    const std::string dir = proto == Proto::TCP ? "tcp" : "udp";
    for (const std::string model_name : {"cnn", "gbt"}) {
      const fs::path model_path = cfg.models_dir() / dir / (model_name + ".json");
      if (!fs::exists(model_path)) continue;
      std::optional<CnnModel> cnn;
      std::optional<GbtModel> gbt;
      if (model_name == "cnn") cnn = load_cnn(model_path);
      else gbt = load_gbt(model_path);
      const ClassifierRef classifier = cnn ? ClassifierRef(&*cnn) : ClassifierRef(&*gbt);
      std::vector<Observation> obs;
      for (Eigen::Index i = 0; i < x.rows(); ++i) obs.push_back(observe(classifier, x.row(i).transpose()));
      for (const auto& doc : read_json(cfg.detectors_dir() / dir / (model_name + ".json"))) {
        const auto det = detector_from_json(doc);
        int rejected = 0;
        for (const auto& o : obs) rejected += detect(det, classifier, o).rejected ? 1 : 0;
        const double fpr = static_cast<double>(rejected) / static_cast<double>(obs.size());
        const bool ok = fpr >= 0.005 && fpr <= 0.02;
        pass = pass && ok;
        detail += " " + model_name + "/" + std::string(to_string(det.kind)) + " " + fmt(100.0 * fpr, 2) + "%" +
                  (ok ? "" : " (out of range)");
      }
    }
  }
  return {pass, detail};
}

// ------------------------------------------------------------- criterion 5

Outcome roc_complements() {
  const auto& cfg = default_run();
  int curves = 0;
  long points = 0;
  double worst = 0.0;
  for (const auto& entry : fs::directory_iterator(cfg.reports_dir())) {
    const auto name = entry.path().filename().string();
    if (name.rfind("roc_", 0) != 0) continue;
    ++curves;
    std::ifstream in(entry.path());
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      double eps, tpr, fpr, tnr, fnr;
      if (std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf,%lf", &eps, &tpr, &fpr, &tnr, &fnr) != 5) {
        return {false, "malformed row in " + name};
      }
      worst = std::max({worst, std::abs(tnr + fpr - 1.0), std::abs(fnr + tpr - 1.0)});
      ++points;
    }
  }
  return {curves > 0 && worst <= 1e-12,
          std::to_string(curves) + " curves, " + std::to_string(points) + " points, max deviation " + sci(worst)};
}

// ------------------------------------------------------------- criterion 6

Outcome openmax_normalization() {
  Rng rng(11);
  const int k = 10;
  // Bank fitted on synthetic logits clustered around per-class means.
  Matrix logits(600, k);
  std::vector<int> labels;
  for (int i = 0; i < 600; ++i) {
    const int c = i % k;
    for (int j = 0; j < k; ++j) logits(i, j) = rng.normal() + (j == c ? 8.0 : 0.0);
    labels.push_back(c + 1);
  }
  const auto bank = fit_weibull_bank(logits, labels, k);
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    ActivationTrace tr;
    tr.v = Vector(k);
    const double scale = 1.0 + 20.0 * rng.uniform();
    for (auto& v : tr.v) v = scale * rng.normal();
    tr.probs = softmax(tr.v);
    worst = std::max(worst, std::abs(openmax_revise(bank, tr).probs_prime.sum() - 1.0));
  }

  // No-revision limit: every Weibull scale so large that w = 1 everywhere.
  WeibullBank inert;
  inert.alpha = k;
  for (int c = 0; c < k; ++c) {
    inert.mav.push_back(Vector::Zero(k));
    inert.tails.push_back({2.0, 1.0, 1e300});
  }
  double limit = 0.0;
  for (int i = 0; i < 1000; ++i) {
    ActivationTrace tr;
    tr.v = Vector(k);
    for (auto& v : tr.v) v = 3.0 * rng.normal();
    tr.probs = softmax(tr.v);
    const auto rev = openmax_revise(inert, tr);
    const Vector known = rev.probs_prime.tail(k) / rev.probs_prime.tail(k).sum();
    const double z = 1.0 + tr.v.array().exp().sum();
    limit = std::max({limit, (rev.v_hat - tr.v).cwiseAbs().maxCoeff(), std::abs(rev.v_hat0),
                      (known - tr.probs).cwiseAbs().maxCoeff(), std::abs(rev.probs_prime[0] - 1.0 / z)});
  }
  return {worst <= 1e-9 && limit <= 1e-12,
          "max |sum P' - 1| " + sci(worst) + " over 10000 traces; no-revision deviation " + sci(limit)};
}

// ------------------------------------------------------------- criterion 7

Outcome cost_ordering() {
  auto cfg = default_run();
  cfg.bench_samples = 10000;
  std::ostringstream log;
  cmd_bench(cfg, log);
  const auto doc = read_json(cfg.reports_dir() / "cost.json");
  auto micros = [&](const std::string& name) {
    for (const auto& e : doc.at("profiles").at("TCP").at("cnn")) {
      if (e.at("detector") == name) return e.at("inference_micros_per_sample").get<double>();
    }
    throw std::runtime_error("no cost entry for " + name);
  };
  const double l1 = micros("GradBP_L1"), l2 = micros("GradBP_L2"), om = micros("OpenMax"), fv = micros("FvCluster");
  const bool pass = 1.5 * l1 <= om && 1.5 * l2 <= om && 1.5 * om <= fv;
  return {pass, "median us/sample: GradBP_L1 " + fmt(l1, 3) + ", GradBP_L2 " + fmt(l2, 3) + ", OpenMax " +
                    fmt(om, 3) + ", FvCluster (C = 5K) " + fmt(fv, 3)};
}

// ------------------------------------------------------------- criterion 8

Outcome distribution_identities() {
  Rng rng(13);
  std::vector<double> a, b, far;
  for (int i = 0; i < 2000; ++i) {
    a.push_back(rng.normal());
    far.push_back(100.0 + rng.normal());
  }
  const auto same = unknown_level_report(a, a);
  const auto disjoint = unknown_level_report(a, far);
  bool pass = std::abs(same.intersection - 1.0) < 1e-12 && std::abs(same.bhattacharyya) < 1e-12;
  pass = pass && disjoint.intersection == 0.0 && disjoint.bhattacharyya == kBhattacharyyaSaturation;

  std::vector<double> base;
  for (int i = 0; i < 5000; ++i) base.push_back(rng.normal());
  double prev_i = 2.0, prev_d = -1.0;
  std::string family;
  for (int step = 0; step < 5; ++step) {
    std::vector<double> shifted;
    for (double v : base) shifted.push_back(v + 0.75 * step);
    const auto r = unknown_level_report(base, shifted);
    pass = pass && r.intersection < prev_i && r.bhattacharyya > prev_d;
    prev_i = r.intersection;
    prev_d = r.bhattacharyya;
    family += " (" + fmt(r.intersection, 3) + ", " + fmt(r.bhattacharyya, 3) + ")";
  }
  return {pass, "identical I=" + fmt(same.intersection, 3) + " D=" + fmt(same.bhattacharyya, 3) +
                    "; disjoint I=" + fmt(disjoint.intersection, 3) + " D=" + fmt(disjoint.bhattacharyya, 1) +
                    "; shift family (I, D):" + family};
}

// ------------------------------------------------------------- criterion 9

long count_nodes(const Tree& tree, int node) {
  const auto& n = tree[static_cast<std::size_t>(node)];
  return n.is_leaf() ? 1 : 1 + count_nodes(tree, n.left) + count_nodes(tree, n.right);
}

int depth_of(const Tree& tree, int node) {
  const auto& n = tree[static_cast<std::size_t>(node)];
  return n.is_leaf() ? 0 : 1 + std::max(depth_of(tree, n.left), depth_of(tree, n.right));
}

Outcome gbt_structure() {
  Rng rng(17);
  const int n = 400, d = 8, k = 4;
  Matrix x(n, d);
  std::vector<int> y;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) x(i, j) = rng.uniform();
    y.push_back(1 + static_cast<int>(rng.below(k)));
  }
  bool pass = true;
  std::string detail;
  for (int depth : {2, 4, 7}) {
    GbtParams p;
    p.rounds = 30;
    p.max_depth = depth;
    const auto model = gbt_train(x, y, k, p);
    int deepest = 0;
    long oracle = 0;
    for (const auto& tree : model.trees) {
      deepest = std::max(deepest, depth_of(tree, 0));
      oracle += count_nodes(tree, 0);
    }
    bool monotone = true;
    for (std::size_t r = 1; r < model.train_loss.size(); ++r) {
      monotone = monotone && model.train_loss[r] <= model.train_loss[r - 1] + 1e-12;
    }
    const bool ok = deepest <= depth && oracle == gbt_count_nodes(model) && monotone;
    pass = pass && ok;
    detail += "d=" + std::to_string(depth) + ": max depth " + std::to_string(deepest) + ", nodes " +
              std::to_string(gbt_count_nodes(model)) + "/" + std::to_string(oracle) +
              (monotone ? ", loss non-increasing; " : ", loss rose; ");
  }
  return {pass, detail};
}

// ------------------------------------------------------------ criterion 10

Outcome openness_values() {
  struct Row {
    int k, u;
    double expected;
  };
  bool pass = true;
  std::string detail;
  for (const Row& r : {Row{200, 635, 0.378}, Row{162, 500, 0.373}, Row{38, 135, 0.400}}) {
    const double o = openness(r.k, r.u);
    pass = pass && std::round(o * 1000.0) / 1000.0 == r.expected;
    detail += "(" + std::to_string(r.k) + "," + std::to_string(r.u) + ") -> " + fmt(o, 3) + " ";
  }
  return {pass, detail};
}

// ------------------------------------------------------------ criterion 11

Outcome determinism() {
  const auto a = default_config(g_work / "determinism_a");
  const auto b = default_config(g_work / "determinism_b");
  for (const auto* c : {&a, &b}) {
    fs::remove_all(c->work_dir);
    run_pipeline(*c);
  }
  int files = 0;
  std::string diff;
  for (const char* sub : {"data", "models", "detectors", "reports"}) {
    for (const auto& entry : fs::recursive_directory_iterator(a.work_dir / sub)) {
      if (!entry.is_regular_file() || entry.path().filename() == "cost.json") continue;
      ++files;
      const auto rel = fs::relative(entry.path(), a.work_dir);
      if (slurp(entry.path()) != slurp(b.work_dir / rel)) diff += " " + rel.string();
    }
  }
  fs::remove_all(a.work_dir);
  fs::remove_all(b.work_dir);
  return {files > 0 && diff.empty(),
          std::to_string(files) + " artifacts compared" + (diff.empty() ? ", all identical" : "; differ:" + diff)};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--only" && i + 1 < argc) {
      only = std::atoi(argv[++i]);
    } else if (arg == "--work" && i + 1 < argc) {
      g_work = argv[++i];
    } else {
      std::cerr << "usage: zdtc_acceptance [--only N] [--work DIR]\n";
      return 1;
    }
  }
  const std::vector<Criterion> criteria{
      {1, "gradient correctness", gradient_check},
      {2, "GradBP zero point", gradbp_zero_point},
      {3, "detector AUC ordering", detector_ordering},
      {4, "calibration FPR on held-out known flows", holdout_fpr},
      {5, "ROC complementarity", roc_complements},
      {6, "OpenMax normalization", openmax_normalization},
      {7, "cost ordering", cost_ordering},
      {8, "distribution metric identities", distribution_identities},
      {9, "GBT structure", gbt_structure},
      {10, "openness values", openness_values},
      {11, "end-to-end determinism", determinism},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    if (only != 0 && c.id != only) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    std::cout << (o.pass ? "[PASS]" : "[FAIL]") << " criterion " << c.id << " " << c.name << ": " << o.detail
              << std::endl;
    failed += o.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
