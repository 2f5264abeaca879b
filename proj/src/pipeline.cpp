#include "zdtc/pipeline.hpp"

#include "zdtc/error.hpp"
#include "zdtc/eval.hpp"
#include "zdtc/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

namespace zdtc {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kCalibrationStream = 0xC2B2AE3D27D4EB4FULL;

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto first = item.find_first_not_of(" \t");
    if (first == std::string::npos) continue;
    out.push_back(item.substr(first, item.find_last_not_of(" \t") - first + 1));
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw UsageError("config key '" + key + "': expected true or false, got '" + text + "'");
}

int to_int(const KeyValueConfig& kv, const std::string& key, int fallback) {
  return static_cast<int>(kv.get_int(key, fallback));
}

std::string lower(std::string_view text) {
  std::string s(text);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::string model_name(bool cnn) { return cnn ? "cnn" : "gbt"; }

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw UsageError("cannot create directory " + dir.string());
}

std::ofstream open_out(const fs::path& path) {
  ensure_dir(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot write " + path.string());
  return out;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ----------------------------------------------------------------- data

std::vector<FlowRecord> load_known(const fs::path& path, int classes, int mtu, const char* what) {
  if (!fs::exists(path)) throw DataError(std::string(what) + " flow log missing: " + path.string());
  auto records = load_flow_log(path, mtu);
  for (const auto& r : records) {
    if (r.label < 1 || r.label > classes) {
      throw DataError(path.string() + ": flow " + r.flow_id + " has label " + std::to_string(r.label) +
                      " outside the configured known classes 1.." + std::to_string(classes));
    }
  }
  return records;
}

/// Unknown logs carry the origin class in the label column.
std::vector<FlowRecord> load_unknown(const fs::path& path, int mtu) {
  if (!fs::exists(path)) throw DataError("test_unknown flow log missing: " + path.string());
  auto records = load_flow_log(path, mtu);
  for (auto& r : records) {
    r.origin_class = r.label;
    r.label = 0;
  }
  return records;
}

struct Profile {
  Proto proto = Proto::TCP;
  std::vector<int> classes;  // global ids; model class k + 1 is classes[k]

  int model_label(int global) const {
    const auto it = std::lower_bound(classes.begin(), classes.end(), global);
    if (it == classes.end() || *it != global) return -1;
    return static_cast<int>(it - classes.begin()) + 1;
  }
  int size() const { return static_cast<int>(classes.size()); }
  std::string dir() const { return lower(to_string(proto)); }
};

std::vector<Profile> profiles_of(std::span<const FlowRecord> train) {
  std::map<Proto, std::set<int>> seen;
  for (const auto& r : train) seen[r.proto].insert(r.label);
  std::vector<Profile> out;
  for (const auto& [proto, labels] : seen) {
    if (labels.size() < 2) {
      throw DataError(std::string(to_string(proto)) + " training flows cover fewer than two classes");
    }
    out.push_back({proto, std::vector<int>(labels.begin(), labels.end())});
  }
  if (out.empty()) throw DataError("no training flows");
  return out;
}

nlohmann::json profile_to_json(const Profile& p) { return {{"proto", to_string(p.proto)}, {"classes", p.classes}}; }

Profile profile_from_json(const nlohmann::json& doc) {
  Profile p;
  p.proto = parse_proto(doc.at("proto").get<std::string>());
  p.classes = doc.at("classes").get<std::vector<int>>();
  return p;
}

/// Records of one protocol with labels mapped into the profile's 1..K_p.
std::vector<FlowRecord> select(std::span<const FlowRecord> records, const Profile& p, bool known) {
  std::vector<FlowRecord> out;
  for (const auto& r : records) {
    if (r.proto != p.proto) continue;
    FlowRecord copy = r;
    if (known) {
      copy.label = p.model_label(r.label);
      if (copy.label < 1) {
        throw DataError("flow " + r.flow_id + ": class " + std::to_string(r.label) + " has no " +
                        std::string(to_string(p.proto)) + " training flows");
      }
    }
    out.push_back(std::move(copy));
  }
  return out;
}

template <typename T>
std::vector<T> pick(const std::vector<T>& values, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(values[i]);
  return out;
}

std::vector<Vector> inputs_of(std::span<const FlowRecord> records, int mtu) {
  std::vector<Vector> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(normalize(r.series, mtu));
  return out;
}

std::vector<int> labels_of(std::span<const FlowRecord> records) {
  std::vector<int> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.label);
  return out;
}

std::vector<Observation> observe_all(const ClassifierRef& classifier, const std::vector<Vector>& inputs) {
  std::vector<Observation> out;
  out.reserve(inputs.size());
  for (const auto& x : inputs) out.push_back(observe(classifier, x));
  return out;
}

// --------------------------------------------------------------- models

struct LoadedModels {
  std::optional<CnnModel> cnn;
  std::optional<GbtModel> gbt;
};

LoadedModels load_models(const RunConfig& cfg, const Profile& p) {
  LoadedModels m;
  const fs::path dir = cfg.models_dir() / p.dir();
  if (cfg.models != ModelChoice::Gbt) {
    if (!fs::exists(dir / "cnn.json")) throw DataError("missing model " + (dir / "cnn.json").string());
    m.cnn = load_cnn(dir / "cnn.json");
  }
  if (cfg.models != ModelChoice::Cnn) {
    if (!fs::exists(dir / "gbt.json")) throw DataError("missing model " + (dir / "gbt.json").string());
    m.gbt = load_gbt(dir / "gbt.json");
  }
  return m;
}

std::vector<Profile> load_profiles(const RunConfig& cfg) {
  const fs::path path = cfg.models_dir() / "profiles.json";
  if (!fs::exists(path)) throw DataError("missing " + path.string() + " (run train first)");
  std::vector<Profile> out;
  for (const auto& doc : read_json(path)) out.push_back(profile_from_json(doc));
  return out;
}

struct ProfileData {
  std::vector<FlowRecord> fit;
  std::vector<FlowRecord> calibration;
  std::vector<FlowRecord> test_known;
  std::vector<FlowRecord> test_unknown;
};

ProfileData load_profile_data(const RunConfig& cfg, const Profile& p, bool with_tests) {
  const int mtu = cfg.generator.mtu;
  const auto train = load_known(cfg.train_path(), cfg.generator.class_count, mtu, "train");
  const auto recs = select(train, p, true);
  const auto split = split_for_calibration(recs, cfg.calibration_fraction, cfg.seed);
  ProfileData d;
  d.fit = pick(recs, split.fit);
  d.calibration = pick(recs, split.calibration);
  if (with_tests) {
    d.test_known = select(load_known(cfg.test_known_path(), cfg.generator.class_count, mtu, "test_known"), p, true);
    d.test_unknown = select(load_unknown(cfg.test_unknown_path(), mtu), p, false);
  }
  return d;
}

/// Detectors the given model kind can host, in request order.
std::vector<DetectorKind> detectors_for(const RunConfig& cfg, bool cnn) {
  if (cnn) return cfg.detectors;
  std::vector<DetectorKind> out;
  for (auto k : cfg.detectors) {
    if (k == DetectorKind::InputCluster || k == DetectorKind::SoftMax) out.push_back(k);
  }
  return out;
}

std::vector<CalibratedDetector> fit_all(const RunConfig& cfg, const ClassifierRef& classifier, bool cnn,
                                        const ProfileData& d) {
  const int mtu = cfg.generator.mtu;
  const auto fit_obs = observe_all(classifier, inputs_of(d.fit, mtu));
  const auto cal_obs = observe_all(classifier, inputs_of(d.calibration, mtu));
  const auto labels = labels_of(d.fit);
  DetectorFitOptions opts = cfg.fit;
  opts.seed = cfg.seed;
  std::vector<CalibratedDetector> out;
  for (auto kind : detectors_for(cfg, cnn)) {
    out.push_back(fit_detector(kind, classifier, fit_obs, labels, cal_obs, cfg.target_fpr, opts));
  }
  return out;
}

std::vector<CalibratedDetector> load_detectors(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("missing detectors " + path.string() + " (run calibrate first)");
  std::vector<CalibratedDetector> out;
  for (const auto& doc : read_json(path)) out.push_back(detector_from_json(doc));
  return out;
}

void check_model_support(const RunConfig& cfg) {
  if (cfg.models != ModelChoice::Gbt) return;
  for (auto kind : cfg.detectors) {
    if (kind != DetectorKind::InputCluster && kind != DetectorKind::SoftMax) {
      throw UsageError("detector " + std::string(to_string(kind)) +
                       " is incompatible with a GBT-only model (it needs the CNN's feature vectors, logits or "
                       "gradients); GBT supports InputCluster and SoftMax");
    }
  }
}

}  // namespace

// ================================================================ config

const std::set<std::string>& RunConfig::keys() {
  static const std::set<std::string> k{
      "work_dir", "seed",
      // generator
      "class_count", "unknown_class_count", "modes_per_class", "jitter_sigma", "zipf_exponent",
      "flows_per_class_base", "proto_mix", "mtu", "test_fraction", "archetype_count", "novel_share",
      "class_divergence", "mode_divergence", "length_spread", "shift_max", "min_flows_per_class",
      "train_log", "test_known_log", "test_unknown_log",
      // training
      "models", "epochs", "batch_size", "learning_rate", "optimizer", "calibration_fraction", "gbt_rounds",
      "gbt_max_depth", "gbt_learning_rate", "gbt_l2_reg",
      // detectors
      "detectors", "target_fpr", "clusters_per_class", "tail_size", "openmax_alpha", "gradbp_layer",
      // reports
      "histogram_bins", "silhouette_cap", "export_fv", "bench_samples"};
  return k;
}

RunConfig RunConfig::from_config(const KeyValueConfig& kv, const char* env_seed) {
  kv.require_known(keys());
  RunConfig c;
  c.work_dir = kv.get_string("work_dir", c.work_dir.string());
  c.seed = kv.get_u64("seed", c.seed);
  if (env_seed && *env_seed) {
    KeyValueConfig env;
    env.set("ZDTC_SEED", env_seed);
    c.seed = env.get_u64("ZDTC_SEED", c.seed);
  }

  auto& g = c.generator;
  g.class_count = to_int(kv, "class_count", g.class_count);
  g.unknown_class_count = to_int(kv, "unknown_class_count", g.unknown_class_count);
  g.modes_per_class = to_int(kv, "modes_per_class", g.modes_per_class);
  g.jitter_sigma = kv.get_double("jitter_sigma", g.jitter_sigma);
  g.zipf_exponent = kv.get_double("zipf_exponent", g.zipf_exponent);
  g.flows_per_class_base = to_int(kv, "flows_per_class_base", g.flows_per_class_base);
  g.proto_mix = kv.get_double("proto_mix", g.proto_mix);
  g.mtu = to_int(kv, "mtu", g.mtu);
  g.test_fraction = kv.get_double("test_fraction", g.test_fraction);
  g.archetype_count = to_int(kv, "archetype_count", g.archetype_count);
  g.novel_share = kv.get_double("novel_share", g.novel_share);
  g.class_divergence = kv.get_double("class_divergence", g.class_divergence);
  g.mode_divergence = kv.get_double("mode_divergence", g.mode_divergence);
  g.length_spread = kv.get_double("length_spread", g.length_spread);
  g.shift_max = to_int(kv, "shift_max", g.shift_max);
  g.min_flows_per_class = to_int(kv, "min_flows_per_class", g.min_flows_per_class);
  g.seed = c.seed;
  c.train_log = kv.get_string("train_log", "");
  c.test_known_log = kv.get_string("test_known_log", "");
  c.test_unknown_log = kv.get_string("test_unknown_log", "");

  const std::string models = kv.get_string("models", "both");
  if (models == "cnn") c.models = ModelChoice::Cnn;
  else if (models == "gbt") c.models = ModelChoice::Gbt;
  else if (models == "both") c.models = ModelChoice::Both;
  else throw UsageError("models must be cnn, gbt or both, got '" + models + "'");

  c.train.epochs = to_int(kv, "epochs", c.train.epochs);
  c.train.batch_size = to_int(kv, "batch_size", c.train.batch_size);
  c.train.learning_rate = kv.get_double("learning_rate", c.train.learning_rate);
  const std::string opt = kv.get_string("optimizer", "adam");
  if (opt == "adam") c.train.optimizer = Optimizer::Adam;
  else if (opt == "sgd") c.train.optimizer = Optimizer::SGD;
  else throw UsageError("optimizer must be adam or sgd, got '" + opt + "'");
  c.train.seed = c.seed;
  c.calibration_fraction = kv.get_double("calibration_fraction", c.calibration_fraction);

  c.gbt.rounds = to_int(kv, "gbt_rounds", c.gbt.rounds);
  c.gbt.max_depth = to_int(kv, "gbt_max_depth", c.gbt.max_depth);
  c.gbt.learning_rate = kv.get_double("gbt_learning_rate", c.gbt.learning_rate);
  c.gbt.l2_reg = kv.get_double("gbt_l2_reg", c.gbt.l2_reg);
  c.gbt.seed = c.seed;

  if (const auto list = kv.find("detectors")) {
    c.detectors.clear();
    for (const auto& name : split_list(*list)) c.detectors.push_back(parse_detector_kind(name));
  }
  c.target_fpr = kv.get_double("target_fpr", c.target_fpr);
  c.fit.clusters_per_class = to_int(kv, "clusters_per_class", c.fit.clusters_per_class);
  c.fit.tail_size = to_int(kv, "tail_size", c.fit.tail_size);
  c.fit.openmax_alpha = to_int(kv, "openmax_alpha", c.fit.openmax_alpha);
  const std::string layer = kv.get_string("gradbp_layer", "fv");
  if (layer == "fv") c.fit.grad_layer = GradLayer::Feature;
  else if (layer == "output") c.fit.grad_layer = GradLayer::Output;
  else throw UsageError("gradbp_layer must be fv or output, got '" + layer + "'");
  c.fit.seed = c.seed;

  c.histogram_bins = to_int(kv, "histogram_bins", c.histogram_bins);
  c.silhouette_cap = to_int(kv, "silhouette_cap", c.silhouette_cap);
  if (const auto v = kv.find("export_fv")) c.export_fv = parse_bool("export_fv", *v);
  c.bench_samples = to_int(kv, "bench_samples", c.bench_samples);
  c.validate();
  return c;
}

void RunConfig::validate() const {
  if (work_dir.empty()) throw UsageError("work_dir must not be empty");
  generator.validate();
  try {
    train.validate();
    gbt.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (!(calibration_fraction >= 0.0 && calibration_fraction < 1.0)) {
    throw UsageError("calibration_fraction must lie in [0, 1)");
  }
  if (detectors.empty()) throw UsageError("detectors list is empty");
  if (!(target_fpr > 0.0 && target_fpr < 1.0)) throw UsageError("target_fpr must lie in (0, 1)");
  if (fit.clusters_per_class < 1) throw UsageError("clusters_per_class must be >= 1");
  if (fit.tail_size < 1) throw UsageError("tail_size must be >= 1");
  if (fit.openmax_alpha < 1) throw UsageError("openmax_alpha must be >= 1");
  if (histogram_bins < 1) throw UsageError("histogram_bins must be >= 1");
  if (silhouette_cap < 2) throw UsageError("silhouette_cap must be >= 2");
  if (bench_samples < kMinBenchSamples) {
    throw UsageError("bench_samples must be at least " + std::to_string(kMinBenchSamples) + " (got " +
                     std::to_string(bench_samples) + ")");
  }
}

fs::path RunConfig::train_path() const { return train_log.empty() ? data_dir() / "train.csv" : train_log; }
fs::path RunConfig::test_known_path() const {
  return test_known_log.empty() ? data_dir() / "test_known.csv" : test_known_log;
}
fs::path RunConfig::test_unknown_path() const {
  return test_unknown_log.empty() ? data_dir() / "test_unknown.csv" : test_unknown_log;
}

// ============================================================== helpers

CalibrationSplit split_for_calibration(std::span<const FlowRecord> records, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw std::invalid_argument("calibration fraction must lie in [0,1)");
  CalibrationSplit split;
  if (fraction == 0.0) {
    for (std::size_t i = 0; i < records.size(); ++i) split.fit.push_back(i);
    split.calibration = split.fit;
    return split;
  }
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < records.size(); ++i) by_class[records[i].label].push_back(i);
  Rng rng(seed ^ kCalibrationStream);
  std::vector<char> held(records.size(), 0);
  for (auto& [label, idx] : by_class) {
    rng.shuffle(std::span<std::size_t>(idx));
    auto take = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(idx.size())));
    take = std::min(take, idx.size() - 1);
    for (std::size_t j = 0; j < take; ++j) held[idx[j]] = 1;
  }
  for (std::size_t i = 0; i < records.size(); ++i) (held[i] ? split.calibration : split.fit).push_back(i);
  if (split.calibration.empty()) throw DataError("calibration hold-out is empty; too few training flows");
  return split;
}

AccuracyReport accuracy_report(std::span<const int> labels, std::span<const int> predictions, int classes) {
  if (labels.size() != predictions.size()) throw std::invalid_argument("accuracy_report: length mismatch");
  if (labels.empty()) throw std::invalid_argument("accuracy_report: no samples");
  AccuracyReport r;
  r.per_class.assign(static_cast<std::size_t>(classes), 0.0);
  r.per_class_flows.assign(static_cast<std::size_t>(classes), 0);
  std::vector<int> hits(static_cast<std::size_t>(classes), 0);
  int correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 1 || labels[i] > classes) throw std::invalid_argument("accuracy_report: label out of range");
    const auto k = static_cast<std::size_t>(labels[i] - 1);
    ++r.per_class_flows[k];
    if (predictions[i] == labels[i]) {
      ++hits[k];
      ++correct;
    }
  }
  r.flow_weighted = static_cast<double>(correct) / static_cast<double>(labels.size());
  int present = 0;
  double sum = 0.0;
  for (std::size_t k = 0; k < hits.size(); ++k) {
    if (r.per_class_flows[k] == 0) continue;
    r.per_class[k] = static_cast<double>(hits[k]) / r.per_class_flows[k];
    sum += r.per_class[k];
    ++present;
  }
  r.class_weighted = sum / present;
  return r;
}

double unknown_level(DetectorKind kind, const DetectorState& state, const ClassifierRef& classifier,
                     const Observation& obs, GradLayer layer) {
  if (kind == DetectorKind::SoftMax) return -obs.probs.maxCoeff();
  if (kind == DetectorKind::OpenMax) {
    if (!obs.trace) throw std::invalid_argument("OpenMax needs an activation trace");
    return score_openmax(std::get<WeibullBank>(state), *obs.trace).ul;
  }
  return decision_score(kind, state, classifier, obs, layer);
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const nlohmann::json& doc) {
  auto out = open_out(path);
  out << doc.dump(2) << '\n';
}

// ============================================================= commands

void cmd_generate(const RunConfig& cfg, std::ostream& log) {
  GeneratorConfig g = cfg.generator;
  g.seed = cfg.seed;
  const DatasetSplit split = generate(g);
  ensure_dir(cfg.data_dir());

  std::vector<FlowRecord> unknown = split.test_unknown;
  for (auto& r : unknown) r.label = r.origin_class;
  save_flow_log(cfg.train_path(), split.train);
  save_flow_log(cfg.test_known_path(), split.test_known);
  save_flow_log(cfg.test_unknown_path(), unknown);

  nlohmann::json manifest;
  manifest["known_classes"] = split.known_classes;
  manifest["unknown_classes"] = split.unknown_classes;
  manifest["openness"] = openness(split.known_classes, split.unknown_classes);
  manifest["seed"] = g.seed;
  manifest["mtu"] = g.mtu;
  manifest["rows"] = {{"train", split.train.size()},
                      {"test_known", split.test_known.size()},
                      {"test_unknown", split.test_unknown.size()}};
  manifest["total_rows"] = split.train.size() + split.test_known.size() + split.test_unknown.size();
  write_json(cfg.data_dir() / "manifest.json", manifest);
  log << "generated " << manifest["total_rows"] << " flows (train " << split.train.size() << ", test_known "
      << split.test_known.size() << ", test_unknown " << split.test_unknown.size() << "), openness "
      << manifest["openness"] << '\n';
}

void cmd_train(const RunConfig& cfg, std::ostream& log) {
  const int mtu = cfg.generator.mtu;
  const auto train = load_known(cfg.train_path(), cfg.generator.class_count, mtu, "train");
  const auto test_known = load_known(cfg.test_known_path(), cfg.generator.class_count, mtu, "test_known");
  const auto profiles = profiles_of(train);

  nlohmann::json metrics = nlohmann::json::object();
  nlohmann::json profile_docs = nlohmann::json::array();
  for (const auto& p : profiles) {
    const auto recs = select(train, p, true);
    const auto split = split_for_calibration(recs, cfg.calibration_fraction, cfg.seed);
    const auto fit = pick(recs, split.fit);
    const auto inputs = inputs_of(fit, mtu);
    const auto labels = labels_of(fit);
    const auto test = select(test_known, p, true);
    const auto test_inputs = inputs_of(test, mtu);
    const auto test_labels = labels_of(test);
    const fs::path dir = cfg.models_dir() / p.dir();
    ensure_dir(dir);

    nlohmann::json pm;
    pm["classes"] = p.classes;
    pm["fit_flows"] = fit.size();
    pm["calibration_flows"] = split.calibration.size();
    pm["test_known_flows"] = test.size();
    const CnnModel* cnn_ptr = nullptr;
    const GbtModel* gbt_ptr = nullptr;
    std::optional<CnnModel> cnn;
    std::optional<GbtModel> gbt;

    if (cfg.models != ModelChoice::Gbt) {
      TrainConfig tc = cfg.train;
      tc.seed = cfg.seed;
      const auto hyper = CnnHyper::for_proto(p.proto, p.size());
      auto result = zdtc::train(init_cnn(hyper, cfg.seed), inputs, labels, tc);
      cnn = std::move(result.model);
      cnn_ptr = &*cnn;
      save_cnn(dir / "cnn.json", *cnn);
      std::vector<int> pred;
      for (const auto& x : test_inputs) pred.push_back(argmax(forward(*cnn, x).probs) + 1);
      nlohmann::json m;
      m["loss_history"] = result.loss_history;
      if (!test.empty()) {
        const auto acc = accuracy_report(test_labels, pred, p.size());
        m["flow_weighted_accuracy"] = acc.flow_weighted;
        m["class_weighted_accuracy"] = acc.class_weighted;
        m["per_class_accuracy"] = acc.per_class;
      }
      pm["cnn"] = std::move(m);
      log << to_string(p.proto) << " cnn: final loss " << result.loss_history.back() << '\n';
    }
    if (cfg.models != ModelChoice::Cnn) {
      Matrix features(static_cast<Eigen::Index>(inputs.size()), series_cap(p.proto));
      for (std::size_t i = 0; i < inputs.size(); ++i) features.row(static_cast<Eigen::Index>(i)) = inputs[i].transpose();
      GbtParams gp = cfg.gbt;
      gp.seed = cfg.seed;
      gbt = gbt_train(features, labels, p.size(), gp);
      gbt_ptr = &*gbt;
      save_gbt(dir / "gbt.json", *gbt);
      std::vector<int> pred;
      for (const auto& x : test_inputs) pred.push_back(argmax(gbt_predict(*gbt, x)) + 1);
      nlohmann::json m;
      m["loss_history"] = gbt->train_loss;
      if (!test.empty()) {
        const auto acc = accuracy_report(test_labels, pred, p.size());
        m["flow_weighted_accuracy"] = acc.flow_weighted;
        m["class_weighted_accuracy"] = acc.class_weighted;
        m["per_class_accuracy"] = acc.per_class;
      }
      pm["gbt"] = std::move(m);
      log << to_string(p.proto) << " gbt: " << gbt_count_nodes(*gbt) << " nodes\n";
    }
    pm["complexity"] = to_json(complexity_report(cnn_ptr, gbt_ptr));
    metrics[std::string(to_string(p.proto))] = std::move(pm);
    profile_docs.push_back(profile_to_json(p));
  }
  write_json(cfg.models_dir() / "profiles.json", profile_docs);
  write_json(cfg.models_dir() / "metrics.json", metrics);
}

void cmd_calibrate(const RunConfig& cfg, std::ostream& log) {
  check_model_support(cfg);
  const auto profiles = load_profiles(cfg);
  auto table = open_out(cfg.detectors_dir() / "epsilon_table.csv");
  table << "proto,model,detector,direction,epsilon,target_fpr,calibration_fpr,calibration_flows\n";
  for (const auto& p : profiles) {
    const auto models = load_models(cfg, p);
    const auto data = load_profile_data(cfg, p, false);
    const auto cal_inputs = inputs_of(data.calibration, cfg.generator.mtu);
    for (bool cnn : {true, false}) {
      if (cnn ? !models.cnn : !models.gbt) continue;
      const ClassifierRef classifier = cnn ? ClassifierRef(&*models.cnn) : ClassifierRef(&*models.gbt);
      const auto detectors = fit_all(cfg, classifier, cnn, data);
      const auto cal_obs = observe_all(classifier, cal_inputs);
      nlohmann::json docs = nlohmann::json::array();
      for (const auto& det : detectors) {
        int rejected = 0;
        for (const auto& obs : cal_obs) rejected += detect(det, classifier, obs).rejected ? 1 : 0;
        const double fpr = static_cast<double>(rejected) / static_cast<double>(cal_obs.size());
        table << to_string(p.proto) << ',' << model_name(cnn) << ',' << to_string(det.kind) << ','
              << (det.direction == Direction::RejectIfAbove ? "reject_if_above" : "reject_if_below") << ','
              << fmt(det.epsilon) << ',' << fmt(det.target_fpr) << ',' << fmt(fpr) << ',' << cal_obs.size() << '\n';
        docs.push_back(detector_to_json(det));
        log << to_string(p.proto) << ' ' << model_name(cnn) << ' ' << to_string(det.kind) << ": epsilon "
            << fmt(det.epsilon) << ", calibration fpr " << fpr << '\n';
      }
      write_json(cfg.detectors_dir() / p.dir() / (model_name(cnn) + ".json"), docs);
    }
  }
}

void cmd_eval(const RunConfig& cfg, std::ostream& log) {
  const auto profiles = load_profiles(cfg);
  const int mtu = cfg.generator.mtu;
  nlohmann::json report;
  const fs::path manifest_path = cfg.data_dir() / "manifest.json";
  if (fs::exists(manifest_path)) {
    const auto manifest = read_json(manifest_path);
    report["known_classes"] = manifest.at("known_classes");
    report["unknown_classes"] = manifest.at("unknown_classes");
    report["openness"] = manifest.at("openness");
  }
  nlohmann::json profile_reports = nlohmann::json::object();

  for (const auto& p : profiles) {
    const auto models = load_models(cfg, p);
    const auto data = load_profile_data(cfg, p, true);
    if (data.test_known.empty() || data.test_unknown.empty()) {
      throw DataError(std::string(to_string(p.proto)) + " evaluation needs both known and unknown test flows");
    }
    const auto known_inputs = inputs_of(data.test_known, mtu);
    const auto unknown_inputs = inputs_of(data.test_unknown, mtu);
    std::vector<int> origins;
    for (const auto& r : data.test_unknown) origins.push_back(r.origin_class);

    nlohmann::json pr;
    pr["classes"] = p.classes;
    pr["test_known_flows"] = data.test_known.size();
    pr["test_unknown_flows"] = data.test_unknown.size();
    pr["complexity"] = to_json(complexity_report(models.cnn ? &*models.cnn : nullptr, models.gbt ? &*models.gbt : nullptr));

    // Per-flow table: one column pair per model/detector.
    std::vector<std::string> header{"flow_id", "split", "origin_class", "label"};
    const std::size_t nk = data.test_known.size();
    const std::size_t total = nk + data.test_unknown.size();
    std::vector<std::vector<std::string>> rows(total);
    for (std::size_t i = 0; i < total; ++i) {
      const auto& r = i < nk ? data.test_known[i] : data.test_unknown[i - nk];
      rows[i] = {r.flow_id, i < nk ? "known" : "unknown",
                 std::to_string(i < nk ? p.classes[static_cast<std::size_t>(r.label - 1)] : r.origin_class),
                 std::to_string(r.label)};
    }

    for (bool cnn : {true, false}) {
      if (cnn ? !models.cnn : !models.gbt) continue;
      const ClassifierRef classifier = cnn ? ClassifierRef(&*models.cnn) : ClassifierRef(&*models.gbt);
      const std::string mname = model_name(cnn);
      const auto detectors = load_detectors(cfg.detectors_dir() / p.dir() / (mname + ".json"));
      const auto known_obs = observe_all(classifier, known_inputs);
      const auto unknown_obs = observe_all(classifier, unknown_inputs);

      std::vector<int> pred;
      for (const auto& o : known_obs) pred.push_back(argmax(o.probs) + 1);
      const auto acc = accuracy_report(labels_of(data.test_known), pred, p.size());
      pr["accuracy"][mname] = {{"flow_weighted", acc.flow_weighted}, {"class_weighted", acc.class_weighted}};

      header.push_back(mname + "_predicted");
      for (std::size_t i = 0; i < total; ++i) {
        const auto& o = i < nk ? known_obs[i] : unknown_obs[i - nk];
        rows[i].push_back(std::to_string(argmax(o.probs) + 1));
      }

      std::vector<Observation> fit_obs;
      std::vector<int> fit_labels;
      for (const auto& det : detectors) {
        check_compatible(det.kind, classifier);
        const std::string dname(to_string(det.kind));
        std::vector<double> sk, su, ulk, ulu;
        std::vector<bool> rk, ru;
        for (const auto& o : known_obs) {
          const double s = decision_score(det.kind, det.state, classifier, o, det.grad_layer);
          sk.push_back(s);
          rk.push_back(det.rejects(s));
          ulk.push_back(unknown_level(det.kind, det.state, classifier, o, det.grad_layer));
        }
        for (const auto& o : unknown_obs) {
          const double s = decision_score(det.kind, det.state, classifier, o, det.grad_layer);
          su.push_back(s);
          ru.push_back(det.rejects(s));
          ulu.push_back(unknown_level(det.kind, det.state, classifier, o, det.grad_layer));
        }
        const auto curve = roc(sk, su, det.direction);
        const std::string roc_name = "roc_" + p.dir() + "_" + mname + "_" + dname + ".csv";
        {
          auto out = open_out(cfg.reports_dir() / roc_name);
          write_roc_csv(out, curve);
        }
        nlohmann::json dr;
        dr["auc"] = curve.auc;
        dr["epsilon"] = det.epsilon;
        dr["roc_csv"] = roc_name;
        dr["fixed_tuning"] = to_json(fixed_tuning_report(ru, origins, rk));
        dr["unknown_level"] = to_json(unknown_level_report(ulk, ulu, cfg.histogram_bins));

        if (det.kind == DetectorKind::InputCluster || det.kind == DetectorKind::FvCluster) {
          if (fit_obs.empty()) {
            fit_obs = observe_all(classifier, inputs_of(data.fit, mtu));
            fit_labels = labels_of(data.fit);
          }
          const auto& bank = std::get<ClusterBank>(det.state);
          Matrix points(static_cast<Eigen::Index>(fit_obs.size()), bank.dim());
          std::vector<int> assign;
          for (std::size_t i = 0; i < fit_obs.size(); ++i) {
            const Vector& v = det.kind == DetectorKind::InputCluster ? fit_obs[i].x : fit_obs[i].trace->fv;
            points.row(static_cast<Eigen::Index>(i)) = v.transpose();
            assign.push_back(nearest_centroid(bank, v));
          }
          ClusterQuality q{purity(assign, fit_labels), silhouette(points, assign, cfg.silhouette_cap, cfg.seed)};
          dr["cluster_quality"] = to_json(q);
        }
        pr["detectors"][mname][dname] = std::move(dr);

        header.push_back(mname + "_" + dname + "_label");
        header.push_back(mname + "_" + dname + "_rejected");
        for (std::size_t i = 0; i < total; ++i) {
          const bool rej = i < nk ? rk[i] : ru[i - nk];
          const auto& o = i < nk ? known_obs[i] : unknown_obs[i - nk];
          rows[i].push_back(rej ? "0" : std::to_string(argmax(o.probs) + 1));
          rows[i].push_back(rej ? "1" : "0");
        }
        log << to_string(p.proto) << ' ' << mname << ' ' << dname << ": auc " << curve.auc << '\n';
      }

      if (cnn && cfg.export_fv) {
        auto out = open_out(cfg.reports_dir() / ("fv_" + p.dir() + ".csv"));
        out << "flow_id,split,origin_class";
        for (int j = 0; j < models.cnn->hyper.fv_dim; ++j) out << ",fv" << j;
        out << '\n';
        for (std::size_t i = 0; i < total; ++i) {
          const auto& o = i < nk ? known_obs[i] : unknown_obs[i - nk];
          out << rows[i][0] << ',' << rows[i][1] << ',' << rows[i][2];
          for (Eigen::Index j = 0; j < o.trace->fv.size(); ++j) out << ',' << fmt(o.trace->fv[j]);
          out << '\n';
        }
      }
    }

    {
      auto out = open_out(cfg.reports_dir() / ("flows_" + p.dir() + ".csv"));
      for (std::size_t j = 0; j < header.size(); ++j) out << (j ? "," : "") << header[j];
      out << '\n';
      for (const auto& row : rows) {
        for (std::size_t j = 0; j < row.size(); ++j) out << (j ? "," : "") << row[j];
        out << '\n';
      }
    }
    profile_reports[std::string(to_string(p.proto))] = std::move(pr);
  }
  report["profiles"] = std::move(profile_reports);
  write_json(cfg.reports_dir() / "report.json", report);
}

void cmd_bench(const RunConfig& cfg, std::ostream& log) {
  if (cfg.bench_samples < kMinBenchSamples) {
    throw UsageError("bench needs at least " + std::to_string(kMinBenchSamples) + " samples");
  }
  check_model_support(cfg);
  const auto profiles = load_profiles(cfg);
  const int mtu = cfg.generator.mtu;
  nlohmann::json doc;
  doc["samples"] = cfg.bench_samples;
  for (const auto& p : profiles) {
    const auto models = load_models(cfg, p);
    const auto data = load_profile_data(cfg, p, true);
    auto stream_inputs = inputs_of(data.test_known, mtu);
    for (auto& x : inputs_of(data.test_unknown, mtu)) stream_inputs.push_back(std::move(x));
    for (bool cnn : {true, false}) {
      if (cnn ? !models.cnn : !models.gbt) continue;
      const ClassifierRef classifier = cnn ? ClassifierRef(&*models.cnn) : ClassifierRef(&*models.gbt);
      const auto detectors = fit_all(cfg, classifier, cnn, data);
      const auto stream = observe_all(classifier, stream_inputs);
      const auto cost = bench_detectors(detectors, classifier, stream, cfg.bench_samples);
      for (const auto& e : cost.entries) {
        log << to_string(p.proto) << ' ' << model_name(cnn) << ' ' << e.detector << ": " << e.inference_micros
            << " us/sample, bootstrap " << e.bootstrap_seconds << " s\n";
      }
      doc["profiles"][std::string(to_string(p.proto))][model_name(cnn)] = to_json(cost);
    }
  }
  write_json(cfg.reports_dir() / "cost.json", doc);
}

}  // namespace zdtc
