#pragma once

#include "zdtc/config.hpp"
#include "zdtc/dataset.hpp"
#include "zdtc/gbt.hpp"
#include "zdtc/nn.hpp"
#include "zdtc/openset.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace zdtc {

enum class ModelChoice { Cnn, Gbt, Both };

struct RunConfig {
  std::filesystem::path work_dir = "zdtc_run";
  std::uint64_t seed = 42;

  GeneratorConfig generator;
  /// Flow logs; empty means <work_dir>/data/<name>.csv.
  std::filesystem::path train_log;
  std::filesystem::path test_known_log;
  std::filesystem::path test_unknown_log;

  ModelChoice models = ModelChoice::Both;
  TrainConfig train;
  GbtParams gbt;
  /// Share of each known class held out of training to set thresholds.
  double calibration_fraction = 0.25;

  std::vector<DetectorKind> detectors{DetectorKind::InputCluster, DetectorKind::FvCluster, DetectorKind::SoftMax,
                                      DetectorKind::OpenMax,      DetectorKind::GradBPL1,  DetectorKind::GradBPL2};
  double target_fpr = 0.01;
  DetectorFitOptions fit;

  int histogram_bins = 50;
  int silhouette_cap = 2000;
  bool export_fv = true;
  int bench_samples = 10000;

  /// Keys understood by from_config.
  static const std::set<std::string>& keys();
  /// Unknown keys are a UsageError. `env_seed` (ZDTC_SEED) wins over `seed`.
  static RunConfig from_config(const KeyValueConfig& kv, const char* env_seed = nullptr);

  void validate() const;

  std::filesystem::path data_dir() const { return work_dir / "data"; }
  std::filesystem::path models_dir() const { return work_dir / "models"; }
  std::filesystem::path detectors_dir() const { return work_dir / "detectors"; }
  std::filesystem::path reports_dir() const { return work_dir / "reports"; }
  std::filesystem::path train_path() const;
  std::filesystem::path test_known_path() const;
  std::filesystem::path test_unknown_path() const;
};

/// Per-class stratified hold-out used for threshold calibration.
struct CalibrationSplit {
  std::vector<std::size_t> fit;
  std::vector<std::size_t> calibration;
};

/// With fraction 0 both index sets cover every record.
CalibrationSplit split_for_calibration(std::span<const FlowRecord> records, double fraction, std::uint64_t seed);

/// Flow-weighted and class-weighted (mean per-class) accuracy.
struct AccuracyReport {
  double flow_weighted = 0.0;
  double class_weighted = 0.0;
  std::vector<double> per_class;
  std::vector<int> per_class_flows;
};

/// labels and predictions are 1-based over `classes`.
AccuracyReport accuracy_report(std::span<const int> labels, std::span<const int> predictions, int classes);

/// Distribution-analysis value: -max p for SoftMax, v_hat0 for OpenMax, the
/// decision score otherwise.
double unknown_level(DetectorKind kind, const DetectorState& state, const ClassifierRef& classifier,
                     const Observation& obs, GradLayer layer);

void cmd_generate(const RunConfig& cfg, std::ostream& log);
void cmd_train(const RunConfig& cfg, std::ostream& log);
void cmd_calibrate(const RunConfig& cfg, std::ostream& log);
void cmd_eval(const RunConfig& cfg, std::ostream& log);
void cmd_bench(const RunConfig& cfg, std::ostream& log);

nlohmann::json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const nlohmann::json& doc);

}  // namespace zdtc
